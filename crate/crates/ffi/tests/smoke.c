#include <stdio.h>
#include <string.h>

#include "manf.h"

#define W 72
#define H 64

static int fail(const char *what, ManfStatus s) {
    fprintf(stderr, "%s: status %d: %s\n", what, (int)s, manf_last_error());
    return 1;
}

int main(void) {
    static uint8_t rgb[W * H * 3];
    for (size_t i = 0; i < sizeof rgb; i++) {
        rgb[i] = (uint8_t)((i * 37u) ^ (i >> 5));
    }
    ManfCodec *codec = NULL;
    ManfStatus s = manf_codec_new(MANF_MODEL_KIND_MS_ANFIC, 8, 8, 1, 2, &codec);
    if (s != MANF_STATUS_OK) return fail("new", s);

    ManfBuffer stream = {0};
    ManfEncodeStats stats;
    s = manf_encode_rgb8(codec, rgb, W, H, MANF_NO_LAMBDA, MANF_MASK_MODE_VARIANCE, &stream, &stats);
    if (s != MANF_STATUS_OK) return fail("encode", s);

    ManfImage image = {0};
    s = manf_decode_rgb8(codec, stream.data, stream.len, &image);
    if (s != MANF_STATUS_OK) return fail("decode", s);
    if (image.width != W || image.height != H) return fail("extents", MANF_STATUS_INTERNAL);

    double psnr = 0.0;
    s = manf_psnr_rgb8(rgb, image.data, W, H, &psnr);
    if (s != MANF_STATUS_OK) return fail("psnr", s);
    if (psnr != stats.psnr_rgb_db) return fail("psnr mismatch", MANF_STATUS_INTERNAL);

    stream.data[stream.len - 1] ^= 0x40;
    ManfImage bad = {0};
    s = manf_decode_rgb8(codec, stream.data, stream.len, &bad);
    if (s != MANF_STATUS_CHECKSUM || strlen(manf_last_error()) == 0) return fail("corrupt stream", s);

    size_t len = stream.len;
    manf_image_free(&image);
    manf_buffer_free(&stream);
    manf_codec_free(codec);
    printf("round trip ok: %zu bytes, %.3f bpp, %.2f dB\n", len, stats.bpp, psnr);
    return 0;
}
