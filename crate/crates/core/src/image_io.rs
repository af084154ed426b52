//! 8-bit RGB image files and atomic output writes.
//!
//! Binary PPM (P6, maxval 255) is always available. PNG needs the `png`
//! feature.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name =
        path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Interleaved RGB bytes to a `(1, 3, H, W)` tensor on `[0, 1]`.
pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("image has zero extent {width}x{height}")));
    }
    if rgb.len() != width * height * 3 {
        return Err(Error::Format(format!("expected {} RGB bytes, got {}", width * height * 3, rgb.len())));
    }
    Ok(Tensor::from_fn([1, 3, height, width], |[_, c, y, x]| rgb[(y * width + x) * 3 + c] as f32 / 255.0))
}

/// Interleaved RGB bytes of batch item 0, rounding and clamping to 8 bits.
pub fn to_rgb8(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [_, c, h, w] = image.shape();
    if c != 3 || image.is_empty() {
        return Err(Error::Shape(format!("expected an RGB image, got {:?}", image.shape())));
    }
    let mut out = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for (i, &v) in image.plane(0, ch).iter().enumerate() {
            out[i * 3 + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.b.len() {
            match self.b[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.b.len() && self.b[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.b.len() && self.b[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("PPM header: missing {what}")));
        }
        std::str::from_utf8(&self.b[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format(format!("PPM header: {what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("not a binary PPM (P6) file".into()));
    }
    let mut cur = Cursor { b: bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} is unsupported, only 255 is accepted")));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::Format("PPM header: missing separator before pixel data".into()));
    }
    let data = &bytes[cur.pos + 1..];
    let need =
        w.checked_mul(h).and_then(|n| n.checked_mul(3)).ok_or_else(|| Error::Format("PPM extents overflow".into()))?;
    if data.len() < need {
        return Err(Error::Truncated(format!("PPM pixel data holds {} of {need} bytes", data.len())));
    }
    from_rgb8(w, h, &data[..need])
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let rgb = to_rgb8(image)?;
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

#[cfg(feature = "png")]
fn load_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG: {e}")))?
        .to_rgb8();
    from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

#[cfg(feature = "png")]
fn save_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let rgb = to_rgb8(image)?;
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, rgb)
        .ok_or_else(|| Error::Format("PNG buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    Ok(out.into_inner())
}

#[cfg(not(feature = "png"))]
fn load_png(_: &[u8]) -> Result<Tensor<f32>> {
    Err(Error::Format("PNG support is not compiled in".into()))
}

#[cfg(not(feature = "png"))]
fn save_png(_: &Tensor<f32>) -> Result<Vec<u8>> {
    Err(Error::Format("PNG support is not compiled in".into()))
}

/// Loads a PPM, or a PNG when the extension says so.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if is_png(path) {
        load_png(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = if is_png(path) { save_png(image)? } else { encode_ppm(image)? };
    write_atomic(path, &bytes)
}

/// Image files in `dir` with a supported extension, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|e| {
                    let e = e.to_string_lossy().to_ascii_lowercase();
                    e == "ppm" || (cfg!(feature = "png") && e == "png")
                })
        })
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_red() {
        let bytes = b"P6\n2 2\n255\n\xff\x00\x00\xff\x00\x00\xff\x00\x00\xff\x00\x00";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 2]);
        assert!(t.plane(0, 0).iter().all(|&v| v == 1.0));
        assert!(t.plane(0, 1).iter().chain(t.plane(0, 2)).all(|&v| v == 0.0));
    }

    #[test]
    fn header_comments_and_errors() {
        let t = decode_ppm(b"P6 # c\n1 1 # size\n255\n\x01\x02\x03").unwrap();
        assert_eq!(to_rgb8(&t).unwrap(), vec![1, 2, 3]);
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap_err().to_string().contains("maxval"));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\x00\x00"), Err(Error::Truncated(_))));
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_ppm(b"P6\n1\n").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..5 * 7 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let t = from_rgb8(5, 7, &rgb).unwrap();
        let p = dir.path().join("a.ppm");
        save_image(&t, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(to_rgb8(&back).unwrap(), rgb);
        assert_eq!(fs::read(&p).unwrap(), encode_ppm(&back).unwrap());
        assert_eq!(list_images(dir.path()).unwrap(), vec![p]);
    }

    #[test]
    fn atomic_write_leaves_nothing_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("x.bin");
        assert!(write_atomic(&p, b"abc").is_err());
        assert!(!p.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
