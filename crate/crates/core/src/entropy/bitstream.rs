//! Container format for one coded image.
//!
//! ```text
//! magic            4 bytes  "MANF"
//! version          u8
//! model kind       u8
//! lambda index     u8
//! width, height    u32, u32   original extents
//! padded w, h      u32, u32   extents after replicate padding
//! checkpoint hash  8 bytes
//! mask             u32 length + bytes
//! substreams       u32 count, then u32 length + bytes each
//! crc32            u32 over every preceding byte
//! ```
//!
//! Multi-byte fields are big-endian.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MANF";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 3 + 16 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub model_kind: u8,
    pub lambda_index: u8,
    pub width: u32,
    pub height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub checkpoint_hash: [u8; 8],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub mask: Vec<u8>,
    pub substreams: Vec<Vec<u8>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    let n = u32::try_from(bytes.len()).map_err(|_| Error::InvalidArgument("section exceeds 4 GiB".into()))?;
    put_u32(out, n);
    out.extend_from_slice(bytes);
    Ok(())
}

pub fn write_bitstream(stream: &Bitstream) -> Result<Vec<u8>> {
    let h = &stream.header;
    let mut out = Vec::with_capacity(HEADER_LEN + 64 + stream.substreams.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[h.version, h.model_kind, h.lambda_index]);
    for v in [h.width, h.height, h.padded_width, h.padded_height] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&h.checkpoint_hash);
    put_block(&mut out, &stream.mask)?;
    put_u32(&mut out, stream.substreams.len() as u32);
    for s in &stream.substreams {
        put_block(&mut out, s)?;
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("bitstream ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn block(&mut self, what: &str) -> Result<Vec<u8>> {
        let n = self.u32(what)? as usize;
        Ok(self.take(n, what)?.to_vec())
    }
}

/// Whether the data ends before the end its section lengths declare.
fn ends_early(bytes: &[u8]) -> bool {
    let at = |pos: usize| bytes.get(pos..pos + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize);
    let mut pos = HEADER_LEN;
    let Some(mask) = at(pos) else { return true };
    pos += 4 + mask;
    let Some(count) = at(pos) else { return true };
    pos += 4;
    for _ in 0..count {
        let Some(n) = at(pos) else { return true };
        pos += 4 + n;
    }
    pos + 4 > bytes.len()
}

/// Parses a container, checking magic, then version, then checksum.
pub fn read_bitstream(bytes: &[u8]) -> Result<Bitstream> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a coded image (bad magic)".into()));
    }
    let version = *bytes.get(4).ok_or_else(|| Error::Truncated("bitstream ends inside header".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version as u32, expected: FORMAT_VERSION as u32 });
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Truncated("bitstream shorter than its header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_be_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        if ends_early(bytes) {
            return Err(Error::Truncated(format!("bitstream of {} bytes ends inside a section", bytes.len())));
        }
        return Err(Error::Checksum { stored, computed });
    }
    let mut c = Cursor { buf: body, pos: 5 };
    let [model_kind, lambda_index] = c.take(2, "header")?.try_into().unwrap();
    let width = c.u32("header")?;
    let height = c.u32("header")?;
    let padded_width = c.u32("header")?;
    let padded_height = c.u32("header")?;
    let checkpoint_hash = c.take(8, "header")?.try_into().unwrap();
    let header =
        Header { version, model_kind, lambda_index, width, height, padded_width, padded_height, checkpoint_hash };
    let mask = c.block("mask")?;
    let count = c.u32("substream count")? as usize;
    let mut substreams = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        substreams.push(c.block("substream")?);
    }
    if c.pos != body.len() {
        return Err(Error::Format(format!("{} unexpected bytes before checksum", body.len() - c.pos)));
    }
    Ok(Bitstream { header, mask, substreams })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                version: FORMAT_VERSION,
                model_kind: 1,
                lambda_index: 3,
                width: 1200,
                height: 900,
                padded_width: 1216,
                padded_height: 960,
                checkpoint_hash: [1, 2, 3, 4, 5, 6, 7, 8],
            },
            mask: vec![0b1010_0000, 0xff],
            substreams: vec![vec![9; 10], vec![], vec![1, 2, 3], vec![7; 300]],
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let s = sample();
        let bytes = write_bitstream(&s).unwrap();
        assert_eq!(&bytes[..4], b"MANF");
        assert_eq!(&bytes[7..11], &1200u32.to_be_bytes());
        assert_eq!(read_bitstream(&bytes).unwrap(), s);
        let payload: usize = 4 + 2 + 4 + 4 * 4 + 10 + 3 + 300;
        assert_eq!(bytes.len(), HEADER_LEN + payload + 4);
    }

    #[test]
    fn error_kinds() {
        let bytes = write_bitstream(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(read_bitstream(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_bitstream(&bad), Err(Error::Version { found: 2, .. })));
        let mut bad = bytes.clone();
        bad[50] ^= 0x10;
        assert!(matches!(read_bitstream(&bad), Err(Error::Checksum { .. })));
        assert!(read_bitstream(&bytes[..20]).is_err());
        for cut in [bytes.len() - 1, bytes.len() - 100, 50] {
            assert!(matches!(read_bitstream(&bytes[..cut]), Err(Error::Truncated(_))), "{cut}");
        }
    }

    #[test]
    fn every_single_bit_flip_is_caught() {
        let bytes = write_bitstream(&sample()).unwrap();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut bad = bytes.clone();
                bad[i] ^= 1 << bit;
                assert!(read_bitstream(&bad).is_err(), "byte {i} bit {bit}");
            }
        }
    }
}
