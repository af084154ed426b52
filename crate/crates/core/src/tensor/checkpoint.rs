//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "MNFC"
//! version      u16      1
//! meta_count   u32
//!   key        u16 length + UTF-8
//!   value      u16 length + UTF-8
//! param_count  u32
//!   name       u16 length + UTF-8
//!   shape      4 × u32  (batch/out, channels/in, height, width)
//!   data       product(shape) × f32
//! ```

use sha2::{Digest, Sha256};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MNFC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub params: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| Error::InvalidArgument(format!("string too long: {s:.32}…")))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, metadata: Vec<(String, String)>) -> Self {
        Checkpoint { metadata, params: store.iter().map(|p| (p.name.clone(), p.value.cast::<f32>())).collect() }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_string(&mut out, k)?;
            put_string(&mut out, v)?;
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_string(&mut out, name)?;
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version as u32, expected: CHECKPOINT_VERSION as u32 });
        }
        let meta_count = r.u32("metadata count")?;
        let mut metadata = Vec::new();
        for _ in 0..meta_count {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.push((k, v));
        }
        let count = r.u32("parameter count")?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32("parameter shape")? as usize;
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("parameter {name} shape overflows")))?;
            let raw = r.take(n.saturating_mul(4), "parameter data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { metadata, params })
    }

    /// Copies every parameter of `store` from the entry with the same name.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in store.iter_mut() {
            let (_, t) = self
                .params
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

/// First eight bytes of the SHA-256 of a serialized checkpoint.
pub fn checkpoint_hash(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::from_fn([2, 1, 3, 3], |[o, _, y, x]| (o * 9 + y * 3 + x) as f32 * 0.5));
        store.add("a.b", Tensor::from_vec([1, 2, 1, 1], vec![-1.0, 0.25]).unwrap());
        Checkpoint::from_store(&store, vec![("kind".into(), "ms".into())])
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MNFC");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(c.meta("kind"), Some("ms"));
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { .. })));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let c = sample();
        let mut store = ParamStore::<f64>::new();
        store.add("a.w", Tensor::zeros([2, 1, 3, 3]));
        store.add("a.b", Tensor::zeros([1, 2, 1, 1]));
        c.load_into(&mut store).unwrap();
        assert_eq!(store.value(store.find("a.b").unwrap()).data(), &[-1.0, 0.25]);
        let mut wrong = ParamStore::<f64>::new();
        wrong.add("a.w", Tensor::zeros([2, 1, 3, 3]));
        wrong.add("a.b", Tensor::zeros([1, 3, 1, 1]));
        assert!(c.load_into(&mut wrong).is_err());
    }
}
