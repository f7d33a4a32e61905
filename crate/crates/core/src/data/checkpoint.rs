//! Checkpoint serialization: a custom little-endian binary container.
//!
//! Layout, in order:
//!   magic "ZNXT" | format version u32 | config record | tensor count u32 |
//!   entries | CRC32 of everything before it
//!
//! The config record is self-describing: the canonical config text
//! (u32 length + UTF-8 bytes) followed by its 32-byte SHA-256 digest, so a
//! checkpoint alone suffices to rebuild the architecture while the digest
//! still detects a config/weights mismatch. Each tensor entry is
//! name (u32 length + UTF-8) | dtype code u8 | rank u32 | dims u32 each |
//! raw little-endian element data.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::ParamStore;
use crate::tensor::{Elem, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"ZNXT";
pub const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn invalid(path: &Path, detail: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(format!("{}: {detail}", path.display()))
}

/// Everything a checkpoint holds once decoded.
#[derive(Debug)]
pub struct Checkpoint<E> {
    /// Canonical config text the weights were trained under.
    pub config_text: String,
    /// SHA-256 of `config_text` as stored in the file.
    pub config_digest: [u8; 32],
    pub tensors: Vec<(String, Tensor<E>)>,
}

impl<E: Elem> Checkpoint<E> {
    /// True when the stored digest matches the stored config text.
    pub fn digest_consistent(&self) -> bool {
        let mut h = Sha256::new();
        h.update(self.config_text.as_bytes());
        let got: [u8; 32] = h.finalize().into();
        got == self.config_digest
    }
}

/// Serialize every named tensor of a store, in registration order.
pub fn save_checkpoint<E: Elem>(
    path: &Path,
    store: &ParamStore<E>,
    config_text: &str,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text.as_bytes();
    out.extend_from_slice(&u32::try_from(text.len()).unwrap().to_le_bytes());
    out.extend_from_slice(text);
    let mut h = Sha256::new();
    h.update(text);
    let digest: [u8; 32] = h.finalize().into();
    out.extend_from_slice(&digest);
    let count = u32::try_from(store.len()).unwrap();
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor, _) in store.iter() {
        for v in tensor.data() {
            if !v.is_finite() {
                return Err(TensorError::Invalid(format!(
                    "refusing to save non-finite tensor {name}"
                )));
            }
        }
        out.extend_from_slice(&u32::try_from(name.len()).unwrap().to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(E::DTYPE.code());
        out.extend_from_slice(&u32::try_from(tensor.shape().len()).unwrap().to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&u32::try_from(d).unwrap().to_le_bytes());
        }
        for v in tensor.data() {
            match E::DTYPE.byte_width() {
                4 => out.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.to_f64().unwrap().to_le_bytes()),
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, out).map_err(|e| invalid(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(invalid(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Decode a checkpoint, validating magic, version, and CRC.
pub fn load_checkpoint<E: Elem>(path: &Path) -> Result<Checkpoint<E>> {
    let bytes = fs::read(path).map_err(|e| invalid(path, e))?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(invalid(path, "file too short to be a checkpoint"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(invalid(path, "CRC mismatch: checkpoint corrupted"));
    }
    let mut r = Reader {
        path,
        bytes: body,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(invalid(path, "bad magic (not a checkpoint)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(invalid(
            path,
            format!("unsupported format version {version} (want {VERSION})"),
        ));
    }
    let text_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(text_len)?.to_vec())
        .map_err(|_| invalid(path, "config text is not UTF-8"))?;
    let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| invalid(path, "tensor name is not UTF-8"))?;
        let code = r.u8()?;
        let dtype = crate::tensor::Dtype::from_code(code)
            .ok_or_else(|| invalid(path, format!("unknown dtype code {code}")))?;
        if dtype != E::DTYPE {
            return Err(invalid(
                path,
                format!("tensor {name} stored as {dtype:?}, requested {:?}", E::DTYPE),
            ));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.byte_width())?;
        let data: Vec<E> = match dtype.byte_width() {
            4 => raw
                .chunks_exact(4)
                .map(|c| crate::tensor::elem(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            _ => raw
                .chunks_exact(8)
                .map(|c| crate::tensor::elem(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(invalid(path, "trailing bytes after tensor table"));
    }
    Ok(Checkpoint {
        config_text,
        config_digest,
        tensors,
    })
}

/// Copy decoded tensors into a freshly built store. The name sets must
/// match exactly in both directions.
pub fn apply_tensors<E: Elem>(store: &mut ParamStore<E>, ckpt: &Checkpoint<E>) -> Result<()> {
    if ckpt.tensors.len() != store.len() {
        return Err(TensorError::Invalid(format!(
            "checkpoint holds {} tensors, model declares {}",
            ckpt.tensors.len(),
            store.len()
        )));
    }
    for (name, tensor) in &ckpt.tensors {
        store.load_named(name, tensor.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "w",
            Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25 - 0.5),
        );
        s.add_buffer("running", Tensor::from_fn(&[3], |i| i as f32));
        s
    }

    #[test]
    fn crc32_known_vector() {
        // Standard test vector for CRC-32/IEEE.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.znxt");
        let p2 = dir.path().join("b.znxt");
        let store = sample_store();
        save_checkpoint(&p1, &store, "cfg=1\n").unwrap();
        let ckpt = load_checkpoint::<f32>(&p1).unwrap();
        assert!(ckpt.digest_consistent());
        let mut fresh = sample_store();
        apply_tensors(&mut fresh, &ckpt).unwrap();
        save_checkpoint(&p2, &fresh, &ckpt.config_text).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn flipped_byte_detected_by_crc() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.znxt");
        save_checkpoint(&p, &sample_store(), "cfg=1\n").unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&p).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.znxt");
        save_checkpoint(&p, &sample_store(), "cfg=1\n").unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[4] = 9; // version field
        let len = bytes.len();
        let crc = crc32(&bytes[..len - 4]);
        bytes[len - 4..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn digest_inconsistency_is_visible() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.znxt");
        save_checkpoint(&p, &sample_store(), "cfg=1\n").unwrap();
        let mut bytes = fs::read(&p).unwrap();
        // Flip a byte inside the stored digest (magic 4 + version 4 +
        // len 4 + text 6 = offset 18), then fix up the CRC.
        bytes[18] ^= 0xFF;
        let len = bytes.len();
        let crc = crc32(&bytes[..len - 4]);
        bytes[len - 4..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        let ckpt = load_checkpoint::<f32>(&p).unwrap();
        assert!(!ckpt.digest_consistent());
    }

    #[test]
    fn wrong_dtype_request_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.znxt");
        save_checkpoint(&p, &sample_store(), "cfg=1\n").unwrap();
        let err = load_checkpoint::<f64>(&p).unwrap_err().to_string();
        assert!(err.contains("dtype") || err.contains("F32"), "{err}");
    }

    #[test]
    fn name_set_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.znxt");
        save_checkpoint(&p, &sample_store(), "cfg=1\n").unwrap();
        let ckpt = load_checkpoint::<f32>(&p).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::from_fn(&[2, 3], |_| 0.0));
        assert!(apply_tensors(&mut other, &ckpt).is_err());
        let mut renamed = ParamStore::<f32>::new();
        renamed.add("w2", Tensor::from_fn(&[2, 3], |_| 0.0));
        renamed.add_buffer("running", Tensor::from_fn(&[3], |_| 0.0));
        assert!(apply_tensors(&mut renamed, &ckpt).is_err());
    }
}
