//! Little-endian binary checkpoints.
//!
//! ```text
//! magic "SWCK" | version u32 | config 7 x u32 | vocab (u32 count, then u32 len + utf8 each)
//! | param count u64 | f64 values | crc32 of everything before it
//! ```

use std::fs;
use std::path::Path;

use super::model::{ModelConfig, ModelParams};
use super::vocab::Vocab;
use super::{Result, Student, StudentError};

pub const MAGIC: &[u8; 4] = b"SWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(student: &Student) -> Vec<u8> {
    let cfg = &student.params.config;
    let mut out = Vec::with_capacity(64 + 8 * student.params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.max_len,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(student.vocab.len() as u32).to_le_bytes());
    for tok in student.vocab.tokens() {
        out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
        out.extend_from_slice(tok.as_bytes());
    }
    out.extend_from_slice(&(student.params.param_count() as u64).to_le_bytes());
    for t in &student.params.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(StudentError::CorruptChecksum)?;
        let slice = self.bytes.get(self.pos..end).ok_or(StudentError::CorruptChecksum)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Student> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(StudentError::CorruptChecksum);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(StudentError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(StudentError::CorruptChecksum);
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(StudentError::CorruptChecksum);
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_ff: dims[3],
        enc_layers: dims[4],
        dec_layers: dims[5],
        max_len: dims[6],
    };
    config.validate().map_err(StudentError::Config)?;
    let n_tokens = r.u32()? as usize;
    if n_tokens != config.vocab_size {
        return Err(StudentError::CorruptChecksum);
    }
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 16));
    for _ in 0..n_tokens {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        tokens.push(
            std::str::from_utf8(raw)
                .map_err(|_| StudentError::CorruptChecksum)?
                .to_string(),
        );
    }
    let count = r.u64()? as usize;
    // bound allocation by what the blob can actually hold
    if count.checked_mul(8) != Some(body.len() - r.pos) {
        return Err(StudentError::CorruptChecksum);
    }
    if config.param_count() != Some(count) {
        return Err(StudentError::CorruptChecksum);
    }
    let mut params = ModelParams::zeros(config);
    for t in &mut params.tensors {
        for v in &mut t.data {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    Ok(Student {
        params,
        vocab: Vocab::from(tokens),
    })
}

pub fn save_checkpoint(student: &Student, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(student))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Student> {
    from_bytes(&fs::read(path)?)
}
