//! Binary checkpoint container: magic bytes, a format version, run
//! provenance (training stage, seed, config digest) and named tensors
//! with shape headers, all little-endian with `f64` payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PCETCKPT";
const VERSION: u32 = 1;

/// A checkpoint: provenance plus every named parameter tensor.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Last completed training stage (1, 2 or 3; 0 for a fresh model).
    pub stage: u32,
    /// Master seed of the run that wrote this file.
    pub seed: u64,
    /// Hex SHA-256 digest of the resolved run configuration.
    pub digest: String,
    /// `(name, tensor)` pairs in a stable order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Serialize to `path`, creating parent directories as needed.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.digest.len() != 64 || !self.digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::invalid(format!(
                "config digest must be 64 hex chars, got `{}`",
                self.digest
            )));
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.stage.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(self.digest.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rows() as u32).to_le_bytes())?;
            w.write_all(&(t.cols() as u32).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a checkpoint back, validating magic, version and finiteness.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = path.display().to_string();
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, &file, "magic bytes")?;
        if &magic != MAGIC {
            return Err(Error::format(&file, None, "not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r, &file, "version")?;
        if version != VERSION {
            return Err(Error::format(
                &file,
                None,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let stage = read_u32(&mut r, &file, "stage")?;
        let mut seed_bytes = [0u8; 8];
        read_exact(&mut r, &mut seed_bytes, &file, "seed")?;
        let seed = u64::from_le_bytes(seed_bytes);
        let mut digest_bytes = [0u8; 64];
        read_exact(&mut r, &mut digest_bytes, &file, "config digest")?;
        let digest = String::from_utf8(digest_bytes.to_vec())
            .map_err(|_| Error::format(&file, None, "config digest is not valid text"))?;

        let count = read_u32(&mut r, &file, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = read_u32(&mut r, &file, "tensor name length")? as usize;
            if name_len > 4096 {
                return Err(Error::format(
                    &file,
                    None,
                    format!("tensor {i} name length {name_len} is implausible"),
                ));
            }
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, &file, "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format(&file, None, format!("tensor {i} name is not UTF-8")))?;
            let rows = read_u32(&mut r, &file, "tensor rows")? as usize;
            let cols = read_u32(&mut r, &file, "tensor cols")? as usize;
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                read_exact(&mut r, &mut buf, &file, "tensor payload")?;
                *v = f64::from_le_bytes(buf);
            }
            let t = Tensor::matrix(rows, cols, data).map_err(|_| {
                Error::format(&file, None, format!("tensor `{name}` holds non-finite values"))
            })?;
            tensors.push((name, t));
        }
        // Anything left over means the writer and reader disagree.
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format(&file, None, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint {
            stage,
            seed,
            digest,
            tensors,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], file: &str, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(file, None, format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, file: &str, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, file, what)?;
    Ok(u32::from_le_bytes(buf))
}
