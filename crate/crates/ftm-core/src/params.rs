//! Flat parameter storage: named segments over one contiguous f64 vector,
//! and a binary file format that echoes the model config for shape
//! validation on load.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("params io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad params file: {msg}")]
    Format { msg: String },
    #[error("config mismatch: file carries {found}, expected {expected}")]
    ConfigMismatch { found: String, expected: String },
}

const MAGIC: &[u8; 8] = b"FTMPARAM";
const VERSION: u32 = 1;

/// Named contiguous ranges over a flat parameter vector.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    segments: Vec<(String, usize, usize)>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, len: usize) -> usize {
        let offset = self.total;
        self.segments.push((name.to_string(), offset, len));
        self.total += len;
        offset
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let (_, off, len) = self
            .segments
            .iter()
            .find(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter segment {name}"));
        *off..*off + *len
    }

    pub fn slice<'a>(&self, params: &'a [f64], name: &str) -> &'a [f64] {
        &params[self.range(name)]
    }

    pub fn slice_mut<'a>(&self, params: &'a mut [f64], name: &str) -> &'a mut [f64] {
        &mut params[self.range(name)]
    }
}

/// Writes `params` with a JSON config echo in the header.
pub fn save_params<C: Serialize>(
    path: &Path,
    config: &C,
    params: &[f64],
) -> Result<(), ParamsError> {
    let config_json = serde_json::to_vec(config).map_err(|e| ParamsError::Format {
        msg: format!("config serialization failed: {e}"),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a parameter file, returning the config echo and the flat vector.
pub fn load_params<C: DeserializeOwned>(path: &Path) -> Result<(C, Vec<f64>), ParamsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ParamsError::Format {
            msg: "bad magic".into(),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(ParamsError::Format {
            msg: format!("unsupported version {version}"),
        });
    }
    r.read_exact(&mut u32buf)?;
    let config_len = u32::from_le_bytes(u32buf) as usize;
    let mut config_buf = vec![0u8; config_len];
    r.read_exact(&mut config_buf)?;
    let config: C = serde_json::from_slice(&config_buf).map_err(|e| ParamsError::Format {
        msg: format!("config echo does not parse: {e}"),
    })?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut params = Vec::with_capacity(count);
    let mut fbuf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut fbuf)?;
        params.push(f64::from_le_bytes(fbuf));
    }
    // must be at EOF
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ParamsError::Format {
            msg: "trailing bytes after parameter block".into(),
        });
    }
    Ok((config, params))
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn uniform_init<R: rand::Rng>(out: &mut [f64], fan_in: usize, rng: &mut R) {
    let a = 1.0 / (fan_in as f64).sqrt();
    for v in out.iter_mut() {
        *v = rng.random_range(-a..a);
    }
}
