//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! ```text
//! "ARCN v1\n"
//! u32 length, UTF-8 text block of key=value lines (model config, then
//!     `train.*` metadata)
//! repeated until EOF: u32 name length, name bytes, TNSR block
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARCN v1\n";
const META_PREFIX: &str = "train.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form metadata (epoch, step, seed, schedule position, ...).
    pub meta: Vec<(String, String)>,
    /// Model parameters, buffers and any extra state, in file order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        let mut text = self.config.to_text();
        for (k, v) in &self.meta {
            text.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        out.write_all(&(text.len() as u32).to_le_bytes())?;
        out.write_all(text.as_bytes())?;
        for (name, t) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            t.write_tnsr(out)?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl BufRead) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::format("magic", "file too short"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                "magic",
                format!(
                    "expected {:?}, found {:?}",
                    "ARCN v1",
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let len = read_u32(input, "config length")?;
        let mut text = vec![0u8; len as usize];
        input
            .read_exact(&mut text)
            .map_err(|_| Error::format("config", "truncated config block"))?;
        let text = String::from_utf8(text).map_err(|_| Error::format("config", "not UTF-8"))?;
        let mut model_lines = String::new();
        let mut meta = Vec::new();
        for line in text.lines() {
            match line
                .strip_prefix(META_PREFIX)
                .and_then(|l| l.split_once('='))
            {
                Some((k, v)) => meta.push((k.to_string(), v.to_string())),
                None => {
                    model_lines.push_str(line);
                    model_lines.push('\n');
                }
            }
        }
        let config = ModelConfig::from_text(&model_lines)
            .map_err(|e| Error::format("config", e.to_string()))?;

        let mut tensors = Vec::new();
        loop {
            if input.fill_buf()?.is_empty() {
                break;
            }
            let n = read_u32(input, "record name length")? as usize;
            let mut name = vec![0u8; n];
            input
                .read_exact(&mut name)
                .map_err(|_| Error::format("record name", "truncated"))?;
            let name =
                String::from_utf8(name).map_err(|_| Error::format("record name", "not UTF-8"))?;
            let t =
                Tensor::read_tnsr(input).map_err(|e| Error::format(name.clone(), e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self {
            config,
            meta,
            tensors,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(input: &mut impl Read, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::format(field, "truncated"))?;
    Ok(u32::from_le_bytes(b))
}

impl<T: Scalar> Model<T> {
    /// Snapshot of every parameter and buffer (stored as f32).
    pub fn to_checkpoint(&self, meta: Vec<(String, String)>) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.cast()))
            .collect();
        tensors.extend(self.store.buffers().map(|(n, t)| (n.to_string(), t.cast())));
        Checkpoint {
            config: self.config.clone(),
            meta,
            tensors,
        }
    }

    /// Rebuilds a model from a checkpoint. Every parameter and buffer of the
    /// checkpoint's config must be present; other records (optimizer state)
    /// are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::empty(&ckpt.config)?;
        let wanted: BTreeSet<String> = m.store.names().map(str::to_string).collect();
        let present: BTreeSet<String> = ckpt.tensors.iter().map(|(n, _)| n.clone()).collect();
        let missing: Vec<&str> = wanted.difference(&present).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::format(
                "parameters",
                format!("missing: {}", missing.join(", ")),
            ));
        }
        for (name, t) in &ckpt.tensors {
            if wanted.contains(name) {
                m.store.assign(name, t.cast())?;
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(Vec::new()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
