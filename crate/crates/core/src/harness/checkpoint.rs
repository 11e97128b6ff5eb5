use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::basis::ExpansionTracker;
use crate::error::{Error, Result};
use crate::model::LayerLayout;
use crate::param::ParamVector;

pub const CHECKPOINT_FORMAT: &str = "xbml-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Current outer learning rate after decays.
    pub beta: f64,
}

/// Task streams are derived from `(seed, split, iteration, index)`, so the
/// seed and the next iteration fully describe the sampling state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

/// Textual (JSON) snapshot of a run. Floats use shortest round-trip
/// formatting, so the bytes do not depend on the platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub d: usize,
    pub m: usize,
    pub bases: Vec<ParamVector>,
    pub optimizer: OptimizerState,
    pub tracker: ExpansionTracker,
    pub rng: RngState,
    /// Iterations at which a basis was added.
    pub expansions: Vec<u64>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        self.config.validate()?;
        let d = self.config.model.num_params();
        if self.d != d || self.m != self.bases.len() || self.m == 0 {
            return Err(Error::Checkpoint(format!(
                "header says d={} m={}, model needs d={d} and {} bases are stored",
                self.d,
                self.m,
                self.bases.len()
            )));
        }
        if let Some(b) = self.bases.iter().find(|b| b.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: b.dim() });
        }
        if self.bases.iter().any(|b| !b.is_finite()) {
            return Err(Error::Checkpoint("non-finite basis entries".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Sidecar describing a flat binary parameter dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub d: usize,
    pub m: usize,
    /// Always `"f64-le"`: little-endian IEEE doubles.
    pub dtype: String,
    /// Always `"basis-major"`: basis 0 coordinates first, then basis 1, ...
    pub order: String,
    pub layout: Vec<LayerLayout>,
}

/// Writes `bases` to `<stem>.bin` plus the `<stem>.json` sidecar.
pub fn write_param_dump(dir: &Path, stem: &str, bases: &[ParamVector], layout: Vec<LayerLayout>) -> Result<()> {
    let d = bases.first().map_or(0, ParamVector::dim);
    let mut bytes = Vec::with_capacity(bases.len() * d * 8);
    for b in bases {
        for v in b.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    let header = DumpHeader { d, m: bases.len(), dtype: "f64-le".into(), order: "basis-major".into(), layout };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_param_dump(dir: &Path, stem: &str) -> Result<(DumpHeader, Vec<ParamVector>)> {
    let header: DumpHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let bytes = std::fs::read(dir.join(format!("{stem}.bin")))?;
    if bytes.len() != header.d * header.m * 8 {
        return Err(Error::Checkpoint("parameter dump length does not match its sidecar".into()));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let bases = values.chunks(header.d.max(1)).take(header.m).map(|c| ParamVector::new(c.to_vec())).collect();
    Ok((header, bases))
}
