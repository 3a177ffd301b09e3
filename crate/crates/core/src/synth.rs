//! Synthetic classification tasks whose label depends on a known feature
//! interaction.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dataset::format_value;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 50 rows, got {0}")]
    TooFewRows(usize),
    #[error("need at least 3 features, got {0}")]
    TooFewFeatures(usize),
    #[error("unknown synthetic task '{0}' (expected product, xor or linear)")]
    UnknownKind(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// `y = 1[V1·V2 + 0.1·noise > 0]`, standard normal features.
    Product,
    /// `y = 1[(V1 > 0) != (V2 > 0)]`, uniform features on [-1, 1].
    Xor,
    /// `y = 1[V1 + 0.5·V2 - 0.5·V3 + 0.1·noise > 0]`.
    Linear,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Product => "product",
            SynthKind::Xor => "xor",
            SynthKind::Linear => "linear",
        }
    }

    /// Ground-truth description written next to the data.
    pub fn truth(self) -> (&'static str, &'static str) {
        match self {
            SynthKind::Product => ("+V1 *V2", "y = 1[V1*V2 + 0.1*noise > 0]"),
            SynthKind::Xor => ("+V1 *V2", "y = 1[(V1 > 0) != (V2 > 0)]"),
            SynthKind::Linear => ("+V1", "y = 1[V1 + 0.5*V2 - 0.5*V3 + 0.1*noise > 0]"),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "product" => Ok(SynthKind::Product),
            "xor" => Ok(SynthKind::Xor),
            "linear" => Ok(SynthKind::Linear),
            _ => Err(SynthError::UnknownKind(s.to_string())),
        }
    }
}

/// Row-major features plus 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub kind: SynthKind,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl SynthData {
    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

pub fn generate(kind: SynthKind, rows: usize, features: usize, seed: u64) -> Result<SynthData, SynthError> {
    if rows < 50 {
        return Err(SynthError::TooFewRows(rows));
    }
    if features < 3 {
        return Err(SynthError::TooFewFeatures(features));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let x: Vec<f64> = (0..features)
            .map(|_| match kind {
                SynthKind::Xor => rng.random_range(-1.0..1.0),
                _ => rng.sample(StandardNormal),
            })
            .collect();
        let noise: f64 = rng.sample(StandardNormal);
        let y = match kind {
            SynthKind::Product => x[0] * x[1] + 0.1 * noise > 0.0,
            SynthKind::Xor => (x[0] > 0.0) != (x[1] > 0.0),
            SynthKind::Linear => x[0] + 0.5 * x[1] - 0.5 * x[2] + 0.1 * noise > 0.0,
        };
        data.push(x);
        labels.push(u8::from(y));
    }
    Ok(SynthData {
        kind,
        features: data,
        labels,
    })
}

/// Sidecar path holding the ground truth for `csv_path`.
pub fn truth_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".truth");
    csv_path.with_file_name(name)
}

/// Writes `V1..VN,y` to `path` and the ground truth to [`truth_path`].
pub fn write(data: &SynthData, path: &Path) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=data.n_features()).map(|i| format!("V{i}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (x, y) in data.features.iter().zip(&data.labels) {
        let mut rec: Vec<String> = x.iter().map(|&v| format_value(v)).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let (program, rule) = data.kind.truth();
    std::fs::write(
        truth_path(path),
        format!("kind={}\nrule={rule}\ninteraction={program}\n", data.kind),
    )?;
    Ok(())
}
