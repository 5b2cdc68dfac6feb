//! Imputation mask generators: random missing (RM), random block missing
//! (RBM), blackout missing (BM) and time-series forecasting (TF).
//!
//! Masks are `[K, L]` tensors of 0/1 with 1 marking conditioned values.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Imputation mask and missing-value mask of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub m_imp: Tensor,
    pub m_mvi: Tensor,
}

impl MaskPair {
    pub fn combined(&self) -> Result<Tensor> {
        compose(&self.m_imp, &self.m_mvi)
    }
}

/// A missingness scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Rm { ratio: f64 },
    Rbm { ratio: f64 },
    Bm { ratio: f64 },
    Tf { horizon: usize },
}

impl Scenario {
    pub fn generate(&self, channels: usize, len: usize, rng: &mut SeededRng) -> Result<Tensor> {
        match *self {
            Scenario::Rm { ratio } => rm_mask(len, channels, ratio, rng),
            Scenario::Rbm { ratio } => rbm_mask(len, channels, ratio, rng),
            Scenario::Bm { ratio } => bm_mask(len, channels, ratio, rng),
            Scenario::Tf { horizon } => tf_mask(len, channels, horizon),
        }
    }

    /// Checks the scenario parameters against a sequence length.
    pub fn validate(&self, len: usize) -> Result<()> {
        match *self {
            Scenario::Rm { ratio } => check_ratio(ratio).map(|_| ()),
            Scenario::Rbm { ratio } | Scenario::Bm { ratio } => segment_len(len, ratio).map(|_| ()),
            Scenario::Tf { horizon } => check_horizon(len, horizon),
        }
    }
}

/// `rm:0.2`, `rbm:0.2`, `bm:0.2` or `tf:24`.
impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("scenario {s:?}: expected rm|rbm|bm:<ratio> or tf:<horizon>"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let ratio = || arg.trim().parse::<f64>().map_err(|_| bad());
        match kind.trim().to_ascii_lowercase().as_str() {
            "rm" => Ok(Scenario::Rm { ratio: ratio()? }),
            "rbm" => Ok(Scenario::Rbm { ratio: ratio()? }),
            "bm" => Ok(Scenario::Bm { ratio: ratio()? }),
            "tf" => Ok(Scenario::Tf {
                horizon: arg.trim().parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::Rm { ratio } => write!(f, "rm:{ratio}"),
            Scenario::Rbm { ratio } => write!(f, "rbm:{ratio}"),
            Scenario::Bm { ratio } => write!(f, "bm:{ratio}"),
            Scenario::Tf { horizon } => write!(f, "tf:{horizon}"),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<f64> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(ratio)
    } else {
        Err(Error::domain("mask", format!("missing ratio {ratio} outside (0, 1)")))
    }
}

fn check_horizon(len: usize, horizon: usize) -> Result<()> {
    if horizon == 0 || horizon >= len {
        return Err(Error::domain("tf_mask", format!("horizon {horizon} must be in [1, {len})")));
    }
    Ok(())
}

/// `floor(ratio * len)`, tolerant of products like `0.29 * 100`.
fn target_count(len: usize, ratio: f64) -> usize {
    (ratio * len as f64 + 1e-9).floor() as usize
}

fn segment_len(len: usize, ratio: f64) -> Result<usize> {
    let s = target_count(len, check_ratio(ratio)?);
    if s == 0 {
        return Err(Error::domain("block mask", format!("segment length floor({ratio} * {len}) is 0")));
    }
    Ok(s)
}

/// Partition of `[0, len)` into runs of `seg`, the last one absorbing the
/// remainder.
pub fn segments(len: usize, seg: usize) -> Vec<(usize, usize)> {
    let n = (len / seg).max(1);
    (0..n)
        .map(|i| (i * seg, if i + 1 == n { len } else { (i + 1) * seg }))
        .collect()
}

/// Exactly `floor(ratio * L)` targets per channel at distinct uniform positions.
pub fn rm_mask(len: usize, channels: usize, ratio: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let count = target_count(len, check_ratio(ratio)?);
    if count == 0 {
        log::warn!("random mask with ratio {ratio} over {len} steps has no targets");
    }
    let mut m = Tensor::ones(&[channels, len]);
    for k in 0..channels {
        for t in rng.sample_indices(len, count) {
            m.data_mut()[k * len + t] = 0.0;
        }
    }
    Ok(m)
}

/// One segment of the partition per channel, drawn independently.
pub fn rbm_mask(len: usize, channels: usize, ratio: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let segs = segments(len, segment_len(len, ratio)?);
    let mut m = Tensor::ones(&[channels, len]);
    for k in 0..channels {
        let (a, b) = segs[rng.below(segs.len())];
        m.data_mut()[k * len + a..k * len + b].fill(0.0);
    }
    Ok(m)
}

/// One segment of the partition shared by all channels.
pub fn bm_mask(len: usize, channels: usize, ratio: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let segs = segments(len, segment_len(len, ratio)?);
    let (a, b) = segs[rng.below(segs.len())];
    block_mask(len, channels, a, b)
}

/// Targets at `[start, end)` in every channel.
pub fn block_mask(len: usize, channels: usize, start: usize, end: usize) -> Result<Tensor> {
    if start >= end || end > len {
        return Err(Error::domain("block_mask", format!("block [{start}, {end}) outside [0, {len})")));
    }
    let mut m = Tensor::ones(&[channels, len]);
    for row in m.data_mut().chunks_mut(len) {
        row[start..end].fill(0.0);
    }
    Ok(m)
}

/// Targets at the last `horizon` steps of every channel.
pub fn tf_mask(len: usize, channels: usize, horizon: usize) -> Result<Tensor> {
    check_horizon(len, horizon)?;
    block_mask(len, channels, len - horizon, len)
}

/// Pointwise product of two masks.
pub fn compose(m_imp: &Tensor, m_mvi: &Tensor) -> Result<Tensor> {
    if m_imp.shape() != m_mvi.shape() {
        return Err(Error::dim("compose", format!("{:?} vs {:?}", m_imp.shape(), m_mvi.shape())));
    }
    Ok(Tensor::from_parts(
        m_imp.shape().to_vec(),
        m_imp.data().iter().zip(m_mvi.data()).map(|(a, b)| a * b).collect(),
    ))
}

/// Writes a `[K, L]` mask as K comma-separated rows of 0/1.
pub fn write_mask_csv(mask: &Tensor, out: &mut impl Write) -> Result<()> {
    let [_, len] = mask.shape() else {
        return Err(Error::dim("write_mask_csv", format!("expected [K, L], got {:?}", mask.shape())));
    };
    for row in mask.data().chunks(*len) {
        let line: Vec<&str> = row.iter().map(|&v| if v != 0.0 { "1" } else { "0" }).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_mask_csv(input: impl BufRead) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| match f.trim() {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                other => Err(Error::Format(format!("mask line {}: bad entry {other:?}", i + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(Error::Format(format!("mask line {}: ragged row", i + 1)));
        }
        rows.push(row);
    }
    let (k, l) = (rows.len(), rows.first().map_or(0, Vec::len));
    Tensor::new(vec![k, l], rows.concat())
}
