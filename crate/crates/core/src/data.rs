//! Datasets: synthetic generators, standardization, channel splitting and
//! file formats.
//!
//! A dataset holds `[n, K, L]` values with a missing-value mask of the same
//! shape (1 = present) and a split tag per sample.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            t => Err(Error::Format(format!("unknown split tag {t}"))),
        }
    }
}

/// 80/10/10 assignment in sample order.
pub fn default_splits(n: usize) -> Vec<Split> {
    let train = n * 8 / 10;
    let val = n / 10;
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub values: Tensor,
    pub m_mvi: Tensor,
    pub splits: Vec<Split>,
}

/// Samples of one split, gathered into contiguous tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub values: Tensor,
    pub m_mvi: Tensor,
    /// Positions in the parent dataset.
    pub indices: Vec<usize>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Samples `rows` (positions within this subset) as a batch.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Tensor) {
        (gather_rows(&self.values, rows), gather_rows(&self.m_mvi, rows))
    }
}

/// Rows `rows` of the leading axis.
pub fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let s = t.shape();
    let per: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    let mut shape = s.to_vec();
    shape[0] = rows.len();
    Tensor::from_parts(shape, data)
}

impl Dataset {
    pub fn new(values: Tensor, m_mvi: Tensor, splits: Vec<Split>) -> Result<Self> {
        if values.shape().len() != 3 || values.shape() != m_mvi.shape() {
            return Err(Error::dim(
                "dataset",
                format!("values {:?}, mask {:?}", values.shape(), m_mvi.shape()),
            ));
        }
        if splits.len() != values.shape()[0] {
            return Err(Error::dim("dataset", format!("{} split tags for {} samples", splits.len(), values.shape()[0])));
        }
        if m_mvi.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Format("missing-value mask must be binary".into()));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self { values, m_mvi, splits })
    }

    /// `(n, K, L)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    pub fn subset(&self, split: Split) -> Subset {
        let indices: Vec<usize> = (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect();
        Subset {
            values: gather_rows(&self.values, &indices),
            m_mvi: gather_rows(&self.m_mvi, &indices),
            indices,
        }
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        binio::write_magic(w, DATA_MAGIC, 1)?;
        binio::write_tensor(w, &self.values)?;
        binio::write_tensor(w, &self.m_mvi)?;
        w.write_all(&self.splits.iter().map(|s| s.tag()).collect::<Vec<_>>())?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        binio::read_magic(r, DATA_MAGIC, 1)?;
        let values = binio::read_tensor(r)?;
        let m_mvi = binio::read_tensor(r)?;
        let mut tags = vec![0u8; values.shape()[0]];
        r.read_exact(&mut tags)?;
        let splits = tags.into_iter().map(Split::from_tag).collect::<Result<_>>()?;
        Self::new(values, m_mvi, splits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Reads `channels` consecutive rows per sample, one row per channel and
    /// one column per time step. Empty, `nan` or `NA` fields are missing.
    /// Splits are assigned 80/10/10 in row order.
    pub fn from_csv(input: impl BufRead, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        let mut values = Vec::new();
        let mut mask = Vec::new();
        let mut len = None;
        let mut rows = 0;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if *len.get_or_insert(fields.len()) != fields.len() {
                return Err(Error::Format(format!("line {}: expected {} fields", lineno + 1, len.unwrap_or(0))));
            }
            for f in fields {
                if f.is_empty() || f.eq_ignore_ascii_case("nan") || f == "NA" {
                    values.push(0.0);
                    mask.push(0.0);
                } else {
                    let v: f64 = f
                        .parse()
                        .map_err(|_| Error::Format(format!("line {}: bad number {f:?}", lineno + 1)))?;
                    values.push(v);
                    mask.push(1.0);
                }
            }
            rows += 1;
        }
        let len = len.ok_or_else(|| Error::Format("empty CSV".into()))?;
        if rows % channels != 0 {
            return Err(Error::Format(format!("{rows} rows is not a multiple of {channels} channels")));
        }
        let n = rows / channels;
        Self::new(
            Tensor::new(vec![n, channels, len], values)?,
            Tensor::new(vec![n, channels, len], mask)?,
            default_splits(n),
        )
    }
}

const DATA_MAGIC: &[u8; 8] = b"SSSDDATA";
const GRID_MAGIC: &[u8; 8] = b"SSSDGRID";

/// A bare tensor file (predictions, ground truth, masks).
pub fn write_grid(w: &mut impl Write, t: &Tensor) -> Result<()> {
    binio::write_magic(w, GRID_MAGIC, 1)?;
    binio::write_tensor(w, t)
}

pub fn read_grid(r: &mut impl Read) -> Result<Tensor> {
    binio::read_magic(r, GRID_MAGIC, 1)?;
    binio::read_tensor(r)
}

pub fn save_grid(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_grid(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<Tensor> {
    read_grid(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// One sinusoid per sample, seen through a per-channel amplitude, phase and offset.
    Sines,
    /// The same with an exponential decay envelope.
    Damped,
    /// Per-channel blends of a square wave and a sinusoid.
    SquareMix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub samples: usize,
    pub channels: usize,
    pub length: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

struct ChannelView {
    amp: f64,
    phase: f64,
    offset: f64,
    blend: f64,
}

/// Generates a dataset with every value present and 80/10/10 splits.
///
/// Channels are fixed transforms of latent oscillators shared within each
/// sample, so the channels of a sample are strongly correlated.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let &SynthSpec {
        kind,
        samples,
        channels,
        length,
        noise_sd,
        seed,
    } = spec;
    if samples == 0 || channels == 0 || length < 2 || !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Config(format!("invalid synth parameters {spec:?}")));
    }
    let rng = SeededRng::new(seed);
    let mut view_rng = rng.fork(0);
    let views: Vec<ChannelView> = (0..channels)
        .map(|_| ChannelView {
            amp: view_rng.uniform_range(0.5, 1.5),
            phase: view_rng.uniform_range(-0.25, 0.25) * std::f64::consts::PI,
            offset: view_rng.uniform_range(-1.0, 1.0),
            blend: view_rng.uniform_range(0.2, 0.8),
        })
        .collect();
    let tau = 2.0 * std::f64::consts::PI;
    let n_len = length as f64;
    // whole cycles per window keep each sine on a single DFT bin
    let max_cycles = (length / 8).max(2);
    let mut values = Vec::with_capacity(samples * channels * length);
    for s in 0..samples {
        let mut r = rng.fork(1 + s as u64);
        let f1 = (2 + r.below(max_cycles - 1)) as f64 / n_len;
        let f2 = (2 + r.below(max_cycles - 1)) as f64 / n_len;
        let (p1, p2) = (r.uniform() * tau, r.uniform() * tau);
        let decay = r.uniform_range(0.5, 3.0) / n_len;
        for v in &views {
            for t in 0..length {
                let tf = t as f64;
                let main = (tau * f1 * tf + p1 + v.phase).sin();
                let clean = match kind {
                    SynthKind::Sines => v.amp * main,
                    SynthKind::Damped => v.amp * (-decay * tf).exp() * main,
                    SynthKind::SquareMix => {
                        let square = if main >= 0.0 { 1.0 } else { -1.0 };
                        let other = (tau * f2 * tf + p2 + v.phase).sin();
                        v.amp * (v.blend * square + (1.0 - v.blend) * other)
                    }
                };
                let noise = if noise_sd > 0.0 { noise_sd * r.normal() } else { 0.0 };
                values.push(clean + v.offset + noise);
            }
        }
    }
    let shape = vec![samples, channels, length];
    Dataset::new(
        Tensor::from_parts(shape.clone(), values),
        Tensor::ones(&shape),
        default_splits(samples),
    )
}

/// Per-channel standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits on present entries of `[n, K, L]` values. Channels with no
    /// spread are rejected.
    pub fn fit(values: &Tensor, m_mvi: &Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || m_mvi.shape() != s {
            return Err(Error::dim("scaler", format!("values {s:?}, mask {:?}", m_mvi.shape())));
        }
        let (k, len) = (s[1], s[2]);
        let mut count = vec![0.0; k];
        let mut sum = vec![0.0; k];
        for (i, (&v, &m)) in values.data().iter().zip(m_mvi.data()).enumerate() {
            let c = (i / len) % k;
            count[c] += m;
            sum[c] += m * v;
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, n)| s / n.max(1.0)).collect();
        let mut ss = vec![0.0; k];
        for (i, (&v, &m)) in values.data().iter().zip(m_mvi.data()).enumerate() {
            let c = (i / len) % k;
            ss[c] += m * (v - mean[c]).powi(2);
        }
        let std: Vec<f64> = ss.iter().zip(&count).map(|(s, n)| (s / n.max(1.0)).sqrt()).collect();
        for (c, (&sd, &mu)) in std.iter().zip(&mean).enumerate() {
            if !(sd > 1e-12 * mu.abs().max(1.0)) {
                return Err(Error::Config(format!("channel {c} is constant on the training split")));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, mu, sd| (v - mu) / sd)
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, mu, sd| v * sd + mu)
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let s = x.shape();
        let k = self.mean.len();
        if s.len() < 2 || s[s.len() - 2] != k {
            return Err(Error::dim("scaler", format!("{s:?} for {k} channels")));
        }
        let len = s[s.len() - 1];
        Ok(Tensor::from_fn(s, |i| {
            let c = (i / len) % k;
            f(x.data()[i], self.mean[c], self.std[c])
        }))
    }
}

/// Consecutive channel groups of a `[B, K, L]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSplit {
    pub groups: Vec<Tensor>,
    /// Half-open channel range of each group.
    pub ranges: Vec<(usize, usize)>,
    pub channels: usize,
}

/// Cuts `batch` into groups of `width` consecutive channels; the last group
/// may be narrower.
pub fn channel_split(batch: &Tensor, width: usize) -> Result<ChannelSplit> {
    let (nb, k, len) = match batch.shape() {
        [b, k, l] => (*b, *k, *l),
        s => return Err(Error::dim("channel_split", format!("expected [B, K, L], got {s:?}"))),
    };
    if width == 0 {
        return Err(Error::Config("channel split width must be positive".into()));
    }
    if width > k {
        log::warn!("channel split width {width} exceeds {k} channels; using a single group");
    }
    let ranges: Vec<(usize, usize)> = (0..k).step_by(width).map(|s| (s, (s + width).min(k))).collect();
    let groups = ranges
        .iter()
        .map(|&(lo, hi)| {
            let w = hi - lo;
            let mut data = Vec::with_capacity(nb * w * len);
            for b in 0..nb {
                let base = b * k * len;
                data.extend_from_slice(&batch.data()[base + lo * len..base + hi * len]);
            }
            Tensor::from_parts(vec![nb, w, len], data)
        })
        .collect();
    Ok(ChannelSplit {
        groups,
        ranges,
        channels: k,
    })
}

impl ChannelSplit {
    /// Inverse of [`channel_split`] for tensors shaped like `groups`.
    pub fn reassemble(&self, groups: &[Tensor]) -> Result<Tensor> {
        if groups.len() != self.ranges.len() {
            return Err(Error::dim("reassemble", format!("{} groups for {} ranges", groups.len(), self.ranges.len())));
        }
        let (nb, len) = match groups[0].shape() {
            [b, _, l] => (*b, *l),
            s => return Err(Error::dim("reassemble", format!("{s:?}"))),
        };
        let k = self.channels;
        let mut out = vec![0.0; nb * k * len];
        for (g, &(lo, hi)) in groups.iter().zip(&self.ranges) {
            if g.shape() != [nb, hi - lo, len] {
                return Err(Error::dim("reassemble", format!("group {:?} for channels {lo}..{hi}", g.shape())));
            }
            let w = hi - lo;
            for b in 0..nb {
                out[b * k * len + lo * len..b * k * len + hi * len]
                    .copy_from_slice(&g.data()[b * w * len..(b + 1) * w * len]);
            }
        }
        Ok(Tensor::from_parts(vec![nb, k, len], out))
    }
}

/// Appends `width - K` channels filled with `fill` to a `[B, K, L]` tensor.
pub fn pad_channels(t: &Tensor, width: usize, fill: f64) -> Result<Tensor> {
    let (nb, k, len) = match t.shape() {
        [b, k, l] => (*b, *k, *l),
        s => return Err(Error::dim("pad_channels", format!("{s:?}"))),
    };
    if width < k {
        return Err(Error::dim("pad_channels", format!("width {width} below {k} channels")));
    }
    let mut data = Vec::with_capacity(nb * width * len);
    for b in 0..nb {
        data.extend_from_slice(&t.data()[b * k * len..(b + 1) * k * len]);
        data.resize(data.len() + (width - k) * len, fill);
    }
    Ok(Tensor::from_parts(vec![nb, width, len], data))
}

/// Keeps the first `k` channels of a `[B, W, L]` tensor.
pub fn truncate_channels(t: &Tensor, k: usize) -> Result<Tensor> {
    let (nb, w, len) = match t.shape() {
        [b, w, l] => (*b, *w, *l),
        s => return Err(Error::dim("truncate_channels", format!("{s:?}"))),
    };
    if k > w {
        return Err(Error::dim("truncate_channels", format!("{k} of {w} channels")));
    }
    let mut data = Vec::with_capacity(nb * k * len);
    for b in 0..nb {
        data.extend_from_slice(&t.data()[b * w * len..b * w * len + k * len]);
    }
    Ok(Tensor::from_parts(vec![nb, k, len], data))
}
