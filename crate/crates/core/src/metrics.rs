//! Masked error metrics over held-out entries.
//!
//! The evaluation mask is `m_mvi * (1 - m_imp)`: entries that had ground
//! truth but were hidden from the model. Sums are normalized by the number
//! of evaluated entries, and MRE is the aggregate ratio of absolute error to
//! absolute target mass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `m_mvi * (1 - m_imp)`.
pub fn eval_mask(m_imp: &Tensor, m_mvi: &Tensor) -> Result<Tensor> {
    check(m_imp, m_mvi)?;
    Ok(Tensor::from_parts(
        m_imp.shape().to_vec(),
        m_imp
            .data()
            .iter()
            .zip(m_mvi.data())
            .map(|(i, v)| v * (1.0 - i))
            .collect(),
    ))
}

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim("metrics", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    target: f64,
    count: f64,
}

impl Sums {
    fn add(&mut self, y: f64, yhat: f64, m: f64) {
        let e = (y - yhat).abs();
        self.abs += m * e;
        self.sq += m * e * e;
        self.target += m * y.abs();
        self.count += m;
    }

    fn merge(&mut self, other: Sums) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.target += other.target;
        self.count += other.count;
    }

    fn mae(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.abs / self.count)
    }

    fn mse(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.sq / self.count)
    }

    fn mre(&self) -> Result<f64> {
        if self.target <= 0.0 {
            return Err(Error::UndefinedMetric("MRE with zero target mass"));
        }
        Ok(self.abs / self.target)
    }

    fn nonempty(&self) -> Result<()> {
        if self.count <= 0.0 {
            return Err(Error::UndefinedMetric("no evaluated entries"));
        }
        Ok(())
    }
}

fn sums(y: &Tensor, yhat: &Tensor, mask: &Tensor) -> Result<Sums> {
    check(y, yhat)?;
    check(y, mask)?;
    let mut s = Sums::default();
    for ((&a, &b), &m) in y.data().iter().zip(yhat.data()).zip(mask.data()) {
        s.add(a, b, m);
    }
    Ok(s)
}

pub fn masked_mae(y: &Tensor, yhat: &Tensor, m_eval: &Tensor) -> Result<f64> {
    sums(y, yhat, m_eval)?.mae()
}

pub fn masked_mse(y: &Tensor, yhat: &Tensor, m_eval: &Tensor) -> Result<f64> {
    sums(y, yhat, m_eval)?.mse()
}

pub fn masked_rmse(y: &Tensor, yhat: &Tensor, m_eval: &Tensor) -> Result<f64> {
    Ok(masked_mse(y, yhat, m_eval)?.sqrt())
}

pub fn masked_mre(y: &Tensor, yhat: &Tensor, m_eval: &Tensor) -> Result<f64> {
    sums(y, yhat, m_eval)?.mre()
}

/// Metrics restricted to one channel. Channels with no evaluated entries
/// report `null` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: usize,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub rmse: Option<f64>,
    pub mre: Option<f64>,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// `None` when the evaluated targets are all zero.
    pub mre: Option<f64>,
    pub n_eval: usize,
    pub per_channel: Vec<ChannelReport>,
}

impl EvalReport {
    /// Scores tensors shaped `[K, L]` or `[B, K, L]`; channels are axis -2.
    pub fn compute(y: &Tensor, yhat: &Tensor, m_eval: &Tensor) -> Result<Self> {
        check(y, yhat)?;
        check(y, m_eval)?;
        let shape = y.shape();
        if shape.len() < 2 {
            return Err(Error::dim("eval_report", format!("need [.., K, L], got {shape:?}")));
        }
        let (k, len) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut channels = vec![Sums::default(); k];
        for (i, ((&a, &b), &m)) in y.data().iter().zip(yhat.data()).zip(m_eval.data()).enumerate() {
            channels[(i / len) % k].add(a, b, m);
        }
        let mut total = Sums::default();
        for c in &channels {
            total.merge(*c);
        }
        let mse = total.mse()?;
        Ok(Self {
            mae: total.mae()?,
            mse,
            rmse: mse.sqrt(),
            mre: total.mre().ok(),
            n_eval: total.count as usize,
            per_channel: channels
                .iter()
                .enumerate()
                .map(|(channel, s)| ChannelReport {
                    channel,
                    mae: s.mae().ok(),
                    mse: s.mse().ok(),
                    rmse: s.mse().ok().map(f64::sqrt),
                    mre: s.mre().ok(),
                    n_eval: s.count as usize,
                })
                .collect(),
        })
    }
}
