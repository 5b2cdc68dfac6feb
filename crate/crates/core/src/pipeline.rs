//! Training, imputation and evaluation runs over datasets.
//!
//! Models work on standardized values; imputations are mapped back to the
//! original scale before scoring. Every random draw comes from a stream
//! forked off the run seed, so a `(seed, config, data)` triple determines
//! checkpoints, traces and reports exactly.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{channel_split, pad_channels, truncate_channels, Dataset, Scaler, Split};
use crate::diffusion::{
    reverse_sample, summarize_samples, training_loss, training_step, ConditioningBundle, DiffusionConfig,
    DiffusionMode, QuantileSummary, TrainingBatch,
};
use crate::error::{Error, Result};
use crate::masking::{compose, Scenario};
use crate::metrics::{eval_mask, EvalReport};
use crate::model::SssdModel;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0;
const STEP_STREAM: u64 = 1;
const VAL_STREAM: u64 = 1 << 40;
const MASK_STREAM: u64 = 2 << 40;
const DRAW_STREAM: u64 = 3 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    /// Seconds since the start of training.
    pub wall_time: f64,
}

pub fn write_trace_csv(rows: &[TraceRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "iteration,loss,wall_time")?;
    for r in rows {
        writeln!(w, "{},{},{:.6}", r.iteration, r.loss, r.wall_time)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: SssdModel,
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    /// Loss on the validation split, when it is non-empty.
    pub validation_loss: Option<f64>,
}

/// Stacks `[b_i, K, L]` tensors along the batch axis.
fn concat_batch(parts: &[Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_parts(shape, data)
}

fn stack_samples(parts: &[Tensor]) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    Tensor::from_parts(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

fn rows_of(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::from_parts(shape, t.data()[lo * per..hi * per].to_vec())
}

/// Standardizes, zeroes absent entries and, with a split width, turns every
/// channel group into its own sample (narrow groups padded with absent
/// channels).
fn model_inputs(values: &Tensor, m_mvi: &Tensor, scaler: &Scaler, width: Option<usize>) -> Result<(Tensor, Tensor)> {
    let z = scaler.apply(values)?;
    let z = Tensor::from_fn(z.shape(), |i| if m_mvi.data()[i] != 0.0 { z.data()[i] } else { 0.0 });
    match width {
        Some(w) if w < values.shape()[1] => {
            let (zs, ms) = (channel_split(&z, w)?, channel_split(m_mvi, w)?);
            let zg = zs.groups.iter().map(|g| pad_channels(g, w, 0.0)).collect::<Result<Vec<_>>>()?;
            let mg = ms.groups.iter().map(|g| pad_channels(g, w, 0.0)).collect::<Result<Vec<_>>>()?;
            Ok((concat_batch(&zg), concat_batch(&mg)))
        }
        _ => Ok((z, m_mvi.clone())),
    }
}

fn scenario_masks(scenario: Scenario, n: usize, k: usize, len: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let masks = (0..n).map(|_| scenario.generate(k, len, rng)).collect::<Result<Vec<_>>>()?;
    Ok(stack_samples(&masks))
}

/// Trains a fresh model; `on_step` sees every trace row as it is produced.
pub fn train(cfg: &RunConfig, data: &Dataset, mut on_step: impl FnMut(&TraceRow)) -> Result<TrainOutcome> {
    let (_, k, len) = data.dims();
    cfg.validate(k, len)?;
    let train = data.subset(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let scaler = Scaler::fit(&train.values, &train.m_mvi)?;
    let (xs, mvis) = model_inputs(&train.values, &train.m_mvi, &scaler, cfg.channel_split_width)?;
    let model_cfg = cfg.model_for(k, len)?;
    let width = model_cfg.in_channels;
    let root = SeededRng::new(cfg.training.seed);
    let mut model = SssdModel::new(model_cfg, &mut root.fork(INIT_STREAM))?;
    let sched = cfg.diffusion.schedule()?;
    let lr = cfg.training.learning_rate;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        },
        model.store().tensors(),
    );
    let n = xs.shape()[0];
    let bs = cfg.training.batch_size;
    let start = Instant::now();
    let mut trace = Vec::with_capacity(cfg.training.iterations);
    let mut last_loss = f64::NAN;
    for it in 0..cfg.training.iterations {
        let mut rng = root.fork(STEP_STREAM + it as u64);
        let rows: Vec<usize> = if n >= bs {
            rng.sample_indices(n, bs)
        } else {
            (0..bs).map(|_| rng.below(n)).collect()
        };
        let x0 = crate::data::gather_rows(&xs, &rows);
        let m_mvi = crate::data::gather_rows(&mvis, &rows);
        let m_imp = scenario_masks(cfg.train_scenario, bs, width, len, &mut rng)?;
        let batch = TrainingBatch {
            x0: &x0,
            m_imp: &m_imp,
            m_mvi: &m_mvi,
        };
        let failure = Error::NumericFailure {
            iteration: it,
            lr,
            last_loss,
        };
        let out = match training_step(&model, batch, &sched, &cfg.diffusion, &mut rng) {
            Err(Error::NonFinite(op)) => {
                log::error!("non-finite value from {op} at iteration {it}");
                return Err(failure);
            }
            r => r?,
        };
        if !out.loss.is_finite() || !out.grads.iter().all(Tensor::is_finite) {
            return Err(failure);
        }
        adam.step(model.store_mut().tensors_mut(), &out.grads)?;
        last_loss = out.loss;
        let row = TraceRow {
            iteration: it,
            loss: out.loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if it % 100 == 0 {
            log::info!("iteration {it}: loss {:.6}", out.loss);
        }
        on_step(&row);
        trace.push(row);
    }
    let val = data.subset(Split::Val);
    let validation_loss = if val.is_empty() {
        None
    } else {
        let (vx, vm) = model_inputs(&val.values, &val.m_mvi, &scaler, cfg.channel_split_width)?;
        Some(validation_loss(
            &model,
            &cfg.diffusion,
            cfg.train_scenario,
            &vx,
            &vm,
            cfg.training.validation_repeats,
            cfg.training.seed,
            cfg.sampling.batch_size,
        )?)
    };
    let checkpoint = Checkpoint::from_model(&model, cfg.diffusion, Some(scaler), cfg.channel_split_width);
    Ok(TrainOutcome {
        model,
        checkpoint,
        trace,
        validation_loss,
    })
}

/// Training objective over a held-out set, averaged over covered entries.
///
/// Masks, steps and noise are drawn from a stream fixed by `seed` before the
/// network is evaluated, so two models scored with the same seed see
/// identical inputs.
#[allow(clippy::too_many_arguments)]
pub fn validation_loss(
    model: &SssdModel,
    diffusion: &DiffusionConfig,
    scenario: Scenario,
    values: &Tensor,
    m_mvi: &Tensor,
    repeats: usize,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    let sched = diffusion.schedule()?;
    let (n, k, len) = match values.shape() {
        [n, k, l] => (*n, *k, *l),
        s => return Err(Error::dim("validation_loss", format!("{s:?}"))),
    };
    let mut rng = SeededRng::new(seed).fork(VAL_STREAM);
    let (mut total, mut covered) = (0.0, 0.0);
    for _ in 0..repeats.max(1) {
        for lo in (0..n).step_by(batch_size.max(1)) {
            let hi = (lo + batch_size).min(n);
            let (x0, mvi) = (rows_of(values, lo, hi), rows_of(m_mvi, lo, hi));
            let m_imp = scenario_masks(scenario, hi - lo, k, len, &mut rng)?;
            let steps: Vec<usize> = (lo..hi).map(|_| rng.below(sched.steps())).collect();
            let noise = Tensor::from_fn(x0.shape(), |_| rng.normal());
            let weight: f64 = match diffusion.mode {
                DiffusionMode::D0 => mvi.data().iter().sum(),
                DiffusionMode::D1 => m_imp.data().iter().zip(mvi.data()).map(|(i, v)| (1.0 - i * v) * v).sum(),
            };
            let batch = TrainingBatch {
                x0: &x0,
                m_imp: &m_imp,
                m_mvi: &mvi,
            };
            let out = training_loss(model, batch, &sched, diffusion, &steps, &noise, false)?;
            total += out.loss * weight;
            covered += weight;
        }
    }
    if covered == 0.0 {
        return Err(Error::UndefinedMetric("validation set has no imputation targets"));
    }
    Ok(total / covered)
}

/// Averages of per-draw metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawAverage {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mre: Option<f64>,
}

impl DrawAverage {
    fn of(reports: &[EvalReport]) -> Self {
        let n = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mre = reports.iter().map(|r| r.mre).collect::<Option<Vec<f64>>>();
        Self {
            mae: avg(|r| r.mae),
            mse: avg(|r| r.mse),
            rmse: avg(|r| r.rmse),
            mre: mre.map(|v| v.iter().sum::<f64>() / n),
        }
    }
}

/// Scores of an imputation run: per-draw metrics averaged over draws, and
/// the metrics of the per-entry mean of the draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    pub scenario: Scenario,
    pub draws: usize,
    pub n_eval: usize,
    pub per_draw_average: DrawAverage,
    pub mean_imputation: EvalReport,
    pub per_draw: Vec<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct ImputeRequest {
    pub scenario: Scenario,
    pub samples: usize,
    pub quantiles: Vec<f64>,
    pub seed: u64,
    pub split: Split,
    pub batch_size: usize,
    /// Score only the first `limit` samples of the split.
    pub limit: Option<usize>,
}

pub struct ImputeOutcome {
    /// Dataset positions of the imputed samples.
    pub indices: Vec<usize>,
    pub truth: Tensor,
    pub m_imp: Tensor,
    pub m_mvi: Tensor,
    /// Draws on the original scale, each `[n, K, L]`.
    pub draws: Vec<Tensor>,
    pub summary: QuantileSummary,
    pub report: ImputeReport,
}

/// One imputation mask per sample, fixed by the seed and the sample's
/// dataset position.
pub fn evaluation_masks(scenario: Scenario, indices: &[usize], k: usize, len: usize, seed: u64) -> Result<Tensor> {
    let root = SeededRng::new(seed);
    let masks = indices
        .iter()
        .map(|&i| scenario.generate(k, len, &mut root.fork(MASK_STREAM + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_samples(&masks))
}

/// Draws `req.samples` imputations for every sample of a split.
pub fn impute(ck: &Checkpoint, data: &Dataset, req: &ImputeRequest) -> Result<ImputeOutcome> {
    let (_, k, len) = data.dims();
    let meta = &ck.meta;
    let width = meta.channel_split_width.map_or(k, |w| w.min(k));
    if meta.model.in_channels != width || meta.model.length != len {
        return Err(Error::Config(format!(
            "checkpoint expects {} channels of length {}, data gives {width} of length {len}",
            meta.model.in_channels, meta.model.length
        )));
    }
    if req.samples == 0 || req.batch_size == 0 {
        return Err(Error::Config("need at least one draw and a positive batch size".into()));
    }
    req.scenario.validate(len).map_err(|e| Error::Config(e.to_string()))?;
    let model = ck.to_model()?;
    let sched = meta.diffusion.schedule()?;
    let scaler = match &meta.scaler {
        Some(s) if s.mean.len() == k => s.clone(),
        Some(s) => return Err(Error::Config(format!("scaler has {} channels, data {k}", s.mean.len()))),
        None => Scaler {
            mean: vec![0.0; k],
            std: vec![1.0; k],
        },
    };

    let mut split = data.subset(req.split);
    if let Some(limit) = req.limit {
        let keep = limit.min(split.len());
        split = crate::data::Subset {
            values: rows_of(&split.values, 0, keep),
            m_mvi: rows_of(&split.m_mvi, 0, keep),
            indices: split.indices[..keep].to_vec(),
        };
    }
    if split.is_empty() {
        return Err(Error::Config(format!("{:?} split is empty", req.split)));
    }
    let n = split.len();
    let m_imp = evaluation_masks(req.scenario, &split.indices, k, len, req.seed)?;
    let mask = compose(&m_imp, &split.m_mvi)?;
    let z = scaler.apply(&split.values)?;

    let root = SeededRng::new(req.seed);
    let groups: Vec<(usize, usize)> = (0..k).step_by(width).map(|lo| (lo, (lo + width).min(k))).collect();
    let mut draws = Vec::with_capacity(req.samples);
    for d in 0..req.samples {
        let mut chunks = Vec::new();
        for (c, lo) in (0..n).step_by(req.batch_size).enumerate() {
            let hi = (lo + req.batch_size).min(n);
            let (zc, mc) = (rows_of(&z, lo, hi), rows_of(&mask, lo, hi));
            let (zs, ms) = (channel_split(&zc, width)?, channel_split(&mc, width)?);
            let mut outs = Vec::with_capacity(groups.len());
            for (g, ((zg, mg), &(glo, ghi))) in zs.groups.iter().zip(&ms.groups).zip(&groups).enumerate() {
                let bundle = ConditioningBundle::new(&pad_channels(zg, width, 0.0)?, &pad_channels(mg, width, 0.0)?)?;
                let stream = DRAW_STREAM + ((d as u64) << 32 | (g as u64) << 16 | c as u64);
                let x = reverse_sample(&model, &bundle, &sched, &meta.diffusion, &mut root.fork(stream))?;
                outs.push(truncate_channels(&x, ghi - glo)?);
            }
            chunks.push(zs.reassemble(&outs)?);
        }
        let mut draw = scaler.inverse(&concat_batch(&chunks))?;
        // conditioned entries are reported exactly as observed
        for ((v, &t), &m) in draw.data_mut().iter_mut().zip(split.values.data()).zip(mask.data()) {
            if m != 0.0 {
                *v = t;
            }
        }
        draws.push(draw);
    }

    let summary = summarize_samples(&draws, &req.quantiles)?;
    let m_eval = eval_mask(&m_imp, &split.m_mvi)?;
    let per_draw = draws
        .iter()
        .map(|d| EvalReport::compute(&split.values, d, &m_eval))
        .collect::<Result<Vec<_>>>()?;
    let mean_imputation = EvalReport::compute(&split.values, &summary.mean, &m_eval)?;
    let report = ImputeReport {
        scenario: req.scenario,
        draws: req.samples,
        n_eval: mean_imputation.n_eval,
        per_draw_average: DrawAverage::of(&per_draw),
        mean_imputation,
        per_draw,
    };
    Ok(ImputeOutcome {
        indices: split.indices,
        truth: split.values,
        m_imp,
        m_mvi: split.m_mvi,
        draws,
        summary,
        report,
    })
}

fn level_name(q: f64) -> String {
    let pct = q * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("q{:02}", pct.round() as u32)
    } else {
        format!("q{pct}")
    }
}

/// Columns: `sample_id, channel, t, ground_truth, mask`, one column per
/// quantile level, `mean, one_draw`. `mask` is the conditioning mask and
/// absent ground truth is written as an empty field.
pub fn write_quantile_csv(out: &ImputeOutcome, w: &mut impl Write) -> Result<()> {
    let levels: Vec<String> = out.summary.levels.iter().map(|&q| level_name(q)).collect();
    writeln!(w, "sample_id,channel,t,ground_truth,mask,{},mean,one_draw", levels.join(","))?;
    let shape = out.truth.shape();
    let (k, len) = (shape[1], shape[2]);
    let mask = compose(&out.m_imp, &out.m_mvi)?;
    for (s, &id) in out.indices.iter().enumerate() {
        for c in 0..k {
            for t in 0..len {
                let i = (s * k + c) * len + t;
                let truth = if out.m_mvi.data()[i] != 0.0 {
                    out.truth.data()[i].to_string()
                } else {
                    String::new()
                };
                write!(w, "{id},{c},{t},{truth},{}", mask.data()[i])?;
                for surface in &out.summary.surfaces {
                    write!(w, ",{}", surface.data()[i])?;
                }
                writeln!(w, ",{},{}", out.summary.mean.data()[i], out.draws[0].data()[i])?;
            }
        }
    }
    Ok(())
}

/// Scores predictions against ground truth on `m_mvi * (1 - m_imp)`.
pub fn evaluate(pred: &Tensor, truth: &Tensor, m_imp: &Tensor, m_mvi: &Tensor) -> Result<EvalReport> {
    EvalReport::compute(truth, pred, &eval_mask(m_imp, m_mvi)?)
}

/// Fills unobserved entries of each `(sample, channel)` row with the median
/// of its observed entries, falling back to the channel's median over the
/// whole batch.
pub fn median_impute(values: &Tensor, observed: &Tensor) -> Result<Tensor> {
    fill_rows(values, observed, |row, obs, fallback| {
        let m = median(row.iter().zip(obs).filter(|(_, &o)| o != 0.0).map(|(v, _)| *v).collect()).unwrap_or(fallback);
        row.iter().zip(obs).map(|(&v, &o)| if o != 0.0 { v } else { m }).collect()
    })
}

/// Carries the last observed value forward; leading gaps take the first
/// observed value.
pub fn locf_impute(values: &Tensor, observed: &Tensor) -> Result<Tensor> {
    fill_rows(values, observed, |row, obs, fallback| {
        let first = row.iter().zip(obs).find(|(_, &o)| o != 0.0).map_or(fallback, |(v, _)| *v);
        let mut last = first;
        row.iter()
            .zip(obs)
            .map(|(&v, &o)| {
                if o != 0.0 {
                    last = v;
                }
                last
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn fill_rows(values: &Tensor, observed: &Tensor, fill: impl Fn(&[f64], &[f64], f64) -> Vec<f64>) -> Result<Tensor> {
    let (n, k, len) = match values.shape() {
        [n, k, l] if observed.shape() == values.shape() => (*n, *k, *l),
        s => return Err(Error::dim("baseline", format!("values {s:?}, mask {:?}", observed.shape()))),
    };
    let fallback: Vec<f64> = (0..k)
        .map(|c| {
            let obs = (0..n).flat_map(|s| {
                let base = (s * k + c) * len;
                (base..base + len).filter(|&i| observed.data()[i] != 0.0).map(|i| values.data()[i])
            });
            median(obs.collect()).unwrap_or(0.0)
        })
        .collect();
    let mut out = Vec::with_capacity(values.numel());
    for (r, (row, obs)) in values.data().chunks(len).zip(observed.data().chunks(len)).enumerate() {
        out.extend(fill(row, obs, fallback[r % k]));
    }
    Ok(Tensor::from_parts(values.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthKind, SynthSpec};
    use crate::model::ModelConfig;

    fn tiny_cfg(scenario: Scenario) -> RunConfig {
        let mut cfg = RunConfig::desk(scenario);
        cfg.model = ModelConfig {
            residual_layers: 1,
            residual_channels: 8,
            skip_channels: 8,
            embed_dims: [8, 16, 16],
            state_dim: 4,
            bidirectional: true,
            second_s4: true,
            in_channels: 0,
            length: 0,
        };
        cfg.diffusion.steps = 5;
        cfg.training.iterations = 6;
        cfg.training.batch_size = 4;
        cfg.training.seed = 3;
        cfg.training.validation_repeats = 1;
        cfg.sampling.samples = 3;
        cfg
    }

    fn data(k: usize) -> Dataset {
        synth_dataset(&SynthSpec {
            kind: SynthKind::Sines,
            samples: 20,
            channels: k,
            length: 16,
            noise_sd: 0.05,
            seed: 1,
        })
        .unwrap()
    }

    fn request(cfg: &RunConfig) -> ImputeRequest {
        ImputeRequest {
            scenario: cfg.eval_scenario(),
            samples: cfg.sampling.samples,
            quantiles: cfg.sampling.quantiles.clone(),
            seed: 8,
            split: Split::Test,
            batch_size: 3,
            limit: None,
        }
    }

    #[test]
    fn training_is_deterministic_and_mode_sensitive() {
        let cfg = tiny_cfg(Scenario::Rm { ratio: 0.25 });
        let d = data(2);
        let a = train(&cfg, &d, |_| {}).unwrap();
        let b = train(&cfg, &d, |_| {}).unwrap();
        let losses = |o: &TrainOutcome| o.trace.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(a.validation_loss.unwrap().is_finite());
        let mut d0 = cfg.clone();
        d0.diffusion.mode = DiffusionMode::D0;
        assert_ne!(losses(&train(&d0, &d, |_| {}).unwrap()), losses(&a));
    }

    #[test]
    fn diverging_training_reports_iteration() {
        let mut cfg = tiny_cfg(Scenario::Rm { ratio: 0.25 });
        cfg.training.learning_rate = 1e300;
        cfg.training.iterations = 50;
        match train(&cfg, &data(2), |_| {}) {
            Err(Error::NumericFailure { iteration, lr, .. }) => {
                assert!(iteration > 0);
                assert_eq!(lr, 1e300);
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("training should diverge"),
        }
    }

    #[test]
    fn impute_pins_observed_and_writes_quantiles() {
        let cfg = tiny_cfg(Scenario::Bm { ratio: 0.25 });
        let d = data(2);
        let out = train(&cfg, &d, |_| {}).unwrap();
        let res = impute(&out.checkpoint, &d, &request(&cfg)).unwrap();
        let mask = compose(&res.m_imp, &res.m_mvi).unwrap();
        for draw in &res.draws {
            for ((v, t), m) in draw.data().iter().zip(res.truth.data()).zip(mask.data()) {
                if *m != 0.0 {
                    assert_eq!(v.to_bits(), t.to_bits());
                }
            }
        }
        assert!(res.report.mean_imputation.mse <= res.report.per_draw_average.mse + 1e-12);
        let mut csv = Vec::new();
        write_quantile_csv(&res, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sample_id,channel,t,ground_truth,mask,q05,q25,q50,q75,q95,mean,one_draw"
        );
        assert_eq!(lines.count(), res.truth.numel());
    }

    #[test]
    fn single_draw_quantiles_equal_the_draw() {
        let mut cfg = tiny_cfg(Scenario::Rm { ratio: 0.25 });
        cfg.sampling.samples = 1;
        let d = data(2);
        let out = train(&cfg, &d, |_| {}).unwrap();
        let res = impute(&out.checkpoint, &d, &request(&cfg)).unwrap();
        for s in &res.summary.surfaces {
            assert_eq!(s, &res.draws[0]);
        }
    }

    #[test]
    fn channel_split_runs_end_to_end() {
        let mut cfg = tiny_cfg(Scenario::Rbm { ratio: 0.25 });
        cfg.channel_split_width = Some(2);
        let d = data(5);
        let out = train(&cfg, &d, |_| {}).unwrap();
        assert_eq!(out.model.config().in_channels, 2);
        let res = impute(&out.checkpoint, &d, &request(&cfg)).unwrap();
        assert_eq!(res.draws[0].shape(), &[2, 5, 16]);
        let other = data(4);
        let mut wrong = out.checkpoint.clone();
        wrong.meta.channel_split_width = None;
        assert!(matches!(impute(&wrong, &other, &request(&cfg)), Err(Error::Config(_))));
    }

    #[test]
    fn baselines_fill_only_missing() {
        let v = Tensor::new(vec![1, 2, 5], vec![1.0, 5.0, 2.0, 9.0, 3.0, 4.0, 4.0, 4.0, 7.0, 4.0]).unwrap();
        let obs = Tensor::new(vec![1, 2, 5], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let med = median_impute(&v, &obs).unwrap();
        assert_eq!(&med.data()[..5], &[3.0, 5.0, 2.0, 3.0, 3.0]);
        // channel without observations falls back to 0
        assert_eq!(&med.data()[5..], &[0.0; 5]);
        let hold = locf_impute(&v, &obs).unwrap();
        assert_eq!(&hold.data()[..5], &[5.0, 5.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rows = [TraceRow {
            iteration: 0,
            loss: 0.5,
            wall_time: 0.25,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,loss,wall_time\n0,0.5,0.250000\n");
    }

    #[test]
    fn quantile_column_names() {
        assert_eq!(level_name(0.05), "q05");
        assert_eq!(level_name(0.5), "q50");
        assert_eq!(level_name(0.025), "q2.5");
    }
}
