//! The SSSD^S4 denoising network.
//!
//! An input projection feeds a stack of residual blocks. Each block adds a
//! per-block projection of the diffusion-step embedding, runs an S4 layer,
//! doubles the channels, adds the projected conditioning, optionally runs a
//! second S4 layer and applies a gated tanh. The blocks' skip outputs are
//! summed and projected back to the input channels.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::ssm::{Direction, S4Layer};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub residual_layers: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub embed_dims: [usize; 3],
    pub state_dim: usize,
    pub bidirectional: bool,
    pub second_s4: bool,
    /// Filled from the data when left at 0 in a run configuration.
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub length: usize,
}

impl ModelConfig {
    /// Published full-size configuration.
    pub fn reference(in_channels: usize, length: usize) -> Self {
        Self {
            residual_layers: 36,
            residual_channels: 256,
            skip_channels: 256,
            embed_dims: [128, 512, 512],
            state_dim: 64,
            bidirectional: true,
            second_s4: true,
            in_channels,
            length,
        }
    }

    /// Reduced configuration that trains on a CPU in minutes.
    pub fn desk(in_channels: usize, length: usize) -> Self {
        Self {
            residual_layers: 4,
            residual_channels: 64,
            skip_channels: 64,
            embed_dims: [64, 128, 128],
            state_dim: 16,
            ..Self::reference(in_channels, length)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("residual_layers", self.residual_layers),
            ("residual_channels", self.residual_channels),
            ("skip_channels", self.skip_channels),
            ("embed_dims[1]", self.embed_dims[1]),
            ("embed_dims[2]", self.embed_dims[2]),
            ("state_dim", self.state_dim),
            ("in_channels", self.in_channels),
            ("length", self.length),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.embed_dims[0] < 4 || self.embed_dims[0] % 2 != 0 {
            return Err(Error::Config(format!(
                "step embedding width {} must be even and at least 4",
                self.embed_dims[0]
            )));
        }
        Ok(())
    }

    fn direction(&self) -> Direction {
        if self.bidirectional {
            Direction::Bidirectional
        } else {
            Direction::Forward
        }
    }
}

/// Sinusoidal encoding of diffusion steps: `[B, d]`, sines then cosines at
/// geometric frequencies from 1 down to 1e-4.
pub fn step_encoding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let rate = (10_000f64).ln() / (half - 1) as f64;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let phases: Vec<f64> = (0..half).map(|j| t as f64 * (-rate * j as f64).exp()).collect();
        out.extend(phases.iter().map(|p| p.sin()));
        out.extend(phases.iter().map(|p| p.cos()));
    }
    Tensor::from_parts(vec![steps.len(), dim], out)
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

impl Affine {
    /// Weight `[out, in]` with standard deviation `gain / sqrt(in)`, zero bias.
    fn new(store: &mut ParamStore, name: &str, out: usize, inp: usize, gain: f64, rng: &mut SeededRng) -> Self {
        let std = gain / (inp as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::from_fn(&[out, inp], |_| std * rng.normal())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    fn zeroed(store: &mut ParamStore, name: &str, out: usize, inp: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[out, inp])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    fn linear<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p[self.weight], p[self.bias])
    }

    fn conv<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1x1(p[self.weight], p[self.bias])
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    step_proj: Affine,
    s4_a: S4Layer,
    widen: Affine,
    cond_proj: Affine,
    s4_b: Option<S4Layer>,
    res_out: Affine,
    skip_out: Affine,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let c = cfg.residual_channels;
        let step_proj = Affine::new(store, &format!("{prefix}.step_proj"), c, cfg.embed_dims[2], 1.0, rng);
        let s4_a = S4Layer::new(store, &format!("{prefix}.s4_a"), c, cfg.state_dim, cfg.direction(), rng)?;
        let widen = Affine::new(store, &format!("{prefix}.widen"), 2 * c, c, RELU_GAIN, rng);
        let cond_proj = Affine::new(store, &format!("{prefix}.cond_proj"), 2 * c, 2 * cfg.in_channels, RELU_GAIN, rng);
        let s4_b = if cfg.second_s4 {
            Some(S4Layer::new(store, &format!("{prefix}.s4_b"), 2 * c, cfg.state_dim, cfg.direction(), rng)?)
        } else {
            None
        };
        let res_out = Affine::new(store, &format!("{prefix}.res_out"), c, c, RELU_GAIN, rng);
        let skip_out = Affine::new(store, &format!("{prefix}.skip_out"), cfg.skip_channels, c, RELU_GAIN, rng);
        Ok(Self {
            step_proj,
            s4_a,
            widen,
            cond_proj,
            s4_b,
            res_out,
            skip_out,
        })
    }

    /// `h: [B, C, L]`, `embed: [B, d3]`, `cond: [B, 2K, L]`; returns the
    /// next hidden state and the skip output.
    pub fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>, embed: Var<'t>, cond: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let x = h.add_channel_bias(self.step_proj.linear(p, embed)?)?;
        let x = self.s4_a.forward(p, x)?;
        let x = self.widen.conv(p, x)?;
        let mut x = x.add(self.cond_proj.conv(p, cond)?)?;
        if let Some(s4) = &self.s4_b {
            x = s4.forward(p, x)?;
        }
        let gated = x.gated_tanh()?;
        let res = self.res_out.conv(p, gated)?;
        let skip = self.skip_out.conv(p, gated)?;
        Ok((h.add(res)?, skip))
    }

    pub fn cond_projection(&self) -> (ParamId, ParamId) {
        (self.cond_proj.weight, self.cond_proj.bias)
    }
}

#[derive(Clone, Debug)]
pub struct SssdModel {
    config: ModelConfig,
    store: ParamStore,
    input: Affine,
    embed: [Affine; 2],
    blocks: Vec<ResidualBlock>,
    skip_proj: Affine,
    output: Affine,
}

impl SssdModel {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let [d1, d2, d3] = config.embed_dims;
        let (k, c, s) = (config.in_channels, config.residual_channels, config.skip_channels);
        let input = Affine::new(&mut store, "input", c, k, RELU_GAIN, rng);
        let embed = [
            Affine::new(&mut store, "embed.0", d2, d1, 1.0, rng),
            Affine::new(&mut store, "embed.1", d3, d2, 1.0, rng),
        ];
        let blocks = (0..config.residual_layers)
            .map(|i| ResidualBlock::new(&mut store, &format!("block.{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let skip_proj = Affine::new(&mut store, "skip_proj", s, s, RELU_GAIN, rng);
        let output = Affine::zeroed(&mut store, "output", k, s);
        Ok(Self {
            config,
            store,
            input,
            embed,
            blocks,
            skip_proj,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    /// `[B, d3]` step embedding.
    pub fn embedding<'t>(&self, p: &Bound<'t>, steps: &[usize]) -> Result<Var<'t>> {
        let tape = p.vars()[0].tape();
        let enc = tape.constant(step_encoding(steps, self.config.embed_dims[0]));
        let e = self.embed[0].linear(p, enc)?.swish()?;
        self.embed[1].linear(p, e)?.swish()
    }

    fn check_shapes(&self, x: &[usize], steps: usize, c: &[usize]) -> Result<()> {
        let k = self.config.in_channels;
        let ok = matches!(x, [b, kk, l] if *kk == k && *b == steps && *l >= 1)
            && c.len() == 3
            && c[0] == x[0]
            && c[1] == 2 * k
            && c[2] == x[2];
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "sssd_forward",
                format!("x {x:?}, {steps} steps, cond {c:?} for {k} channels"),
            ))
        }
    }
}

impl Denoiser for SssdModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward<'t>(&self, p: &Bound<'t>, x_t: Var<'t>, steps: &[usize], cond: Var<'t>) -> Result<Var<'t>> {
        self.check_shapes(&x_t.shape(), steps.len(), &cond.shape())?;
        let embed = self.embedding(p, steps)?;
        let mut h = self.input.conv(p, x_t)?.relu()?;
        let mut skips: Option<Var<'t>> = None;
        for block in &self.blocks {
            let (next, skip) = block.forward(p, h, embed, cond)?;
            h = next;
            skips = Some(match skips {
                Some(acc) => acc.add(skip)?,
                None => skip,
            });
        }
        let total = skips
            .expect("validated config has at least one block")
            .scale(1.0 / (self.blocks.len() as f64).sqrt())?;
        let y = self.skip_proj.conv(p, total)?.relu()?;
        self.output.conv(p, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};

    fn tiny() -> ModelConfig {
        ModelConfig {
            residual_layers: 2,
            residual_channels: 8,
            skip_channels: 8,
            embed_dims: [8, 16, 16],
            state_dim: 4,
            bidirectional: true,
            second_s4: true,
            in_channels: 2,
            length: 16,
        }
    }

    fn randomize(store: &mut ParamStore, rng: &mut SeededRng) {
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }

    fn run(model: &SssdModel, x: &Tensor, steps: &[usize], c: &Tensor) -> Tensor {
        let tape = Tape::new();
        let p = model.store().bind(&tape, false);
        let y = model.forward(&p, tape.constant(x.clone()), steps, tape.constant(c.clone())).unwrap();
        let v = y.value().clone();
        v
    }

    fn inputs(rng: &mut SeededRng, b: usize, k: usize, l: usize) -> (Tensor, Tensor) {
        (
            Tensor::from_fn(&[b, k, l], |_| rng.normal()),
            Tensor::from_fn(&[b, 2 * k, l], |_| rng.normal()),
        )
    }

    #[test]
    fn encoding_at_zero() {
        let e = step_encoding(&[0], 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_is_injective_and_deterministic() {
        let model = SssdModel::new(ModelConfig::desk(2, 16), &mut SeededRng::new(1)).unwrap();
        let steps: Vec<usize> = (0..200).collect();
        let tape = Tape::new();
        let p = model.store().bind(&tape, false);
        let e = model.embedding(&p, &steps).unwrap().value().clone();
        let again = model.embedding(&p, &steps).unwrap().value().clone();
        assert_eq!(e, again);
        let d = model.config().embed_dims[2];
        let rows: Vec<&[f64]> = e.data().chunks(d).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let diff = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff > 1e-9, "steps {i} and {j} collide");
            }
        }
    }

    #[test]
    fn desk_shapes_and_zero_output() {
        let model = SssdModel::new(ModelConfig::desk(4, 64), &mut SeededRng::new(2)).unwrap();
        let (x, c) = inputs(&mut SeededRng::new(3), 2, 4, 64);
        let y = run(&model, &x, &[3, 7], &c);
        assert_eq!(y.shape(), &[2, 4, 64]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let model = SssdModel::new(tiny(), &mut SeededRng::new(2)).unwrap();
        let tape = Tape::new();
        let p = model.store().bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 16]));
        let c = tape.constant(Tensor::zeros(&[1, 6, 16]));
        assert!(model.forward(&p, x, &[0], c).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 2, 16]));
        let c = tape.constant(Tensor::zeros(&[1, 4, 16]));
        assert!(model.forward(&p, x, &[0, 1], c).is_err());
        let mut bad = tiny();
        bad.embed_dims[0] = 7;
        assert!(SssdModel::new(bad, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut model = SssdModel::new(tiny(), &mut SeededRng::new(4)).unwrap();
        for t in model.store_mut().tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut rng = SeededRng::new(5);
        let tape = Tape::new();
        let p = model.store().bind(&tape, false);
        let h = Tensor::from_fn(&[2, 8, 16], |_| rng.normal());
        let e = model.embedding(&p, &[1, 2]).unwrap();
        let c = tape.constant(Tensor::from_fn(&[2, 4, 16], |_| rng.normal()));
        let (next, skip) = model.blocks()[0].forward(&p, tape.constant(h.clone()), e, c).unwrap();
        assert_eq!(*next.value(), h);
        assert!(skip.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_sensitivity() {
        let mut rng = SeededRng::new(6);
        let mut model = SssdModel::new(tiny(), &mut rng).unwrap();
        randomize(model.store_mut(), &mut rng);
        let (x, c) = inputs(&mut rng, 1, 2, 16);
        let mut c2 = c.clone();
        c2.data_mut()[5] += 1.0;
        assert!(run(&model, &x, &[4], &c).max_abs_diff(&run(&model, &x, &[4], &c2)) > 1e-9);
        let ids: Vec<_> = model.blocks().iter().map(|b| b.cond_projection()).collect();
        for (w, b) in ids {
            model.store_mut().get_mut(w).data_mut().fill(0.0);
            model.store_mut().get_mut(b).data_mut().fill(0.0);
        }
        assert_eq!(run(&model, &x, &[4], &c), run(&model, &x, &[4], &c2));
    }

    #[test]
    fn single_s4_variant_has_fewer_params() {
        let c = ModelConfig::desk(4, 128);
        let b = ModelConfig { second_s4: false, ..c.clone() };
        let pc = SssdModel::new(c, &mut SeededRng::new(1)).unwrap().store().scalar_count();
        let pb = SssdModel::new(b, &mut SeededRng::new(1)).unwrap().store().scalar_count();
        // one second S4 layer per block, over 128 channels, bidirectional, N = 16
        let h = 128;
        assert_eq!(pc - pb, 4 * (2 * h * (16 + 1) + h + 2 * h + h * h + h));
    }

    fn expected_count(cfg: &ModelConfig) -> usize {
        let s4 = |h: usize| {
            let dirs = if cfg.bidirectional { 2 } else { 1 };
            let proj = if cfg.bidirectional { h * h + h } else { 0 };
            dirs * h * (cfg.state_dim + 1) + h + 2 * h + proj
        };
        let aff = |o: usize, i: usize| o * i + o;
        let (k, c, s) = (cfg.in_channels, cfg.residual_channels, cfg.skip_channels);
        let [d1, d2, d3] = cfg.embed_dims;
        let block = aff(c, d3)
            + s4(c)
            + aff(2 * c, c)
            + aff(2 * c, 2 * k)
            + if cfg.second_s4 { s4(2 * c) } else { 0 }
            + aff(c, c)
            + aff(s, c);
        aff(c, k) + aff(d2, d1) + aff(d3, d2) + cfg.residual_layers * block + aff(s, s) + aff(k, s)
    }

    #[test]
    fn reference_parameter_count() {
        let cfg = ModelConfig::reference(14, 100);
        let count = SssdModel::new(cfg.clone(), &mut SeededRng::new(0)).unwrap().store().scalar_count();
        assert_eq!(count, expected_count(&cfg));
        assert_eq!(count, 30_639_630);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(7);
        let mut model = SssdModel::new(tiny(), &mut rng).unwrap();
        randomize(model.store_mut(), &mut rng);
        let (x, c) = inputs(&mut rng, 1, 2, 16);
        let r = Tensor::from_fn(&[1, 2, 16], |_| rng.normal());
        let params = model.store().tensors().to_vec();
        // a late step keeps every sinusoid away from zero, so no embedding
        // gradient sinks into finite-difference roundoff
        let errs = gradcheck::per_input(&params, 1e-5, |tape, v| {
            let p = Bound::from_vars(v.to_vec());
            let y = model.forward(&p, tape.constant(x.clone()), &[150], tape.constant(c.clone()))?;
            y.mul(tape.constant(r.clone()))?.sum()
        })
        .unwrap();
        for (name, e) in model.store().names().iter().zip(&errs) {
            assert!(*e < 1e-4, "{name}: {e}");
        }
    }
}
