//! Conditional denoising diffusion in pixel space.
//!
//! The forward process mixes a clean image with Gaussian noise,
//! `z_s = √ᾱ_s · z0 + √(1−ᾱ_s) · ε`, where `ᾱ_s` is the running product of the
//! per-step retention factors. The denoiser is an MLP that sees the noisy
//! image, a sinusoidal timestep embedding and the frozen encoder embedding of
//! the clean image, and predicts `z0` directly. Reconstruction noises an input
//! part way and walks back with deterministic (η = 0) updates.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::encoder::{EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::params::{AdamConfig, Checkpoint, ParamStore};
use crate::rng::{rng_from, Rng};
use crate::synth::{ImageGrid, LabeledSample, IMAGE_PIXELS};
use crate::tensor::{mse_loss, Tensor};

const DENOISER_PREFIX: &str = "denoiser";
/// Predictions are squashed into (−GUARD, GUARD) by `GUARD·tanh(x/GUARD)`.
pub const OUTPUT_GUARD: f32 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::domain(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::domain(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    /// Number of timesteps `S`; valid timesteps are `1..=S`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alphas[s - 1]
    }

    /// `ᾱ_s`, with `ᾱ_0 = 1` for the clean image.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bars[s - 1]
        }
    }

    fn check_timestep(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::domain(format!("timestep {s} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

/// Applies the forward process to `z0` at timestep `s` with noise `eps`.
/// No clamping is applied.
pub fn forward_noise(schedule: &NoiseSchedule, z0: &[f32], s: usize, eps: &[f32]) -> Result<Vec<f32>> {
    schedule.check_timestep(s)?;
    if z0.len() != eps.len() {
        return Err(Error::Dimension {
            op: "forward_noise",
            left: vec![z0.len()],
            right: vec![eps.len()],
        });
    }
    let ab = schedule.alpha_bar(s);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (signal * x as f64 + noise * e as f64) as f32)
        .collect())
}

/// Noise implied by a prediction: `ε̂ = (z_s − √ᾱ_s·x̂0) / √(1−ᾱ_s)`.
pub fn implied_noise(schedule: &NoiseSchedule, z_s: &[f32], x0_hat: &[f32], s: usize) -> Result<Vec<f32>> {
    schedule.check_timestep(s)?;
    let ab = schedule.alpha_bar(s);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_s
        .iter()
        .zip(x0_hat)
        .map(|(&z, &x)| ((z as f64 - signal * x as f64) / noise) as f32)
        .collect())
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Sinusoidal embedding of an integer timestep: `dim/2` sines followed by
/// `dim/2` cosines at geometrically spaced frequencies.
pub fn timestep_embedding(s: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = s as f64 * freq;
        out[k] = arg.sin() as f32;
        out[half + k] = arg.cos() as f32;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Independent (timestep, noise) draws per training image per epoch.
    pub draws_per_image: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            hidden: vec![256, 256],
            time_dim: 32,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            draws_per_image: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("denoiser hidden widths must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("timestep embedding width must be even and positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.draws_per_image == 0 {
            return Err(Error::Config("denoiser epochs, batch size and draws must be positive".into()));
        }
        AdamConfig::with_lr(self.learning_rate)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    store: ParamStore,
    net: Mlp,
    time_dim: usize,
    cond_dim: usize,
}

impl Denoiser {
    pub fn init(cfg: &DenoiserConfig, cond_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![IMAGE_PIXELS + cfg.time_dim + cond_dim];
        widths.extend(&cfg.hidden);
        widths.push(IMAGE_PIXELS);
        let mut rng = rng_from(seed, 0xD1);
        let mut store = ParamStore::new();
        let net = Mlp::init(&mut store, DENOISER_PREFIX, &widths, &mut rng)?;
        Ok(Denoiser {
            store,
            net,
            time_dim: cfg.time_dim,
            cond_dim,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Records the guarded `x̂0` prediction for a batch. `noisy` is `B×256`,
    /// `conditions` is `B×d`.
    pub fn forward(&self, g: &mut Graph, noisy: Tensor, timesteps: &[usize], conditions: Tensor) -> Result<NodeId> {
        let b = timesteps.len();
        if noisy.shape() != [b, IMAGE_PIXELS] || conditions.shape() != [b, self.cond_dim] {
            return Err(Error::Dimension {
                op: "denoiser",
                left: noisy.shape().to_vec(),
                right: conditions.shape().to_vec(),
            });
        }
        let mut temb = Vec::with_capacity(b * self.time_dim);
        for &s in timesteps {
            temb.extend(timestep_embedding(s, self.time_dim));
        }
        let z = g.input(noisy);
        let t = g.input(Tensor::matrix(b, self.time_dim, temb)?);
        let c = g.input(conditions);
        let x = g.concat_cols(&[z, t, c])?;
        let h = self.net.forward(g, &self.store, x)?;
        let squashed = g.scale(h, 1.0 / OUTPUT_GUARD);
        let squashed = g.tanh(squashed)?;
        Ok(g.scale(squashed, OUTPUT_GUARD))
    }

    /// Predicts the clean image from `z_s` at timestep `s`; values lie in
    /// (−1.5, 1.5).
    pub fn predict_x0(&self, z_s: &[f32], s: usize, condition: &EmbeddingVector) -> Result<Vec<f32>> {
        if condition.dim() != self.cond_dim {
            return Err(Error::Dimension {
                op: "predict_x0",
                left: vec![self.cond_dim],
                right: vec![condition.dim()],
            });
        }
        let mut g = Graph::new();
        let out = self.forward(
            &mut g,
            Tensor::matrix(1, z_s.len(), z_s.to_vec())?,
            &[s],
            Tensor::matrix(1, self.cond_dim, condition.as_slice().to_vec())?,
        )?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn to_checkpoint(&self, schedule: &NoiseSchedule, recon: &ReconstructionConfig) -> Checkpoint {
        let mut c = self.store.to_checkpoint();
        c.set_meta("steps", schedule.steps() as f32);
        c.set_meta("beta_start", schedule.beta(1) as f32);
        c.set_meta("beta_end", schedule.beta(schedule.steps()) as f32);
        c.set_meta("s_star", recon.s_star as f32);
        c.set_meta("n_steps", recon.n_steps as f32);
        c.set_meta("time_dim", self.time_dim as f32);
        c.set_meta("cond_dim", self.cond_dim as f32);
        for (i, &w) in self.net.widths().iter().enumerate() {
            c.set_meta(&format!("width.{i}"), w as f32);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.meta(k)
                .ok_or_else(|| Error::format(format!("denoiser checkpoint lacks `{k}`")))
        };
        let time_dim = meta("time_dim")? as usize;
        let cond_dim = meta("cond_dim")? as usize;
        let widths: Vec<usize> = (0..)
            .map_while(|i| ckpt.meta(&format!("width.{i}")))
            .map(|w| w as usize)
            .collect();
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.records {
            if !name.starts_with("meta.") {
                store.add(name.clone(), t.clone())?;
            }
        }
        let net = Mlp::bind(&store, DENOISER_PREFIX, &widths)?;
        Ok(Denoiser {
            store,
            net,
            time_dim,
            cond_dim,
        })
    }
}

/// One training batch: noisy inputs, timesteps, conditions and clean targets.
#[derive(Debug, Clone)]
pub struct DenoiserBatch {
    pub noisy: Tensor,
    pub timesteps: Vec<usize>,
    pub conditions: Tensor,
    pub targets: Tensor,
}

impl DenoiserBatch {
    /// Draws a timestep uniformly from `[1, S]` and fresh noise per item.
    pub fn sample(
        schedule: &NoiseSchedule,
        clean: &[&[f32]],
        conditions: &[&EmbeddingVector],
        rng: &mut Rng,
    ) -> Result<Self> {
        let b = clean.len();
        let d = conditions.first().map(|c| c.dim()).unwrap_or(0);
        let mut noisy = Vec::with_capacity(b * IMAGE_PIXELS);
        let mut targets = Vec::with_capacity(b * IMAGE_PIXELS);
        let mut conds = Vec::with_capacity(b * d);
        let mut timesteps = Vec::with_capacity(b);
        for (x0, c) in clean.iter().zip(conditions) {
            let s = rng.random_range(1..=schedule.steps());
            let eps = standard_normal(rng, x0.len());
            noisy.extend(forward_noise(schedule, x0, s, &eps)?);
            targets.extend_from_slice(x0);
            conds.extend_from_slice(c.as_slice());
            timesteps.push(s);
        }
        Ok(DenoiserBatch {
            noisy: Tensor::matrix(b, IMAGE_PIXELS, noisy)?,
            timesteps,
            conditions: Tensor::matrix(b, d, conds)?,
            targets: Tensor::matrix(b, IMAGE_PIXELS, targets)?,
        })
    }

    /// Records `MSE(x̂0, z0)` for this batch.
    pub fn loss_node(&self, denoiser: &Denoiser, g: &mut Graph) -> Result<NodeId> {
        let pred = denoiser.forward(g, self.noisy.clone(), &self.timesteps, self.conditions.clone())?;
        let target = g.input(self.targets.clone());
        g.mse_loss(pred, target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserCurve {
    pub epoch_losses: Vec<f32>,
}

/// Trains the denoiser on in-distribution samples with conditions taken from
/// the frozen `encoder`. Any OOD-tagged sample is a contract violation.
pub fn train_denoiser(
    train: &[&LabeledSample],
    encoder: &Encoder,
    schedule: &NoiseSchedule,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<(Denoiser, DenoiserCurve)> {
    if let Some(bad) = train.iter().find(|s| !s.is_id()) {
        return Err(Error::contract(format!(
            "denoiser training received a `{}` sample; only in-distribution data is allowed",
            bad.family_tag
        )));
    }
    if train.is_empty() {
        return Err(Error::contract("denoiser training set is empty"));
    }
    let mut denoiser = Denoiser::init(cfg, encoder.embed_dim(), seed)?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let images: Vec<&ImageGrid> = train.iter().map(|s| &s.image).collect();
    let conditions = encoder.encode_images(&images)?;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from(seed, 0xD100 + epoch as u64);
        let mut order: Vec<usize> = (0..train.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.draws_per_image))
            .collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let clean: Vec<&[f32]> = chunk.iter().map(|&i| images[i].pixels()).collect();
            let conds: Vec<&EmbeddingVector> = chunk.iter().map(|&i| &conditions[i]).collect();
            let batch = DenoiserBatch::sample(schedule, &clean, &conds, &mut rng)?;
            let mut g = Graph::new();
            let loss = batch.loss_node(&denoiser, &mut g)?;
            total += g.value(loss).item()? as f64;
            batches += 1;
            g.backward(loss, &mut denoiser.store)?;
            denoiser.store.adam_step(&adam)?;
        }
        epoch_losses.push((total / batches as f64) as f32);
    }
    Ok((denoiser, DenoiserCurve { epoch_losses }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    /// Timestep the input is noised to before walking back.
    pub s_star: usize,
    /// Number of deterministic reverse updates.
    pub n_steps: usize,
    /// Seed of the forward-noise draw.
    pub seed: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            s_star: 50,
            n_steps: 10,
            seed: 0,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.s_star < 1 || self.s_star > schedule.steps() {
            return Err(Error::domain(format!(
                "s_star {} outside [1, {}]",
                self.s_star,
                schedule.steps()
            )));
        }
        if self.n_steps < 1 || self.n_steps > self.s_star {
            return Err(Error::domain(format!(
                "n_steps {} outside [1, s_star = {}]",
                self.n_steps, self.s_star
            )));
        }
        Ok(())
    }

    /// Strictly decreasing timesteps visited by the reverse walk, starting at
    /// `s_star`: `ceil(s_star·(n−i)/n)` for `i = 0..n`.
    pub fn timesteps(&self) -> Vec<usize> {
        let n = self.n_steps;
        (0..n).map(|i| (self.s_star * (n - i)).div_ceil(n)).collect()
    }
}

/// Noises `image` to `s_star` and runs `n_steps` deterministic reverse
/// updates; the final `x̂0`, clamped to [−1, 1], is the reconstruction.
pub fn reconstruct(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    image: &ImageGrid,
    condition: &EmbeddingVector,
    cfg: &ReconstructionConfig,
) -> Result<ImageGrid> {
    cfg.validate(schedule)?;
    let steps = cfg.timesteps();
    let mut rng = rng_from(cfg.seed, 0x5EC0);
    let eps = standard_normal(&mut rng, IMAGE_PIXELS);
    let mut z = forward_noise(schedule, image.pixels(), cfg.s_star, &eps)?;
    let mut x0_hat = Vec::new();
    for (i, &s) in steps.iter().enumerate() {
        x0_hat = denoiser.predict_x0(&z, s, condition)?;
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        if prev == 0 {
            break;
        }
        let eps_hat = implied_noise(schedule, &z, &x0_hat, s)?;
        let ab = schedule.alpha_bar(prev);
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        z = x0_hat
            .iter()
            .zip(&eps_hat)
            .map(|(&x, &e)| (signal * x as f64 + noise * e as f64) as f32)
            .collect();
    }
    ImageGrid::from_clamped(x0_hat)
}

/// Mean squared pixel difference.
pub fn reconstruction_error(original: &ImageGrid, recon: &ImageGrid) -> Result<f32> {
    mse_loss(&original.to_row(), &recon.to_row())
}
