//! Conditional flow-matching policy over scene layouts.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data); the interpolation
//! path is `x_t = (1 - t)·x_0 + t·x_1` with `x_1 ~ N(0, I)`, so the target
//! velocity is `x_1 - x_0` and sampling integrates with negative `Δt`.
//!
//! The stochastic sampler is the Euler-Maruyama discretization
//!
//! ```text
//! x_next = x + [v + σ²/(2t)·(x + (1 - t)·v)]·Δt + σ·sqrt(|Δt|)·ε
//! ```
//!
//! which shares its per-time marginals with the deterministic ODE `dx = v dt`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{Adam, GradBundle, MlpParams, RngStream, Tensor2};
use crate::scene::{embed_prompt, embed_scene, prompt_embedding_dim, Scene, SpatialPrompt};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A (possibly analytic) velocity field `v(x, t | cond)`.
pub trait VelocityField: Sync {
    fn state_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>>;
}

/// MLP mapping `[x ⊕ t ⊕ prompt features]` to a velocity over `2K` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub mlp: MlpParams,
    pub k_objects: usize,
    pub n_classes: usize,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

impl VelocityNet {
    pub fn input_dim(k_objects: usize, n_classes: usize) -> usize {
        2 * k_objects + 1 + prompt_embedding_dim(k_objects, n_classes)
    }

    pub fn new(k_objects: usize, n_classes: usize, hidden: &[usize], stream: &mut RngStream) -> Result<Self> {
        let mut dims = vec![Self::input_dim(k_objects, n_classes)];
        dims.extend_from_slice(hidden);
        dims.push(2 * k_objects);
        Ok(Self {
            mlp: MlpParams::random(&dims, stream)?,
            k_objects,
            n_classes,
        })
    }

    pub fn from_mlp(mlp: MlpParams, k_objects: usize, n_classes: usize) -> Result<Self> {
        if mlp.input_dim() != Self::input_dim(k_objects, n_classes) || mlp.output_dim() != 2 * k_objects {
            return Err(LabError::Shape(format!(
                "velocity network dims {:?} do not fit k={k_objects}, classes={n_classes}",
                mlp.dims()
            )));
        }
        Ok(Self {
            mlp,
            k_objects,
            n_classes,
        })
    }

    pub fn condition(&self, prompt: &SpatialPrompt) -> Vec<f64> {
        embed_prompt(prompt, self.n_classes)
    }

    pub fn net_input(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        if x.len() != 2 * self.k_objects {
            return Err(LabError::Shape(format!(
                "state dim {} for {} objects",
                x.len(),
                self.k_objects
            )));
        }
        let mut input = Vec::with_capacity(self.mlp.input_dim());
        input.extend_from_slice(x);
        input.push(t);
        input.extend_from_slice(cond);
        Ok(input)
    }
}

impl VelocityField for VelocityNet {
    fn state_dim(&self) -> usize {
        2 * self.k_objects
    }

    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(&self.net_input(x, t, cond)?)
    }
}

/// Exact velocity when data and noise are both independent standard normals
/// in `dim` dimensions: `v(x, t) = (2t - 1) / ((1 - t)² + t²) · x`.
#[derive(Debug, Clone, Copy)]
pub struct LinearGaussianVelocity {
    pub dim: usize,
}

impl VelocityField for LinearGaussianVelocity {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64, _cond: &[f64]) -> Result<Vec<f64>> {
        let gain = (2.0 * t - 1.0) / ((1.0 - t).powi(2) + t * t);
        Ok(x.iter().map(|xi| gain * xi).collect())
    }
}

// ---------------------------------------------------------------------------
// Low-rank adaptation

/// Trainable `W₀ + (α/r)·B·A` deltas for every layer of a base network.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub alpha: f64,
    /// Per layer: `A` is `r × in`, `B` is `out × r`.
    pub factors: Vec<(Tensor2, Tensor2)>,
}

impl LowRankAdapter {
    /// Gaussian `A` (std `1/sqrt(in)`), zero `B`, so the adapted network starts
    /// equal to the base.
    pub fn new(base: &MlpParams, rank: usize, alpha: f64, stream: &mut RngStream) -> Result<Self> {
        if rank == 0 {
            return Err(LabError::Config("adapter rank must be positive".into()));
        }
        let factors = base
            .layers()
            .iter()
            .map(|l| {
                let scale = 1.0 / (l.in_dim() as f64).sqrt();
                let a = Tensor2::from_fn(rank, l.in_dim(), |_, _| stream.gauss() * scale);
                let b = Tensor2::zeros(l.out_dim(), rank);
                (a, b)
            })
            .collect();
        Ok(Self { rank, alpha, factors })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Flat parts `[A0, B0, A1, B1, ...]`.
    pub fn parts(&self) -> Vec<&[f64]> {
        self.factors.iter().flat_map(|(a, b)| [a.data(), b.data()]).collect()
    }

    pub fn parts_mut(&mut self) -> Vec<&mut [f64]> {
        self.factors
            .iter_mut()
            .flat_map(|(a, b)| [a.data_mut(), b.data_mut()])
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.parts().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.parts().iter().map(|p| p.len()).sum();
        if flat.len() != total {
            return Err(LabError::Shape(format!("adapter expects {total} values, got {}", flat.len())));
        }
        let mut off = 0;
        for p in self.parts_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }

    fn check(&self, base: &MlpParams) -> Result<()> {
        let ok = self.factors.len() == base.layers().len()
            && self.factors.iter().zip(base.layers()).all(|((a, b), l)| {
                a.rows() == self.rank
                    && a.cols() == l.in_dim()
                    && b.rows() == l.out_dim()
                    && b.cols() == self.rank
            });
        if ok {
            Ok(())
        } else {
            Err(LabError::Shape("adapter does not match base network".into()))
        }
    }

    /// Network with effective weights `W₀ + (α/r)·B·A`; `base` is not modified.
    pub fn merged(&self, base: &MlpParams) -> Result<MlpParams> {
        self.check(base)?;
        let mut out = base.clone();
        let s = self.scale();
        for (layer, (a, b)) in out.layers_mut().iter_mut().zip(&self.factors) {
            let delta = b.matmul(a)?;
            for (w, d) in layer.weight.data_mut().iter_mut().zip(delta.data()) {
                *w += s * d;
            }
        }
        Ok(out)
    }

    /// Converts gradients w.r.t. the merged network into adapter gradients:
    /// `dA = s·Bᵀ·dW`, `dB = s·dW·Aᵀ`. Bias gradients are dropped (biases are frozen).
    pub fn project_grads(&self, base: &MlpParams, full: &GradBundle) -> Result<GradBundle> {
        self.check(base)?;
        if full.parts.len() != 2 * self.factors.len() {
            return Err(LabError::Shape("gradient bundle does not match network".into()));
        }
        let s = self.scale();
        let mut parts = Vec::with_capacity(2 * self.factors.len());
        for (l, (a, b)) in self.factors.iter().enumerate() {
            let dw = Tensor2::from_vec(b.rows(), a.cols(), full.parts[2 * l].clone())?;
            let mut da = b.transpose().matmul(&dw)?;
            let mut db = dw.matmul(&a.transpose())?;
            da.data_mut().iter_mut().for_each(|v| *v *= s);
            db.data_mut().iter_mut().for_each(|v| *v *= s);
            parts.push(da.data().to_vec());
            parts.push(db.data().to_vec());
        }
        Ok(GradBundle { parts })
    }
}

pub fn apply_adapter(net: &VelocityNet, adapter: &LowRankAdapter) -> Result<VelocityNet> {
    Ok(VelocityNet {
        mlp: adapter.merged(&net.mlp)?,
        k_objects: net.k_objects,
        n_classes: net.n_classes,
    })
}

// ---------------------------------------------------------------------------
// Schedules and stepping

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeSchedule {
    pub steps: usize,
    /// Noise level `a` in `σ_t = a·sqrt(t / (1 - t))`.
    pub noise_level: f64,
    pub t_min: f64,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        Self::train()
    }
}

impl SdeSchedule {
    pub fn train() -> Self {
        Self {
            steps: 6,
            noise_level: 0.7,
            t_min: 1e-3,
        }
    }

    pub fn eval() -> Self {
        Self {
            steps: 10,
            ..Self::train()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(LabError::Config(format!("schedule needs >= 2 steps, got {}", self.steps)));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(LabError::Config(format!("noise level {} invalid", self.noise_level)));
        }
        if !(self.t_min > 0.0 && self.t_min < 0.5) {
            return Err(LabError::Config(format!("t_min {} outside (0, 0.5)", self.t_min)));
        }
        Ok(())
    }

    /// Uniform grid `t_0 = 1 - t_min > t_1 > ... > t_T = t_min`.
    pub fn grid(&self) -> Vec<f64> {
        let hi = 1.0 - self.t_min;
        let span = 1.0 - 2.0 * self.t_min;
        (0..=self.steps)
            .map(|k| {
                if k == self.steps {
                    self.t_min
                } else {
                    hi - span * k as f64 / self.steps as f64
                }
            })
            .collect()
    }

    /// Injected noise level at time `t` for a step of size `dt`.
    ///
    /// `t` is clamped to `[t_min, 1 - max(t_min, |dt|)]` before evaluating
    /// `a·sqrt(t/(1-t))`: near `t = 1` the ratio blows up, and a coarse
    /// Euler-Maruyama step there would amplify the state instead of denoising it.
    pub fn sigma(&self, t: f64, dt: f64) -> f64 {
        let upper = 1.0 - self.t_min.max(dt.abs());
        let tc = t.clamp(self.t_min, upper.max(self.t_min));
        self.noise_level * (tc / (1.0 - tc)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub next: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// `∂mean/∂v` per coordinate: `(1 + σ²(1 - t)/(2t))·Δt`.
pub fn mean_velocity_gain(t: f64, dt: f64, sigma: f64) -> f64 {
    (1.0 + sigma * sigma * (1.0 - t) / (2.0 * t)) * dt
}

/// Euler-Maruyama transition mean for a given velocity.
pub fn transition_mean(x: &[f64], v: &[f64], t: f64, dt: f64, sigma: f64) -> Vec<f64> {
    let c = sigma * sigma / (2.0 * t);
    x.iter()
        .zip(v)
        .map(|(&xi, &vi)| xi + (vi + c * (xi + (1.0 - t) * vi)) * dt)
        .collect()
}

fn check_step(t: f64, dt: f64, sigma: f64, t_min: f64) -> Result<()> {
    if !(t >= t_min && t <= 1.0 - t_min) {
        return Err(LabError::Domain(format!("t = {t} outside [{t_min}, {}]", 1.0 - t_min)));
    }
    if !(dt < 0.0) {
        return Err(LabError::Domain(format!("sampling step must be negative, got {dt}")));
    }
    if !(sigma >= 0.0) {
        return Err(LabError::Domain(format!("sigma must be non-negative, got {sigma}")));
    }
    Ok(())
}

/// One stochastic step from `x` at time `t`; `eps` is the standard-normal draw.
#[allow(clippy::too_many_arguments)]
pub fn sde_step<F: VelocityField + ?Sized>(
    field: &F,
    cond: &[f64],
    x: &[f64],
    t: f64,
    dt: f64,
    sigma: f64,
    eps: &[f64],
    t_min: f64,
) -> Result<StepOutput> {
    check_step(t, dt, sigma, t_min)?;
    if eps.len() != x.len() {
        return Err(LabError::Shape(format!("noise dim {} for state dim {}", eps.len(), x.len())));
    }
    let v = field.velocity(x, t, cond)?;
    let mean = transition_mean(x, &v, t, dt, sigma);
    let std = sigma * dt.abs().sqrt();
    let next = mean.iter().zip(eps).map(|(m, e)| m + std * e).collect();
    Ok(StepOutput { next, mean, std })
}

/// Sum over coordinates of `ln N(x; mean, std²)`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(LabError::Domain(format!("density undefined for std {std}")));
    }
    let inv_var = 1.0 / (std * std);
    let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    let d = x.len() as f64;
    Ok(-0.5 * sq * inv_var - d * std.ln() - 0.5 * d * LN_2PI)
}

/// Log-density of the transition `x_t -> x_next` under `field`.
#[allow(clippy::too_many_arguments)]
pub fn transition_logprob<F: VelocityField + ?Sized>(
    field: &F,
    cond: &[f64],
    x_t: &[f64],
    x_next: &[f64],
    t: f64,
    dt: f64,
    sigma: f64,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(LabError::Domain("transition density undefined at sigma = 0".into()));
    }
    let v = field.velocity(x_t, t, cond)?;
    let mean = transition_mean(x_t, &v, t, dt, sigma);
    gaussian_logpdf(x_next, &mean, sigma * dt.abs().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub sigma: f64,
    /// Transition mean under the sampling policy.
    pub mean: Vec<f64>,
    pub eps: Vec<f64>,
}

impl StepRecord {
    pub fn std(&self) -> f64 {
        self.sigma * self.dt.abs().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `T + 1` states, from the initial noise to the raw final sample.
    pub states: Vec<Vec<f64>>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    /// The final state clipped into the unit square.
    pub fn scene(&self, prompt: &SpatialPrompt) -> Result<Scene> {
        Scene::from_flat_clamped(prompt.class_slots(), self.final_state())
    }

    /// Log-density of step `k` under the sampling policy.
    pub fn recorded_logprob(&self, k: usize) -> Result<f64> {
        let s = &self.steps[k];
        gaussian_logpdf(&self.states[k + 1], &s.mean, s.std())
    }
}

/// Integrates from `x ~ N(0, I)` at `t = 1 - t_min` down to `t_min`.
///
/// Draws `dim` normals for the start and `dim` per step (`WORDS_PER_GAUSS`
/// words each).
pub fn sde_sample<F: VelocityField + ?Sized>(
    field: &F,
    cond: &[f64],
    schedule: &SdeSchedule,
    stream: &mut RngStream,
) -> Result<Trajectory> {
    schedule.validate()?;
    let dim = field.state_dim();
    let start = stream.gauss_draw(dim);
    sde_sample_from(field, cond, schedule, start, stream)
}

pub fn sde_sample_from<F: VelocityField + ?Sized>(
    field: &F,
    cond: &[f64],
    schedule: &SdeSchedule,
    start: Vec<f64>,
    stream: &mut RngStream,
) -> Result<Trajectory> {
    schedule.validate()?;
    let grid = schedule.grid();
    let dim = start.len();
    let mut states = Vec::with_capacity(schedule.steps + 1);
    let mut steps = Vec::with_capacity(schedule.steps);
    states.push(start);
    for k in 0..schedule.steps {
        let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
        let sigma = schedule.sigma(t, dt);
        let eps = stream.gauss_draw(dim);
        let out = sde_step(field, cond, &states[k], t, dt, sigma, &eps, schedule.t_min)?;
        if out.next.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite(format!("trajectory state at step {k}")));
        }
        steps.push(StepRecord {
            t,
            dt,
            sigma,
            mean: out.mean,
            eps,
        });
        states.push(out.next);
    }
    Ok(Trajectory { states, steps })
}

/// Deterministic Euler integration of `dx = v dt` on the same grid.
pub fn ode_sample<F: VelocityField + ?Sized>(
    field: &F,
    cond: &[f64],
    schedule: &SdeSchedule,
    start: Vec<f64>,
) -> Result<Vec<Vec<f64>>> {
    schedule.validate()?;
    let grid = schedule.grid();
    let mut states = vec![start];
    for k in 0..schedule.steps {
        let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
        let x = &states[k];
        let v = field.velocity(x, t, cond)?;
        states.push(x.iter().zip(&v).map(|(xi, vi)| xi + vi * dt).collect());
    }
    Ok(states)
}

// ---------------------------------------------------------------------------
// Pretraining

/// One conditional flow-matching example: prompt features and a data layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowExample {
    pub cond: Vec<f64>,
    pub x0: Vec<f64>,
}

impl FlowExample {
    pub fn new(net: &VelocityNet, prompt: &SpatialPrompt, scene: &Scene) -> Self {
        Self {
            cond: net.condition(prompt),
            x0: embed_scene(scene),
        }
    }
}

/// Flow-matching loss and parameter gradient for a batch with explicit noise
/// and times. `noise[i]` is `x_1` for example `i`.
pub fn fm_loss_with(
    net: &VelocityNet,
    batch: &[FlowExample],
    noise: &[Vec<f64>],
    times: &[f64],
) -> Result<(f64, GradBundle)> {
    if batch.is_empty() {
        return Err(LabError::Domain("flow-matching batch is empty".into()));
    }
    let mut grads = GradBundle::zeros_like(&net.mlp);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    for ((ex, x1), &t) in batch.iter().zip(noise).zip(times) {
        let xt: Vec<f64> = ex.x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let target: Vec<f64> = ex.x0.iter().zip(x1).map(|(a, b)| b - a).collect();
        let trace = net.mlp.forward_trace(&net.net_input(&xt, t, &ex.cond)?)?;
        let resid: Vec<f64> = trace.output().iter().zip(&target).map(|(v, y)| v - y).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>() * inv_b;
        let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r * inv_b).collect();
        net.mlp.backward_accumulate(&trace, &upstream, &mut grads)?;
    }
    Ok((loss, grads))
}

/// One Adam step on `E‖v(x_t, t, c) − (x_1 − x_0)‖²` with fresh noise and times.
pub fn fm_pretrain_step(
    net: &mut VelocityNet,
    adam: &mut Adam,
    batch: &[FlowExample],
    lr: f64,
    t_min: f64,
    stream: &mut RngStream,
) -> Result<f64> {
    let noise: Vec<Vec<f64>> = batch.iter().map(|ex| stream.gauss_draw(ex.x0.len())).collect();
    let times: Vec<f64> = batch.iter().map(|_| stream.uniform_in(t_min, 1.0 - t_min)).collect();
    let (loss, grads) = fm_loss_with(net, batch, &noise, &times)?;
    if !loss.is_finite() {
        return Err(LabError::NonFinite("flow-matching loss".into()));
    }
    adam.step(net.mlp.parts_mut(), &grads, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub t_min: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            t_min: 1e-3,
        }
    }
}

/// Runs `config.steps` flow-matching steps from `net`'s current weights on
/// minibatches drawn with replacement. Step `s` uses `stream.derive(s)`.
pub fn fm_pretrain(
    net: &mut VelocityNet,
    adam: &mut Adam,
    data: &[FlowExample],
    config: &PretrainConfig,
    start_step: usize,
    stream: &RngStream,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    if data.is_empty() || config.batch_size == 0 {
        return Err(LabError::Config("pretraining needs data and a positive batch size".into()));
    }
    for step in start_step..config.steps {
        let mut s = stream.derive(step as u64);
        let batch: Vec<FlowExample> = (0..config.batch_size).map(|_| data[s.index(data.len())].clone()).collect();
        let loss = fm_pretrain_step(net, adam, &batch, config.lr, config.t_min, &mut s)?;
        on_step(step, loss);
    }
    Ok(())
}
