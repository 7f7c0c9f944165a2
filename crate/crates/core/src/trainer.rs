//! Full-batch Adam fitting of an [`InrModel`] to a measured sinogram, and
//! dense-time queries of the fitted model.
//!
//! Each iteration renders every `(x, y, t)` coordinate, evaluates
//! `dc + lambda_d * tv + lambda_l * nuclear` on the rendered Casorati
//! matrix, pushes the image-domain gradient back through the network and
//! takes one Adam step.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardOperator, Sinogram};
use crate::geometry::{ImageGrid, ImageSequence};
use crate::inr::{normalize_times, render, CoordinateBatch, InrModel, DEFAULT_FEATURES, DEFAULT_SIGMA};
use crate::regularizers::{accumulate, dc_loss, nuclear_norm, temporal_tv, LossBreakdown, DEFAULT_TV_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

/// A regularization weight, either fixed or derived from the first
/// iteration's data-consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lambda {
    Fixed(f64),
    Auto(AutoKeyword),
}

impl Lambda {
    pub const AUTO: Lambda = Lambda::Auto(AutoKeyword::Auto);

    /// `factor * dc0 / entries` for `Auto`, where `entries` is the number of
    /// image values (pixels x frames).
    pub fn resolve(self, factor: f64, dc0: f64, entries: usize) -> f64 {
        match self {
            Lambda::Fixed(v) => v,
            Lambda::Auto(_) => factor * dc0 / entries as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Geometric interpolation between `lr_start` and `lr_end`.
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_schedule: LrSchedule,
    pub lambda_d: Lambda,
    pub lambda_l: Lambda,
    /// Multiplier applied when `lambda_d` is `auto`.
    pub lambda_d_auto: f64,
    /// Multiplier applied when `lambda_l` is `auto`.
    pub lambda_l_auto: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Number of Fourier frequencies `L`.
    pub features: usize,
    pub sigma: f64,
    pub tv_epsilon: f64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr_start: 1e-3,
            lr_end: 1e-6,
            lr_schedule: LrSchedule::Exponential,
            lambda_d: Lambda::AUTO,
            lambda_l: Lambda::AUTO,
            lambda_d_auto: 1e-3,
            lambda_l_auto: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            features: DEFAULT_FEATURES,
            sigma: DEFAULT_SIGMA,
            tv_epsilon: DEFAULT_TV_EPSILON,
            log_every: 50,
            checkpoint_every: 0,
            divergence_factor: 10.0,
            divergence_patience: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad(format!("need 0 < lr_end ({}) <= lr_start ({})", self.lr_end, self.lr_start));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} must lie in (0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        for (name, l) in [("lambda_d", self.lambda_d), ("lambda_l", self.lambda_l)] {
            if let Lambda::Fixed(v) = l {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("{name} = {v} must be finite and >= 0"));
                }
            }
        }
        if self.features < 1 || !(self.sigma > 0.0) {
            return bad("features must be >= 1 and sigma > 0".into());
        }
        if !(self.tv_epsilon > 0.0) {
            return bad("tv_epsilon must be positive".into());
        }
        if !(self.divergence_factor > 1.0) || self.divergence_patience < 1 {
            return bad("divergence guard needs factor > 1 and patience >= 1".into());
        }
        Ok(())
    }
}

/// Learning rate at `iteration`: `lr_start * (lr_end / lr_start)^(i / (N - 1))`.
pub fn lr_at(cfg: &TrainConfig, iteration: usize) -> Result<f64> {
    if iteration >= cfg.iterations {
        return Err(Error::InvalidParameter(format!(
            "iteration {iteration} outside a {}-iteration run",
            cfg.iterations
        )));
    }
    if cfg.iterations == 1 {
        return Ok(cfg.lr_start);
    }
    match cfg.lr_schedule {
        LrSchedule::Exponential => {
            let frac = iteration as f64 / (cfg.iterations - 1) as f64;
            Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1, beta2, eps }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "adam state for {} parameters, got {} / {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub dc: f64,
    pub tv: f64,
    pub lr: f64,
    pub total: f64,
    pub learning_rate: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iteration,dc,tv,lr,total,learning_rate";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.iteration, self.dc, self.tv, self.lr, self.total, self.learning_rate
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: InrModel,
    pub log: Vec<LogRow>,
    /// Weights actually used, with `auto` resolved.
    pub lambda_d: f64,
    pub lambda_l: f64,
    pub grid: ImageGrid,
    pub frame_times: Vec<f64>,
}

impl FitResult {
    /// Renders the fitted model at the trained frame times.
    pub fn render_trained(&self) -> Result<ImageSequence> {
        render_at_times(&self.model, &self.grid, &self.frame_times)
    }

    /// Configuration with the resolved regularization weights written in.
    pub fn resolved_config(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lambda_d: Lambda::Fixed(self.lambda_d),
            lambda_l: Lambda::Fixed(self.lambda_l),
            ..cfg.clone()
        }
    }
}

/// Called after every iteration's loss evaluation, before the update.
pub type Observer<'a> = dyn FnMut(&LogRow, &InrModel) -> Result<()> + 'a;

pub fn fit(y: &Sinogram, op: &ForwardOperator, cfg: &TrainConfig) -> Result<FitResult> {
    fit_observed(y, op, cfg, &mut |_, _| Ok(()))
}

pub fn fit_observed(
    y: &Sinogram,
    op: &ForwardOperator,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<FitResult> {
    let model = InrModel::new(cfg.seed, cfg.features, cfg.sigma)?;
    fit_from(model, y, op, cfg, observer)
}

/// Fits starting from an existing model.
pub fn fit_from(
    mut model: InrModel,
    y: &Sinogram,
    op: &ForwardOperator,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<FitResult> {
    cfg.validate()?;
    if y.geometry != *op.geometry() {
        return Err(Error::DimensionMismatch("sinogram geometry differs from the operator".into()));
    }
    let grid = op.grid().clone();
    let n = grid.n;
    let frames = y.num_frames();
    if frames > n * n {
        return Err(Error::DimensionMismatch(format!("{frames} frames exceed {} pixels", n * n)));
    }
    let times = normalized_trained_times(&y.frame_times);
    let batch = CoordinateBatch::casorati(n, &times);
    let features = model.encoder.encode_batch(&batch);
    let entries = n * n * frames;

    let mut adam = AdamState::new(model.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut lambdas: Option<(f64, f64)> = None;
    let mut initial_total = 0.0;
    let mut above = 0usize;

    for it in 0..cfg.iterations {
        let pass = model.forward(features.view());
        let x = Array2::from_shape_vec((n * n, frames), pass.output()).expect("casorati shape");

        let (dc, mut grad) = dc_loss(op, x.view(), y.data.view())?;
        let (tv, g_tv) = temporal_tv(x.view(), cfg.tv_epsilon)?;
        let (lr_term, g_lr) = nuclear_norm(x.view(), None)?;

        let (lambda_d, lambda_l) = *lambdas.get_or_insert_with(|| {
            let ld = cfg.lambda_d.resolve(cfg.lambda_d_auto, dc, entries);
            let ll = cfg.lambda_l.resolve(cfg.lambda_l_auto, dc, entries);
            log::info!("regularization weights: lambda_d = {ld:.6e}, lambda_l = {ll:.6e}");
            (ld, ll)
        });
        let losses = LossBreakdown::new(dc, tv, lr_term, lambda_d, lambda_l);
        if !losses.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        if it == 0 {
            initial_total = losses.total;
        } else if losses.total > cfg.divergence_factor * initial_total {
            above += 1;
            if above >= cfg.divergence_patience {
                return Err(Error::Diverged {
                    iteration: it,
                    total: losses.total,
                    initial: initial_total,
                    factor: cfg.divergence_factor,
                    patience: cfg.divergence_patience,
                });
            }
        } else {
            above = 0;
        }

        let learning_rate = lr_at(cfg, it)?;
        let row = LogRow {
            iteration: it,
            dc,
            tv,
            lr: lr_term,
            total: losses.total,
            learning_rate,
        };
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            log::info!(
                "iter {it:5}  dc {dc:.6e}  tv {tv:.6e}  nuc {lr_term:.6e}  total {:.6e}  lr {learning_rate:.3e}",
                losses.total
            );
        }
        observer(&row, &model)?;
        log.push(row);

        if lambda_d != 0.0 {
            accumulate(&mut grad, lambda_d, &g_tv);
        }
        if lambda_l != 0.0 {
            accumulate(&mut grad, lambda_l, &g_lr);
        }
        let output_grad = grad.into_raw_vec_and_offset().0;
        let param_grad = model.backward(features.view(), &pass, &output_grad)?;
        drop(pass);
        adam.step(model.params_mut(), &param_grad, learning_rate)?;
    }

    let (lambda_d, lambda_l) = lambdas.unwrap_or((0.0, 0.0));
    Ok(FitResult {
        model,
        log,
        lambda_d,
        lambda_l,
        grid,
        frame_times: y.frame_times.clone(),
    })
}

/// Trained frame times mapped onto `[0, 1]`.
pub fn normalized_trained_times(frame_times: &[f64]) -> Vec<f64> {
    let first = frame_times.first().copied().unwrap_or(0.0);
    let last = frame_times.last().copied().unwrap_or(0.0);
    normalize_times(frame_times, first, last)
}

/// Renders the model at physical `frame_times`, all of which must be the
/// trained times (or lie in their span, normalized the same way).
pub fn render_at_times(model: &InrModel, grid: &ImageGrid, frame_times: &[f64]) -> Result<ImageSequence> {
    let norm = normalized_trained_times(frame_times);
    let batch = CoordinateBatch::casorati(grid.n, &norm);
    let mut seq = render(model, &batch, grid, frame_times.len())?;
    seq.frame_times = frame_times.to_vec();
    Ok(seq)
}

/// Queries `factor * (T - 1) + 1` frames spanning the trained times: every
/// trained time plus `factor - 1` evenly spaced times between neighbours.
pub fn temporal_superresolve(
    model: &InrModel,
    factor: usize,
    grid: &ImageGrid,
    trained_frame_times: &[f64],
) -> Result<ImageSequence> {
    if factor < 1 {
        return Err(Error::InvalidParameter("super-resolution factor must be >= 1".into()));
    }
    if trained_frame_times.is_empty() {
        return Err(Error::InvalidParameter("no trained frame times".into()));
    }
    let norm = normalized_trained_times(trained_frame_times);
    let mut q_norm = Vec::new();
    let mut q_phys = Vec::new();
    for i in 0..trained_frame_times.len() {
        q_norm.push(norm[i]);
        q_phys.push(trained_frame_times[i]);
        if i + 1 < trained_frame_times.len() {
            for j in 1..factor {
                let a = j as f64 / factor as f64;
                q_norm.push(norm[i] + a * (norm[i + 1] - norm[i]));
                q_phys.push(trained_frame_times[i] + a * (trained_frame_times[i + 1] - trained_frame_times[i]));
            }
        }
    }
    let batch = CoordinateBatch::casorati(grid.n, &q_norm);
    let mut seq = render(model, &batch, grid, q_norm.len())?;
    seq.frame_times = q_phys;
    Ok(seq)
}
