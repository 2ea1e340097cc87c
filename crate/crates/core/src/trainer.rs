//! Training: Adam wrapped in Lookahead, warmup plus step-decay learning
//! rate, an epoch loop over shuffled slices, and checkpoints.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::data::{resample_mask, volume_norms, GroundTruth, IntensityScale, Slice};
use crate::error::{ReconError, Result};
use crate::model::{combined_magnitude, images_to_channels, PcrnnConfig, PcrnnParams, Task};
use crate::objectives::{combined_loss_real, combined_loss_with_grad, mean_metrics, LossConfig, LossValue, Metrics};
use crate::recon::{evaluate_image, reconstruct, Reconstructor};
use crate::sampling::splitmix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// Learning rate of epoch 0.
    pub warmup_lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_lr: 1e-5,
            decay_every: 10,
            decay_factor: 0.5,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            epochs: 60,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ReconError::InvalidConfig(m));
        if !(self.base_lr >= 0.0 && self.warmup_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            return bad(format!("lookahead_alpha must lie in (0, 1], got {}", self.lookahead_alpha));
        }
        if self.lookahead_k == 0 || self.decay_every == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("lookahead_k, decay_every, epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam constants out of range".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// Epoch 0 uses the warmup rate; from epoch 1 the base rate decays by
/// `decay_factor` every `decay_every` epochs.
pub fn lr_at(cfg: &OptimConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(ReconError::InvalidConfig(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if epoch == 0 {
        return Ok(cfg.warmup_lr);
    }
    let halvings = ((epoch - 1) / cfg.decay_every) as i32;
    Ok(cfg.base_lr * cfg.decay_factor.powi(halvings))
}

/// Adam moments and the Lookahead slow weights over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LookaheadAdam {
    pub slow: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Inner steps taken so far.
    pub step: u64,
}

impl LookaheadAdam {
    pub fn new(initial: &[f64]) -> Self {
        Self {
            slow: initial.to_vec(),
            m: vec![0.0; initial.len()],
            v: vec![0.0; initial.len()],
            step: 0,
        }
    }

    /// One Adam update of `fast`; every `lookahead_k` steps the slow weights
    /// move toward `fast` by `lookahead_alpha` and `fast` is reset to them.
    pub fn apply(&mut self, fast: &mut [f64], grad: &[f64], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if fast.len() != self.slow.len() || grad.len() != fast.len() {
            return Err(ReconError::shape("optimizer", &[self.slow.len()], &[grad.len()]));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ReconError::NonFiniteGradient(format!("gradient entry {i} is {}", grad[i])));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..fast.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            fast[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if self.step % cfg.lookahead_k as u64 == 0 {
            for (s, f) in self.slow.iter_mut().zip(fast.iter_mut()) {
                *s += cfg.lookahead_alpha * (*f - *s);
                *f = *s;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: PcrnnParams,
    pub optimizer: LookaheadAdam,
    /// Next epoch to run.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: PcrnnParams, seed: u64) -> Self {
        let optimizer = LookaheadAdam::new(&flatten(&params));
        Self {
            params,
            optimizer,
            epoch: 0,
            seed,
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

pub fn flatten(params: &PcrnnParams) -> Vec<f64> {
    params.tensors().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
}

fn assign_flat(params: &mut PcrnnParams, flat: &[f64]) {
    let mut offset = 0;
    for (_, t) in params.tensors_mut() {
        t.copy_from_slice(&flat[offset..offset + t.len()]);
        offset += t.len();
    }
}

/// Applies one Lookahead-Adam step to `state.params`. A non-finite gradient
/// leaves the state untouched.
pub fn lookahead_step(state: &mut TrainState, grads: &PcrnnParams, lr: f64, cfg: &OptimConfig) -> Result<()> {
    let mut fast = flatten(&state.params);
    let mut grad = flatten(grads);
    if let Some(clip) = cfg.grad_clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            grad.iter_mut().for_each(|g| *g *= clip / norm);
        }
    }
    state.optimizer.apply(&mut fast, &grad, lr, cfg)?;
    assign_flat(&mut state.params, &fast);
    Ok(())
}

/// Combined loss of one slice and its parameter gradient. Complex
/// single-coil references are compared in channel form; all other references
/// through the RSS magnitude.
pub fn loss_and_grad(
    params: &PcrnnParams,
    slice: &Slice,
    volume_norm_sq: f64,
    cfg: &LossConfig,
) -> Result<(LossValue, PcrnnParams)> {
    let (out, tape) = params.forward_taped(&slice.acquisition)?;
    let (value, d_x_hat) = match (&slice.ground_truth, params.config.task) {
        (GroundTruth::Complex(x), Task::SingleCoil) => {
            let target = images_to_channels(&[x.data().clone()]);
            combined_loss_with_grad(out.x_hat.view(), target.view(), volume_norm_sq, cfg)?
        }
        (gt, _) => {
            let mag = combined_magnitude(out.x_hat.view());
            let (value, g) = combined_loss_real(mag.view(), gt.magnitude().view(), volume_norm_sq, cfg)?;
            (value, chain_rss(&out.x_hat, &mag, &g))
        }
    };
    if !value.total.is_finite() {
        return Err(ReconError::NonFiniteLoss { step: 0 });
    }
    let grads = params.backward(&tape, &slice.acquisition.mask, &d_x_hat);
    Ok((value, grads))
}

fn chain_rss(x: &Array3<f64>, mag: &Array2<f64>, g: &Array2<f64>) -> Array3<f64> {
    let mut out = Array3::zeros(x.dim());
    for ((c, i, j), v) in out.indexed_iter_mut() {
        let m = mag[[i, j]];
        if m > 0.0 {
            *v = g[[i, j]] * x[[c, i, j]] / m;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Stop once the optimizer has taken this many steps in total.
    pub max_steps: Option<u64>,
    /// Directory for `best.ckpt`, `last.ckpt` and `last_good.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Draw a new mask for every training slice each epoch after the first.
    pub resample_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            max_steps: None,
            checkpoint_dir: None,
            resample_masks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    /// Metrics on the validation slices, or on the training slices when no
    /// validation set is given.
    pub eval: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,steps,train_loss,psnr,ssim,nmse\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{},{},{},{},{}\n",
                r.epoch, r.lr, r.steps, r.train_loss, r.eval.psnr, r.eval.ssim, r.eval.nmse
            ));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: History,
    pub best: Option<(usize, Metrics, PcrnnParams)>,
}

/// Mean metrics of a PC-RNN over slices, at the original scale.
pub fn evaluate_params(params: &PcrnnParams, slices: &[Slice], cfg: &LossConfig) -> Result<Metrics> {
    let norms = volume_norms(slices, IntensityScale::Original);
    let rows = slices
        .iter()
        .map(|s| {
            let r = reconstruct(s, &Reconstructor::Pcrnn(params))?;
            evaluate_image(&r.magnitude(), s, norms[&s.volume_id], &cfg.ssim)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_metrics(&rows).ok_or(ReconError::EmptyDataset)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch as u64))));
    order
}

fn epoch_masks(slices: &[Slice], seed: u64, epoch: usize) -> Result<Vec<Slice>> {
    slices
        .iter()
        .enumerate()
        .map(|(i, s)| resample_mask(s, splitmix(seed ^ splitmix(epoch as u64) ^ splitmix(!(i as u64)))))
        .collect()
}

fn add_scaled(dst: &mut PcrnnParams, src: &PcrnnParams, scale: f64) {
    for ((_, d), (_, _, s)) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        d.iter_mut().zip(s).for_each(|(a, b)| *a += scale * b);
    }
}

/// Runs epochs from `state.epoch` until the configured epoch count or step
/// budget. Deterministic given the state's seed. On a non-finite loss or
/// gradient the last good state is written to `last_good.ckpt` (when a
/// checkpoint directory is set) and the error is returned.
pub fn train(mut state: TrainState, train_set: &[Slice], val_set: &[Slice], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.optim.validate()?;
    cfg.loss.validate()?;
    if train_set.is_empty() {
        return Err(ReconError::EmptyDataset);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let norms = volume_norms(train_set, IntensityScale::Normalized);
    let eval_set = if val_set.is_empty() { train_set } else { val_set };
    let mut history = History::default();
    let mut best: Option<(usize, Metrics, PcrnnParams)> = None;
    let budget_left = |s: &TrainState| cfg.max_steps.is_none_or(|m| s.step() < m);

    while state.epoch < cfg.optim.epochs && budget_left(&state) {
        let epoch = state.epoch;
        let lr = lr_at(&cfg.optim, epoch)?;
        let order = epoch_order(train_set.len(), state.seed, epoch);
        let resampled;
        let epoch_set = if cfg.resample_masks && epoch > 0 {
            resampled = epoch_masks(train_set, state.seed, epoch)?;
            &resampled[..]
        } else {
            train_set
        };
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.optim.batch_size) {
            if !budget_left(&state) {
                break;
            }
            let mut grads = state.params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &epoch_set[i];
                let (value, g) = match loss_and_grad(&state.params, s, norms[&s.volume_id], &cfg.loss) {
                    Ok(v) => v,
                    Err(ReconError::NonFiniteLoss { .. }) => {
                        return Err(abort(&state, cfg, ReconError::NonFiniteLoss { step: state.step() as usize }))
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += value.total / batch.len() as f64;
                add_scaled(&mut grads, &g, 1.0 / batch.len() as f64);
            }
            match lookahead_step(&mut state, &grads, lr, &cfg.optim) {
                Ok(()) => {}
                Err(e @ ReconError::NonFiniteGradient(_)) => return Err(abort(&state, cfg, e)),
                Err(e) => return Err(e),
            }
            losses.push(batch_loss);
            history.step_losses.push(batch_loss);
        }
        let finished = losses.len() * cfg.optim.batch_size >= train_set.len();
        let eval = evaluate_params(&state.params, eval_set, &cfg.loss)?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            steps: losses.len(),
            train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            eval,
        });
        if best.as_ref().is_none_or(|(_, m, _)| eval.ssim > m.ssim) {
            if let Some(dir) = &cfg.checkpoint_dir {
                save_params(&dir.join("best.ckpt"), &state.params, state.seed)?;
            }
            best = Some((epoch, eval, state.params.clone()));
        }
        if finished {
            state.epoch += 1;
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(&dir.join("last.ckpt"), &state)?;
            }
        }
    }
    Ok(TrainOutcome { state, history, best })
}

fn abort(state: &TrainState, cfg: &TrainConfig, err: ReconError) -> ReconError {
    if let Some(dir) = &cfg.checkpoint_dir {
        if let Err(e) = save_checkpoint(&dir.join("last_good.ckpt"), state) {
            return e;
        }
    }
    err
}

const PARAM_PREFIX: &str = "params.";

fn params_archive(params: &PcrnnParams, seed: u64, extra: serde_json::Value) -> Result<Archive> {
    let mut archive = Archive::new(
        "checkpoint",
        json!({ "config": params.config, "seed": seed, "training": extra }),
    );
    for (name, shape, values) in params.tensors() {
        archive.push(format!("{PARAM_PREFIX}{name}"), &shape, values.to_vec())?;
    }
    Ok(archive)
}

/// Parameters only.
pub fn save_params(path: &Path, params: &PcrnnParams, seed: u64) -> Result<()> {
    params_archive(params, seed, serde_json::Value::Null)?.save(path)
}

/// Parameters plus optimizer state, for resuming.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let opt = &state.optimizer;
    let mut archive = params_archive(
        &state.params,
        state.seed,
        json!({ "epoch": state.epoch, "step": opt.step }),
    )?;
    let n = opt.slow.len();
    archive.push("optimizer.slow", &[n], opt.slow.clone())?;
    archive.push("optimizer.m", &[n], opt.m.clone())?;
    archive.push("optimizer.v", &[n], opt.v.clone())?;
    archive.save(path)
}

fn params_from_archive(archive: &Archive) -> Result<(PcrnnParams, u64)> {
    if archive.kind != "checkpoint" {
        return Err(ReconError::Format(format!("expected a checkpoint, found {}", archive.kind)));
    }
    let config: PcrnnConfig = serde_json::from_value(
        archive.metadata.get("config").cloned().ok_or_else(|| ReconError::Missing("config".into()))?,
    )?;
    config.validate()?;
    let seed = archive.metadata.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
    let mut params = PcrnnParams::zeros(&config);
    let shapes: Vec<Vec<usize>> = params.tensors().into_iter().map(|(_, s, _)| s).collect();
    for ((name, dst), shape) in params.tensors_mut().into_iter().zip(shapes) {
        let (found, values) = archive.require(&format!("{PARAM_PREFIX}{name}"))?;
        if found != shape.as_slice() {
            return Err(ReconError::shape("checkpoint tensor", &shape, found));
        }
        dst.copy_from_slice(values);
    }
    if !params.is_finite() {
        return Err(ReconError::NonFinite("checkpoint parameters"));
    }
    Ok((params, seed))
}

pub fn load_params(path: &Path) -> Result<PcrnnParams> {
    Ok(params_from_archive(&Archive::load(path)?)?.0)
}

/// Restores a training state; a parameters-only file starts a fresh
/// optimizer at epoch 0.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let archive = Archive::load(path)?;
    let (params, seed) = params_from_archive(&archive)?;
    let mut state = TrainState::new(params, seed);
    let training = &archive.metadata["training"];
    if training.is_null() {
        return Ok(state);
    }
    let n = state.optimizer.slow.len();
    let take = |name: &str| -> Result<Vec<f64>> {
        let (shape, values) = archive.require(name)?;
        if shape != [n] {
            return Err(ReconError::shape(name.to_string().leak(), &[n], shape));
        }
        Ok(values.to_vec())
    };
    state.optimizer.slow = take("optimizer.slow")?;
    state.optimizer.m = take("optimizer.m")?;
    state.optimizer.v = take("optimizer.v")?;
    state.optimizer.step = training["step"].as_u64().ok_or_else(|| ReconError::Missing("step".into()))?;
    state.epoch = training["epoch"].as_u64().ok_or_else(|| ReconError::Missing("epoch".into()))? as usize;
    Ok(state)
}
