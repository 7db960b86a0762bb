//! Loss, optimizer, learning-rate schedule and the training loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datacube::Datacube;
use crate::error::{Error, Result};
use crate::forward_model::TrainingPair;
use crate::metrics::{self, DEFAULT_MRAE_FLOOR};
use crate::ptnet::{cube_batch, rgb_batch, tensor_to_cube, ParamStore, PtnetModel};
use crate::scalar::Scalar;
use crate::tensor::{NormMode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_init: f64,
    pub epochs: usize,
    /// Epochs per cosine cycle.
    pub restart_period: usize,
    pub loss_alpha: f64,
    pub loss_quant_bits: u32,
    pub seed: u64,
    pub gradient_centralization: bool,
    pub lookahead: bool,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            lr_init: 6e-4,
            epochs: 300,
            restart_period: 50,
            loss_alpha: 1.0,
            loss_quant_bits: 8,
            seed: 0,
            gradient_centralization: true,
            lookahead: true,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(name, format!("must lie in (0, 1), got {b}"));
            }
        }
        if !(self.lr_init > 0.0) {
            return bad("lr_init", format!("must be positive, got {}", self.lr_init));
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if !(1..=16).contains(&self.loss_quant_bits) {
            return bad("loss_quant_bits", format!("must lie in [1, 16], got {}", self.loss_quant_bits));
        }
        if !(self.loss_alpha > 0.0) {
            return bad("loss_alpha", format!("must be positive, got {}", self.loss_alpha));
        }
        if self.restart_period == 0 {
            return bad("restart_period", "must be at least 1".into());
        }
        if self.lookahead && (self.lookahead_k == 0 || !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0)) {
            return bad("lookahead", "k must be positive and alpha in (0, 1]".into());
        }
        Ok(())
    }
}

fn quantize(v: f64, max_code: u32) -> u32 {
    (v.clamp(0.0, 1.0) * max_code as f64).round() as u32
}

/// Total differing bits between `bits`-bit codes of two value sequences.
/// Values are clamped to [0, 1] before quantizing.
pub fn hamming_slices(p: impl IntoIterator<Item = f64>, gt: impl IntoIterator<Item = f64>, bits: u32) -> u64 {
    let max_code = (1u32 << bits) - 1;
    p.into_iter()
        .zip(gt)
        .map(|(a, b)| (quantize(a, max_code) ^ quantize(b, max_code)).count_ones() as u64)
        .sum()
}

/// Bit-level Hamming distance between two cubes quantized to `bits` bits.
pub fn hamming_metric(p: &Datacube, gt: &Datacube, bits: u32) -> Result<u64> {
    if !p.same_geometry(gt) {
        return Err(Error::Dimension(format!(
            "hamming_metric: {}x{}x{} vs {}x{}x{}",
            p.width(),
            p.height(),
            p.bands(),
            gt.width(),
            gt.height(),
            gt.bands()
        )));
    }
    if !(1..=16).contains(&bits) {
        return Err(Error::Config(format!("bits must lie in [1, 16], got {bits}")));
    }
    let mut total = 0;
    for b in 0..p.bands() {
        for y in 0..p.height() {
            for x in 0..p.width() {
                total += hamming_slices([p.get(x, y, b) as f64], [gt.get(x, y, b) as f64], bits);
            }
        }
    }
    Ok(total)
}

/// `α·log10(1 + (2^b − 1)·Σ|p − gt|)`, a differentiable stand-in for the
/// logarithm of the bit-level Hamming distance.
pub fn training_loss<T: Scalar>(tape: &Tape<T>, p: Var, gt: Var, alpha: f64, bits: u32) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("loss alpha must be positive, got {alpha}")));
    }
    let diff = tape.sub(p, gt)?;
    let l1 = tape.sum(tape.abs(diff));
    let codes = tape.scale(l1, ((1u64 << bits) - 1) as f64);
    let log = tape.log10(tape.add_scalar(codes, 1.0));
    Ok(tape.scale(log, alpha))
}

/// Cosine decay from `lr_init` at `t = 0` to 0 at `t = 1`.
pub fn cosine_lr(t: f64, lr_init: f64) -> f64 {
    lr_init * (1.0 + (PI * t).cos()) / 2.0
}

/// Position within the current cosine cycle for step `step_in_epoch` of
/// `epoch`.
pub fn cycle_position(epoch: usize, step_in_epoch: usize, steps_per_epoch: usize, restart_period: usize) -> f64 {
    let in_cycle = (epoch % restart_period) * steps_per_epoch + step_in_epoch;
    in_cycle as f64 / (restart_period * steps_per_epoch) as f64
}

/// Optimizer and loop state.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub epoch: usize,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    slow: Vec<Vec<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    /// Zero moments; lookahead slow weights start at the current parameters.
    pub fn new(params: &ParamStore<T>, seed: u64) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            step: 0,
            epoch: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            slow: params.tensors().iter().map(Tensor::to_vec).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.second_moment
    }

    pub fn slow_weights(&self) -> &[Vec<T>] {
        &self.slow
    }
}

/// Subtracts the mean over each output filter (first axis) of a rank ≥ 2
/// gradient.
fn centralize<T: Scalar>(g: &mut [T], shape: &[usize]) {
    if shape.len() < 2 {
        return;
    }
    let per = g.len() / shape[0];
    for filter in g.chunks_exact_mut(per) {
        let mean = filter.iter().copied().sum::<T>() / T::of(per as f64);
        filter.iter_mut().for_each(|v| *v -= mean);
    }
}

/// One update: Adam with bias correction, decoupled weight decay, optional
/// gradient centralization and lookahead synchronization.
pub fn optimizer_step<T: Scalar>(
    state: &mut TrainState<T>,
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::State(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, name) in params.names().iter().enumerate() {
        if grads[i].is_none() {
            return Err(Error::State(format!("no gradient for parameter `{name}`")));
        }
    }
    let t = state.step + 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = T::of(1.0 - b1.powi(t as i32));
    let bc2 = T::of(1.0 - b2.powi(t as i32));
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (one, lr_t, eps) = (T::one(), T::of(lr), T::of(config.eps));
    let decay = T::of(1.0 - lr * config.weight_decay);
    let sync = config.lookahead && t % config.lookahead_k == 0;
    let blend = T::of(config.lookahead_alpha);

    for i in 0..params.len() {
        let param = &params.tensors()[i];
        let shape = param.shape().to_vec();
        let mut g = grads[i].as_ref().expect("checked").to_vec();
        if g.len() != param.numel() {
            return Err(Error::State(format!(
                "gradient for `{}` has {} elements, parameter has {}",
                params.names()[i],
                g.len(),
                param.numel()
            )));
        }
        if config.gradient_centralization {
            centralize(&mut g, &shape);
        }
        let mut p = param.to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            m[j] = b1t * m[j] + (one - b1t) * g[j];
            v[j] = b2t * v[j] + (one - b2t) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        if sync {
            let slow = &mut state.slow[i];
            for j in 0..p.len() {
                let delta = blend * (p[j] - slow[j]);
                slow[j] += delta;
                p[j] = slow[j];
            }
        }
        params.set(i, Tensor::from_vec(&shape, p)?)?;
    }
    state.step = t;
    Ok(())
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    /// Learning rate of the first step of the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Bit-level Hamming distance summed over the epoch's batches.
    pub hamming: u64,
    pub val_mrae: Option<f64>,
    pub val_rmse: Option<f64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain fields serialize")
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T: Scalar> {
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_mrae: Option<f64>,
    /// Weights with the lowest validation MRAE (final weights when there is
    /// no validation set).
    pub best_model: PtnetModel<T>,
}

/// Element-weighted MRAE and RMSE of eval-mode predictions on `pairs`.
pub fn evaluate_pairs<T: Scalar>(model: &PtnetModel<T>, pairs: &[TrainingPair]) -> Result<(f64, f64)> {
    let mut rel = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let pred = model.predict(&rgb_batch::<T>(&[&pair.rgb])?)?;
        let cube = tensor_to_cube(&pred, 0, pair.cube.wavelengths())?;
        let n = cube.len();
        rel += metrics::mrae(&cube, &pair.cube, DEFAULT_MRAE_FLOOR)? * n as f64;
        let r = metrics::rmse(&cube, &pair.cube)?;
        sq += r * r * n as f64;
        count += n;
    }
    Ok((rel / count as f64, (sq / count as f64).sqrt()))
}

fn check_pairs(cfg: (usize, usize, usize), pairs: &[TrainingPair], what: &str) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        let (w, h, l) = (p.cube.width(), p.cube.height(), p.cube.bands());
        if (h, w, l) != cfg || (p.rgb.width(), p.rgb.height()) != (w, h) {
            return Err(Error::Config(format!(
                "{what} pair {i}: {w}x{h}x{l} does not match the model patch {}x{}x{}",
                cfg.1, cfg.0, cfg.2
            )));
        }
    }
    Ok(())
}

/// Trains `model` in place; `on_epoch` receives every log line as it is
/// produced.
pub fn train<T: Scalar>(
    model: &mut PtnetModel<T>,
    train_set: &[TrainingPair],
    val_set: &[TrainingPair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mc = model.config();
    let geometry = (mc.patch_height, mc.patch_width, mc.bands);
    check_pairs(geometry, train_set, "training")?;
    check_pairs(geometry, val_set, "validation")?;

    let mut state = TrainState::new(model.params(), config.seed);
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs),
        step_losses: Vec::with_capacity(config.epochs * steps_per_epoch),
        best_epoch: None,
        best_val_mrae: None,
        best_model: model.clone(),
    };

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut hamming = 0;
        let mut epoch_lr = 0.0;
        for (i, batch) in order.chunks(config.batch_size).enumerate() {
            let lr = cosine_lr(
                cycle_position(epoch, i, steps_per_epoch, config.restart_period),
                config.lr_init,
            );
            if i == 0 {
                epoch_lr = lr;
            }
            let rgbs: Vec<_> = batch.iter().map(|&k| &train_set[k].rgb).collect();
            let cubes: Vec<_> = batch.iter().map(|&k| &train_set[k].cube).collect();
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let x = tape.constant(rgb_batch(&rgbs)?);
            let gt_tensor = cube_batch::<T>(&cubes)?;
            let gt = tape.constant(gt_tensor.clone());
            let pred = model.forward(&tape, &bound, x, NormMode::Train)?;
            let loss = training_loss(&tape, pred, gt, config.loss_alpha, config.loss_quant_bits)?;
            let loss_value = tape.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    step: state.step,
                    loss: loss_value,
                });
            }
            hamming += hamming_slices(
                tape.value(pred).to_vec().iter().map(|v| v.as_f64()),
                gt_tensor.to_vec().iter().map(|v| v.as_f64()),
                config.loss_quant_bits,
            );
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor<T>>> = bound.vars().iter().map(|&v| tape.grad(v)).collect();
            optimizer_step(&mut state, model.params_mut(), &grads, lr, config)?;
            loss_sum += loss_value;
            report.step_losses.push(loss_value);
        }

        let (val_mrae, val_rmse) = if val_set.is_empty() {
            (None, None)
        } else {
            let (m, r) = evaluate_pairs(model, val_set)?;
            (Some(m), Some(r))
        };
        if let Some(m) = val_mrae {
            if report.best_val_mrae.is_none_or(|b| m < b) {
                report.best_val_mrae = Some(m);
                report.best_epoch = Some(epoch);
                report.best_model = model.clone();
            }
        }
        let log = EpochLog {
            epoch,
            step: state.step,
            lr: epoch_lr,
            loss: loss_sum / steps_per_epoch as f64,
            hamming,
            val_mrae,
            val_rmse,
        };
        on_epoch(&log);
        report.epochs.push(log);
    }
    if val_set.is_empty() {
        report.best_model = model.clone();
        report.best_epoch = config.epochs.checked_sub(1);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        ParamStore::from_named(vec![("w".into(), Tensor::scalar(v))]).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.0, 6e-4), 6e-4);
        assert!(cosine_lr(1.0, 6e-4).abs() < 1e-19);
        assert!((cosine_lr(0.5, 6e-4) - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn cycle_position_restarts() {
        assert_eq!(cycle_position(0, 0, 4, 50), 0.0);
        assert_eq!(cycle_position(50, 0, 4, 50), 0.0);
        assert_eq!(cycle_position(25, 0, 4, 50), 0.5);
    }

    #[test]
    fn loss_closed_forms() {
        let tape = Tape::<f64>::new();
        let p = tape.param(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let g = tape.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let l = training_loss(&tape, p, g, 1.0, 8).unwrap();
        assert!((tape.value(l).item() - 256f64.log10()).abs() < 1e-15);
        let same = training_loss(&tape, p, p, 2.0, 8).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        assert!(training_loss(&tape, p, g, 0.0, 8).is_err());
    }

    #[test]
    fn hamming_full_byte() {
        assert_eq!(hamming_slices([0.0], [1.0], 8), 8);
        assert_eq!(hamming_slices([0.5, 0.25], [0.5, 0.25], 8), 0);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut store = scalar_store(0.7);
        let mut state = TrainState::new(&store, 0);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        for _ in 0..12 {
            optimizer_step(&mut state, &mut store, &[Some(Tensor::scalar(0.0))], 1e-2, &cfg).unwrap();
        }
        assert_eq!(store.tensors()[0].item(), 0.7);
    }

    #[test]
    fn weight_decay_closed_form() {
        let mut store = scalar_store(2.0);
        let mut state = TrainState::new(&store, 0);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            lookahead: false,
            ..TrainConfig::default()
        };
        for _ in 0..3 {
            optimizer_step(&mut state, &mut store, &[Some(Tensor::scalar(0.0))], 0.5, &cfg).unwrap();
        }
        assert!((store.tensors()[0].item() - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store = scalar_store(1.0);
        let mut state = TrainState::new(&store, 0);
        let err = optimizer_step(&mut state, &mut store, &[None], 1e-3, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn centralization_zeroes_filter_means() {
        let mut g = vec![1.0, 2.0, 3.0, 10.0, 10.0, 10.0];
        centralize(&mut g, &[2, 3]);
        assert_eq!(g, vec![-1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let mut b = vec![1.0, 2.0];
        centralize(&mut b, &[2]);
        assert_eq!(b, vec![1.0, 2.0]);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            loss_quant_bits: 17,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("loss_quant_bits"));
        let bad = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
