//! Black-box baseline: an MLP mapping `(state, action)` to the next state,
//! trained offline and fine-tuned online every few control steps.
//!
//! The network predicts the state change; inputs and residuals are z-scored
//! with statistics fixed at offline training time.

use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{
    control_loop, discrete_action_set, start_episode, ControllerConfig, EpisodeResult, OneStepModel, StepPrediction,
};
use crate::error::{Error, Result};
use crate::massmodel::MassDistribution;
use crate::nn::{read_model, write_model, Adam, AdamConfig, Mlp, Standardizer};
use crate::sim::{Action, BeltConfig, Goal, Observation, Pose2, Simulator, Transition};

pub const STATE_DIM: usize = 5;
pub const ACTION_DIM: usize = 4;
const MAGIC: &[u8; 4] = b"BRBB";

/// One `(s, a, s')` sample with `s = [x, y, θ, P_y¹, P_y²]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: [f64; STATE_DIM],
    pub action: [f64; ACTION_DIM],
    pub next: [f64; STATE_DIM],
}

impl From<&Transition> for TransitionRecord {
    fn from(t: &Transition) -> Self {
        Self {
            state: t.obs.state_vector(),
            action: t.action.components(),
            next: t.next_obs.state_vector(),
        }
    }
}

impl TransitionRecord {
    fn input(&self) -> [f64; STATE_DIM + ACTION_DIM] {
        let mut x = [0.0; STATE_DIM + ACTION_DIM];
        x[..STATE_DIM].copy_from_slice(&self.state);
        x[STATE_DIM..].copy_from_slice(&self.action);
        x
    }

    fn delta(&self) -> [f64; STATE_DIM] {
        std::array::from_fn(|i| self.next[i] - self.state[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    /// Online update period in control steps.
    pub adapt_every: usize,
    pub adapt_learning_rate: f64,
    pub adapt_batch_size: usize,
    /// Random-policy episodes used for offline data.
    pub random_episodes: usize,
    pub random_episode_len: usize,
    /// Physics-prior episodes whose transitions join the offline data when successful.
    pub prior_episodes: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 40,
            val_fraction: 0.1,
            adapt_every: 20,
            adapt_learning_rate: 1e-3,
            adapt_batch_size: 32,
            random_episodes: 40,
            random_episode_len: 100,
            prior_episodes: 10,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if self.batch_size == 0 || self.adapt_batch_size == 0 || self.adapt_every == 0 {
            return Err(Error::InvalidArgument("batch sizes and adapt period must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.adapt_learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlackboxModel {
    pub net: Mlp,
    pub input: Standardizer,
    pub output: Standardizer,
}

fn stack(records: &[TransitionRecord], idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let mut x = Array2::zeros((idx.len(), STATE_DIM + ACTION_DIM));
    let mut y = Array2::zeros((idx.len(), STATE_DIM));
    for (row, &i) in idx.iter().enumerate() {
        let r = &records[i];
        x.row_mut(row).iter_mut().zip(r.input()).for_each(|(d, v)| *d = v);
        y.row_mut(row).iter_mut().zip(r.delta()).for_each(|(d, v)| *d = v);
    }
    (x, y)
}

impl BlackboxModel {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![STATE_DIM + ACTION_DIM];
        dims.extend_from_slice(hidden);
        dims.push(STATE_DIM);
        Self {
            net: Mlp::new(&dims, false, rng),
            input: Standardizer::identity(STATE_DIM + ACTION_DIM),
            output: Standardizer::identity(STATE_DIM),
        }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut m = self.net.clone();
        m.params_mut().iter().map(|p| p.len()).collect()
    }

    pub fn predict_state(&self, state: [f64; STATE_DIM], action: [f64; ACTION_DIM]) -> [f64; STATE_DIM] {
        let mut x = [0.0; STATE_DIM + ACTION_DIM];
        x[..STATE_DIM].copy_from_slice(&state);
        x[STATE_DIM..].copy_from_slice(&action);
        let row = ArrayView2::from_shape((1, x.len()), &x).expect("row shape");
        let z = self.net.forward(self.input.apply(row).view());
        let d = self.output.invert(z.view());
        std::array::from_fn(|i| state[i] + d[[0, i]])
    }

    /// Mean squared error in standardized residual space, and one Adam step
    /// when `opt` is given.
    fn batch(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>, opt: Option<&mut Adam>) -> f64 {
        let xs = self.input.apply(x);
        let ys = self.output.apply(y);
        let cache = self.net.forward_train(xs.view());
        let err = &cache.output - &ys;
        let n = err.len() as f64;
        let loss = err.mapv(|e| e * e).sum() / n;
        if let Some(opt) = opt {
            let (grads, _) = self.net.backward(&cache, err * (2.0 / n));
            let slices: Vec<&[f64]> = grads.iter().flat_map(|g| g.slices()).collect();
            opt.step(&mut self.net.params_mut(), &slices);
        }
        loss
    }

    /// Loss over `records` without updating.
    pub fn evaluate(&self, records: &[TransitionRecord]) -> f64 {
        if records.is_empty() {
            return f64::NAN;
        }
        let idx: Vec<usize> = (0..records.len()).collect();
        let (x, y) = stack(records, &idx);
        self.clone().batch(x.view(), y.view(), None)
    }

    pub fn write<W: Write>(&self, w: W, meta: serde_json::Value) -> Result<()> {
        let mut tensors = self.net.tensors();
        tensors.extend(self.input.tensors());
        tensors.extend(self.output.tensors());
        let meta = serde_json::json!({ "layers": self.net.layers.len(), "meta": meta });
        write_model(w, MAGIC, &meta, &tensors)
    }

    pub fn read<R: Read>(r: R) -> Result<(Self, serde_json::Value)> {
        let (meta, tensors) = read_model(r, MAGIC)?;
        let layers = meta["layers"]
            .as_u64()
            .ok_or_else(|| Error::Format("baseline model lacks a layer count".into()))? as usize;
        let mut it = tensors.into_iter();
        let net = Mlp::from_tensors(&mut it, layers, false)?;
        let mut next = || it.next().ok_or_else(|| Error::Format("baseline model is truncated".into()));
        let input = Standardizer::from_tensors(next()?, next()?)?;
        let output = Standardizer::from_tensors(next()?, next()?)?;
        let dims = net.dims();
        if dims[0] != STATE_DIM + ACTION_DIM || dims[dims.len() - 1] != STATE_DIM || input.len() != dims[0] || output.len() != STATE_DIM {
            return Err(Error::Format(format!("baseline model has widths {dims:?}")));
        }
        Ok((Self { net, input, output }, meta["meta"].clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// `(epoch, train loss, validation loss)` in standardized units; epoch 0
    /// is the untrained network.
    pub epochs: Vec<(usize, f64, f64)>,
    pub train_items: usize,
    pub val_items: usize,
    pub parameter_count: usize,
}

pub fn train_blackbox(records: &[TransitionRecord], cfg: &BaselineConfig) -> Result<(BlackboxModel, BaselineReport)> {
    cfg.validate()?;
    if records.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 transitions, got {}", records.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = ((records.len() as f64 * cfg.val_fraction) as usize).min(records.len() - 1);
    let val_idx = idx.split_off(records.len() - n_val);
    let train_idx = idx;

    let mut model = BlackboxModel::new(&cfg.hidden, &mut rng);
    let (x_all, y_all) = stack(records, &train_idx);
    model.input = Standardizer::fit(x_all.view());
    model.output = Standardizer::fit(y_all.view());
    let (x_val, y_val) = stack(records, &val_idx);

    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.param_sizes(),
    );
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let val_loss = |m: &BlackboxModel| {
        if val_idx.is_empty() {
            f64::NAN
        } else {
            m.clone().batch(x_val.view(), y_val.view(), None)
        }
    };
    // epoch 0 is the untrained network
    let mut epochs = Vec::with_capacity(cfg.epochs + 1);
    epochs.push((0, model.clone().batch(x_all.view(), y_all.view(), None), val_loss(&model)));
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x_all.select(Axis(0), chunk);
            let yb = y_all.select(Axis(0), chunk);
            let loss = model.batch(xb.view(), yb.view(), Some(&mut opt));
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            sum += loss * chunk.len() as f64;
        }
        let val = val_loss(&model);
        log::debug!("baseline epoch {epoch}: train {:.5} val {:.5}", sum / order.len() as f64, val);
        epochs.push((epoch, sum / order.len() as f64, val));
    }
    let report = BaselineReport {
        epochs,
        train_items: train_idx.len(),
        val_items: val_idx.len(),
        parameter_count: model.net.param_count(),
    };
    Ok((model, report))
}

/// One epoch of minibatch updates over `buffer`; returns the mean loss, or
/// `None` (leaving the model untouched) when the buffer is empty.
pub fn online_adapt<R: Rng + ?Sized>(
    model: &mut BlackboxModel,
    opt: &mut Adam,
    buffer: &[TransitionRecord],
    batch_size: usize,
    rng: &mut R,
) -> Option<f64> {
    if buffer.is_empty() {
        return None;
    }
    let mut idx: Vec<usize> = (0..buffer.len()).collect();
    idx.shuffle(rng);
    let mut sum = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = stack(buffer, chunk);
        sum += model.batch(x.view(), y.view(), Some(opt)) * chunk.len() as f64;
    }
    Some(sum / buffer.len() as f64)
}

/// Per-episode copy of the baseline that adapts online from its own buffer.
pub struct BlackboxAgent {
    pub model: BlackboxModel,
    opt: Adam,
    buffer: Vec<TransitionRecord>,
    adapt_every: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    adaptations: usize,
    adaptation_time_s: f64,
}

impl BlackboxAgent {
    pub fn new(model: BlackboxModel, cfg: &BaselineConfig, seed: u64) -> Self {
        let opt = Adam::new(
            AdamConfig {
                learning_rate: cfg.adapt_learning_rate,
                ..AdamConfig::default()
            },
            &model.param_sizes(),
        );
        Self {
            model,
            opt,
            buffer: Vec::new(),
            adapt_every: cfg.adapt_every,
            batch_size: cfg.adapt_batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            adaptations: 0,
            adaptation_time_s: 0.0,
        }
    }

    pub fn buffer(&self) -> &[TransitionRecord] {
        &self.buffer
    }
}

impl OneStepModel for BlackboxAgent {
    fn predict(&self, window: &[Observation], action: &Action) -> Result<Option<StepPrediction>> {
        let last = window.last().ok_or(Error::NonUniformWindow)?;
        let next = self.model.predict_state(last.state_vector(), action.components());
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        Ok(Some(StepPrediction {
            theta: next[2],
            y_geom: next[1],
            belt_y: [next[3], next[4]],
        }))
    }

    fn after_step(&mut self, transition: &Transition, step: usize) -> Result<()> {
        self.buffer.push(transition.into());
        if (step + 1).is_multiple_of(self.adapt_every) {
            let t0 = Instant::now();
            online_adapt(&mut self.model, &mut self.opt, &self.buffer, self.batch_size, &mut self.rng);
            self.adaptation_time_s += t0.elapsed().as_secs_f64();
            self.adaptations += 1;
        }
        Ok(())
    }

    fn adaptation_stats(&self) -> (usize, f64) {
        (self.adaptations, self.adaptation_time_s)
    }
}

/// Baseline episode: no exploration or hazard gate, control starts from the
/// reset observation with a fresh copy of `model`.
pub fn run_blackbox_episode(
    sim: &mut Simulator,
    init_pose: Pose2,
    model: &BlackboxModel,
    ctrl: &ControllerConfig,
    cfg: &BaselineConfig,
) -> Result<EpisodeResult> {
    let start = Instant::now();
    let (obs, early) = start_episode(sim, init_pose, ctrl)?;
    if let Some(r) = early {
        return Ok(r);
    }
    let mut agent = BlackboxAgent::new(model.clone(), cfg, ctrl.seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(ctrl.seed);
    control_loop(sim, &mut agent, ctrl, &mut rng, vec![obs], EpisodeResult::new(), start)
}

/// Transitions from uniformly random actions of the discrete set. Episodes
/// restart from the origin when support is lost or after `episode_len` steps.
pub fn random_policy_transitions(
    dist: &MassDistribution,
    belt: &BeltConfig,
    ctrl: &ControllerConfig,
    episodes: usize,
    episode_len: usize,
    seed: u64,
) -> Result<Vec<TransitionRecord>> {
    let set = discrete_action_set(&ctrl.action_grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim = Simulator::new(dist.clone(), belt.clone(), Goal::default(), Pose2::default())?;
    let mut out = Vec::with_capacity(episodes * episode_len);
    for _ in 0..episodes {
        let mut obs = sim.reset(Pose2::default())?;
        for _ in 0..episode_len {
            let action = set[rng.random_range(0..set.len())];
            let step = sim.step(&action)?;
            out.push(TransitionRecord {
                state: obs.state_vector(),
                action: action.components(),
                next: step.observation.state_vector(),
            });
            obs = step.observation;
            if step.events.support_lost {
                break;
            }
        }
    }
    Ok(out)
}
