//! Random-shooting MPC with two rewards and Pareto-front action selection.
//!
//! Each step samples `N_a` actions from the discrete set, predicts the next
//! pose for each with a one-step model, scores pose and balance rewards and
//! picks uniformly among the non-dominated candidates.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::ControlForceMap;
use crate::error::{Error, Result};
use crate::estimator::{predict, EstimatorModel};
use crate::massmodel::{HazardReport, MassDistribution};
use crate::predictor::{Predictor, WINDOW};
use crate::sim::{
    run_exploratory_sequence, wrap_angle, Action, BeltConfig, Observation, Pose2, Simulator, Trajectory, Transition,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPair {
    pub r1: f64,
    pub r2: f64,
}

impl RewardPair {
    /// `self` is at least as good in both rewards and strictly better in one.
    pub fn dominates(&self, other: &RewardPair) -> bool {
        self.r1 >= other.r1 && self.r2 >= other.r2 && (self.r1 > other.r1 || self.r2 > other.r2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionGridSpec {
    /// Levels per belt, spread evenly over `[-velocity_max, velocity_max]`.
    pub velocity_levels: usize,
    pub velocity_max: f64,
    /// Position levels are multiples of this step in `[-position_max, position_max)`, zero excluded.
    pub position_step: f64,
    pub position_max: f64,
}

impl Default for ActionGridSpec {
    fn default() -> Self {
        Self {
            velocity_levels: 9,
            velocity_max: 0.3,
            position_step: 0.005,
            position_max: 0.02,
        }
    }
}

impl ActionGridSpec {
    pub fn velocity_levels(&self) -> Vec<f64> {
        let n = self.velocity_levels;
        if n < 2 {
            return vec![0.0];
        }
        (0..n)
            .map(|i| self.velocity_max * (2.0 * i as f64 / (n - 1) as f64 - 1.0))
            .collect()
    }

    pub fn position_levels(&self) -> Vec<f64> {
        let k = (self.position_max / self.position_step).round() as i64;
        (-k..k).filter(|&i| i != 0).map(|i| i as f64 * self.position_step).collect()
    }
}

/// Velocity pairs from the per-belt level grid (null pair included once)
/// followed by single-belt position moves.
pub fn discrete_action_set(spec: &ActionGridSpec) -> Vec<Action> {
    let v = spec.velocity_levels();
    let mut out: Vec<Action> = v
        .iter()
        .flat_map(|&v1| v.iter().map(move |&v2| Action::velocity(v1, v2)))
        .collect();
    let p = spec.position_levels();
    out.extend(p.iter().map(|&p1| Action::left(p1)));
    out.extend(p.iter().map(|&p2| Action::right(p2)));
    out
}

/// Uniform sample of `n` distinct actions, in draw order.
pub fn sample_candidates<R: Rng + ?Sized>(set: &[Action], n: usize, rng: &mut R) -> Vec<Action> {
    let n = n.min(set.len());
    index::sample(rng, set.len(), n).into_iter().map(|i| set[i]).collect()
}

pub fn score_action(theta_hat: f64, y_geom_hat: f64, belts_after: [f64; 2], cfg: &ControllerConfig) -> RewardPair {
    let e1 = wrap_angle(theta_hat - cfg.target_angle);
    let e2 = y_geom_hat - 0.5 * (belts_after[0] + belts_after[1]);
    RewardPair {
        r1: 1.0 / (e1 * e1 + cfg.epsilon),
        r2: 1.0 / (e2 * e2 + cfg.epsilon),
    }
}

/// Indices of the non-dominated entries, ascending. Equal pairs do not
/// dominate each other.
pub fn pareto_indices(scores: &[RewardPair]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .r1
            .total_cmp(&scores[a].r1)
            .then(scores[b].r2.total_cmp(&scores[a].r2))
    });
    let mut front = Vec::new();
    let mut best_r2 = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let r1 = scores[order[i]].r1;
        let mut j = i;
        while j < order.len() && scores[order[j]].r1 == r1 {
            j += 1;
        }
        // order within a group is by descending r2: the group maximum comes first
        let group_max = scores[order[i]].r2;
        for &k in &order[i..j] {
            let r2 = scores[k].r2;
            if r2 == group_max && r2 > best_r2 {
                front.push(k);
            }
        }
        best_r2 = best_r2.max(group_max);
        i = j;
    }
    front.sort_unstable();
    front
}

pub fn pareto_front(scored: &[(Action, RewardPair)]) -> Vec<(Action, RewardPair)> {
    let scores: Vec<RewardPair> = scored.iter().map(|s| s.1).collect();
    pareto_indices(&scores).into_iter().map(|i| scored[i]).collect()
}

pub fn select_action<R: Rng + ?Sized>(front: &[(Action, RewardPair)], rng: &mut R) -> Option<(Action, RewardPair)> {
    if front.is_empty() {
        None
    } else {
        Some(front[rng.random_range(0..front.len())])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub epsilon: f64,
    pub target_angle: f64,
    pub n_candidates: usize,
    pub action_grid: ActionGridSpec,
    pub max_steps: usize,
    /// Largest allowed distance of the geometric center from the belt midline (m).
    pub balance_threshold: f64,
    pub angle_tolerance: f64,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            target_angle: FRAC_PI_2,
            n_candidates: 50,
            action_grid: ActionGridSpec::default(),
            max_steps: 1000,
            balance_threshold: 0.04,
            angle_tolerance: 0.05,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let total = discrete_action_set(&self.action_grid).len();
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.n_candidates == 0 || self.n_candidates > total {
            return Err(Error::InvalidArgument(format!(
                "{} candidates requested from {total} actions",
                self.n_candidates
            )));
        }
        if !(self.balance_threshold > 0.0 && self.angle_tolerance > 0.0) {
            return Err(Error::InvalidArgument("thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    AbortedHazard,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
            Outcome::AbortedHazard => "aborted_hazard",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    /// Control steps taken after exploration.
    pub steps: usize,
    pub exploration_steps: usize,
    pub theta_trace: Vec<f64>,
    /// Balance error after every control step (m).
    pub balance_trace: Vec<f64>,
    pub r1_trace: Vec<f64>,
    pub r2_trace: Vec<f64>,
    pub actions: Vec<Action>,
    /// Control-phase transitions, kept for building training data.
    #[serde(skip)]
    pub transitions: Vec<Transition>,
    /// Largest balance error seen, exploration included.
    pub max_balance_error: f64,
    pub reason: Option<String>,
    pub hazard: Option<HazardReport>,
    pub adaptations: usize,
    pub adaptation_time_s: f64,
    pub wall_time_s: f64,
}

impl EpisodeResult {
    pub(crate) fn new() -> Self {
        Self {
            outcome: Outcome::Failure,
            steps: 0,
            exploration_steps: 0,
            theta_trace: Vec::new(),
            balance_trace: Vec::new(),
            r1_trace: Vec::new(),
            r2_trace: Vec::new(),
            actions: Vec::new(),
            transitions: Vec::new(),
            max_balance_error: 0.0,
            reason: None,
            hazard: None,
            adaptations: 0,
            adaptation_time_s: 0.0,
            wall_time_s: 0.0,
        }
    }

    pub(crate) fn finish(mut self, outcome: Outcome, reason: impl Into<String>, start: Instant) -> Self {
        self.outcome = outcome;
        let reason = reason.into();
        self.reason = (!reason.is_empty()).then_some(reason);
        self.wall_time_s = start.elapsed().as_secs_f64();
        self
    }

    /// Trace CSV `step,theta,balance_err,r1,r2,v1,v2,p1,p2` ending with a
    /// `# summary` comment line. Wall time is left out so traces are reproducible.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,theta,balance_err,r1,r2,v1,v2,p1,p2")?;
        for i in 0..self.steps {
            let a = self.actions[i].components();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                i + 1,
                self.theta_trace[i],
                self.balance_trace[i],
                self.r1_trace[i],
                self.r2_trace[i],
                a[0],
                a[1],
                a[2],
                a[3]
            )?;
        }
        writeln!(
            w,
            "# summary outcome={} steps={} max_balance_error={} reason={}",
            self.outcome,
            self.steps,
            self.max_balance_error,
            self.reason.as_deref().unwrap_or("-")
        )?;
        Ok(())
    }
}

/// Predicted quantities the rewards depend on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPrediction {
    pub theta: f64,
    pub y_geom: f64,
    pub belt_y: [f64; 2],
}

/// A one-step predictor plugged into the shared control loop.
pub trait OneStepModel {
    /// `None` when the model cannot evaluate `action` in this state.
    fn predict(&self, window: &[Observation], action: &Action) -> Result<Option<StepPrediction>>;

    /// Called after each applied control step (0-based).
    fn after_step(&mut self, _transition: &Transition, _step: usize) -> Result<()> {
        Ok(())
    }

    /// Adaptation count and time spent adapting (s).
    fn adaptation_stats(&self) -> (usize, f64) {
        (0, 0.0)
    }
}

/// The physics-prior predictor with post-action belt positions.
pub struct GrayBoxModel {
    pub predictor: Predictor,
    pub belt: BeltConfig,
}

impl OneStepModel for GrayBoxModel {
    fn predict(&self, window: &[Observation], action: &Action) -> Result<Option<StepPrediction>> {
        match self.predictor.predict(window, action) {
            Ok(p) => {
                let last = &window[window.len() - 1];
                Ok(Some(StepPrediction {
                    theta: p.theta_hat,
                    y_geom: p.r_hat.y,
                    belt_y: self.belt.belts_after(last.belt_y, action),
                }))
            }
            Err(Error::UnsupportedForce(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Produces a mass-distribution estimate from the exploratory trajectory.
pub trait DistributionSource {
    fn estimate(&self, traj: &Trajectory) -> Result<MassDistribution>;
}

impl DistributionSource for EstimatorModel {
    fn estimate(&self, traj: &Trajectory) -> Result<MassDistribution> {
        Ok(predict(self, traj)?.dist)
    }
}

/// Hands back a fixed distribution regardless of the trajectory.
pub struct KnownDistribution(pub MassDistribution);

impl DistributionSource for KnownDistribution {
    fn estimate(&self, _traj: &Trajectory) -> Result<MassDistribution> {
        Ok(self.0.clone())
    }
}

/// One MPC step: best-effort Pareto choice among candidates the model can score.
pub fn choose_action<R: Rng + ?Sized>(
    model: &dyn OneStepModel,
    window: &[Observation],
    action_set: &[Action],
    cfg: &ControllerConfig,
    rng: &mut R,
) -> Result<(Action, RewardPair)> {
    let candidates = sample_candidates(action_set, cfg.n_candidates, rng);
    let mut scored = Vec::with_capacity(candidates.len());
    for a in candidates {
        if let Some(p) = model.predict(window, &a)? {
            let r = score_action(p.theta, p.y_geom, p.belt_y, cfg);
            if r.r1.is_finite() && r.r2.is_finite() {
                scored.push((a, r));
            }
        }
    }
    let front = pareto_front(&scored);
    Ok(select_action(&front, rng).unwrap_or((
        Action::null(),
        RewardPair {
            r1: f64::NAN,
            r2: f64::NAN,
        },
    )))
}

/// Shared control loop for every one-step model. `window` holds the latest
/// observations, oldest first.
pub fn control_loop<R: Rng + ?Sized>(
    sim: &mut Simulator,
    model: &mut dyn OneStepModel,
    cfg: &ControllerConfig,
    rng: &mut R,
    mut window: Vec<Observation>,
    mut result: EpisodeResult,
    start: Instant,
) -> Result<EpisodeResult> {
    let action_set = discrete_action_set(&cfg.action_grid);
    for step in 0..cfg.max_steps {
        let (action, reward) = choose_action(model, &window, &action_set, cfg, rng)?;
        let out = sim.step(&action)?;
        let obs = out.observation;
        let balance = obs.balance_error();
        result.steps += 1;
        result.actions.push(action);
        result.theta_trace.push(obs.geom_pose.theta);
        result.balance_trace.push(balance);
        result.r1_trace.push(reward.r1);
        result.r2_trace.push(reward.r2);
        result.max_balance_error = result.max_balance_error.max(balance);

        let transition = Transition {
            obs: window[window.len() - 1].clone(),
            action,
            next_obs: obs.clone(),
        };
        model.after_step(&transition, step)?;
        result.transitions.push(transition);
        (result.adaptations, result.adaptation_time_s) = model.adaptation_stats();
        if window.len() >= WINDOW {
            window.remove(0);
        }
        window.push(obs);

        if out.events.support_lost {
            return Ok(result.finish(Outcome::Failure, "support lost", start));
        }
        if balance >= cfg.balance_threshold {
            return Ok(result.finish(Outcome::Failure, "balance threshold breached", start));
        }
        if wrap_angle(sim.state().pose.theta - cfg.target_angle).abs() <= cfg.angle_tolerance {
            let res = result.finish(Outcome::Success, "", start);
            assert!(res.balance_trace.iter().all(|&b| b <= cfg.balance_threshold));
            return Ok(res);
        }
    }
    Ok(result.finish(Outcome::Failure, "step limit", start))
}

/// Resets `sim`, returning an early result if the episode ends before control.
pub(crate) fn start_episode(sim: &mut Simulator, init_pose: Pose2, cfg: &ControllerConfig) -> Result<(Observation, Option<EpisodeResult>)> {
    cfg.validate()?;
    let obs = sim.reset(init_pose)?;
    if cfg.max_steps == 0 {
        return Ok((obs, Some(EpisodeResult::new().finish(Outcome::Failure, "step limit", Instant::now()))));
    }
    Ok((obs, None))
}

/// Physics-prior episode: explore, estimate, gate on hazard, then control.
pub fn run_episode(
    sim: &mut Simulator,
    init_pose: Pose2,
    source: &dyn DistributionSource,
    map: &ControlForceMap,
    cfg: &ControllerConfig,
) -> Result<EpisodeResult> {
    let start = Instant::now();
    let (_, early) = start_episode(sim, init_pose, cfg)?;
    if let Some(r) = early {
        return Ok(r);
    }
    let mut result = EpisodeResult::new();
    let traj = run_exploratory_sequence(sim)?;
    result.exploration_steps = traj.len();
    result.max_balance_error = traj
        .observations()
        .iter()
        .map(Observation::balance_error)
        .fold(0.0, f64::max);
    if traj.truncated {
        return Ok(result.finish(Outcome::Failure, "support lost during exploration", start));
    }
    if result.max_balance_error >= cfg.balance_threshold {
        return Ok(result.finish(Outcome::Failure, "balance threshold breached during exploration", start));
    }

    let estimate = source.estimate(&traj)?;
    let hazard = estimate.classify_hazard();
    let hazardous = hazard.hazardous;
    let volume = hazard.triggering_volume;
    result.hazard = Some(hazard);
    if hazardous {
        let v = volume.map_or_else(|| "?".to_string(), |v| v.to_string());
        return Ok(result.finish(Outcome::AbortedHazard, format!("estimated mass concentrated in {v}"), start));
    }

    let belt = sim.cfg().clone();
    let predictor = match Predictor::new(&estimate, map.clone(), belt.kinetic_friction_mu, belt.gravity) {
        Ok(p) => p,
        Err(Error::DegenerateInertia(i)) => {
            return Ok(result.finish(Outcome::AbortedHazard, format!("degenerate inertia {i:e}"), start));
        }
        Err(e) => return Err(e),
    };
    let mut model = GrayBoxModel { predictor, belt };
    let obs = traj.observations();
    let window = obs[obs.len().saturating_sub(WINDOW)..].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    control_loop(sim, &mut model, cfg, &mut rng, window, result, start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate, CalibrationConfig};
    use crate::massmodel::{GridDims, OccupancyGrid, DEFAULT_BOX, DEFAULT_GRID, MASS_FLOOR};
    use crate::sim::{Goal, Restriction};
    use proptest::prelude::*;

    fn brute_force(scores: &[RewardPair]) -> Vec<usize> {
        (0..scores.len())
            .filter(|&i| !scores.iter().any(|o| o.dominates(&scores[i])))
            .collect()
    }

    fn rp(r1: f64, r2: f64) -> RewardPair {
        RewardPair { r1, r2 }
    }

    #[test]
    fn default_action_set_has_95_valid_actions() {
        let set = discrete_action_set(&ActionGridSpec::default());
        assert_eq!(set.len(), 95);
        assert!(set.iter().all(Action::is_valid));
        assert_eq!(set.iter().filter(|a| a.tag == Restriction::Null).count(), 1);
        for (i, a) in set.iter().enumerate() {
            assert!(set[i + 1..].iter().all(|b| b != a), "duplicate {a:?}");
        }
    }

    #[test]
    fn candidate_sampling() {
        let set = discrete_action_set(&ActionGridSpec::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let all = sample_candidates(&set, 95, &mut rng);
        let mut sorted: Vec<String> = all.iter().map(|a| format!("{a:?}")).collect();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 95);
        let a = sample_candidates(&set, 50, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_candidates(&set, 50, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn candidate_frequencies_are_uniform() {
        let set = discrete_action_set(&ActionGridSpec::default());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; set.len()];
        let draws = 10_000;
        for _ in 0..draws {
            for i in index::sample(&mut rng, set.len(), 50) {
                counts[i] += 1;
            }
        }
        let p = 50.0 / 95.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd + 1.0, "{c} vs {mean}");
        }
    }

    #[test]
    fn reward_values() {
        let cfg = ControllerConfig::default();
        let r = score_action(FRAC_PI_2, 0.0, [-0.09, 0.09], &cfg);
        assert!((r.r1 - 1e6).abs() < 1e-6);
        assert!((r.r2 - 1e6).abs() < 1e-6);
        let r = score_action(FRAC_PI_2 - 0.5, 0.0, [-0.09, 0.09], &cfg);
        assert!((r.r1 - 4.0).abs() < 1e-4);
    }

    #[test]
    fn pareto_examples() {
        let s = [rp(1.0, 2.0), rp(2.0, 1.0), rp(0.5, 0.5)];
        assert_eq!(pareto_indices(&s), vec![0, 1]);
        assert_eq!(pareto_indices(&[rp(3.0, 3.0)]), vec![0]);
        let ties = [rp(1.0, 1.0), rp(1.0, 1.0), rp(1.0, 0.5)];
        assert_eq!(pareto_indices(&ties), vec![0, 1]);
    }

    #[test]
    fn selection_is_uniform_over_front() {
        let front: Vec<(Action, RewardPair)> = (0..5).map(|i| (Action::velocity(0.1 * (i + 1) as f64, 0.0), rp(i as f64, -(i as f64)))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let (a, _) = select_action(&front, &mut rng).unwrap();
            counts[front.iter().position(|f| f.0 == a).unwrap()] += 1;
        }
        let sd = (10_000.0 * 0.2 * 0.8f64).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 2000.0).abs() <= 3.0 * sd), "{counts:?}");
        let single = [front[2]];
        assert_eq!(select_action(&single, &mut rng).unwrap().0, front[2].0);
        assert!(select_action(&[], &mut rng).is_none());
    }

    proptest! {
        #[test]
        fn pareto_matches_brute_force(raw in prop::collection::vec((0u8..6, 0u8..6), 1..60)) {
            let s: Vec<RewardPair> = raw.iter().map(|&(a, b)| rp(a as f64, b as f64)).collect();
            prop_assert_eq!(pareto_indices(&s), brute_force(&s));
        }

        #[test]
        fn pareto_is_scale_invariant(raw in prop::collection::vec((0.0..10.0f64, 0.0..10.0f64), 1..40), k in 0.01..100.0f64) {
            let s: Vec<RewardPair> = raw.iter().map(|&(a, b)| rp(a, b)).collect();
            let scaled: Vec<RewardPair> = s.iter().map(|r| rp(r.r1 * k, r.r2 * k)).collect();
            prop_assert_eq!(pareto_indices(&s), pareto_indices(&scaled));
        }
    }

    fn uniform() -> MassDistribution {
        MassDistribution::uniform(DEFAULT_GRID, DEFAULT_BOX, 2.0).unwrap()
    }

    fn sim_for(d: MassDistribution) -> Simulator {
        Simulator::new(d, BeltConfig::default(), Goal::default(), Pose2::default()).unwrap()
    }

    #[test]
    fn zero_step_budget_fails_immediately() {
        let (map, _) = calibrate(&CalibrationConfig::default(), &BeltConfig::default()).unwrap();
        let cfg = ControllerConfig {
            max_steps: 0,
            ..ControllerConfig::default()
        };
        let mut sim = sim_for(uniform());
        let r = run_episode(&mut sim, Pose2::default(), &KnownDistribution(uniform()), &map, &cfg).unwrap();
        assert_eq!(r.outcome, Outcome::Failure);
        assert_eq!(r.steps, 0);
        assert!(r.balance_trace.is_empty());
        assert_eq!(sim.steps(), 0);
    }

    #[test]
    fn hazardous_estimate_aborts_before_control() {
        let (map, _) = calibrate(&CalibrationConfig::default(), &BeltConfig::default()).unwrap();
        let occ = OccupancyGrid::full(DEFAULT_GRID).confined_to(crate::massmodel::HazardVolume::U1);
        let skewed = MassDistribution::from_occupancy(&occ, DEFAULT_BOX, 4.0, MASS_FLOOR).unwrap();
        let mut sim = sim_for(skewed.clone());
        let r = run_episode(&mut sim, Pose2::default(), &KnownDistribution(skewed), &map, &ControllerConfig::default())
            .unwrap();
        assert_eq!(r.outcome, Outcome::AbortedHazard);
        assert_eq!(r.steps, 0);
        assert!(r.hazard.unwrap().hazardous);

        let point = MassDistribution::from_masses(GridDims::new(1, 1, 1), DEFAULT_BOX, vec![2.0]).unwrap();
        let mut sim = sim_for(uniform());
        let r = run_episode(&mut sim, Pose2::default(), &KnownDistribution(point), &map, &ControllerConfig::default())
            .unwrap();
        assert_eq!(r.outcome, Outcome::AbortedHazard);
    }

    #[test]
    fn uniform_box_is_rotated_with_known_distribution() {
        let (map, _) = calibrate(&CalibrationConfig::default(), &BeltConfig::default()).unwrap();
        let mut sim = sim_for(uniform());
        let cfg = ControllerConfig::default();
        let r = run_episode(&mut sim, Pose2::default(), &KnownDistribution(uniform()), &map, &cfg).unwrap();
        assert_eq!(r.outcome, Outcome::Success, "{:?} after {} steps", r.reason, r.steps);
        assert!(r.balance_trace.iter().all(|&b| b < cfg.balance_threshold));
        assert_eq!(r.exploration_steps, 45);
        let mut buf = Vec::new();
        r.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), r.steps + 2);
    }
}
