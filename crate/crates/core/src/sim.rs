//! Planar ground-truth physics of a box resting on two conveyor belts.
//!
//! World frame: `x` runs along the belts, `y` across them, rotation `θ` is about
//! the vertical axis. Belt `i` occupies `|x| ≤ L/2`, `|y − P_y^i| ≤ W/2`. Every
//! voxel column whose bottom voxel center lies over a belt is in contact with it
//! and carries the column's weight as normal load.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use nalgebra::{Rotation2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::massmodel::MassDistribution;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// How belt commands act on the box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Actuation {
    /// Commands set belt surface velocities and lateral belt displacement;
    /// all force on the box is Coulomb friction against the moving belts.
    SurfaceVelocity,
    /// Belts stay still; each command channel pushes its contact set with a
    /// force `gain · command`. Used to check force calibration.
    LinearForce { velocity_gain: f64, position_gain: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeltConfig {
    pub belt_length: f64,
    pub belt_width: f64,
    /// Allowed distance between the inner belt edges.
    pub gap_range: (f64, f64),
    pub initial_gap: f64,
    pub surface_speed_limit: f64,
    pub position_step_limit: f64,
    pub kinetic_friction_mu: f64,
    pub gravity: f64,
    pub control_period: f64,
    pub min_substeps: usize,
    /// Slip speed below which friction is scaled down linearly.
    pub slip_floor: f64,
    pub actuation: Actuation,
}

impl Default for BeltConfig {
    fn default() -> Self {
        Self {
            belt_length: 4.0,
            belt_width: 0.12,
            gap_range: (0.02, 0.10),
            initial_gap: 0.06,
            surface_speed_limit: 0.5,
            position_step_limit: 0.02,
            kinetic_friction_mu: 0.4,
            gravity: 9.8,
            control_period: 0.05,
            min_substeps: 10,
            slip_floor: 0.005,
            actuation: Actuation::SurfaceVelocity,
        }
    }
}

impl BeltConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.belt_length,
            self.belt_width,
            self.surface_speed_limit,
            self.position_step_limit,
            self.gravity,
            self.control_period,
            self.slip_floor,
        ];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("belt limits must be positive".into()));
        }
        if !(self.kinetic_friction_mu > 0.0 && self.kinetic_friction_mu <= 2.0) {
            return Err(Error::InvalidArgument("friction coefficient must lie in (0, 2]".into()));
        }
        let (lo, hi) = self.gap_range;
        if !(lo > 0.0 && hi >= lo && (lo..=hi).contains(&self.initial_gap)) {
            return Err(Error::InvalidArgument("initial gap outside gap range".into()));
        }
        if self.min_substeps == 0 {
            return Err(Error::InvalidArgument("need at least one substep".into()));
        }
        Ok(())
    }

    /// Substep count keeping regularized friction stable under explicit
    /// integration: `h · μg / slip_floor ≤ 1/2`.
    pub fn substeps(&self) -> usize {
        let needed = self.control_period * self.kinetic_friction_mu * self.gravity / (0.5 * self.slip_floor);
        self.min_substeps.max(needed.ceil() as usize)
    }

    /// Belt centerlines placed symmetrically about `y = 0` at the initial gap.
    pub fn initial_belts(&self) -> [f64; 2] {
        let half = 0.5 * (self.initial_gap + self.belt_width);
        [-half, half]
    }

    pub fn gap(&self, belt_y: [f64; 2]) -> f64 {
        belt_y[1] - belt_y[0] - self.belt_width
    }

    /// Lateral deltas actually applied for `action` from `belt_y`, after the
    /// per-step rate limit and the gap range.
    pub fn limited_position_delta(&self, belt_y: [f64; 2], action: &Action) -> [f64; 2] {
        if !matches!(self.actuation, Actuation::SurfaceVelocity) {
            return [0.0; 2];
        }
        let gap = self.gap(belt_y);
        let (lo, hi) = self.gap_range;
        let lim = self.position_step_limit;
        match action.tag {
            // left belt moving +y closes the gap
            Restriction::LeftPosition => {
                let p = action.p[0].clamp(-lim, lim);
                [p.clamp((gap - hi).min(0.0), (gap - lo).max(0.0)), 0.0]
            }
            Restriction::RightPosition => {
                let p = action.p[1].clamp(-lim, lim);
                [0.0, p.clamp((lo - gap).min(0.0), (hi - gap).max(0.0))]
            }
            _ => [0.0; 2],
        }
    }

    /// Belt positions once `action` has been applied.
    pub fn belts_after(&self, belt_y: [f64; 2], action: &Action) -> [f64; 2] {
        let d = self.limited_position_delta(belt_y, action);
        [belt_y[0] + d[0], belt_y[1] + d[1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Restriction {
    VelocityPair,
    LeftPosition,
    RightPosition,
    Null,
}

/// A belt command. Velocity and position commands never mix in one action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Surface velocities of the left and right belts (m/s).
    pub v: [f64; 2],
    /// Lateral displacement of the left and right belts over one step (m).
    pub p: [f64; 2],
    pub tag: Restriction,
}

impl Action {
    pub const fn null() -> Self {
        Self {
            v: [0.0; 2],
            p: [0.0; 2],
            tag: Restriction::Null,
        }
    }

    pub fn velocity(v1: f64, v2: f64) -> Self {
        if v1 == 0.0 && v2 == 0.0 {
            return Self::null();
        }
        Self {
            v: [v1, v2],
            p: [0.0; 2],
            tag: Restriction::VelocityPair,
        }
    }

    pub fn left(p1: f64) -> Self {
        if p1 == 0.0 {
            return Self::null();
        }
        Self {
            v: [0.0; 2],
            p: [p1, 0.0],
            tag: Restriction::LeftPosition,
        }
    }

    pub fn right(p2: f64) -> Self {
        if p2 == 0.0 {
            return Self::null();
        }
        Self {
            v: [0.0; 2],
            p: [0.0, p2],
            tag: Restriction::RightPosition,
        }
    }

    /// Builds an action from `[v1, v2, p1, p2]`, rejecting mixed commands.
    pub fn from_components(c: [f64; 4]) -> Result<Self> {
        let a = match (c[0] != 0.0 || c[1] != 0.0, c[2] != 0.0, c[3] != 0.0) {
            (false, false, false) => Self::null(),
            (true, false, false) => Self::velocity(c[0], c[1]),
            (false, true, false) => Self::left(c[2]),
            (false, false, true) => Self::right(c[3]),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "action {c:?} mixes velocity and position commands"
                )))
            }
        };
        Ok(a)
    }

    pub fn components(&self) -> [f64; 4] {
        [self.v[0], self.v[1], self.p[0], self.p[1]]
    }

    /// Exactly the components allowed by the tag are nonzero.
    pub fn is_valid(&self) -> bool {
        let [v1, v2, p1, p2] = self.components();
        let all_finite = self.components().iter().all(|c| c.is_finite());
        all_finite
            && match self.tag {
                Restriction::VelocityPair => (v1 != 0.0 || v2 != 0.0) && p1 == 0.0 && p2 == 0.0,
                Restriction::LeftPosition => p1 != 0.0 && v1 == 0.0 && v2 == 0.0 && p2 == 0.0,
                Restriction::RightPosition => p2 != 0.0 && v1 == 0.0 && v2 == 0.0 && p1 == 0.0,
                Restriction::Null => [v1, v2, p1, p2].iter().all(|&c| c == 0.0),
            }
    }

    /// The same command seen in a world mirrored across `y = 0`.
    pub fn mirrored(&self) -> Self {
        match self.tag {
            Restriction::VelocityPair => Self::velocity(self.v[1], self.v[0]),
            Restriction::LeftPosition => Self::right(-self.p[0]),
            Restriction::RightPosition => Self::left(-self.p[1]),
            Restriction::Null => Self::null(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Pose of the geometric center.
    pub pose: Pose2,
    /// Velocity of the geometric center.
    pub lin_vel: Vector2<f64>,
    pub ang_vel: f64,
    pub belt_y: [f64; 2],
    pub belt_surface_vel: [f64; 2],
    pub time: f64,
}

impl SimState {
    /// `[x, y, θ, P_y¹, P_y²]`
    pub fn to_vector(&self) -> [f64; 5] {
        [self.pose.x, self.pose.y, self.pose.theta, self.belt_y[0], self.belt_y[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub geom_pose: Pose2,
    /// Bottom-layer voxel indices resting on the left belt.
    pub s1: Vec<usize>,
    /// Bottom-layer voxel indices resting on the right belt.
    pub s2: Vec<usize>,
    pub belt_y: [f64; 2],
}

impl Observation {
    /// `[x, y, θ, P_y¹, P_y²]`
    pub fn state_vector(&self) -> [f64; 5] {
        let p = self.geom_pose;
        [p.x, p.y, p.theta, self.belt_y[0], self.belt_y[1]]
    }

    pub fn midline(&self) -> f64 {
        0.5 * (self.belt_y[0] + self.belt_y[1])
    }

    /// Lateral distance of the geometric center from the belt midline (m).
    pub fn balance_error(&self) -> f64 {
        (self.geom_pose.y - self.midline()).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub next_obs: Observation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Set when support was lost before the sequence finished.
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// All observations in order: the first transition's start plus every end.
    pub fn observations(&self) -> Vec<Observation> {
        let mut out = Vec::with_capacity(self.len() + 1);
        if let Some(first) = self.transitions.first() {
            out.push(first.obs.clone());
        }
        out.extend(self.transitions.iter().map(|t| t.next_obs.clone()));
        out
    }

    /// CSV with columns `t,x,y,theta,Py1,Py2,v1,v2,p1,p2,S1,S2`; one row per
    /// observation, carrying the action applied from it (zero on the last row).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "x", "y", "theta", "Py1", "Py2", "v1", "v2", "p1", "p2", "S1", "S2"])?;
        let rows = self
            .transitions
            .iter()
            .map(|t| (&t.obs, t.action))
            .chain(self.transitions.last().map(|t| (&t.next_obs, Action::null())));
        for (o, a) in rows {
            let mut rec: Vec<String> = [o.time, o.geom_pose.x, o.geom_pose.y, o.geom_pose.theta, o.belt_y[0], o.belt_y[1]]
                .iter()
                .chain(a.components().iter())
                .map(|v| format!("{v:.9}"))
                .collect();
            rec.push(o.s1.len().to_string());
            rec.push(o.s2.len().to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFlags {
    pub support_lost: bool,
    pub rotation_reached: bool,
    pub step_limit: bool,
}

/// Termination thresholds checked by [`Simulator::step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub target_angle: f64,
    pub angle_tolerance: f64,
    pub max_steps: usize,
}

impl Default for Goal {
    fn default() -> Self {
        Self {
            target_angle: FRAC_PI_2,
            angle_tolerance: 0.05,
            max_steps: 1000,
        }
    }
}

/// Wraps an angle difference into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Planar mass data of a distribution, precomputed once per episode.
#[derive(Clone, Debug)]
pub struct Footprint {
    /// Column centers relative to the geometric center, box frame; `il * nw + iw`.
    pub column_offsets: Vec<Vector2<f64>>,
    pub column_mass: Vec<f64>,
    /// Bottom voxel index of each column.
    pub bottom_voxel: Vec<usize>,
    /// Center of mass relative to the geometric center, box frame.
    pub com_offset: Vector2<f64>,
    pub mass: f64,
    pub izz: f64,
}

impl Footprint {
    pub fn new(dist: &MassDistribution) -> Result<Self> {
        let d = dist.dims();
        let gc = dist.geometric_center();
        let com = dist.center_of_mass()?;
        let mut column_offsets = Vec::with_capacity(d.nl * d.nw);
        let mut bottom_voxel = Vec::with_capacity(d.nl * d.nw);
        for il in 0..d.nl {
            for iw in 0..d.nw {
                let idx = d.index(il, iw, 0);
                let c = dist.voxel_center(idx) - gc;
                column_offsets.push(Vector2::new(c.x, c.y));
                bottom_voxel.push(idx);
            }
        }
        Ok(Self {
            column_offsets,
            column_mass: dist.column_masses(),
            bottom_voxel,
            com_offset: Vector2::new(com.x - gc.x, com.y - gc.y),
            mass: dist.total_mass(),
            izz: dist.izz_about_com()?,
        })
    }

    fn belt_of(&self, world: &Vector2<f64>, belt_y: [f64; 2], cfg: &BeltConfig) -> Option<usize> {
        if world.x.abs() > 0.5 * cfg.belt_length {
            return None;
        }
        (0..2).find(|&i| (world.y - belt_y[i]).abs() <= 0.5 * cfg.belt_width)
    }

    /// Contact column indices (into `column_*`) for each belt.
    fn contact_columns(&self, pose: &Pose2, belt_y: [f64; 2], cfg: &BeltConfig) -> [Vec<usize>; 2] {
        let rot = Rotation2::new(pose.theta);
        let origin = pose.position();
        let mut out = [Vec::new(), Vec::new()];
        for (c, off) in self.column_offsets.iter().enumerate() {
            let world = origin + rot * off;
            if let Some(i) = self.belt_of(&world, belt_y, cfg) {
                out[i].push(c);
            }
        }
        out
    }
}

/// Bottom-layer voxels resting on the left and right belts.
pub fn contact_sets(state: &SimState, dist: &MassDistribution, cfg: &BeltConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let fp = Footprint::new(dist)?;
    Ok(contact_sets_fp(state, &fp, cfg))
}

fn contact_sets_fp(state: &SimState, fp: &Footprint, cfg: &BeltConfig) -> (Vec<usize>, Vec<usize>) {
    let [c1, c2] = fp.contact_columns(&state.pose, state.belt_y, cfg);
    let to_voxels = |cols: Vec<usize>| cols.into_iter().map(|c| fp.bottom_voxel[c]).collect();
    (to_voxels(c1), to_voxels(c2))
}

fn observe(state: &SimState, fp: &Footprint, cfg: &BeltConfig) -> Observation {
    let (s1, s2) = contact_sets_fp(state, fp, cfg);
    Observation {
        time: state.time,
        geom_pose: state.pose,
        s1,
        s2,
        belt_y: state.belt_y,
    }
}

#[inline]
fn cross_z(w: f64, r: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-w * r.y, w * r.x)
}

#[inline]
fn moment(r: &Vector2<f64>, f: &Vector2<f64>) -> f64 {
    r.x * f.y - r.y * f.x
}

/// Force on a contact column: Coulomb friction against its slip velocity,
/// scaled down linearly below `slip_floor`. Magnitude never exceeds `μ g m`.
#[inline]
pub fn column_friction(slip: &Vector2<f64>, column_mass: f64, cfg: &BeltConfig) -> Vector2<f64> {
    let speed = slip.norm();
    if speed == 0.0 {
        return Vector2::zeros();
    }
    let cap = cfg.kinetic_friction_mu * cfg.gravity * column_mass;
    -slip * (cap / speed.max(cfg.slip_floor))
}

/// Per-column contact forces (world frame) for the current state, given the
/// belt surface velocities `[ (vx, vy); 2 ]`.
pub fn contact_forces(
    pose: &Pose2,
    com_vel: &Vector2<f64>,
    ang_vel: f64,
    belt_y: [f64; 2],
    belt_vel: [Vector2<f64>; 2],
    fp: &Footprint,
    cfg: &BeltConfig,
) -> Vec<(usize, Vector2<f64>)> {
    let rot = Rotation2::new(pose.theta);
    let com = pose.position() + rot * fp.com_offset;
    let contacts = fp.contact_columns(pose, belt_y, cfg);
    let mut out = Vec::with_capacity(contacts[0].len() + contacts[1].len());
    for (belt, cols) in contacts.iter().enumerate() {
        for &c in cols {
            let r = pose.position() + rot * fp.column_offsets[c] - com;
            let v = com_vel + cross_z(ang_vel, &r);
            out.push((c, column_friction(&(v - belt_vel[belt]), fp.column_mass[c], cfg)));
        }
    }
    out
}

/// Advances the state by one control period.
pub fn advance(state: &SimState, action: &Action, fp: &Footprint, cfg: &BeltConfig) -> Result<SimState> {
    let n = cfg.substeps();
    let h = cfg.control_period / n as f64;
    let vmax = cfg.surface_speed_limit;

    let (surface, push) = match (cfg.actuation, action.tag) {
        (Actuation::SurfaceVelocity, Restriction::VelocityPair) => {
            ([action.v[0].clamp(-vmax, vmax), action.v[1].clamp(-vmax, vmax)], None)
        }
        (Actuation::SurfaceVelocity, _) => ([0.0; 2], None),
        (Actuation::LinearForce { velocity_gain, position_gain }, _) => (
            [0.0; 2],
            Some([
                Vector2::new(velocity_gain * action.v[0], position_gain * action.p[0]),
                Vector2::new(velocity_gain * action.v[1], position_gain * action.p[1]),
            ]),
        ),
    };
    let delta = cfg.limited_position_delta(state.belt_y, action);
    let lateral = [delta[0] / cfg.control_period, delta[1] / cfg.control_period];
    let belt_vel = [Vector2::new(surface[0], lateral[0]), Vector2::new(surface[1], lateral[1])];

    let mut pose = state.pose;
    let mut belt_y = state.belt_y;
    let mut omega = state.ang_vel;
    let c0 = Rotation2::new(pose.theta) * fp.com_offset;
    let mut com = pose.position() + c0;
    let mut com_vel = state.lin_vel + cross_z(omega, &c0);

    for _ in 0..n {
        let mut force = Vector2::zeros();
        let mut torque = 0.0;
        let rot = Rotation2::new(pose.theta);
        let contacts = fp.contact_columns(&pose, belt_y, cfg);
        for (belt, cols) in contacts.iter().enumerate() {
            let drive = match push {
                Some(p) if !cols.is_empty() => Some(p[belt] / cols.len() as f64),
                _ => None,
            };
            for &c in cols {
                let r = pose.position() + rot * fp.column_offsets[c] - com;
                let v = com_vel + cross_z(omega, &r);
                let mut f = column_friction(&(v - belt_vel[belt]), fp.column_mass[c], cfg);
                if let Some(d) = drive {
                    f += d;
                }
                force += f;
                torque += moment(&r, &f);
            }
        }
        // trapezoidal positions: exact displacement under piecewise-constant force
        let (v0, w0) = (com_vel, omega);
        com_vel += force * (h / fp.mass);
        omega += torque * (h / fp.izz);
        com += (v0 + com_vel) * (0.5 * h);
        pose.theta += (w0 + omega) * (0.5 * h);
        let c = Rotation2::new(pose.theta) * fp.com_offset;
        pose.x = com.x - c.x;
        pose.y = com.y - c.y;
        belt_y[0] += lateral[0] * h;
        belt_y[1] += lateral[1] * h;
    }
    // land belts exactly on the commanded positions
    belt_y = [state.belt_y[0] + delta[0], state.belt_y[1] + delta[1]];

    let c = Rotation2::new(pose.theta) * fp.com_offset;
    let next = SimState {
        pose,
        lin_vel: com_vel - cross_z(omega, &c),
        ang_vel: omega,
        belt_y,
        belt_surface_vel: surface,
        time: state.time + cfg.control_period,
    };
    let finite = [pose.x, pose.y, pose.theta, omega, com_vel.x, com_vel.y].iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::SimulationDiverged { time: next.time });
    }
    Ok(next)
}

/// COM lateral position outside the span of the current contact columns.
fn support_lost(state: &SimState, fp: &Footprint, cfg: &BeltConfig) -> bool {
    let rot = Rotation2::new(state.pose.theta);
    let origin = state.pose.position();
    let [c1, c2] = fp.contact_columns(&state.pose, state.belt_y, cfg);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &c in c1.iter().chain(&c2) {
        let y = (origin + rot * fp.column_offsets[c]).y;
        lo = lo.min(y);
        hi = hi.max(y);
    }
    let com_y = (origin + rot * fp.com_offset).y;
    !(lo <= com_y && com_y <= hi)
}

/// Initial state for a box at `init_pose` with belts at the configured gap.
pub fn reset(dist: &MassDistribution, init_pose: Pose2, cfg: &BeltConfig) -> Result<(SimState, Observation)> {
    let fp = Footprint::new(dist)?;
    reset_fp(&fp, init_pose, cfg)
}

fn reset_fp(fp: &Footprint, init_pose: Pose2, cfg: &BeltConfig) -> Result<(SimState, Observation)> {
    cfg.validate()?;
    let state = SimState {
        pose: init_pose,
        lin_vel: Vector2::zeros(),
        ang_vel: 0.0,
        belt_y: cfg.initial_belts(),
        belt_surface_vel: [0.0; 2],
        time: 0.0,
    };
    let obs = observe(&state, fp, cfg);
    if obs.s1.is_empty() || obs.s2.is_empty() {
        return Err(Error::UnsupportedInitialPose(format!(
            "|S1| = {}, |S2| = {} at {init_pose:?}",
            obs.s1.len(),
            obs.s2.len()
        )));
    }
    Ok((state, obs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub events: EventFlags,
}

/// One episode's environment: a fixed box on the belts.
#[derive(Clone, Debug)]
pub struct Simulator {
    dist: MassDistribution,
    fp: Footprint,
    cfg: BeltConfig,
    goal: Goal,
    state: SimState,
    steps: usize,
}

impl Simulator {
    pub fn new(dist: MassDistribution, cfg: BeltConfig, goal: Goal, init_pose: Pose2) -> Result<Self> {
        let fp = Footprint::new(&dist)?;
        let (state, _) = reset_fp(&fp, init_pose, &cfg)?;
        Ok(Self {
            dist,
            fp,
            cfg,
            goal,
            state,
            steps: 0,
        })
    }

    pub fn reset(&mut self, init_pose: Pose2) -> Result<Observation> {
        let (state, obs) = reset_fp(&self.fp, init_pose, &self.cfg)?;
        self.state = state;
        self.steps = 0;
        Ok(obs)
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn set_state(&mut self, state: SimState) {
        self.state = state;
    }

    pub fn dist(&self) -> &MassDistribution {
        &self.dist
    }

    pub fn footprint(&self) -> &Footprint {
        &self.fp
    }

    pub fn cfg(&self) -> &BeltConfig {
        &self.cfg
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn observation(&self) -> Observation {
        observe(&self.state, &self.fp, &self.cfg)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if !action.is_valid() {
            return Err(Error::InvalidArgument(format!("action violates its restriction: {action:?}")));
        }
        self.state = advance(&self.state, action, &self.fp, &self.cfg)?;
        self.steps += 1;
        let observation = observe(&self.state, &self.fp, &self.cfg);
        let err = wrap_angle(self.state.pose.theta - self.goal.target_angle).abs();
        let events = EventFlags {
            support_lost: support_lost(&self.state, &self.fp, &self.cfg),
            rotation_reached: err <= self.goal.angle_tolerance,
            step_limit: self.steps >= self.goal.max_steps,
        };
        Ok(StepOutcome { observation, events })
    }
}

pub const EXPLORATION_REPEAT: usize = 3;
pub const EXPLORATION_STEPS: usize = 15 * EXPLORATION_REPEAT;

/// The fixed exploratory controls: small rotations, single-belt drags,
/// translations and lateral belt moves, each undone by its opposite.
pub fn exploratory_controls() -> [Action; 15] {
    [
        Action::velocity(0.15, -0.15),
        Action::velocity(-0.15, 0.15),
        Action::velocity(0.15, 0.0),
        Action::velocity(-0.15, 0.0),
        Action::velocity(0.0, 0.15),
        Action::velocity(0.0, -0.15),
        Action::velocity(0.15, 0.15),
        Action::velocity(-0.15, -0.15),
        Action::left(0.01),
        Action::left(-0.01),
        Action::right(0.01),
        Action::right(-0.01),
        Action::velocity(0.1, -0.05),
        Action::velocity(-0.1, 0.05),
        Action::null(),
    ]
}

/// Runs the exploratory sequence from the simulator's current state.
pub fn run_exploratory_sequence(sim: &mut Simulator) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    let mut obs = sim.observation();
    for action in exploratory_controls() {
        for _ in 0..EXPLORATION_REPEAT {
            let out = sim.step(&action)?;
            traj.transitions.push(Transition {
                obs,
                action,
                next_obs: out.observation.clone(),
            });
            obs = out.observation;
            if out.events.support_lost {
                traj.truncated = true;
                return Ok(traj);
            }
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::massmodel::{sample_gaussian_distribution, DEFAULT_BOX, DEFAULT_GRID};

    fn uniform() -> MassDistribution {
        MassDistribution::uniform(DEFAULT_GRID, DEFAULT_BOX, 2.0).unwrap()
    }

    fn sim_with(dist: MassDistribution) -> Simulator {
        Simulator::new(dist, BeltConfig::default(), Goal::default(), Pose2::default()).unwrap()
    }

    #[test]
    fn centered_box_has_symmetric_contacts() {
        let (state, obs) = reset(&uniform(), Pose2::default(), &BeltConfig::default()).unwrap();
        assert_eq!(obs.s1.len(), obs.s2.len());
        assert_eq!(obs.s1.len(), 30);
        assert_eq!(state.lin_vel, Vector2::zeros());
        let again = reset(&uniform(), Pose2::default(), &BeltConfig::default()).unwrap();
        assert_eq!(again.0, state);
    }

    #[test]
    fn contact_partition_geometry() {
        let d = uniform();
        let dims = d.dims();
        let cfg = BeltConfig::default();
        let (_, obs) = reset(&d, Pose2::default(), &cfg).unwrap();
        // θ = 0: width axis spans the belts; left belt gets low width indices
        for &i in &obs.s1 {
            let (_, iw, ih) = dims.coords(i);
            assert_eq!(ih, 0);
            assert!(iw < 3);
        }
        for &i in &obs.s2 {
            assert!(dims.coords(i).1 >= 5);
        }
        let (_, rotated) = reset(&d, Pose2::new(0.0, 0.0, FRAC_PI_2), &cfg).unwrap();
        // θ = π/2: box x axis points along world y, high length indices on the right
        assert_eq!(rotated.s1.len(), rotated.s2.len());
        for &i in &rotated.s1 {
            assert!(dims.coords(i).0 < 5);
        }
        for &i in &rotated.s2 {
            assert!(dims.coords(i).0 >= 5);
        }
    }

    #[test]
    fn box_over_gap_only_has_no_contacts() {
        let d = uniform();
        let cfg = BeltConfig {
            gap_range: (0.02, 0.8),
            initial_gap: 0.7,
            ..BeltConfig::default()
        };
        let mut state = reset(&d, Pose2::default(), &BeltConfig::default()).unwrap().0;
        state.belt_y = cfg.initial_belts();
        let (s1, s2) = contact_sets(&state, &d, &cfg).unwrap();
        assert!(s1.is_empty() && s2.is_empty());
    }

    #[test]
    fn unsupported_initial_pose_is_rejected() {
        let r = reset(&uniform(), Pose2::new(0.0, -0.2, 0.0), &BeltConfig::default());
        assert!(matches!(r, Err(Error::UnsupportedInitialPose(_))));
    }

    #[test]
    fn null_action_at_rest_only_advances_time() {
        let mut sim = sim_with(uniform());
        let before = sim.state().clone();
        sim.step(&Action::null()).unwrap();
        let after = sim.state();
        assert_eq!(after.pose, before.pose);
        assert_eq!(after.lin_vel, before.lin_vel);
        assert_eq!(after.belt_y, before.belt_y);
        assert!((after.time - 0.05).abs() < 1e-15);
    }

    #[test]
    fn opposite_belts_spin_without_translation() {
        let mut spin = sim_with(uniform());
        spin.step(&Action::velocity(0.2, -0.2)).unwrap();
        let mut single = sim_with(uniform());
        single.step(&Action::velocity(0.2, 0.0)).unwrap();
        assert!(spin.state().ang_vel > 0.0);
        let vx_spin = spin.state().lin_vel.x.abs();
        let vx_single = single.state().lin_vel.x.abs();
        assert!(vx_single > 1e-3);
        assert!(vx_spin < 1e-6 * vx_single, "{vx_spin} vs {vx_single}");
        let w1 = spin.state().ang_vel;
        spin.step(&Action::velocity(0.2, -0.2)).unwrap();
        assert!(spin.state().ang_vel > w1);
    }

    #[test]
    fn same_direction_belts_translate_without_spin() {
        let mut sim = sim_with(uniform());
        sim.step(&Action::velocity(0.2, 0.2)).unwrap();
        let s = sim.state();
        assert!(s.lin_vel.x > 0.0 && s.pose.x > 0.0);
        assert!(s.ang_vel.abs() < 1e-12);
        assert!(s.lin_vel.y.abs() < 1e-12);
    }

    #[test]
    fn friction_only_dissipates_energy() {
        for seed in 0..5 {
            let d = sample_gaussian_distribution(seed, DEFAULT_GRID, DEFAULT_BOX, (0.5, 6.0)).unwrap();
            let mut sim = sim_with(d);
            let fp = sim.footprint().clone();
            let mut s = sim.state().clone();
            s.lin_vel = Vector2::new(0.25, -0.05);
            s.ang_vel = 1.5;
            sim.set_state(s);
            let ke = |st: &SimState| {
                let c = Rotation2::new(st.pose.theta) * fp.com_offset;
                let v = st.lin_vel + cross_z(st.ang_vel, &c);
                0.5 * fp.mass * v.norm_squared() + 0.5 * fp.izz * st.ang_vel.powi(2)
            };
            let mut last = ke(sim.state());
            for _ in 0..20 {
                sim.step(&Action::null()).unwrap();
                let e = ke(sim.state());
                assert!(e <= last + 1e-12, "{e} > {last}");
                last = e;
            }
        }
    }

    #[test]
    fn friction_is_bounded_per_column() {
        let d = sample_gaussian_distribution(4, DEFAULT_GRID, DEFAULT_BOX, (0.5, 6.0)).unwrap();
        let cfg = BeltConfig::default();
        let fp = Footprint::new(&d).unwrap();
        let belts = cfg.initial_belts();
        for (vel, w) in [(Vector2::new(1.0, 0.3), 2.0), (Vector2::new(-0.001, 0.0), 0.01)] {
            let forces = contact_forces(
                &Pose2::default(),
                &vel,
                w,
                belts,
                [Vector2::new(0.3, 0.0), Vector2::new(-0.3, 0.1)],
                &fp,
                &cfg,
            );
            assert!(!forces.is_empty());
            for (c, f) in forces {
                let cap = cfg.kinetic_friction_mu * cfg.gravity * fp.column_mass[c];
                assert!(f.norm() <= cap * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn observation_matches_recomputed_contacts() {
        let d = sample_gaussian_distribution(8, DEFAULT_GRID, DEFAULT_BOX, (0.5, 6.0)).unwrap();
        let mut sim = sim_with(d.clone());
        for a in exploratory_controls() {
            let out = sim.step(&a).unwrap();
            let (s1, s2) = contact_sets(sim.state(), &d, sim.cfg()).unwrap();
            assert_eq!(out.observation.s1, s1);
            assert_eq!(out.observation.s2, s2);
            assert!(s1.iter().all(|i| !s2.contains(i)));
        }
    }

    #[test]
    fn mirrored_world_mirrors_trajectory() {
        let d = sample_gaussian_distribution(21, DEFAULT_GRID, DEFAULT_BOX, (0.5, 6.0)).unwrap();
        let mirrored = d.mirrored_width();
        let cfg = BeltConfig::default();
        let pose = Pose2::new(0.01, 0.005, 0.1);
        let mut a = Simulator::new(d, cfg.clone(), Goal::default(), pose).unwrap();
        let mut b = Simulator::new(mirrored, cfg, Goal::default(), Pose2::new(pose.x, -pose.y, -pose.theta)).unwrap();
        let actions = exploratory_controls();
        for action in actions.iter().chain(actions.iter()) {
            a.step(action).unwrap();
            b.step(&action.mirrored()).unwrap();
            let (sa, sb) = (a.state(), b.state());
            assert!((sa.pose.x - sb.pose.x).abs() < 1e-9);
            assert!((sa.pose.y + sb.pose.y).abs() < 1e-9);
            assert!((sa.pose.theta + sb.pose.theta).abs() < 1e-9);
            assert!((sa.belt_y[0] + sb.belt_y[1]).abs() < 1e-12);
            assert!((sa.belt_y[1] + sb.belt_y[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn exploration_runs_full_sequence() {
        let mut sim = sim_with(uniform());
        let start = sim.state().pose;
        let traj = run_exploratory_sequence(&mut sim).unwrap();
        assert_eq!(traj.len(), EXPLORATION_STEPS);
        assert!(!traj.truncated);
        let end = sim.state().pose;
        let moved = (end.x - start.x).abs() + (end.y - start.y).abs() + (end.theta - start.theta).abs();
        assert!(moved > 1e-4, "exploration left the box in place");
        let times: Vec<f64> = traj.observations().iter().map(|o| o.time).collect();
        assert!(times.windows(2).all(|w| (w[1] - w[0] - 0.05).abs() < 1e-9));

        let mut again = sim_with(uniform());
        assert_eq!(run_exploratory_sequence(&mut again).unwrap(), traj);
    }

    #[test]
    fn belt_moves_respect_limits() {
        let cfg = BeltConfig::default();
        let belts = cfg.initial_belts();
        let d = cfg.limited_position_delta(belts, &Action::left(0.5));
        assert!((d[0] - 0.02).abs() < 1e-15);
        // closing the gap stops at the lower bound
        let mut b = belts;
        for _ in 0..10 {
            b = cfg.belts_after(b, &Action::left(0.02));
        }
        assert!((cfg.gap(b) - cfg.gap_range.0).abs() < 1e-12);
        let mut b = belts;
        for _ in 0..10 {
            b = cfg.belts_after(b, &Action::right(0.02));
        }
        assert!((cfg.gap(b) - cfg.gap_range.1).abs() < 1e-12);
    }

    #[test]
    fn mixed_actions_are_rejected() {
        assert!(Action::from_components([0.1, 0.0, 0.01, 0.0]).is_err());
        assert!(Action::from_components([0.0, 0.0, 0.01, 0.01]).is_err());
        assert_eq!(Action::from_components([0.0; 4]).unwrap(), Action::null());
        let bad = Action {
            v: [0.1, 0.0],
            p: [0.01, 0.0],
            tag: Restriction::VelocityPair,
        };
        let mut sim = sim_with(uniform());
        assert!(sim.step(&bad).is_err());
    }

    #[test]
    fn trajectory_csv_has_documented_columns() {
        let mut sim = sim_with(uniform());
        let traj = run_exploratory_sequence(&mut sim).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x,y,theta,Py1,Py2,v1,v2,p1,p2,S1,S2");
        assert_eq!(lines.count(), EXPLORATION_STEPS + 1);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.1) + 0.1).abs() < 1e-15);
    }
}
