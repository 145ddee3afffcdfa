//! Gray-box one-step prediction of the geometric-center pose.
//!
//! The COM moves as a point mass under the mapped action force plus the motion
//! already present in the observation window; a friction correction opposes
//! the part of the predicted displacement orthogonal to each voxel's current
//! velocity. Rotation follows `ω̇ = τ_z / I_zz` with torques from the contact
//! sets.

use nalgebra::{Rotation2, Vector2};
use serde::{Deserialize, Serialize};

use crate::calibration::{Channel, ControlForceMap};
use crate::error::{Error, Result};
use crate::massmodel::MassDistribution;
use crate::sim::{wrap_angle, Action, Observation};

/// Observations used for finite differences.
pub const WINDOW: usize = 4;

/// Relative tolerance below which an Eq.-style friction direction is zero.
const PARALLEL_TOL: f64 = 1e-12;

/// Smallest `I_zz` accepted as non-degenerate (kg·m²).
const MIN_IZZ: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicEstimate {
    pub r_c: Vector2<f64>,
    pub r_c_dot: Vector2<f64>,
    /// Acceleration before the next action is applied.
    pub r_c_ddot_free: Vector2<f64>,
    pub omega: f64,
    pub theta_geom: f64,
    pub r_geom: Vector2<f64>,
    pub dt: f64,
}

/// Action forces split by belt and axis; `f1`, `f3` act on S1 and `f2`, `f4` on S2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceDecomposition {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub f4: f64,
}

impl ForceDecomposition {
    pub fn from_action(action: &Action, map: &ControlForceMap) -> Self {
        Self {
            f1: map.lookup(Channel::V1, action.v[0]),
            f2: map.lookup(Channel::V2, action.v[1]),
            f3: map.lookup(Channel::P1, action.p[0]),
            f4: map.lookup(Channel::P2, action.p[1]),
        }
    }

    pub fn left(&self) -> Vector2<f64> {
        Vector2::new(self.f1, self.f3)
    }

    pub fn right(&self) -> Vector2<f64> {
        Vector2::new(self.f2, self.f4)
    }

    pub fn total(&self) -> Vector2<f64> {
        self.left() + self.right()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            f1: k * self.f1,
            f2: k * self.f2,
            f3: k * self.f3,
            f4: k * self.f4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    /// Predicted geometric-center position.
    pub r_hat: Vector2<f64>,
    pub theta_hat: f64,
    /// COM prediction without friction correction.
    pub r_hat_frictionless: Vector2<f64>,
    /// COM prediction with friction correction.
    pub r_c_hat: Vector2<f64>,
    pub friction_force: Vector2<f64>,
    pub beta: Vector2<f64>,
    pub torque: f64,
    pub omega_dot: f64,
}

/// Planar mass data of an estimated distribution.
#[derive(Clone, Debug)]
pub struct PlanarBody {
    /// Column centers relative to the geometric center, box frame (`il * nw + iw`).
    pub column_offsets: Vec<Vector2<f64>>,
    pub column_mass: Vec<f64>,
    pub com_offset: Vector2<f64>,
    pub mass: f64,
    pub izz: f64,
    nh: usize,
}

impl PlanarBody {
    pub fn new(dist: &MassDistribution) -> Result<Self> {
        let d = dist.dims();
        let gc = dist.geometric_center();
        let com = dist.center_of_mass()?;
        let column_offsets = (0..d.nl * d.nw)
            .map(|c| {
                let p = dist.voxel_center(c * d.nh) - gc;
                Vector2::new(p.x, p.y)
            })
            .collect();
        Ok(Self {
            column_offsets,
            column_mass: dist.column_masses(),
            com_offset: Vector2::new(com.x - gc.x, com.y - gc.y),
            mass: dist.total_mass(),
            izz: dist.izz_about_com()?,
            nh: d.nh,
        })
    }

    /// Column holding a bottom-layer voxel.
    pub fn column_of(&self, voxel: usize) -> usize {
        voxel / self.nh
    }

    /// Lever arm `r'` of a column relative to the COM, world frame.
    fn lever(&self, column: usize, rot: &Rotation2<f64>) -> Vector2<f64> {
        rot * (self.column_offsets[column] - self.com_offset)
    }

    pub fn kinematics(&self, window: &[Observation]) -> Result<KinematicEstimate> {
        let k = window.len();
        if k < 3 {
            return Err(Error::InvalidArgument(format!("window of {k} observations, need at least 3")));
        }
        let dt = window[1].time - window[0].time;
        let uniform = window
            .windows(2)
            .all(|w| ((w[1].time - w[0].time) - dt).abs() <= 1e-9 * dt.abs().max(1.0));
        if !(dt > 0.0) || !uniform {
            return Err(Error::NonUniformWindow);
        }
        let com = |o: &Observation| o.geom_pose.position() + Rotation2::new(o.geom_pose.theta) * self.com_offset;
        let (a, b, c) = (com(&window[k - 3]), com(&window[k - 2]), com(&window[k - 1]));
        let last = window[k - 1].geom_pose;
        Ok(KinematicEstimate {
            r_c: c,
            r_c_dot: (c - b) / dt,
            r_c_ddot_free: (c - 2.0 * b + a) / (dt * dt),
            omega: wrap_angle(last.theta - window[k - 2].geom_pose.theta) / dt,
            theta_geom: last.theta,
            r_geom: last.position(),
            dt,
        })
    }

    /// `τ_z` of the action forces, each spread evenly over its contact set.
    pub fn torque(&self, forces: &ForceDecomposition, s1: &[usize], s2: &[usize], theta: f64) -> Result<f64> {
        let rot = Rotation2::new(theta);
        let mut tau = 0.0;
        for (belt, (set, f)) in [(s1, forces.left()), (s2, forces.right())].into_iter().enumerate() {
            if f == Vector2::zeros() {
                continue;
            }
            if set.is_empty() {
                return Err(Error::UnsupportedForce(belt + 1));
            }
            let per = f / set.len() as f64;
            for &q in set {
                tau += cross(&self.lever(self.column_of(q), &rot), &per);
            }
        }
        Ok(tau)
    }

    /// Friction opposing the action over the support volumes of `s1 ∪ s2`.
    pub fn friction(&self, delta: &Vector2<f64>, kin: &KinematicEstimate, s1: &[usize], s2: &[usize], mu: f64, g: f64) -> FrictionCorrection {
        let rot = Rotation2::new(kin.theta_geom);
        let mut force = Vector2::zeros();
        let mut torque = 0.0;
        for &q in s1.iter().chain(s2) {
            let c = self.column_of(q);
            let r = self.lever(c, &rot);
            let v = kin.r_c_dot + Vector2::new(-kin.omega * r.y, kin.omega * r.x);
            let f = friction_direction(delta, &v) * (mu * g * self.column_mass[c]);
            force += f;
            torque += cross(&r, &f);
        }
        FrictionCorrection {
            force,
            beta: force / self.mass,
            torque,
        }
    }
}

#[inline]
fn cross(r: &Vector2<f64>, f: &Vector2<f64>) -> f64 {
    r.x * f.y - r.y * f.x
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrictionCorrection {
    pub force: Vector2<f64>,
    pub beta: Vector2<f64>,
    pub torque: f64,
}

/// Unit direction of the friction a voxel feels when displaced by `delta`
/// while moving at `velocity`: `u − proj(u, −v)` with `u = −delta`,
/// normalized. Zero when `delta` is parallel to `velocity`.
pub fn friction_direction(delta: &Vector2<f64>, velocity: &Vector2<f64>) -> Vector2<f64> {
    let u = -delta;
    let v = -velocity;
    let vv = v.norm_squared();
    let eta = if vv > 0.0 { u - v * (u.dot(&v) / vv) } else { u };
    let n = eta.norm();
    if n <= PARALLEL_TOL * u.norm() || n == 0.0 {
        Vector2::zeros()
    } else {
        eta / n
    }
}

pub fn estimate_kinematics(window: &[Observation], dist_hat: &MassDistribution) -> Result<KinematicEstimate> {
    PlanarBody::new(dist_hat)?.kinematics(window)
}

pub fn torque(
    forces: &ForceDecomposition,
    s1: &[usize],
    s2: &[usize],
    dist_hat: &MassDistribution,
    kin: &KinematicEstimate,
) -> Result<f64> {
    PlanarBody::new(dist_hat)?.torque(forces, s1, s2, kin.theta_geom)
}

/// Contact voxels plus every voxel stacked above them.
pub fn support_volumes(s1: &[usize], s2: &[usize], dist_hat: &MassDistribution) -> (Vec<usize>, Vec<usize>) {
    let nh = dist_hat.dims().nh;
    let lift = |s: &[usize]| s.iter().flat_map(|&q| (q / nh * nh)..(q / nh * nh + nh)).collect();
    (lift(s1), lift(s2))
}

/// Friction force and its acceleration `β = F_f / M`, using per-voxel
/// velocities `ṙ_c + ω × r'_Q` from `kin`.
pub fn friction_correction(
    delta_r_hat: &Vector2<f64>,
    kin: &KinematicEstimate,
    s1: &[usize],
    s2: &[usize],
    dist_hat: &MassDistribution,
    mu: f64,
    g: f64,
) -> Result<FrictionCorrection> {
    Ok(PlanarBody::new(dist_hat)?.friction(delta_r_hat, kin, s1, s2, mu, g))
}

/// One-step gray-box model for a fixed distribution estimate and force map.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub body: PlanarBody,
    pub map: ControlForceMap,
    pub mu: f64,
    pub g: f64,
}

impl Predictor {
    pub fn new(dist_hat: &MassDistribution, map: ControlForceMap, mu: f64, g: f64) -> Result<Self> {
        let body = PlanarBody::new(dist_hat)?;
        if !(body.izz > MIN_IZZ) {
            return Err(Error::DegenerateInertia(body.izz));
        }
        Ok(Self { body, map, mu, g })
    }

    pub fn predict(&self, window: &[Observation], action: &Action) -> Result<PosePrediction> {
        let kin = self.body.kinematics(window)?;
        let last = &window[window.len() - 1];
        let forces = ForceDecomposition::from_action(action, &self.map);
        self.predict_with(&kin, &last.s1, &last.s2, &forces)
    }

    pub fn predict_with(
        &self,
        kin: &KinematicEstimate,
        s1: &[usize],
        s2: &[usize],
        forces: &ForceDecomposition,
    ) -> Result<PosePrediction> {
        let body = &self.body;
        let dt = kin.dt;
        let h = 0.5 * dt * dt;

        let accel = kin.r_c_ddot_free + forces.total() / body.mass;
        let delta_fl = kin.r_c_dot * dt + accel * h;
        let fric = body.friction(&delta_fl, kin, s1, s2, self.mu, self.g);

        // friction may halt the predicted motion but never reverse it
        let corr = fric.beta * h;
        let cn = corr.norm();
        let scale = if cn > 0.0 {
            ((-delta_fl.dot(&corr) / cn) / cn).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let r_fl = kin.r_c + delta_fl;
        let r_c_hat = r_fl + corr * scale;

        let tau_action = body.torque(forces, s1, s2, kin.theta_geom)?;
        let dtheta_fl = kin.omega * dt + tau_action / body.izz * h;
        let mut dtheta_f = fric.torque * scale / body.izz * h;
        if dtheta_f * dtheta_fl >= 0.0 {
            dtheta_f = 0.0;
        } else if dtheta_f.abs() > dtheta_fl.abs() {
            dtheta_f = -dtheta_fl;
        }
        let omega_dot = (dtheta_fl - kin.omega * dt + dtheta_f) / h;
        let theta_hat = kin.theta_geom + dtheta_fl + dtheta_f;

        Ok(PosePrediction {
            r_hat: r_c_hat - Rotation2::new(theta_hat) * body.com_offset,
            theta_hat,
            r_hat_frictionless: r_fl,
            r_c_hat,
            friction_force: fric.force * scale,
            beta: fric.beta * scale,
            torque: omega_dot * body.izz,
            omega_dot,
        })
    }
}

/// Gray-box prediction of the next pose under `action`.
pub fn predict_next_pose(
    window: &[Observation],
    action: &Action,
    dist_hat: &MassDistribution,
    map: &ControlForceMap,
    mu: f64,
    g: f64,
) -> Result<PosePrediction> {
    Predictor::new(dist_hat, map.clone(), mu, g)?.predict(window, action)
}
