//! Voxelized box mass distributions.
//!
//! A box of size `l × w × h` is split into `N_l × N_w × N_h` voxels and treated
//! as a particle system with one particle at each voxel center. The box frame
//! has its origin at a corner, so the box occupies `[0, l] × [0, w] × [0, h]`.
//! Voxels are stored row-major over `(l, w, h)`: the height index varies fastest.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mass added to every voxel of a generated or estimated distribution so that
/// no contact column is frictionless.
pub const MASS_FLOOR: f64 = 0.001;

/// Fraction of the non-floor mass that must sit inside one quarter-slab for a
/// distribution to count as hazardous.
pub const HAZARD_FRACTION: f64 = 0.95;

/// Density ratio (relative to the densest voxel) above which a voxel is occupied.
pub const GAUSSIAN_OCCUPANCY_RATIO: f64 = 0.5;

pub const DEFAULT_GRID: GridDims = GridDims { nl: 10, nw: 8, nh: 4 };
pub const DEFAULT_BOX: [f64; 3] = [0.40, 0.30, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub nl: usize,
    pub nw: usize,
    pub nh: usize,
}

impl GridDims {
    pub const fn new(nl: usize, nw: usize, nh: usize) -> Self {
        Self { nl, nw, nh }
    }

    pub const fn len(&self) -> usize {
        self.nl * self.nw * self.nh
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, il: usize, iw: usize, ih: usize) -> usize {
        (il * self.nw + iw) * self.nh + ih
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let ih = idx % self.nh;
        let rest = idx / self.nh;
        (rest / self.nw, rest % self.nw, ih)
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.nl, self.nw, self.nh)
    }

    fn check_same(&self, other: &GridDims) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch {
                expected: self.as_tuple(),
                found: other.as_tuple(),
            });
        }
        Ok(())
    }
}

/// Per-voxel occupancy values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    dims: GridDims,
    values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn new(dims: GridDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "occupancy has {} values for a grid of {}",
                values.len(),
                dims.len()
            )));
        }
        let values = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(Self { dims, values })
    }

    pub fn full(dims: GridDims) -> Self {
        Self {
            dims,
            values: vec![1.0; dims.len()],
        }
    }

    pub fn empty(dims: GridDims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.len()],
        }
    }

    pub fn from_indices(dims: GridDims, occupied: impl IntoIterator<Item = usize>) -> Self {
        let mut grid = Self::empty(dims);
        for idx in occupied {
            grid.values[idx] = 1.0;
        }
        grid
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    pub fn occupied_count(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }

    /// Zeroes every voxel whose center lies outside `volume`.
    pub fn confined_to(&self, volume: HazardVolume) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let (il, iw, _) = self.dims.coords(idx);
                if volume.contains(self.dims, il, iw) {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            dims: self.dims,
            values,
        }
    }

    /// Translates the grid content by whole voxels; content pushed past the
    /// boundary is dropped and vacated voxels are empty.
    pub fn shifted(&self, dl: isize, dw: isize) -> Self {
        let d = self.dims;
        let mut out = Self::empty(d);
        for (idx, &v) in self.values.iter().enumerate() {
            let (il, iw, ih) = d.coords(idx);
            let nl = il as isize + dl;
            let nw = iw as isize + dw;
            if (0..d.nl as isize).contains(&nl) && (0..d.nw as isize).contains(&nw) {
                out.values[d.index(nl as usize, nw as usize, ih)] = v;
            }
        }
        out
    }
}

/// One of the four quarter-slabs of the box used for hazard classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HazardVolume {
    /// `x ∈ [0, l/4]`
    U1,
    /// `x ∈ [3l/4, l]`
    U2,
    /// `y ∈ [0, w/4]`
    U3,
    /// `y ∈ [3w/4, w]`
    U4,
}

impl HazardVolume {
    pub const ALL: [HazardVolume; 4] = [Self::U1, Self::U2, Self::U3, Self::U4];

    /// Membership of the voxel column `(il, iw)` by its center, with closed
    /// slab boundaries. Integer arithmetic keeps boundary voxels exact.
    pub fn contains(self, dims: GridDims, il: usize, iw: usize) -> bool {
        // center/len = (2i+1) / (2n); compare against 1/4 and 3/4.
        match self {
            Self::U1 => 2 * (2 * il + 1) <= dims.nl,
            Self::U2 => 2 * (2 * il + 1) >= 3 * dims.nl,
            Self::U3 => 2 * (2 * iw + 1) <= dims.nw,
            Self::U4 => 2 * (2 * iw + 1) >= 3 * dims.nw,
        }
    }
}

impl fmt::Display for HazardVolume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::U1 => "U1",
            Self::U2 => "U2",
            Self::U3 => "U3",
            Self::U4 => "U4",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardReport {
    pub hazardous: bool,
    pub triggering_volume: Option<HazardVolume>,
    /// Largest slab fraction found (the triggering one when hazardous).
    pub mass_fraction_in_volume: f64,
    pub fractions: [f64; 4],
}

/// Voxel mass model of a box.
#[derive(Clone, Debug, PartialEq)]
pub struct MassDistribution {
    dims: GridDims,
    box_dims: Vector3<f64>,
    voxel_mass: Vec<f64>,
    mass_floor: f64,
    total_mass: f64,
}

impl MassDistribution {
    /// Raw constructor: arbitrary nonnegative voxel masses, no floor.
    pub fn from_masses(dims: GridDims, box_dims: [f64; 3], voxel_mass: Vec<f64>) -> Result<Self> {
        Self::with_floor(dims, box_dims, voxel_mass, 0.0)
    }

    fn with_floor(
        dims: GridDims,
        box_dims: [f64; 3],
        voxel_mass: Vec<f64>,
        mass_floor: f64,
    ) -> Result<Self> {
        if dims.nl == 0 || dims.nw == 0 || dims.nh == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        if box_dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidArgument(format!("invalid box dimensions {box_dims:?}")));
        }
        if voxel_mass.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} voxel masses for a grid of {}",
                voxel_mass.len(),
                dims.len()
            )));
        }
        if voxel_mass.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::InvalidArgument("voxel masses must be finite and nonnegative".into()));
        }
        let total_mass = voxel_mass.iter().sum();
        Ok(Self {
            dims,
            box_dims: Vector3::from(box_dims),
            voxel_mass,
            mass_floor,
            total_mass,
        })
    }

    /// Splits `total_mass` equally among the occupied voxels (value ≥ 0.5),
    /// then adds `mass_floor` to every voxel.
    pub fn from_occupancy(
        occupancy: &OccupancyGrid,
        box_dims: [f64; 3],
        total_mass: f64,
        mass_floor: f64,
    ) -> Result<Self> {
        let occupied = occupancy.binarize(0.5);
        let count = occupied.iter().filter(|&&o| o).count();
        if count == 0 {
            return Err(Error::EmptyDistribution);
        }
        if !(total_mass > 0.0) || mass_floor < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "total mass {total_mass} and floor {mass_floor} must be positive"
            )));
        }
        let share = total_mass / count as f64;
        let masses = occupied
            .iter()
            .map(|&o| if o { share + mass_floor } else { mass_floor })
            .collect();
        Self::with_floor(occupancy.dims(), box_dims, masses, mass_floor)
    }

    /// Homogeneous box of exactly `total_mass`.
    pub fn uniform(dims: GridDims, box_dims: [f64; 3], total_mass: f64) -> Result<Self> {
        let n = dims.len();
        Self::from_masses(dims, box_dims, vec![total_mass / n as f64; n])
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn box_dims(&self) -> Vector3<f64> {
        self.box_dims
    }

    pub fn voxel_masses(&self) -> &[f64] {
        &self.voxel_mass
    }

    pub fn mass_floor(&self) -> f64 {
        self.mass_floor
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn voxel_size(&self) -> Vector3<f64> {
        Vector3::new(
            self.box_dims.x / self.dims.nl as f64,
            self.box_dims.y / self.dims.nw as f64,
            self.box_dims.z / self.dims.nh as f64,
        )
    }

    pub fn geometric_center(&self) -> Vector3<f64> {
        self.box_dims * 0.5
    }

    pub fn voxel_center(&self, idx: usize) -> Vector3<f64> {
        let (il, iw, ih) = self.dims.coords(idx);
        let s = self.voxel_size();
        Vector3::new(
            (il as f64 + 0.5) * s.x,
            (iw as f64 + 0.5) * s.y,
            (ih as f64 + 0.5) * s.z,
        )
    }

    /// Occupancy implied by the masses: voxels carrying more than the floor.
    pub fn occupancy(&self) -> OccupancyGrid {
        let eps = 1e-12 * self.total_mass.max(1.0);
        let values = self
            .voxel_mass
            .iter()
            .map(|&m| if m > self.mass_floor + eps { 1.0 } else { 0.0 })
            .collect();
        OccupancyGrid {
            dims: self.dims,
            values,
        }
    }

    /// Every voxel mass multiplied by `k` (floor included).
    pub fn scaled(&self, k: f64) -> Result<Self> {
        let masses = self.voxel_mass.iter().map(|m| m * k).collect();
        Self::with_floor(
            self.dims,
            self.box_dims.into(),
            masses,
            self.mass_floor * k,
        )
    }

    /// Mirror image across the `w/2` plane (width index reversed).
    pub fn mirrored_width(&self) -> Self {
        let d = self.dims;
        let mut masses = vec![0.0; d.len()];
        for (idx, &m) in self.voxel_mass.iter().enumerate() {
            let (il, iw, ih) = d.coords(idx);
            masses[d.index(il, d.nw - 1 - iw, ih)] = m;
        }
        Self {
            voxel_mass: masses,
            ..self.clone()
        }
    }

    /// Mass of each vertical column, indexed `il * nw + iw`.
    pub fn column_masses(&self) -> Vec<f64> {
        let d = self.dims;
        self.voxel_mass
            .chunks_exact(d.nh)
            .map(|col| col.iter().sum())
            .collect()
    }

    pub fn center_of_mass(&self) -> Result<Vector3<f64>> {
        if !(self.total_mass > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        let weighted = self
            .voxel_mass
            .iter()
            .enumerate()
            .fold(Vector3::zeros(), |acc, (idx, &m)| acc + self.voxel_center(idx) * m);
        Ok(weighted / self.total_mass)
    }

    /// Particle-system inertia tensor about `about` (box frame).
    pub fn inertia_tensor(&self, about: &Vector3<f64>) -> Result<Matrix3<f64>> {
        if !(self.total_mass > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        let mut inertia = Matrix3::zeros();
        for (idx, &m) in self.voxel_mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let r = self.voxel_center(idx) - about;
            let r2 = r.norm_squared();
            inertia += (Matrix3::identity() * r2 - r * r.transpose()) * m;
        }
        Ok(inertia)
    }

    /// Vertical-axis moment of inertia about the center of mass.
    pub fn izz_about_com(&self) -> Result<f64> {
        let com = self.center_of_mass()?;
        Ok(self.inertia_tensor(&com)?[(2, 2)])
    }

    pub fn classify_hazard(&self) -> HazardReport {
        let d = self.dims;
        let mut in_volume = [0.0; 4];
        let mut excess_total = 0.0;
        for (idx, &m) in self.voxel_mass.iter().enumerate() {
            let excess = (m - self.mass_floor).max(0.0);
            if excess == 0.0 {
                continue;
            }
            excess_total += excess;
            let (il, iw, _) = d.coords(idx);
            for (k, vol) in HazardVolume::ALL.iter().enumerate() {
                if vol.contains(d, il, iw) {
                    in_volume[k] += excess;
                }
            }
        }
        let fractions = if excess_total > 0.0 {
            in_volume.map(|v| v / excess_total)
        } else {
            [0.0; 4]
        };
        let (best, &best_fraction) = fractions
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("four volumes");
        let hazardous = best_fraction >= HAZARD_FRACTION;
        HazardReport {
            hazardous,
            triggering_volume: hazardous.then_some(HazardVolume::ALL[best]),
            mass_fraction_in_volume: best_fraction,
            fractions,
        }
    }
}

/// Intersection over union of two thresholded grids. Two empty grids score 1.
pub fn iou(predicted: &OccupancyGrid, truth: &OccupancyGrid, threshold: f64) -> Result<f64> {
    predicted.dims.check_same(&truth.dims)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in predicted.values.iter().zip(&truth.values) {
        let (p, t) = (p >= threshold, t >= threshold);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// A 3d Gaussian expressed in normalized box coordinates (`[0, 1]³`).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBlob {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

/// Bounds for random blob sampling, in normalized box units.
const BLOB_MEAN_RANGE: (f64, f64) = (0.35, 0.65);
const BLOB_STD_RANGE: (f64, f64) = (0.15, 0.45);

impl GaussianBlob {
    /// Random mean inside the box and a dense covariance `R diag(s²) Rᵀ` with a
    /// uniformly random rotation `R`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let mean = Vector3::from_fn(|_, _| rng.random_range(BLOB_MEAN_RANGE.0..BLOB_MEAN_RANGE.1));
            let q = Quaternion::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            if q.norm() < 1e-6 {
                continue;
            }
            let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
            let std = Vector3::from_fn(|_, _| rng.random_range(BLOB_STD_RANGE.0..BLOB_STD_RANGE.1));
            let cov = rot.matrix() * Matrix3::from_diagonal(&std.component_mul(&std)) * rot.matrix().transpose();
            let cov = (cov + cov.transpose()) * 0.5;
            if cov.cholesky().is_some() {
                return Self { mean, cov };
            }
        }
    }

    /// Occupancy obtained by thresholding the density at
    /// [`GAUSSIAN_OCCUPANCY_RATIO`] of its largest value over voxel centers.
    pub fn occupancy(&self, dims: GridDims) -> Result<OccupancyGrid> {
        let chol = self
            .cov
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
        let precision = chol.inverse();
        let d2: Vec<f64> = (0..dims.len())
            .map(|idx| {
                let (il, iw, ih) = dims.coords(idx);
                let u = Vector3::new(
                    (il as f64 + 0.5) / dims.nl as f64,
                    (iw as f64 + 0.5) / dims.nw as f64,
                    (ih as f64 + 0.5) / dims.nh as f64,
                ) - self.mean;
                (u.transpose() * precision * u)[(0, 0)]
            })
            .collect();
        let d2_min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let cutoff = -2.0 * GAUSSIAN_OCCUPANCY_RATIO.ln();
        let values = d2
            .iter()
            .map(|&v| if v - d2_min <= cutoff { 1.0 } else { 0.0 })
            .collect();
        OccupancyGrid::new(dims, values)
    }
}

/// Random Gaussian-blob distribution; a pure function of its arguments.
pub fn sample_gaussian_distribution(
    seed: u64,
    dims: GridDims,
    box_dims: [f64; 3],
    mass_range: (f64, f64),
) -> Result<MassDistribution> {
    if dims.nl < 2 || dims.nw < 2 || dims.nh < 2 {
        return Err(Error::InvalidArgument(format!("grid {dims:?} must be at least 2 per axis")));
    }
    let (lo, hi) = mass_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidArgument(format!("invalid mass range {mass_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blob = GaussianBlob::sample(&mut rng);
    let occupancy = blob.occupancy(dims)?;
    let total = if hi > lo { rng.random_range(lo..hi) } else { lo };
    MassDistribution::from_occupancy(&occupancy, box_dims, total, MASS_FLOOR)
}

/// Gaussian blob whose mean is moved to the middle of `volume` and whose
/// occupancy is then cut to it; hazardous by construction.
pub fn sample_slab_distribution(
    seed: u64,
    volume: HazardVolume,
    dims: GridDims,
    box_dims: [f64; 3],
    total_mass: f64,
) -> Result<MassDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blob = GaussianBlob::sample(&mut rng);
    match volume {
        HazardVolume::U1 => blob.mean.x = 0.125,
        HazardVolume::U2 => blob.mean.x = 0.875,
        HazardVolume::U3 => blob.mean.y = 0.125,
        HazardVolume::U4 => blob.mean.y = 0.875,
    }
    let mut occ = blob.occupancy(dims)?.confined_to(volume);
    if occ.occupied_count(0.5) == 0 {
        occ = OccupancyGrid::full(dims).confined_to(volume);
    }
    MassDistribution::from_occupancy(&occ, box_dims, total_mass, MASS_FLOOR)
}

const DIST_MAGIC: &[u8; 4] = b"BRVX";
const DIST_VERSION: u32 = 1;

/// Writes the flat distribution format: magic `BRVX`, u32 version, three u32
/// grid dims, three f64 box dims, f64 mass floor, then the row-major voxel
/// masses as f64. All little-endian.
pub fn write_distribution<W: Write>(mut w: W, dist: &MassDistribution) -> Result<()> {
    w.write_all(DIST_MAGIC)?;
    w.write_all(&DIST_VERSION.to_le_bytes())?;
    for n in [dist.dims.nl, dist.dims.nw, dist.dims.nh] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for v in dist.box_dims.iter().chain(std::iter::once(&dist.mass_floor)) {
        w.write_all(&v.to_le_bytes())?;
    }
    for m in &dist.voxel_mass {
        w.write_all(&m.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_distribution<R: Read>(mut r: R) -> Result<MassDistribution> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DIST_MAGIC {
        return Err(Error::Format("not a distribution file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DIST_VERSION {
        return Err(Error::Format(format!("unsupported distribution version {version}")));
    }
    let dims = GridDims::new(
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    );
    let box_dims = [read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?];
    let floor = read_f64(&mut r)?;
    let masses = (0..dims.len()).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
    MassDistribution::with_floor(dims, box_dims, masses, floor)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
