//! Mass-distribution estimator: a two-headed MLP that reads the exploratory
//! trajectory and predicts an occupancy grid and the total mass.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::massmodel::{
    iou, read_f64, read_u32, sample_gaussian_distribution, sample_slab_distribution, GridDims, HazardVolume, MassDistribution, OccupancyGrid,
    MASS_FLOOR,
};
use crate::nn::{read_model, write_model, Adam, AdamConfig, Dense, DenseGrad, Mlp, Standardizer, Tensor};
use crate::sim::{run_exploratory_sequence, BeltConfig, Goal, Pose2, Simulator, Trajectory, EXPLORATION_STEPS};

pub const FEATURES_PER_TRANSITION: usize = 14;
pub const FEATURE_LEN: usize = EXPLORATION_STEPS * FEATURES_PER_TRANSITION;

/// Smallest total mass the mass head may report (kg).
pub const MIN_PREDICTED_MASS: f64 = 0.05;

/// Fixed-length encoding of a full exploratory trajectory: per transition the
/// state, action and next state, with positions relative to the first pose.
pub fn featurize_trajectory(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.len() != EXPLORATION_STEPS || traj.truncated {
        return Err(Error::TrajectoryLength {
            expected: EXPLORATION_STEPS,
            found: traj.len(),
        });
    }
    let origin = traj.transitions[0].obs.geom_pose;
    let rel = |s: [f64; 5]| [s[0] - origin.x, s[1] - origin.y, s[2] - origin.theta, s[3] - origin.y, s[4] - origin.y];
    let mut out = Vec::with_capacity(FEATURE_LEN);
    for t in &traj.transitions {
        out.extend(rel(t.obs.state_vector()));
        out.extend(t.action.components());
        out.extend(rel(t.next_obs.state_vector()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub occupancy: OccupancyGrid,
    pub total_mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: GridDims,
    pub box_dims: [f64; 3],
    pub items: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_boxes: usize,
    pub seed: u64,
    /// Share of boxes whose blob is cut down to a single hazard slab.
    pub hazard_share: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_boxes: 500,
            seed: 1,
            hazard_share: 0.2,
        }
    }
}

/// Distribution `k` of a dataset: a Gaussian blob, or with probability
/// `hazard_share` a blob placed in and cut to one quarter slab.
pub fn dataset_distribution(
    seed: u64,
    hazard_share: f64,
    dims: GridDims,
    box_dims: [f64; 3],
    mass_range: (f64, f64),
) -> Result<MassDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5ab5);
    if rng.random::<f64>() >= hazard_share {
        return sample_gaussian_distribution(seed, dims, box_dims, mass_range);
    }
    let volume = HazardVolume::ALL[rng.random_range(0..4)];
    let total = if mass_range.1 > mass_range.0 {
        rng.random_range(mass_range.0..mass_range.1)
    } else {
        mass_range.0
    };
    sample_slab_distribution(seed, volume, dims, box_dims, total)
}

/// Explores one box from rest at the origin; `None` if support was lost.
pub fn explore(dist: &MassDistribution, belt: &BeltConfig) -> Result<Option<Trajectory>> {
    let mut sim = Simulator::new(dist.clone(), belt.clone(), Goal::default(), Pose2::default())?;
    let traj = run_exploratory_sequence(&mut sim)?;
    Ok((!traj.truncated).then_some(traj))
}

/// Generates `n_boxes` labeled trajectories. Box `k` uses seeds derived from
/// `(seed, k)`; boxes that lose support are redrawn with the next attempt seed.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    belt: &BeltConfig,
    dims: GridDims,
    box_dims: [f64; 3],
    mass_range: (f64, f64),
) -> Result<Dataset> {
    if cfg.n_boxes == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one box".into()));
    }
    let items = (0..cfg.n_boxes)
        .into_par_iter()
        .map(|k| {
            for attempt in 0..1000u64 {
                let seed = derive_seed(cfg.seed, (k as u64) << 10 | attempt);
                let dist = dataset_distribution(seed, cfg.hazard_share, dims, box_dims, mass_range)?;
                if let Some(traj) = explore(&dist, belt)? {
                    return Ok(Sample {
                        features: featurize_trajectory(&traj)?,
                        occupancy: dist.occupancy(),
                        total_mass: dist.total_mass(),
                    });
                }
            }
            Err(Error::InvalidArgument(format!("box {k}: every exploration lost support")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { dims, box_dims, items })
}

/// SplitMix64 mix of a base seed and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DATASET_MAGIC: &[u8; 4] = b"BRDS";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.items.len() * EXPLORATION_STEPS
    }

    /// Binary container: magic `BRDS`, u32 version, u32 item count, u32
    /// feature length, three u32 grid dims, three f64 box dims; then per item
    /// the f64 features, f64 total mass and one byte per voxel of occupancy.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        for v in [DATASET_VERSION, self.items.len() as u32, FEATURE_LEN as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for n in [self.dims.nl, self.dims.nw, self.dims.nh] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for v in self.box_dims {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::new();
        for it in &self.items {
            buf.clear();
            for v in it.features.iter().chain(std::iter::once(&it.total_mass)) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend(it.occupancy.binarize(0.5).iter().map(|&o| o as u8));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        if read_u32(&mut r)? != DATASET_VERSION {
            return Err(Error::Format("unsupported dataset version".into()));
        }
        let n = read_u32(&mut r)? as usize;
        if read_u32(&mut r)? as usize != FEATURE_LEN {
            return Err(Error::Format("dataset feature length mismatch".into()));
        }
        let dims = GridDims::new(read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        let box_dims = [read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?];
        let mut items = Vec::with_capacity(n);
        let mut occ = vec![0u8; dims.len()];
        for _ in 0..n {
            let features = (0..FEATURE_LEN).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let total_mass = read_f64(&mut r)?;
            r.read_exact(&mut occ)?;
            items.push(Sample {
                features,
                occupancy: OccupancyGrid::new(dims, occ.iter().map(|&b| b as f64).collect())?,
                total_mass,
            });
        }
        Ok(Self { dims, box_dims, items })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_mass: f64,
    pub seed: u64,
    /// Fraction of items used for training; the rest is held out.
    pub train_fraction: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 150,
            lambda_mass: 1.0,
            seed: 0,
            train_fraction: 0.8,
            hidden: vec![512, 512],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mass >= 0.0) {
            return Err(Error::InvalidArgument("lambda_mass must be nonnegative".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("train_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("batch size and hidden widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone with ReLU on every layer feeding an occupancy-logit head and a
/// standardized total-mass head.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorModel {
    pub backbone: Mlp,
    pub occupancy_head: Dense,
    pub mass_head: Dense,
    pub features: Standardizer,
    pub mass_mean: f64,
    pub mass_std: f64,
    pub dims: GridDims,
    pub box_dims: [f64; 3],
}

/// Gradients in parameter order: backbone layers, occupancy head, mass head.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub backbone: Vec<DenseGrad>,
    pub occupancy_head: DenseGrad,
    pub mass_head: DenseGrad,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.backbone
            .iter()
            .chain([&self.occupancy_head, &self.mass_head])
            .flat_map(|g| g.slices())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub occupancy: f64,
    pub mass: f64,
    pub total: f64,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl EstimatorModel {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], dims: GridDims, box_dims: [f64; 3], rng: &mut R) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        let last = *widths.last().expect("nonempty");
        Self {
            backbone: Mlp::new(&widths, true, rng),
            occupancy_head: Dense::new(last, dims.len(), rng),
            mass_head: Dense::new(last, 1, rng),
            features: Standardizer::identity(input),
            mass_mean: 0.0,
            mass_std: 1.0,
            dims,
            box_dims,
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.occupancy_head.param_count() + self.mass_head.param_count()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.backbone.params_mut();
        p.extend(self.occupancy_head.params_mut());
        p.extend(self.mass_head.params_mut());
        p
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut m = self.clone();
        m.params_mut().iter().map(|p| p.len()).collect()
    }

    /// Logits and standardized mass for already standardized inputs.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let h = self.backbone.forward(x);
        let logits = self.occupancy_head.forward(h.view());
        let mass = self.mass_head.forward(h.view()).column(0).to_owned();
        (logits, mass)
    }

    /// Mean BCE over voxels and batch plus `λ`·mean squared mass error, with
    /// gradients. Inputs standardized; `mass` targets standardized.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        occupancy: ArrayView2<f64>,
        mass: &Array1<f64>,
        lambda_mass: f64,
    ) -> (LossParts, Gradients) {
        let b = x.nrows() as f64;
        let cache = self.backbone.forward_train(x);
        let h = &cache.output;
        let logits = self.occupancy_head.forward(h.view());
        let pred_mass = self.mass_head.forward(h.view());

        let n = logits.len() as f64;
        let mut occ_loss = 0.0;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        ndarray::Zip::from(&mut dlogits)
            .and(&logits)
            .and(&occupancy)
            .for_each(|d, &z, &y| {
                occ_loss += bce_with_logits(z, y);
                *d = (sigmoid(z) - y) / n;
            });
        occ_loss /= n;

        let err = &pred_mass.column(0) - mass;
        let mass_loss = err.mapv(|e| e * e).sum() / b;
        let dmass = (err * (2.0 * lambda_mass / b)).insert_axis(Axis(1));

        let (g_occ, dh_occ) = self.occupancy_head.backward(h.view(), dlogits.view());
        let (g_mass, dh_mass) = self.mass_head.backward(h.view(), dmass.view());
        let (g_backbone, _) = self.backbone.backward(&cache, dh_occ + dh_mass);
        (
            LossParts {
                occupancy: occ_loss,
                mass: mass_loss,
                total: occ_loss + lambda_mass * mass_loss,
            },
            Gradients {
                backbone: g_backbone,
                occupancy_head: g_occ,
                mass_head: g_mass,
            },
        )
    }

    fn standardized(&self, features: &[f64]) -> Result<Array2<f64>> {
        if features.len() != self.features.len() {
            return Err(Error::InvalidArgument(format!(
                "{} features for a model expecting {}",
                features.len(),
                self.features.len()
            )));
        }
        let row = ArrayView2::from_shape((1, features.len()), features).expect("row shape");
        Ok(self.features.apply(row))
    }

    /// Occupancy (sigmoid ≥ 0.5) and total mass for a feature vector.
    pub fn predict_features(&self, features: &[f64]) -> Result<(OccupancyGrid, f64)> {
        let (logits, mass) = self.forward(self.standardized(features)?.view());
        let occ = OccupancyGrid::new(self.dims, logits.iter().map(|&z| if z >= 0.0 { 1.0 } else { 0.0 }).collect())?;
        let m = (mass[0] * self.mass_std + self.mass_mean).max(MIN_PREDICTED_MASS);
        Ok((occ, m))
    }

    pub fn write<W: Write>(&self, w: W, meta: serde_json::Value) -> Result<()> {
        let mut tensors = self.backbone.tensors();
        tensors.extend(self.occupancy_head.tensors());
        tensors.extend(self.mass_head.tensors());
        tensors.extend(self.features.tensors());
        tensors.push(Tensor::new(vec![2], vec![self.mass_mean, self.mass_std]));
        tensors.push(Tensor::new(vec![3], self.box_dims.to_vec()));
        let mut meta = meta;
        meta["kind"] = "estimator".into();
        meta["backbone"] = serde_json::json!(self.backbone.dims());
        meta["grid"] = serde_json::json!([self.dims.nl, self.dims.nw, self.dims.nh]);
        write_model(w, ESTIMATOR_MAGIC, &meta, &tensors)
    }

    pub fn read<R: Read>(r: R) -> Result<(Self, serde_json::Value)> {
        let (meta, tensors) = read_model(r, ESTIMATOR_MAGIC)?;
        let n_layers = meta["backbone"]
            .as_array()
            .map(|a| a.len().saturating_sub(1))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format("estimator metadata lacks backbone widths".into()))?;
        let grid: Vec<usize> = serde_json::from_value(meta["grid"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let [nl, nw, nh] = grid[..] else {
            return Err(Error::Format("estimator grid must have three axes".into()));
        };
        let mut it = tensors.into_iter();
        let backbone = Mlp::from_tensors(&mut it, n_layers, true)?;
        let mut head = || match (it.next(), it.next()) {
            (Some(w), Some(b)) => Dense::from_tensors(w, b),
            _ => Err(Error::Format("estimator file lacks a head".into())),
        };
        let (occupancy_head, mass_head) = (head()?, head()?);
        let features = match (it.next(), it.next()) {
            (Some(m), Some(s)) => Standardizer::from_tensors(m, s)?,
            _ => return Err(Error::Format("estimator file lacks feature statistics".into())),
        };
        let (Some(ms), Some(bx), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Format("estimator file has unexpected trailing tensors".into()));
        };
        let dims = GridDims::new(nl, nw, nh);
        if occupancy_head.output_dim() != dims.len() || ms.data.len() != 2 || bx.data.len() != 3 {
            return Err(Error::Format("estimator head does not match its grid".into()));
        }
        Ok((
            Self {
                backbone,
                occupancy_head,
                mass_head,
                features,
                mass_mean: ms.data[0],
                mass_std: ms.data[1],
                dims,
                box_dims: [bx.data[0], bx.data[1], bx.data[2]],
            },
            meta,
        ))
    }
}

const ESTIMATOR_MAGIC: &[u8; 4] = b"BREM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_occupancy_loss: f64,
    pub train_mass_loss: f64,
    pub val_loss: f64,
    pub val_median_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub train_items: usize,
    pub val_items: usize,
    pub transitions: usize,
    pub parameter_count: usize,
    pub final_val_median_iou: f64,
    pub feature_normalization: String,
    pub config: TrainingConfig,
}

struct Batches {
    x: Array2<f64>,
    occ: Array2<f64>,
    mass: Array1<f64>,
}

fn stack(data: &Dataset, idx: &[usize]) -> Batches {
    let n_vox = data.dims.len();
    let mut x = Array2::zeros((idx.len(), FEATURE_LEN));
    let mut occ = Array2::zeros((idx.len(), n_vox));
    let mut mass = Array1::zeros(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        let it = &data.items[i];
        x.row_mut(r).assign(&ndarray::ArrayView1::from(&it.features[..]));
        occ.row_mut(r).assign(&ndarray::ArrayView1::from(it.occupancy.values()));
        mass[r] = it.total_mass;
    }
    Batches { x, occ, mass }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// IoU of each row's thresholded logits against the labels.
fn ious(model: &EstimatorModel, x: ArrayView2<f64>, occ: ArrayView2<f64>) -> Vec<f64> {
    let (logits, _) = model.forward(x);
    logits
        .outer_iter()
        .zip(occ.outer_iter())
        .map(|(z, y)| {
            let pred = OccupancyGrid::new(model.dims, z.iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect())
                .expect("grid");
            let truth = OccupancyGrid::new(model.dims, y.to_vec()).expect("grid");
            iou(&pred, &truth, 0.5).expect("same grid")
        })
        .collect()
}

/// Median IoU of `model` over dataset items `idx`.
pub fn median_iou(model: &EstimatorModel, data: &Dataset, idx: &[usize]) -> f64 {
    let b = stack(data, idx);
    let x = model.features.apply(b.x.view());
    median(&mut ious(model, x.view(), b.occ.view()))
}

/// Deterministic train/validation split of `n` items.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx.split_off(n_train);
    (idx, val)
}

pub fn train(data: &Dataset, cfg: &TrainingConfig) -> Result<(EstimatorModel, TrainingReport)> {
    cfg.validate()?;
    if data.len() < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 items, got {}", data.len())));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.train_fraction, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut model = EstimatorModel::new(FEATURE_LEN, &cfg.hidden, data.dims, data.box_dims, &mut rng);

    let train_all = stack(data, &train_idx);
    model.features = Standardizer::fit(train_all.x.view());
    let masses = train_all.mass.view().insert_axis(Axis(1));
    let ms = Standardizer::fit(masses);
    model.mass_mean = ms.mean[0];
    model.mass_std = ms.std[0];

    let x_train = model.features.apply(train_all.x.view());
    let m_train = train_all.mass.mapv(|m| (m - model.mass_mean) / model.mass_std);
    let val = stack(data, &val_idx);
    let x_val = model.features.apply(val.x.view());
    let m_val = val.mass.mapv(|m| (m - model.mass_mean) / model.mass_std);

    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.param_sizes(),
    );
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_occ, mut sum_mass) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let ob = train_all.occ.select(Axis(0), chunk);
            let mb = m_train.select(Axis(0), chunk);
            let (loss, grads) = model.loss_and_gradients(xb.view(), ob.view(), &mb, cfg.lambda_mass);
            if !loss.total.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let w = chunk.len() as f64;
            sum += loss.total * w;
            sum_occ += loss.occupancy * w;
            sum_mass += loss.mass * w;
            opt.step(&mut model.params_mut(), &grads.slices());
        }
        let n = order.len() as f64;
        let (val_loss, val_iou) = if val_idx.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (l, _) = model.loss_and_gradients(x_val.view(), val.occ.view(), &m_val, cfg.lambda_mass);
            (l.total, median(&mut ious(&model, x_val.view(), val.occ.view())))
        };
        if !val_loss.is_finite() && !val_idx.is_empty() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("estimator epoch {epoch}: train {:.5} val {:.5} iou {:.3}", sum / n, val_loss, val_iou);
        epochs.push(EpochStats {
            epoch,
            train_loss: sum / n,
            train_occupancy_loss: sum_occ / n,
            train_mass_loss: sum_mass / n,
            val_loss,
            val_median_iou: val_iou,
        });
    }
    let final_iou = epochs.last().map_or(f64::NAN, |e| e.val_median_iou);
    let report = TrainingReport {
        epochs,
        train_items: train_idx.len(),
        val_items: val_idx.len(),
        transitions: data.transitions(),
        parameter_count: model.param_count(),
        final_val_median_iou: final_iou,
        feature_normalization: "per-feature z-score over the training split; mass targets z-scored".into(),
        config: cfg.clone(),
    };
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub dist: MassDistribution,
    pub predicted_mass: f64,
    /// Set when no voxel was predicted occupied and the full grid was used.
    pub fallback: bool,
}

pub fn predict(model: &EstimatorModel, traj: &Trajectory) -> Result<Estimate> {
    let (mut occ, mass) = model.predict_features(&featurize_trajectory(traj)?)?;
    let fallback = occ.occupied_count(0.5) == 0;
    if fallback {
        log::warn!("estimator predicted an empty box; falling back to full occupancy");
        occ = OccupancyGrid::full(model.dims);
    }
    Ok(Estimate {
        dist: MassDistribution::from_occupancy(&occ, model.box_dims, mass, MASS_FLOOR)?,
        predicted_mass: mass,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::massmodel::{DEFAULT_BOX, DEFAULT_GRID};

    fn small_dataset(n: usize, seed: u64) -> Dataset {
        let cfg = DatasetConfig {
            n_boxes: n,
            seed,
            hazard_share: 0.2,
        };
        generate_dataset(&cfg, &BeltConfig::default(), DEFAULT_GRID, DEFAULT_BOX, (0.5, 6.0)).unwrap()
    }

    fn toy_model() -> EstimatorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        EstimatorModel::new(1, &[2], GridDims::new(1, 1, 1), [1.0; 3], &mut rng)
    }

    fn toy_loss(m: &EstimatorModel, x: &Array2<f64>, o: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> f64 {
        m.loss_and_gradients(x.view(), o.view(), y, lambda).0.total
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        let mut m = toy_model();
        assert_eq!(m.param_count(), 10);
        // keep both hidden units active
        m.backbone.layers[0].w = ndarray::array![[0.8, -0.6]];
        m.backbone.layers[0].b = ndarray::array![0.3, 0.9];
        let x = ndarray::array![[0.7], [1.3], [-0.2]];
        let o = ndarray::array![[1.0], [0.0], [1.0]];
        let y = ndarray::array![0.4, -1.1, 0.6];
        let (_, g) = m.loss_and_gradients(x.view(), o.view(), &y, 0.7);
        let analytic: Vec<f64> = g.slices().concat();
        let h = 1e-6;
        for k in 0..10 {
            let bump = |m: &mut EstimatorModel, d: f64| {
                let mut left = k;
                for p in m.params_mut() {
                    if left < p.len() {
                        p[left] += d;
                        return;
                    }
                    left -= p.len();
                }
            };
            bump(&mut m, h);
            let up = toy_loss(&m, &x, &o, &y, 0.7);
            bump(&mut m, -2.0 * h);
            let down = toy_loss(&m, &x, &o, &y, 0.7);
            bump(&mut m, h);
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {k}: numeric {numeric} analytic {}", analytic[k]);
        }
    }

    #[test]
    fn zero_lambda_leaves_mass_head_untouched() {
        let m = toy_model();
        let x = ndarray::array![[0.7], [1.3]];
        let o = ndarray::array![[1.0], [0.0]];
        let y = ndarray::array![5.0, -3.0];
        let (_, g) = m.loss_and_gradients(x.view(), o.view(), &y, 0.0);
        assert!(g.mass_head.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn features_have_fixed_length_and_ignore_translation() {
        let dist = MassDistribution::uniform(DEFAULT_GRID, DEFAULT_BOX, 2.0).unwrap();
        let traj = explore(&dist, &BeltConfig::default()).unwrap().unwrap();
        let f = featurize_trajectory(&traj).unwrap();
        assert_eq!(f.len(), FEATURE_LEN);
        assert_eq!(f, featurize_trajectory(&traj).unwrap());

        let mut moved = traj.clone();
        for t in &mut moved.transitions {
            for o in [&mut t.obs, &mut t.next_obs] {
                o.geom_pose.x += 1.25;
                o.geom_pose.y -= 0.5;
                o.belt_y = [o.belt_y[0] - 0.5, o.belt_y[1] - 0.5];
            }
        }
        let g = featurize_trajectory(&moved).unwrap();
        assert!(f.iter().zip(&g).all(|(a, b)| (a - b).abs() < 1e-9));

        let mut short = traj;
        short.transitions.pop();
        assert!(matches!(featurize_trajectory(&short), Err(Error::TrajectoryLength { .. })));
    }

    #[test]
    fn dataset_is_deterministic_and_labeled() {
        let a = small_dataset(12, 4);
        let b = small_dataset(12, 4);
        assert_eq!(a, b);
        assert_eq!(a.transitions(), 12 * EXPLORATION_STEPS);
        for (k, it) in a.items.iter().enumerate() {
            assert!(it.occupancy.occupied_count(0.5) > 0, "item {k}");
            assert!(it.total_mass > 0.5);
        }
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        assert_eq!(Dataset::read(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn hazard_share_produces_slab_boxes() {
        let hazardous = (0..200)
            .filter(|&s| {
                dataset_distribution(s, 0.5, DEFAULT_GRID, DEFAULT_BOX, (0.5, 6.0))
                    .unwrap()
                    .classify_hazard()
                    .hazardous
            })
            .count();
        assert!((60..=160).contains(&hazardous), "{hazardous}");
    }

    #[test]
    fn short_training_run_reduces_loss_and_is_reproducible() {
        let data = small_dataset(40, 2);
        let cfg = TrainingConfig {
            epochs: 8,
            hidden: vec![32, 32],
            ..TrainingConfig::default()
        };
        let (model, report) = train(&data, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 8);
        assert!(report.epochs[7].train_loss < report.epochs[0].train_loss);
        assert_eq!(report.train_items + report.val_items, 40);
        let (again, _) = train(&data, &cfg).unwrap();
        assert_eq!(again, model);

        let dist = MassDistribution::uniform(DEFAULT_GRID, DEFAULT_BOX, 2.0).unwrap();
        let traj = explore(&dist, &BeltConfig::default()).unwrap().unwrap();
        let est = predict(&model, &traj).unwrap();
        assert!(est.dist.voxel_masses().iter().all(|&m| m >= MASS_FLOOR));
        assert!((est.dist.total_mass() - est.dist.voxel_masses().iter().sum::<f64>()).abs() < 1e-9);
        assert_eq!(predict(&model, &traj).unwrap(), est);

        let mut buf = Vec::new();
        model.write(&mut buf, serde_json::json!({"seed": 0})).unwrap();
        let (back, meta) = EstimatorModel::read(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta["seed"], 0);
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let data = small_dataset(5, 3);
        assert!(train(&data, &TrainingConfig::default()).is_err());
        let bad = TrainingConfig {
            train_fraction: 1.0,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_occupancy_falls_back_to_full() {
        let mut m = toy_model();
        m.dims = DEFAULT_GRID;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.backbone = Mlp::new(&[FEATURE_LEN, 4], true, &mut rng);
        m.features = Standardizer::identity(FEATURE_LEN);
        m.occupancy_head = Dense::new(4, DEFAULT_GRID.len(), &mut rng);
        m.occupancy_head.w.fill(0.0);
        m.occupancy_head.b.fill(-5.0);
        m.mass_head = Dense::new(4, 1, &mut rng);
        m.box_dims = DEFAULT_BOX;
        let dist = MassDistribution::uniform(DEFAULT_GRID, DEFAULT_BOX, 2.0).unwrap();
        let traj = explore(&dist, &BeltConfig::default()).unwrap().unwrap();
        let est = predict(&m, &traj).unwrap();
        assert!(est.fallback);
        assert_eq!(est.dist.occupancy().occupied_count(0.5), DEFAULT_GRID.len());
    }
}
