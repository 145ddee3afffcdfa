//! Control → force calibration from short episodes with a uniform box.
//!
//! Each calibration action has a single nonzero channel. The force it produced
//! is recovered as `M·δr̈_c − F_f` and accumulated into uniform command bins;
//! lookups interpolate the bin means and are odd in the command.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::massmodel::{GridDims, MassDistribution, DEFAULT_BOX, DEFAULT_GRID};
use crate::predictor::{PlanarBody, WINDOW};
use crate::sim::{Action, BeltConfig, Goal, Pose2, Simulator, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    V1,
    V2,
    P1,
    P2,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::V1, Channel::V2, Channel::P1, Channel::P2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_velocity(self) -> bool {
        matches!(self, Channel::V1 | Channel::V2)
    }

    /// Symmetric command half-range of the default action grid.
    pub fn default_range(self) -> f64 {
        if self.is_velocity() {
            0.3
        } else {
            0.02
        }
    }

    /// Action with `command` on this channel only.
    pub fn action(self, command: f64) -> Action {
        match self {
            Channel::V1 => Action::velocity(command, 0.0),
            Channel::V2 => Action::velocity(0.0, command),
            Channel::P1 => Action::left(command),
            Channel::P2 => Action::right(command),
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::V1 => "v1",
            Channel::V2 => "v2",
            Channel::P1 => "p1",
            Channel::P2 => "p2",
        })
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(Channel::V1),
            "v2" => Ok(Channel::V2),
            "p1" => Ok(Channel::P1),
            "p2" => Ok(Channel::P2),
            other => Err(Error::Format(format!("unknown channel {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub channel: Channel,
    pub command: f64,
    /// Force along the channel's axis (x for belt speed, y for belt position).
    pub force: f64,
}

impl ForceSample {
    pub fn new(channel: Channel, command: f64, force: f64) -> Self {
        Self { channel, command, force }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub center: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Mean command of the samples in the bin; the interpolation abscissa.
    pub mean_command: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub channel: Channel,
    pub range: f64,
    pub bins: Vec<Bin>,
    /// `(|command|, force)` knots, starting at the origin, increasing in command.
    knots: Vec<(f64, f64)>,
}

impl ChannelMap {
    fn from_bins(channel: Channel, range: f64, bins: Vec<Bin>) -> Result<Self> {
        let n = bins.len();
        let mid = n / 2;
        let mut knots = vec![(0.0, 0.0)];
        for j in 1..=mid {
            let (p, m) = (&bins[mid + j], &bins[mid - j]);
            let total = (p.count + m.count) as f64;
            if total == 0.0 {
                continue;
            }
            let (cp, cm) = (p.count as f64, m.count as f64);
            let x = (cp * p.mean_command - cm * m.mean_command) / total;
            let y = (cp * p.mean - cm * m.mean) / total;
            if x > 0.0 {
                knots.push((x, y));
            }
        }
        if knots.len() == 1 {
            return Err(Error::EmptyChannel(channel));
        }
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        knots.dedup_by(|a, b| a.0 == b.0);
        Ok(Self {
            channel,
            range,
            bins,
            knots,
        })
    }

    pub fn lookup(&self, command: f64) -> f64 {
        if command == 0.0 || !command.is_finite() {
            return 0.0;
        }
        let x = command.abs();
        let k = &self.knots;
        let i = k.partition_point(|&(kx, _)| kx < x);
        let y = if i >= k.len() {
            k[k.len() - 1].1
        } else {
            let (x0, y0) = k[i - 1];
            let (x1, y1) = k[i];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        };
        command.signum() * y
    }

    /// Bins holding at least one sample outside the pinned center bin.
    pub fn populated_bins(&self) -> usize {
        let mid = self.bins.len() / 2;
        self.bins.iter().enumerate().filter(|&(i, b)| i != mid && b.count > 0).count()
    }
}

/// Calibrated mapping from each control channel to its force component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlForceMap {
    channels: Vec<ChannelMap>,
}

impl ControlForceMap {
    pub fn channel(&self, ch: Channel) -> &ChannelMap {
        &self.channels[ch.index()]
    }

    pub fn channels(&self) -> &[ChannelMap] {
        &self.channels
    }

    pub fn lookup(&self, ch: Channel, command: f64) -> f64 {
        self.channels[ch.index()].lookup(command)
    }

    /// Versioned CSV: `#` comment lines, then
    /// `channel,bin_center,mean,std,count,mean_command`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# beltrot force map v1")?;
        let ranges: Vec<String> = self.channels.iter().map(|c| format!("{}={}", c.channel, c.range)).collect();
        writeln!(w, "# ranges {}", ranges.join(" "))?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["channel", "bin_center", "mean", "std", "count", "mean_command"])?;
        for c in &self.channels {
            for b in &c.bins {
                wr.write_record([
                    c.channel.to_string(),
                    b.center.to_string(),
                    b.mean.to_string(),
                    b.std.to_string(),
                    b.count.to_string(),
                    b.mean_command.to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut ranges = [None; 4];
        let mut body = String::new();
        let mut versioned = false;
        for line in r.lines() {
            let line = line?;
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                versioned |= comment == "beltrot force map v1";
                if let Some(rest) = comment.strip_prefix("ranges") {
                    for kv in rest.split_whitespace() {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| Error::Format(format!("bad range entry {kv:?}")))?;
                        let v: f64 = v.parse().map_err(|_| Error::Format(format!("bad range {v:?}")))?;
                        ranges[k.parse::<Channel>()?.index()] = Some(v);
                    }
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        if !versioned {
            return Err(Error::Format("missing force map version line".into()));
        }
        let mut bins: [Vec<Bin>; 4] = Default::default();
        let mut rd = csv::Reader::from_reader(body.as_bytes());
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(Error::Format(format!("force map row has {} fields", rec.len())));
            }
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| Error::Format(format!("bad number {:?}", &rec[i])))
            };
            let ch: Channel = rec[0].parse()?;
            bins[ch.index()].push(Bin {
                center: num(1)?,
                mean: num(2)?,
                std: num(3)?,
                count: rec[4].parse().map_err(|_| Error::Format(format!("bad count {:?}", &rec[4])))?,
                mean_command: num(5)?,
            });
        }
        let channels = Channel::ALL
            .iter()
            .zip(bins)
            .map(|(&ch, b)| {
                let range = ranges[ch.index()].ok_or_else(|| Error::Format(format!("missing range for {ch}")))?;
                ChannelMap::from_bins(ch, range, b)
            })
            .collect::<Result<_>>()?;
        Ok(Self { channels })
    }
}

/// Buckets samples into `bin_count` uniform bins per channel over the default
/// command ranges.
pub fn build_mapping(samples: &[ForceSample], bin_count: usize) -> Result<ControlForceMap> {
    build_mapping_with_ranges(samples, bin_count, Channel::ALL.map(Channel::default_range))
}

pub fn build_mapping_with_ranges(samples: &[ForceSample], bin_count: usize, ranges: [f64; 4]) -> Result<ControlForceMap> {
    if bin_count < 3 || bin_count.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("bin count {bin_count} must be odd and at least 3")));
    }
    if ranges.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidArgument("command ranges must be positive".into()));
    }
    let channels = Channel::ALL
        .iter()
        .map(|&ch| {
            let range = ranges[ch.index()];
            let width = 2.0 * range / bin_count as f64;
            let mut acc = vec![(0usize, 0.0, 0.0, 0.0); bin_count];
            for s in samples.iter().filter(|s| s.channel == ch) {
                let i = (((s.command + range) / width).floor().max(0.0) as usize).min(bin_count - 1);
                let a = &mut acc[i];
                a.0 += 1;
                a.1 += s.force;
                a.2 += s.force * s.force;
                a.3 += s.command;
            }
            // second pass for a numerically stable standard deviation
            let means: Vec<f64> = acc.iter().map(|a| if a.0 > 0 { a.1 / a.0 as f64 } else { 0.0 }).collect();
            let mut ss = vec![0.0; bin_count];
            for s in samples.iter().filter(|s| s.channel == ch) {
                let i = (((s.command + range) / width).floor().max(0.0) as usize).min(bin_count - 1);
                ss[i] += (s.force - means[i]).powi(2);
            }
            let bins = (0..bin_count)
                .map(|i| {
                    let n = acc[i].0;
                    Bin {
                        center: -range + (i as f64 + 0.5) * width,
                        mean: means[i],
                        std: if n > 1 { (ss[i] / (n - 1) as f64).sqrt() } else { 0.0 },
                        count: n,
                        mean_command: if n > 0 { acc[i].3 / n as f64 } else { 0.0 },
                    }
                })
                .collect();
            ChannelMap::from_bins(ch, range, bins)
        })
        .collect::<Result<_>>()?;
    Ok(ControlForceMap { channels })
}

fn draw_disjoint<R: Rng + ?Sized>(rng: &mut R, ranges: [f64; 4]) -> Action {
    let ch = Channel::ALL[rng.random_range(0..4)];
    // magnitude in (0, range]
    let mag = ranges[ch.index()] * (1.0 - rng.random::<f64>());
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    ch.action(sign * mag)
}

/// `n` actions with one nonzero channel each: channel uniform, magnitude
/// uniform over the channel's default range, random sign.
pub fn sample_disjoint_actions(n: usize, seed: u64) -> Vec<Action> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges = Channel::ALL.map(Channel::default_range);
    (0..n).map(|_| draw_disjoint(&mut rng, ranges)).collect()
}

/// The single active channel of an action, if any.
pub fn active_channel(action: &Action) -> Result<Option<(Channel, f64)>> {
    let comps = action.components();
    let active: Vec<usize> = (0..4).filter(|&i| comps[i] != 0.0).collect();
    match active.as_slice() {
        [] => Ok(None),
        [i] => Ok(Some((Channel::ALL[*i], comps[*i]))),
        many => Err(Error::MultipleActiveChannels(many.len())),
    }
}

/// Force sample for the last transition of `window`; earlier transitions
/// supply the motion history. `None` for a null action.
pub fn estimate_force_for_transition(
    window: &[Transition],
    dist: &MassDistribution,
    mu: f64,
    g: f64,
) -> Result<Option<ForceSample>> {
    let last = window
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty calibration window".into()))?;
    let Some((channel, command)) = active_channel(&last.action)? else {
        return Ok(None);
    };
    let body = PlanarBody::new(dist)?;
    let history: Vec<_> = window.iter().map(|t| t.obs.clone()).collect();
    let kin = body.kinematics(&history)?;
    if ((last.next_obs.time - last.obs.time) - kin.dt).abs() > 1e-9 * kin.dt.max(1.0) {
        return Err(Error::NonUniformWindow);
    }
    let next = &last.next_obs.geom_pose;
    let r_next = next.position() + nalgebra::Rotation2::new(next.theta) * body.com_offset;
    let delta = r_next - kin.r_c;
    let dt = kin.dt;
    let accel = 2.0 * (delta - kin.r_c_dot * dt) / (dt * dt) - kin.r_c_ddot_free;
    let fric = body.friction(&delta, &kin, &last.obs.s1, &last.obs.s2, mu, g);
    let f = accel * body.mass - fric.force;
    let force = if channel.is_velocity() { f.x } else { f.y };
    Ok(Some(ForceSample::new(channel, command, force)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Mass of the uniform calibration box (kg).
    pub box_mass: f64,
    /// Force samples to collect.
    pub n_samples: usize,
    pub actions_per_episode: usize,
    /// Null steps after each action so the next window starts from rest.
    pub settle_steps: usize,
    pub bin_count: usize,
    pub velocity_range: f64,
    pub position_range: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            box_mass: 2.0,
            n_samples: 400,
            actions_per_episode: 4,
            settle_steps: 3,
            bin_count: 9,
            velocity_range: 0.3,
            position_range: 0.02,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn ranges(&self) -> [f64; 4] {
        [self.velocity_range, self.velocity_range, self.position_range, self.position_range]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationData {
    pub samples: Vec<ForceSample>,
    pub transitions: usize,
    pub episodes: usize,
}

/// Runs calibration episodes until `n_samples` force samples are collected.
/// Each episode starts a uniform box at rest at a random yaw in `[0, π/2]`.
pub fn collect_samples(cfg: &CalibrationConfig, belt: &BeltConfig, dims: GridDims, box_dims: [f64; 3]) -> Result<CalibrationData> {
    if cfg.n_samples == 0 || cfg.actions_per_episode == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one sample per episode".into()));
    }
    let dist = MassDistribution::uniform(dims, box_dims, cfg.box_mass)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let goal = Goal {
        max_steps: usize::MAX,
        ..Goal::default()
    };
    let mut sim = Simulator::new(dist.clone(), belt.clone(), goal, Pose2::default())?;
    let ranges = cfg.ranges();
    let mut out = CalibrationData {
        samples: Vec::with_capacity(cfg.n_samples),
        transitions: 0,
        episodes: 0,
    };
    while out.samples.len() < cfg.n_samples {
        let theta = rng.random_range(0.0..=FRAC_PI_2);
        let mut obs = sim.reset(Pose2::new(0.0, 0.0, theta))?;
        out.episodes += 1;
        let mut history: Vec<Transition> = Vec::new();
        let mut step = |sim: &mut Simulator, action: Action, history: &mut Vec<Transition>| -> Result<bool> {
            let res = sim.step(&action)?;
            history.push(Transition {
                obs: std::mem::replace(&mut obs, res.observation.clone()),
                action,
                next_obs: res.observation,
            });
            Ok(!res.events.support_lost)
        };
        let mut alive = true;
        for _ in 0..WINDOW - 1 {
            alive &= step(&mut sim, Action::null(), &mut history)?;
        }
        for _ in 0..cfg.actions_per_episode {
            if !alive || out.samples.len() >= cfg.n_samples {
                break;
            }
            let action = draw_disjoint(&mut rng, ranges);
            alive = step(&mut sim, action, &mut history)?;
            let window = &history[history.len() - WINDOW + 1..];
            if alive {
                if let Some(s) = estimate_force_for_transition(window, &dist, belt.kinetic_friction_mu, belt.gravity)? {
                    out.samples.push(s);
                }
            }
            for _ in 0..cfg.settle_steps {
                if alive {
                    alive = step(&mut sim, Action::null(), &mut history)?;
                }
            }
        }
        out.transitions += history.len();
    }
    Ok(out)
}

/// Collects samples and bins them into a force map.
pub fn calibrate(cfg: &CalibrationConfig, belt: &BeltConfig) -> Result<(ControlForceMap, CalibrationData)> {
    calibrate_box(cfg, belt, DEFAULT_GRID, DEFAULT_BOX)
}

pub fn calibrate_box(
    cfg: &CalibrationConfig,
    belt: &BeltConfig,
    dims: GridDims,
    box_dims: [f64; 3],
) -> Result<(ControlForceMap, CalibrationData)> {
    let data = collect_samples(cfg, belt, dims, box_dims)?;
    let map = build_mapping_with_ranges(&data.samples, cfg.bin_count, cfg.ranges())?;
    Ok((map, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Observation, Restriction};
    use proptest::prelude::*;

    fn obs(t: f64, x: f64, y: f64) -> Observation {
        Observation {
            time: t,
            geom_pose: Pose2::new(x, y, 0.0),
            s1: vec![0],
            s2: vec![4 * 7 * 4],
            belt_y: [-0.09, 0.09],
        }
    }

    fn window(next_x: f64, action: Action) -> Vec<Transition> {
        let dt = 0.05;
        let mut w: Vec<Transition> = (0..2)
            .map(|i| Transition {
                obs: obs(i as f64 * dt, 0.0, 0.0),
                action: Action::null(),
                next_obs: obs((i + 1) as f64 * dt, 0.0, 0.0),
            })
            .collect();
        w.push(Transition {
            obs: obs(2.0 * dt, 0.0, 0.0),
            action,
            next_obs: obs(3.0 * dt, next_x, 0.0),
        });
        w
    }

    #[test]
    fn disjoint_actions_have_one_channel() {
        let acts = sample_disjoint_actions(4000, 3);
        let mut counts = [0usize; 4];
        for a in &acts {
            let (ch, c) = active_channel(a).unwrap().unwrap();
            assert!(c.abs() <= ch.default_range() && c != 0.0);
            counts[ch.index()] += 1;
        }
        assert!(counts.iter().all(|&c| c.abs_diff(1000) <= 150), "{counts:?}");
        assert_eq!(acts, sample_disjoint_actions(4000, 3));
    }

    #[test]
    fn force_from_known_acceleration() {
        let dist = MassDistribution::uniform(DEFAULT_GRID, DEFAULT_BOX, 2.0).unwrap();
        // x = ½ a dt² with a = 0.5; zero friction coefficient isolates M·δr̈
        let dt: f64 = 0.05;
        let w = window(0.25 * dt * dt, Action::velocity(0.1, 0.0));
        let s = estimate_force_for_transition(&w, &dist, 0.0, 9.8).unwrap().unwrap();
        assert_eq!(s.channel, Channel::V1);
        assert!((s.force - 1.0).abs() < 1e-9);

        let still = estimate_force_for_transition(&window(0.0, Action::velocity(0.1, 0.0)), &dist, 0.4, 9.8)
            .unwrap()
            .unwrap();
        assert_eq!(still.force, 0.0);
        assert!(estimate_force_for_transition(&window(0.0, Action::null()), &dist, 0.4, 9.8)
            .unwrap()
            .is_none());
        let mixed = Action {
            v: [0.1, 0.1],
            p: [0.0; 2],
            tag: Restriction::VelocityPair,
        };
        assert!(matches!(
            estimate_force_for_transition(&window(0.0, mixed), &dist, 0.4, 9.8),
            Err(Error::MultipleActiveChannels(2))
        ));
    }

    fn all_channels(c: f64, f: f64) -> Vec<ForceSample> {
        Channel::ALL
            .iter()
            .map(|&ch| {
                let s = ch.default_range() / 0.3;
                ForceSample::new(ch, c * s, f)
            })
            .collect()
    }

    #[test]
    fn constant_samples_lookup_exactly() {
        let map = build_mapping(&all_channels(0.17, 2.5), 9).unwrap();
        for ch in Channel::ALL {
            let c = 0.17 * ch.default_range() / 0.3;
            assert!((map.lookup(ch, c) - 2.5).abs() < 1e-12);
            assert!((map.lookup(ch, -c) + 2.5).abs() < 1e-12);
            assert_eq!(map.lookup(ch, 0.0), 0.0);
        }
    }

    #[test]
    fn empty_channel_is_named() {
        let samples = vec![
            ForceSample::new(Channel::V1, 0.1, 1.0),
            ForceSample::new(Channel::V2, 0.1, 1.0),
            ForceSample::new(Channel::P1, 0.01, 1.0),
        ];
        match build_mapping(&samples, 9) {
            Err(Error::EmptyChannel(Channel::P2)) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(build_mapping(&all_channels(0.1, 1.0), 8).is_err());
    }

    #[test]
    fn lookup_clamps_and_interpolates() {
        let mut s = Vec::new();
        for ch in Channel::ALL {
            let r = ch.default_range();
            s.push(ForceSample::new(ch, 0.5 * r, 1.0));
            s.push(ForceSample::new(ch, 0.9 * r, 3.0));
        }
        let map = build_mapping(&s, 9).unwrap();
        assert!((map.lookup(Channel::V1, 0.7 * 0.3) - 2.0).abs() < 1e-12);
        assert!((map.lookup(Channel::V1, 0.25 * 0.3) - 0.5).abs() < 1e-12);
        assert_eq!(map.lookup(Channel::V1, 5.0), 3.0);
    }

    #[test]
    fn csv_round_trip() {
        let mut s = Vec::new();
        for (i, ch) in Channel::ALL.iter().enumerate() {
            for k in 1..30 {
                let c = ch.default_range() * (k as f64 / 15.0 - 1.0);
                s.push(ForceSample::new(*ch, c, 3.0 * c + i as f64 * 0.01 * (k % 3) as f64));
            }
        }
        let map = build_mapping(&s, 9).unwrap();
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let back = ControlForceMap::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, map);
        assert!(ControlForceMap::read_csv("channel,bin_center\n".as_bytes()).is_err());
    }

    #[test]
    fn uniform_box_calibration_populates_bins() {
        let cfg = CalibrationConfig::default();
        let (map, data) = calibrate(&cfg, &BeltConfig::default()).unwrap();
        assert_eq!(data.samples.len(), 400);
        for ch in Channel::ALL {
            assert!(map.channel(ch).populated_bins() >= 5, "{ch}");
            assert!(map.lookup(ch, ch.default_range()) > 0.0, "{ch} force has the command's sign");
        }
        let (again, _) = calibrate(&cfg, &BeltConfig::default()).unwrap();
        assert_eq!(again, map);
    }

    proptest! {
        #[test]
        fn lookup_is_odd(c in -0.4..0.4f64, seed in 0u64..50) {
            let acts = sample_disjoint_actions(200, seed);
            let samples: Vec<ForceSample> = acts
                .iter()
                .map(|a| {
                    let (ch, c) = active_channel(a).unwrap().unwrap();
                    ForceSample::new(ch, c, c * 7.0 + c.abs().sqrt())
                })
                .collect();
            let map = build_mapping(&samples, 9).unwrap();
            for ch in Channel::ALL {
                prop_assert_eq!(map.lookup(ch, -c), -map.lookup(ch, c));
            }
        }

        #[test]
        fn extra_sample_touches_only_its_bin(seed in 0u64..50, c in -0.3..0.3f64, f in -5.0..5.0f64) {
            let acts = sample_disjoint_actions(200, seed);
            let mut samples: Vec<ForceSample> = acts
                .iter()
                .map(|a| {
                    let (ch, c) = active_channel(a).unwrap().unwrap();
                    ForceSample::new(ch, c, 4.0 * c)
                })
                .collect();
            let before = build_mapping(&samples, 9).unwrap();
            samples.push(ForceSample::new(Channel::V2, c, f));
            let after = build_mapping(&samples, 9).unwrap();
            let mut changed = 0;
            for ch in Channel::ALL {
                for (a, b) in before.channel(ch).bins.iter().zip(&after.channel(ch).bins) {
                    if a != b {
                        changed += 1;
                        prop_assert_eq!(ch, Channel::V2);
                        prop_assert_eq!(b.count, a.count + 1);
                    }
                }
            }
            prop_assert_eq!(changed, 1);
        }
    }
}
