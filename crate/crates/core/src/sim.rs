//! Synthetic IR-UWB scenes: person skeletons in a room, the 64-channel radar
//! frame they produce, and keypoint labels from a camera on the array.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::seed::{self, streams};

pub const NUM_TX: usize = 8;
pub const NUM_RX: usize = 8;
pub const NUM_CHANNELS: usize = NUM_TX * NUM_RX;
pub const NUM_SAMPLES: usize = 768;
pub const NUM_JOINTS: usize = 8;
pub const MAX_PERSONS: usize = 4;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
const MIN_HIP_SEPARATION: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Joint {
    Head,
    Neck,
    Shoulder,
    Elbow,
    Wrist,
    Hip,
    Knee,
    Ankle,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Head,
        Joint::Neck,
        Joint::Shoulder,
        Joint::Elbow,
        Joint::Wrist,
        Joint::Hip,
        Joint::Knee,
        Joint::Ankle,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Joint::Head => "Hea",
            Joint::Neck => "Nec",
            Joint::Shoulder => "Sho",
            Joint::Elbow => "Elb",
            Joint::Wrist => "Wri",
            Joint::Hip => "Hip",
            Joint::Knee => "Kne",
            Joint::Ankle => "Ank",
        }
    }
}

pub type Point3 = [f64; 3];

fn distance(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Radar geometry. Coordinates in meters: x lateral, y forward (boresight), z up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntennaArray {
    pub tx_positions: Vec<Point3>,
    pub rx_positions: Vec<Point3>,
    pub range_resolution_m: f64,
}

impl Default for AntennaArray {
    /// Horizontal Tx row above a vertical Rx column, mounted on the y = 0 wall.
    fn default() -> Self {
        let tx_positions = (0..NUM_TX)
            .map(|i| [-0.28 + 0.08 * i as f64, 0.0, 1.2])
            .collect();
        let rx_positions = (0..NUM_RX)
            .map(|i| [0.4, 0.0, 0.72 + 0.08 * i as f64])
            .collect();
        Self {
            tx_positions,
            rx_positions,
            range_resolution_m: 0.0078,
        }
    }
}

impl AntennaArray {
    pub fn validate(&self) -> Result<()> {
        if self.tx_positions.len() != NUM_TX || self.rx_positions.len() != NUM_RX {
            return Err(PoseError::Config(format!(
                "antenna array needs {NUM_TX} Tx and {NUM_RX} Rx positions, got {} and {}",
                self.tx_positions.len(),
                self.rx_positions.len()
            )));
        }
        if !(self.range_resolution_m > 0.0) {
            return Err(PoseError::Config(format!(
                "range_resolution_m must be positive, got {}",
                self.range_resolution_m
            )));
        }
        Ok(())
    }

    /// Tx/Rx pair for channel `tx * 8 + rx`.
    pub fn pair(&self, channel: usize) -> (Point3, Point3) {
        (
            self.tx_positions[channel / NUM_RX],
            self.rx_positions[channel % NUM_RX],
        )
    }

    /// Mean of all antenna positions; the virtual camera sits here.
    pub fn center(&self) -> Point3 {
        let mut c = [0.0; 3];
        let all = self.tx_positions.iter().chain(&self.rx_positions);
        let n = (self.tx_positions.len() + self.rx_positions.len()) as f64;
        for p in all {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }

    /// Longest round trip that still lands inside the sample window.
    pub fn max_round_trip(&self) -> f64 {
        NUM_SAMPLES as f64 * self.range_resolution_m
    }

    pub fn round_trip(&self, channel: usize, point: Point3) -> f64 {
        let (tx, rx) = self.pair(channel);
        distance(tx, point) + distance(point, rx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonSkeleton {
    /// Ordered as [`Joint::ALL`].
    pub joints: [Point3; NUM_JOINTS],
    pub reflectivity: [f64; NUM_JOINTS],
}

impl PersonSkeleton {
    pub fn joint(&self, j: Joint) -> Point3 {
        self.joints[j as usize]
    }

    fn hip_xy(&self) -> [f64; 2] {
        let h = self.joint(Joint::Hip);
        [h[0], h[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    pub min: Point3,
    pub max: Point3,
}

impl Default for Room {
    /// 5 m x 5 m footprint with the array centered on the y = 0 wall.
    fn default() -> Self {
        Self {
            min: [-2.5, 0.0, 0.0],
            max: [2.5, 5.0, 3.0],
        }
    }
}

impl Room {
    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub persons: Vec<PersonSkeleton>,
    pub room: Room,
    /// `None` renders a noiseless frame.
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

/// One radar capture, channel-major `(64, 768)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RfFrame {
    samples: Vec<f32>,
}

impl RfFrame {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.len() != NUM_CHANNELS * NUM_SAMPLES {
            return Err(PoseError::InvalidInput(format!(
                "RF frame needs {} values, got {}",
                NUM_CHANNELS * NUM_SAMPLES,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(PoseError::InvalidInput(
                "RF frame holds non-finite values".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * NUM_SAMPLES..(c + 1) * NUM_SAMPLES]
    }

    pub fn shape(&self) -> [usize; 2] {
        [NUM_CHANNELS, NUM_SAMPLES]
    }
}

/// Normalized `(x, y)` image coordinates of one person's joints.
pub type PersonKeypoints = Vec<[f32; 2]>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameLabel {
    pub persons: Vec<PersonKeypoints>,
}

/// Simulator knobs shared by dataset generation and the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub max_persons: usize,
    pub snr_db: Option<f64>,
    pub array: AntennaArray,
    pub room: Room,
    /// Persons are kept at least this far (horizontally) from the array.
    pub exclusion_radius_m: f64,
    pub pulse_center_hz: f64,
    pub pulse_sigma_samples: f64,
    /// Horizontal field of view of the labeling camera, degrees.
    pub camera_hfov_deg: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            max_persons: MAX_PERSONS,
            snr_db: Some(20.0),
            array: AntennaArray::default(),
            room: Room::default(),
            exclusion_radius_m: 0.5,
            pulse_center_hz: 2.0e9,
            pulse_sigma_samples: 4.0,
            camera_hfov_deg: 90.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        if !(1..=MAX_PERSONS).contains(&self.max_persons) {
            return Err(PoseError::Config(format!(
                "max_persons must be in 1..={MAX_PERSONS}, got {}",
                self.max_persons
            )));
        }
        if !(self.pulse_sigma_samples > 0.0) {
            return Err(PoseError::Config(
                "pulse_sigma_samples must be positive".into(),
            ));
        }
        if !(self.camera_hfov_deg > 0.0 && self.camera_hfov_deg < 180.0) {
            return Err(PoseError::Config(
                "camera_hfov_deg must be in (0, 180)".into(),
            ));
        }
        Ok(())
    }

    /// Samples kept free at the far end of the window so pulse tails fit.
    fn tail_margin(&self) -> f64 {
        (4.0 * self.pulse_sigma_samples).ceil()
    }
}

/// (vertical segment length, lateral offset) per joint, meters. Vertical
/// positions chain upward from the floor so joint order is preserved.
const TEMPLATE_REFLECTIVITY: [f64; NUM_JOINTS] = [0.6, 0.5, 0.8, 0.5, 0.3, 1.0, 0.6, 0.4];

fn jitter(rng: &mut ChaCha8Rng, v: f64) -> f64 {
    v * rng.gen_range(0.9..=1.1)
}

fn sample_skeleton(rng: &mut ChaCha8Rng, hip_xy: [f64; 2]) -> PersonSkeleton {
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let ankle_z = jitter(rng, 0.08);
    let knee_z = ankle_z + jitter(rng, 0.42);
    let hip_z = knee_z + jitter(rng, 0.45);
    let neck_z = hip_z + jitter(rng, 0.50);
    let head_z = neck_z + jitter(rng, 0.20);
    let shoulder_z = neck_z - jitter(rng, 0.05);
    let elbow_z = shoulder_z - jitter(rng, 0.28);
    let wrist_z = elbow_z - jitter(rng, 0.25);
    let heights = [
        head_z, neck_z, shoulder_z, elbow_z, wrist_z, hip_z, knee_z, ankle_z,
    ];
    let lateral = [0.0, 0.0, 0.20, 0.24, 0.26, 0.10, 0.10, 0.10];
    let mut joints = [[0.0; 3]; NUM_JOINTS];
    let mut reflectivity = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let dx = side * jitter(rng, lateral[j]);
        joints[j] = [hip_xy[0] + dx, hip_xy[1], heights[j]];
        reflectivity[j] = jitter(rng, TEMPLATE_REFLECTIVITY[j]).min(1.0);
    }
    // Hip is the body anchor: keep its lateral position at the sampled point.
    joints[Joint::Hip as usize][0] = hip_xy[0];
    PersonSkeleton {
        joints,
        reflectivity,
    }
}

fn person_fits(cfg: &SimConfig, p: &PersonSkeleton) -> bool {
    let limit = (NUM_SAMPLES as f64 - 1.0 - cfg.tail_margin()) * cfg.array.range_resolution_m;
    p.joints.iter().all(|&j| {
        cfg.room.contains(j) && (0..NUM_CHANNELS).all(|c| cfg.array.round_trip(c, j) <= limit)
    })
}

/// Random scene with `n_persons` people. Hips are uniform over the part of
/// the room outside the exclusion radius, inside the camera's horizontal
/// field of view and within the radar's range window.
pub fn generate_scene(seed: u64, n_persons: usize, cfg: &SimConfig) -> Result<Scene> {
    if !(1..=MAX_PERSONS).contains(&n_persons) {
        return Err(PoseError::InvalidInput(format!(
            "n_persons must be in 1..={MAX_PERSONS}, got {n_persons}"
        )));
    }
    cfg.validate()?;
    let mut rng = seed::rng(seed, streams::SCENE, 0);
    let center = cfg.array.center();
    let half_fov = (cfg.camera_hfov_deg.to_radians() / 2.0).tan() * 0.85;
    let max_reach = cfg.array.max_round_trip() / 2.0;
    let mut persons: Vec<PersonSkeleton> = Vec::with_capacity(n_persons);
    let mut attempts = 0usize;
    while persons.len() < n_persons {
        attempts += 1;
        if attempts > 100_000 {
            return Err(PoseError::Scene(format!(
                "could not place {n_persons} persons in the sensing region"
            )));
        }
        let x = rng.gen_range(cfg.room.min[0]..cfg.room.max[0]);
        let y = rng.gen_range(cfg.room.min[1]..cfg.room.max[1].min(center[1] + max_reach));
        let (dx, dy) = (x - center[0], y - center[1]);
        let horizontal = (dx * dx + dy * dy).sqrt();
        if horizontal < cfg.exclusion_radius_m || dy <= 0.0 || dx.abs() > dy * half_fov {
            continue;
        }
        if persons.iter().any(|p| {
            let h = p.hip_xy();
            ((h[0] - x).powi(2) + (h[1] - y).powi(2)).sqrt() < MIN_HIP_SEPARATION
        }) {
            continue;
        }
        let person = sample_skeleton(&mut rng, [x, y]);
        if person_fits(cfg, &person) {
            persons.push(person);
        }
    }
    Ok(Scene {
        persons,
        room: cfg.room.clone(),
        noise_snr_db: cfg.snr_db,
        seed,
    })
}

/// Renders the radar frame: one Gaussian-modulated sinusoid per
/// (channel, joint) at the round-trip delay, amplitude `reflectivity / d^2`,
/// plus white Gaussian noise at the scene SNR (relative to mean signal power).
pub fn synthesize_frame(scene: &Scene, cfg: &SimConfig) -> Result<RfFrame> {
    let array = &cfg.array;
    array.validate()?;
    let sigma = cfg.pulse_sigma_samples;
    let half_width = (6.0 * sigma).ceil() as i64;
    let cycles_per_sample = cfg.pulse_center_hz * array.range_resolution_m / SPEED_OF_LIGHT;
    let mut signal = vec![0.0f64; NUM_CHANNELS * NUM_SAMPLES];
    for channel in 0..NUM_CHANNELS {
        let row = &mut signal[channel * NUM_SAMPLES..(channel + 1) * NUM_SAMPLES];
        for person in &scene.persons {
            for (joint, &refl) in person.joints.iter().zip(&person.reflectivity) {
                let d = array.round_trip(channel, *joint);
                let center = (d / array.range_resolution_m).round() as i64;
                if center < 0 || center >= NUM_SAMPLES as i64 {
                    return Err(PoseError::Scene(format!(
                        "round trip {d:.3} m on channel {channel} exceeds the {:.3} m range window",
                        array.max_round_trip()
                    )));
                }
                let amplitude = refl / (d * d);
                let lo = (center - half_width).max(0);
                let hi = (center + half_width).min(NUM_SAMPLES as i64 - 1);
                for n in lo..=hi {
                    let offset = (n - center) as f64;
                    let envelope = (-offset * offset / (2.0 * sigma * sigma)).exp();
                    let carrier = (2.0 * std::f64::consts::PI * cycles_per_sample * offset).cos();
                    row[n as usize] += amplitude * envelope * carrier;
                }
            }
        }
    }
    if let Some(snr_db) = scene.noise_snr_db {
        let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64;
        let std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        if std > 0.0 {
            let normal = Normal::new(0.0, std)
                .map_err(|e| PoseError::Scene(format!("noise distribution: {e}")))?;
            let mut rng = seed::rng(scene.seed, streams::NOISE, 0);
            for v in signal.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    RfFrame::new(signal.into_iter().map(|v| v as f32).collect())
}

/// Pinhole projection into a camera at the array center looking along +y.
/// Returns `None` for points at or behind the image plane.
pub fn project_point(point: Point3, array: &AntennaArray, hfov_deg: f64) -> Option<[f64; 2]> {
    let c = array.center();
    let depth = point[1] - c[1];
    if depth <= 0.0 {
        return None;
    }
    let focal = 0.5 / (hfov_deg.to_radians() / 2.0).tan();
    Some([
        0.5 + focal * (point[0] - c[0]) / depth,
        0.5 - focal * (point[2] - c[2]) / depth,
    ])
}

/// Keypoint labels in normalized `[0, 1]^2` image coordinates. Persons with
/// no joint inside the frustum are dropped; the rest are clamped to the image.
pub fn project_keypoints(scene: &Scene, cfg: &SimConfig) -> FrameLabel {
    let inside = |uv: &[f64; 2]| (0.0..=1.0).contains(&uv[0]) && (0.0..=1.0).contains(&uv[1]);
    let persons = scene
        .persons
        .iter()
        .filter_map(|p| {
            let projected: Vec<Option<[f64; 2]>> = p
                .joints
                .iter()
                .map(|&j| project_point(j, &cfg.array, cfg.camera_hfov_deg))
                .collect();
            if !projected.iter().flatten().any(inside) {
                return None;
            }
            Some(
                projected
                    .into_iter()
                    .map(|uv| {
                        let uv = uv.unwrap_or([0.5, 0.5]);
                        [uv[0].clamp(0.0, 1.0) as f32, uv[1].clamp(0.0, 1.0) as f32]
                    })
                    .collect(),
            )
        })
        .collect();
    FrameLabel { persons }
}

/// Person count for frame `index` of a dataset seeded with `seed`.
pub fn persons_for_frame(seed: u64, index: u64, max_persons: usize) -> usize {
    let mut rng = seed::rng(seed, streams::SCENE_COUNT, index);
    rng.gen_range(1..=max_persons)
}

/// Scenes for a dataset: frame `i` uses its own derived seed, so any subset
/// of frames can be regenerated independently and in parallel.
pub fn generate_scenes(seed: u64, frames: usize, cfg: &SimConfig) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    (0..frames as u64)
        .into_par_iter()
        .map(|i| {
            let n = persons_for_frame(seed, i, cfg.max_persons);
            generate_scene(seed::derive(seed, streams::SCENE, i), n, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(persons: Vec<PersonSkeleton>) -> Scene {
        Scene {
            persons,
            room: Room::default(),
            noise_snr_db: None,
            seed: 1,
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = SimConfig::default();
        let a = generate_scene(7, 2, &cfg).unwrap();
        let b = generate_scene(7, 2, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.persons.len(), 2);
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn scene_rejects_bad_person_count() {
        let cfg = SimConfig::default();
        assert!(generate_scene(7, 5, &cfg).is_err());
        assert!(generate_scene(7, 0, &cfg).is_err());
    }

    #[test]
    fn different_seeds_move_people() {
        let cfg = SimConfig::default();
        let a = generate_scene(7, 2, &cfg).unwrap();
        let b = generate_scene(8, 2, &cfg).unwrap();
        assert_ne!(
            a.persons[0].joint(Joint::Hip),
            b.persons[0].joint(Joint::Hip)
        );
    }

    #[test]
    fn generated_scenes_respect_invariants() {
        let cfg = SimConfig::default();
        for seed in 0..50 {
            let scene = generate_scene(seed, 4, &cfg).unwrap();
            for (i, p) in scene.persons.iter().enumerate() {
                assert!(p.joint(Joint::Head)[2] > p.joint(Joint::Neck)[2]);
                assert!(p.joint(Joint::Neck)[2] > p.joint(Joint::Hip)[2]);
                assert!(p.joints.iter().all(|&j| scene.room.contains(j)));
                assert!(p.reflectivity.iter().all(|&r| r > 0.0 && r <= 1.0));
                for q in &scene.persons[i + 1..] {
                    let (a, b) = (p.hip_xy(), q.hip_xy());
                    assert!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= 0.4);
                }
            }
            synthesize_frame(&scene, &cfg).unwrap();
        }
    }

    /// Single joint placed so that one channel's round trip is exactly 1.56 m.
    fn single_joint_on_channel0(refl: f64) -> (Scene, SimConfig) {
        let cfg = SimConfig::default();
        let (tx, rx) = cfg.array.pair(0);
        // point on the ellipse |tx-p| + |p-rx| = 1.56, straight ahead of the Tx/Rx midpoint
        let mid = [(tx[0] + rx[0]) / 2.0, 0.0, (tx[2] + rx[2]) / 2.0];
        let half_sep = distance(tx, rx) / 2.0;
        let forward = (0.78f64.powi(2) - half_sep * half_sep).sqrt();
        let point = [mid[0], forward, mid[2]];
        let joints = [point; NUM_JOINTS];
        // only joint 0 reflects
        let mut reflectivity = [0.0; NUM_JOINTS];
        reflectivity[0] = refl;
        (
            noiseless(vec![PersonSkeleton {
                joints,
                reflectivity,
            }]),
            cfg,
        )
    }

    #[test]
    fn pulse_lands_on_round_trip_sample() {
        let (scene, cfg) = single_joint_on_channel0(1.0);
        assert!((cfg.array.round_trip(0, scene.persons[0].joints[0]) - 1.56).abs() < 1e-12);
        let frame = synthesize_frame(&scene, &cfg).unwrap();
        let ch = frame.channel(0);
        let peak = ch
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 200);
        assert!((ch[200] as f64 - 1.0 / (1.56 * 1.56)).abs() < 1e-6);
    }

    #[test]
    fn pulse_index_is_rounded_delay_on_every_channel() {
        let (scene, cfg) = single_joint_on_channel0(1.0);
        let frame = synthesize_frame(&scene, &cfg).unwrap();
        let joint = scene.persons[0].joints[0];
        for c in 0..NUM_CHANNELS {
            let expected =
                (cfg.array.round_trip(c, joint) / cfg.array.range_resolution_m).round() as usize;
            let ch = frame.channel(c);
            let peak = (0..NUM_SAMPLES)
                .max_by(|&a, &b| ch[a].partial_cmp(&ch[b]).unwrap())
                .unwrap();
            assert_eq!(peak, expected, "channel {c}");
        }
    }

    #[test]
    fn reflectivity_scales_signal_linearly() {
        let cfg = SimConfig::default();
        let mut scene = generate_scene(3, 3, &cfg).unwrap();
        scene.noise_snr_db = None;
        let base = synthesize_frame(&scene, &cfg).unwrap();
        for p in scene.persons.iter_mut() {
            p.reflectivity.iter_mut().for_each(|r| *r *= 2.0);
        }
        let doubled = synthesize_frame(&scene, &cfg).unwrap();
        for (a, b) in base.samples().iter().zip(doubled.samples()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn frames_are_reproducible() {
        let cfg = SimConfig::default();
        let scene = generate_scene(11, 3, &cfg).unwrap();
        assert_eq!(
            synthesize_frame(&scene, &cfg).unwrap(),
            synthesize_frame(&scene, &cfg).unwrap()
        );
    }

    #[test]
    fn removing_a_person_removes_energy_at_their_delays() {
        let cfg = SimConfig::default();
        let mut scene = generate_scene(21, 2, &cfg).unwrap();
        scene.noise_snr_db = None;
        let both = synthesize_frame(&scene, &cfg).unwrap();
        let removed = scene.persons.pop().unwrap();
        let one = synthesize_frame(&scene, &cfg).unwrap();
        for c in 0..NUM_CHANNELS {
            let diff: Vec<f32> = both
                .channel(c)
                .iter()
                .zip(one.channel(c))
                .map(|(a, b)| a - b)
                .collect();
            let argmax = (0..NUM_SAMPLES)
                .max_by(|&a, &b| diff[a].abs().partial_cmp(&diff[b].abs()).unwrap())
                .unwrap();
            let delays: Vec<f64> = removed
                .joints
                .iter()
                .map(|&j| cfg.array.round_trip(c, j) / cfg.array.range_resolution_m)
                .collect();
            let lo = delays.iter().cloned().fold(f64::INFINITY, f64::min) - 24.0;
            let hi = delays.iter().cloned().fold(0.0, f64::max) + 24.0;
            assert!(
                (lo..=hi).contains(&(argmax as f64)),
                "channel {c}: {argmax} not in [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn out_of_window_joint_is_an_error() {
        let cfg = SimConfig::default();
        let far = [0.0, 4.5, 1.0];
        let scene = noiseless(vec![PersonSkeleton {
            joints: [far; NUM_JOINTS],
            reflectivity: [1.0; NUM_JOINTS],
        }]);
        assert!(matches!(
            synthesize_frame(&scene, &cfg),
            Err(PoseError::Scene(_))
        ));
    }

    #[test]
    fn centered_person_projects_to_middle() {
        let cfg = SimConfig::default();
        let c = cfg.array.center();
        let mut joints = [[c[0], 2.0, 1.0]; NUM_JOINTS];
        joints[0] = [c[0], 2.0, 1.7];
        let scene = noiseless(vec![PersonSkeleton {
            joints,
            reflectivity: [1.0; NUM_JOINTS],
        }]);
        let label = project_keypoints(&scene, &cfg);
        assert_eq!(label.persons.len(), 1);
        assert!((label.persons[0][0][0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn persons_behind_camera_are_dropped() {
        let cfg = SimConfig::default();
        let scene = noiseless(vec![PersonSkeleton {
            joints: [[0.0, -1.0, 1.0]; NUM_JOINTS],
            reflectivity: [1.0; NUM_JOINTS],
        }]);
        assert!(project_keypoints(&scene, &cfg).persons.is_empty());
    }

    #[test]
    fn projection_matches_hand_computation() {
        // center of the default array: Tx row mean (0, 0, 1.2), Rx column mean (0.4, 0, 1.0)
        // => camera at (0.2, 0, 1.1); 90 deg HFOV => focal 0.5.
        // joint (1.0, 2.0, 1.5): u = 0.5 + 0.5 * 0.8 / 2 = 0.7, v = 0.5 - 0.5 * 0.4 / 2 = 0.4
        let cfg = SimConfig::default();
        let c = cfg.array.center();
        assert!((c[0] - 0.2).abs() < 1e-12 && c[1].abs() < 1e-12 && (c[2] - 1.1).abs() < 1e-12);
        let scene = noiseless(vec![PersonSkeleton {
            joints: [[1.0, 2.0, 1.5]; NUM_JOINTS],
            reflectivity: [1.0; NUM_JOINTS],
        }]);
        let label = project_keypoints(&scene, &cfg);
        let uv = label.persons[0][0];
        assert!((uv[0] as f64 - 0.7).abs() < 1e-6);
        assert!((uv[1] as f64 - 0.4).abs() < 1e-6);
    }

    #[test]
    fn labels_never_exceed_scene_persons() {
        let cfg = SimConfig::default();
        for (i, scene) in generate_scenes(5, 20, &cfg).unwrap().iter().enumerate() {
            let label = project_keypoints(scene, &cfg);
            assert!(label.persons.len() <= scene.persons.len(), "frame {i}");
            for p in &label.persons {
                assert!(p.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
