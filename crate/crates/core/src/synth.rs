//! Synthetic multi-source radar action clips.
//!
//! A coarse five-segment body (torso and four limbs) is animated by a
//! per-class oscillation pattern and observed by a radar at the origin
//! looking along `+y`. Every detected point carries its analytic radial
//! velocity, so the Doppler channel is physically consistent across sources
//! while geometry, density, noise and clutter differ per source.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::archive::write_clip_archive;
use crate::clip::{ClipTensor, SampleId, SourceMeta, CHANNELS};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::ingest::{standardize_clip, Manifest, ManifestEntry, PointRow, RawSequence};
use crate::par::{self, Parallelism};
use crate::seed;
use crate::taxonomy::source_by_dataset;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Doppler frequency shift of a scatterer with radial velocity `v_r`.
pub fn doppler_shift(v_r: f64, carrier_hz: f64) -> f64 {
    2.0 * v_r * carrier_hz / SPEED_OF_LIGHT
}

/// Inverse of [`doppler_shift`].
pub fn radial_velocity(f_d: f64, carrier_hz: f64) -> f64 {
    f_d * SPEED_OF_LIGHT / (2.0 * carrier_hz)
}

/// One radar configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceProfile {
    pub name: String,
    /// Which source slot (1, 2 or 3) the clips are filed under.
    pub dataset_idx: u32,
    pub carrier_frequency: f64,
    pub frame_rate: f64,
    /// Raw frames recorded per clip before standardization.
    pub frames_per_clip: usize,
    /// Distance from the radar to the subject.
    pub range_m: f64,
    /// Relative per-clip jitter of the range.
    #[serde(default)]
    pub range_jitter: f64,
    /// Expected body points per frame at 1 m.
    pub density_scale: f64,
    pub noise_sigma_xyz: f64,
    pub noise_sigma_doppler: f64,
    pub doppler_quantization: f64,
    /// Expected static clutter returns per frame.
    #[serde(default)]
    pub clutter_rate: f64,
    /// Received power scale; intensity is `gain / R^4` times noise.
    pub intensity_gain: f64,
    /// Standard deviation of the log of the multiplicative intensity noise.
    pub intensity_noise: f64,
}

impl SourceProfile {
    pub fn meta(&self) -> SourceMeta {
        SourceMeta {
            name: self.name.clone(),
            carrier_frequency: self.carrier_frequency,
            frame_rate: self.frame_rate,
            notes: "synthetic".into(),
        }
    }

    /// Expected body points per frame at range `r`.
    pub fn density_at(&self, r: f64) -> f64 {
        (self.density_scale / r.powi(4)).max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("carrier_frequency", self.carrier_frequency),
            ("frame_rate", self.frame_rate),
            ("range_m", self.range_m),
            ("density_scale", self.density_scale),
            ("noise_sigma_xyz", self.noise_sigma_xyz),
            ("noise_sigma_doppler", self.noise_sigma_doppler),
            ("doppler_quantization", self.doppler_quantization),
            ("intensity_gain", self.intensity_gain),
            ("intensity_noise", self.intensity_noise),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("synth source `{}`: {k} must be positive, got {v}", self.name)));
            }
        }
        if !(0.0..0.5).contains(&self.range_jitter) || self.clutter_rate < 0.0 || self.frames_per_clip == 0 {
            return Err(Error::Config(format!(
                "synth source `{}`: range_jitter must lie in [0, 0.5), clutter_rate must be nonnegative and frames_per_clip positive",
                self.name
            )));
        }
        if source_by_dataset(self.dataset_idx).is_none() {
            return Err(Error::Config(format!(
                "synth source `{}`: dataset_idx {} is not a known source slot",
                self.name, self.dataset_idx
            )));
        }
        Ok(())
    }
}

/// Body regions in a fixed order.
pub const REGIONS: [&str; 5] = ["torso", "left_arm", "right_arm", "left_leg", "right_leg"];

/// `(start, end, motion direction)` of each region for a body of unit scale
/// standing at the origin; limbs pivot at their start.
const SKELETON: [([f64; 3], [f64; 3], [f64; 3]); 5] = [
    ([0.0, 0.0, 0.9], [0.0, 0.0, 1.5], [0.0, 0.0, 1.0]),
    ([-0.2, 0.0, 1.45], [-0.25, 0.0, 0.8], [0.0, -0.8, 0.6]),
    ([0.2, 0.0, 1.45], [0.25, 0.0, 0.8], [0.0, -0.8, 0.6]),
    ([-0.1, 0.0, 0.9], [-0.12, 0.0, 0.0], [0.0, -1.0, 0.0]),
    ([0.1, 0.0, 0.9], [0.12, 0.0, 0.0], [0.0, -1.0, 0.0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Oscillation {
    /// Peak displacement in meters (at the limb tip).
    pub amplitude: f64,
    pub frequency: f64,
    /// Radians.
    #[serde(default)]
    pub phase: f64,
}

/// One action class: an oscillation per body region and the share of body
/// returns that come from parts that do not move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionPrimitive {
    pub name: String,
    /// In [`REGIONS`] order.
    pub regions: [Oscillation; 5],
    pub static_fraction: f64,
}

impl MotionPrimitive {
    /// Refuse frequencies at or above half the frame rate.
    pub fn check_nyquist(&self, frame_rate: f64) -> Result<()> {
        for (r, o) in REGIONS.iter().zip(&self.regions) {
            if o.amplitude > 0.0 && o.frequency >= frame_rate / 2.0 {
                return Err(Error::Config(format!(
                    "class `{}` moves the {r} at {} Hz, at or above the Nyquist limit of {} Hz for a {} Hz frame rate",
                    self.name,
                    o.frequency,
                    frame_rate / 2.0,
                    frame_rate
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.static_fraction) {
            return Err(Error::Config(format!("class `{}`: static_fraction must lie in [0, 1]", self.name)));
        }
        if self.regions.iter().any(|o| o.amplitude < 0.0 || o.frequency < 0.0) {
            return Err(Error::Config(format!("class `{}`: amplitudes and frequencies must be nonnegative", self.name)));
        }
        Ok(())
    }

    /// Position and velocity of the point at fraction `s` along `region` at
    /// time `t`, for a body of height scale `scale` centered at `origin`.
    pub fn kinematics(&self, region: usize, s: f64, t: f64, scale: f64, origin: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let (a, b, dir) = SKELETON[region];
        let o = self.regions[region];
        // the torso translates as a whole; limbs swing about their pivot
        let lever = if region == 0 { 1.0 } else { s };
        let w = 2.0 * PI * o.frequency;
        let disp = lever * o.amplitude * (w * t + o.phase).sin();
        let speed = lever * o.amplitude * w * (w * t + o.phase).cos();
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let mut p = [0.0; 3];
        let mut v = [0.0; 3];
        for k in 0..3 {
            p[k] = origin[k] + scale * (a[k] + s * (b[k] - a[k])) + disp * dir[k] / norm;
            v[k] = speed * dir[k] / norm;
        }
        (p, v)
    }
}

fn region_lengths() -> [f64; 5] {
    SKELETON.map(|(a, b, _)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
}

/// Radial velocity of a scatterer at `p` moving with `v`, seen from the
/// origin; positive when receding.
pub fn radial(p: [f64; 3], v: [f64; 3]) -> f64 {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    (p[0] * v[0] + p[1] * v[1] + p[2] * v[2]) / r
}

fn quantize(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

/// Per-point ground truth kept alongside a generated sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTruth {
    /// Analytic radial velocity; zero for static and clutter returns.
    pub radial_velocity: f64,
    pub doppler_noise: f64,
}

/// Render one clip. The subject's body scale and the clip's range jitter
/// are drawn from the same seeded stream as the points.
pub fn generate_clip(
    primitive: &MotionPrimitive,
    profile: &SourceProfile,
    seed: u64,
) -> Result<(RawSequence, Vec<PointTruth>)> {
    primitive.validate()?;
    profile.validate()?;
    primitive.check_nyquist(profile.frame_rate)?;
    let mut rng = seed::rng(seed);
    let range = profile.range_m * (1.0 + profile.range_jitter * rng.random_range(-1.0..=1.0));
    let scale = rng.random_range(0.9..1.1);
    let t0 = rng.random_range(0.0..10.0);
    let origin = [rng.random_range(-0.3..0.3), range, 0.0];
    let lengths = region_lengths();
    let total_len: f64 = lengths.iter().sum();
    let body = Poisson::new(profile.density_at(range)).expect("positive rate");
    let clutter = (profile.clutter_rate > 0.0).then(|| Poisson::new(profile.clutter_rate).expect("positive rate"));
    let xyz_noise = Normal::new(0.0, profile.noise_sigma_xyz).expect("positive sigma");
    let dop_noise = Normal::new(0.0, profile.noise_sigma_doppler).expect("positive sigma");
    let gain_noise = Normal::new(0.0, profile.intensity_noise).expect("positive sigma");

    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for f in 0..profile.frames_per_clip {
        let t = t0 + f as f64 / profile.frame_rate;
        let n_body = (body.sample(&mut rng) as usize).max(1);
        let n_clutter = clutter.as_ref().map_or(0, |c| c.sample(&mut rng) as usize);
        for k in 0..n_body + n_clutter {
            let (p, v) = if k < n_body {
                let mut pick = rng.random_range(0.0..total_len);
                let mut region = 0;
                while region < 4 && pick >= lengths[region] {
                    pick -= lengths[region];
                    region += 1;
                }
                let s = rng.random_range(0.0..1.0);
                if rng.random_bool(primitive.static_fraction) {
                    // body return from a part that does not move
                    let (p, _) = primitive.kinematics(region, s, 0.0, scale, origin);
                    (p, [0.0; 3])
                } else {
                    primitive.kinematics(region, s, t, scale, origin)
                }
            } else {
                let p = [
                    rng.random_range(-1.5..1.5),
                    range + rng.random_range(-0.75..0.75),
                    rng.random_range(0.0..2.5),
                ];
                (p, [0.0; 3])
            };
            let vr = radial(p, v);
            let noise = dop_noise.sample(&mut rng);
            let q = [
                p[0] + xyz_noise.sample(&mut rng),
                p[1] + xyz_noise.sample(&mut rng),
                p[2] + xyz_noise.sample(&mut rng),
            ];
            let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt().max(0.1);
            let intensity = profile.intensity_gain / r.powi(4) * gain_noise.sample(&mut rng).exp();
            let values: [f32; CHANNELS] = [
                q[0] as f32,
                q[1] as f32,
                q[2] as f32,
                quantize(vr + noise, profile.doppler_quantization) as f32,
                intensity as f32,
            ];
            rows.push(PointRow {
                frame: f as i64,
                values,
            });
            truth.push(PointTruth {
                radial_velocity: vr,
                doppler_noise: noise,
            });
        }
    }
    Ok((RawSequence::new(rows, profile.meta()), truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub clips_per_class: usize,
    pub seed: u64,
    pub sources: Vec<SourceProfile>,
    pub classes: Vec<MotionPrimitive>,
}

fn osc(amplitude: f64, frequency: f64, phase: f64) -> Oscillation {
    Oscillation {
        amplitude,
        frequency,
        phase,
    }
}

fn still() -> Oscillation {
    Oscillation::default()
}

/// The three default radar configurations.
pub fn default_sources() -> Vec<SourceProfile> {
    vec![
        SourceProfile {
            name: "synth_a".into(),
            dataset_idx: 1,
            carrier_frequency: 77e9,
            frame_rate: 30.0,
            frames_per_clip: 60,
            range_m: 2.5,
            range_jitter: 0.05,
            density_scale: 1200.0,
            noise_sigma_xyz: 0.03,
            noise_sigma_doppler: 0.05,
            doppler_quantization: 0.05,
            clutter_rate: 2.0,
            intensity_gain: 40.0,
            intensity_noise: 0.2,
        },
        SourceProfile {
            name: "synth_b".into(),
            dataset_idx: 2,
            carrier_frequency: 77e9,
            frame_rate: 10.0,
            frames_per_clip: 32,
            range_m: 3.5,
            range_jitter: 0.05,
            density_scale: 3000.0,
            noise_sigma_xyz: 0.05,
            noise_sigma_doppler: 0.08,
            doppler_quantization: 0.1,
            clutter_rate: 4.0,
            intensity_gain: 600.0,
            intensity_noise: 0.3,
        },
        SourceProfile {
            name: "synth_c".into(),
            dataset_idx: 3,
            carrier_frequency: 62e9,
            frame_rate: 30.0,
            frames_per_clip: 48,
            range_m: 3.0,
            range_jitter: 0.05,
            density_scale: 1600.0,
            noise_sigma_xyz: 0.12,
            noise_sigma_doppler: 0.1,
            doppler_quantization: 0.08,
            clutter_rate: 6.0,
            intensity_gain: 160.0,
            intensity_noise: 0.15,
        },
    ]
}

/// Six classes with distinct (amplitude, frequency, moving share) triples.
/// `stand` barely moves; `wave_wrist`/`wave` and `shuffle`/`walk` share
/// their kinematics and differ only in how much of the body moves, which a
/// max over the point set cannot see but a mean over moving points can.
pub fn default_classes() -> Vec<MotionPrimitive> {
    let p = PI;
    let walk = [still(), osc(0.2, 1.0, p), osc(0.2, 1.0, 0.0), osc(0.3, 1.0, 0.0), osc(0.3, 1.0, p)];
    let wave = [still(), still(), osc(0.35, 1.2, 0.0), still(), still()];
    vec![
        MotionPrimitive {
            name: "stand".into(),
            regions: [osc(0.01, 0.3, 0.0), still(), still(), still(), still()],
            static_fraction: 0.9,
        },
        MotionPrimitive {
            name: "wave_wrist".into(),
            regions: wave,
            static_fraction: 0.75,
        },
        MotionPrimitive {
            name: "wave".into(),
            regions: wave,
            static_fraction: 0.15,
        },
        MotionPrimitive {
            name: "box".into(),
            regions: [still(), osc(0.3, 2.0, 0.0), osc(0.3, 2.0, p), still(), still()],
            static_fraction: 0.4,
        },
        MotionPrimitive {
            name: "shuffle".into(),
            regions: walk,
            static_fraction: 0.75,
        },
        MotionPrimitive {
            name: "walk".into(),
            regions: walk,
            static_fraction: 0.15,
        },
    ]
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips_per_class: 34,
            seed: 0,
            sources: default_sources(),
            classes: default_classes(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips_per_class == 0 {
            return Err(Error::Config("synth.clips_per_class must be at least 1".into()));
        }
        if self.sources.is_empty() || self.classes.is_empty() {
            return Err(Error::Config("synth needs at least one source and one class".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            s.validate()?;
            if self.sources[..i].iter().any(|o| o.dataset_idx == s.dataset_idx || o.name == s.name) {
                return Err(Error::Config(format!("synth source `{}` repeats a name or dataset_idx", s.name)));
            }
            for c in &self.classes {
                c.validate()?;
                c.check_nyquist(s.frame_rate)?;
            }
        }
        Ok(())
    }

    pub fn total_clips(&self) -> usize {
        self.sources.len() * self.classes.len() * self.clips_per_class
    }
}

/// Identifier of clip `index` of class `class` in `profile`. Subjects and
/// scenes cycle through the slot's ranges so every protocol can split the
/// result.
pub fn synth_id(profile: &SourceProfile, class: usize, index: usize) -> Result<SampleId> {
    let info = source_by_dataset(profile.dataset_idx)
        .ok_or_else(|| Error::Config(format!("unknown dataset_idx {}", profile.dataset_idx)))?;
    let scene = index as u32 % info.scenes;
    let subject = (index as u32 / info.scenes) % info.subjects;
    SampleId::new(
        profile.dataset_idx,
        class as u32 + 1,
        info.global_scene(scene),
        info.global_subject(subject),
        index as u32 + 1,
    )
}

/// Generate every clip of the benchmark in memory.
pub fn generate_dataset(cfg: &SynthConfig, mode: Parallelism) -> Result<Dataset> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.sources.len())
        .flat_map(|s| (0..cfg.classes.len()).flat_map(move |c| (0..cfg.clips_per_class).map(move |i| (s, c, i))))
        .collect();
    let samples = par::map(mode, &jobs, |_, &(s, c, i)| -> Result<Sample> {
        let profile = &cfg.sources[s];
        let clip_seed = seed::derive(cfg.seed, &[profile.dataset_idx as u64, c as u64, i as u64]);
        let (seq, _) = generate_clip(&cfg.classes[c], profile, clip_seed)?;
        Ok(Sample {
            id: synth_id(profile, c, i)?,
            label: c,
            source: profile.name.clone(),
            clip: standardize_clip(&seq)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        labels: crate::clip::LabelSpace::new(cfg.classes.iter().map(|c| c.name.clone()))?,
    })
}

/// Generate the benchmark and write one archive per clip plus
/// `manifest.csv` under `out_dir`.
pub fn generate_benchmark(cfg: &SynthConfig, out_dir: &Path, mode: Parallelism) -> Result<Manifest> {
    let data = generate_dataset(cfg, mode)?;
    let clips = out_dir.join("clips");
    std::fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
    let mut manifest = Manifest::new(out_dir);
    let metas: Vec<SourceMeta> = cfg.sources.iter().map(SourceProfile::meta).collect();
    let written = par::map(mode, &data.samples, |_, s| -> Result<ManifestEntry> {
        let rel = Path::new("clips").join(format!("{}.zip", s.id));
        let meta = metas.iter().find(|m| m.name == s.source).expect("source of a generated clip");
        write_clip_archive(&out_dir.join(&rel), &s.clip, s.id, s.label, data.labels.name(s.label).unwrap_or(""), meta)?;
        Ok(ManifestEntry {
            id: s.id,
            label: s.label,
            source: s.source.clone(),
            path: rel,
        })
    });
    for e in written {
        manifest.entries.push(e?);
    }
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Per-clip raw summary: mean and standard deviation of each channel over
/// all non-padded rows.
pub fn clip_summary(clip: &ClipTensor) -> [f64; 2 * CHANNELS] {
    let mut sum = [0.0; CHANNELS];
    let mut sq = [0.0; CHANNELS];
    let mut n = 0.0;
    for t in clip.valid_frames() {
        for p in clip.distinct_rows(t).chunks_exact(CHANNELS) {
            n += 1.0;
            for c in 0..CHANNELS {
                sum[c] += p[c] as f64;
                sq[c] += (p[c] as f64).powi(2);
            }
        }
    }
    let mut out = [0.0; 2 * CHANNELS];
    for c in 0..CHANNELS {
        let m = sum[c] / n;
        out[c] = m;
        out[CHANNELS + c] = (sq[c] / n - m * m).max(0.0).sqrt();
    }
    out
}
