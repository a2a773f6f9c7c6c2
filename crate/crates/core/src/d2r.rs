//! Doppler-driven geometric reparameterization: a learnable soft-quantile
//! threshold over per-frame Doppler magnitudes, a straight-through hard
//! split into fast and slow points, and tri-branch densification of each
//! frame to a fixed cardinality.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{ClipTensor, CH_DOPPLER};
use crate::error::{Error, Result};
use crate::seed;

/// Lower clamp for the learnable quantile; the upper clamp is `1 - Q_MIN`.
pub const Q_MIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsqParams {
    /// Learnable quantile in `[Q_MIN, 1 - Q_MIN]`.
    pub q: f64,
    /// Gaussian smoothing width in rank units.
    pub sigma: f64,
    /// Logistic sharpness of the soft motion score.
    pub gamma: f64,
    /// Partition threshold on the soft score.
    pub delta: f64,
}

impl Default for DsqParams {
    fn default() -> Self {
        DsqParams {
            q: 0.2,
            sigma: 1.0,
            gamma: 0.1,
            delta: 0.5,
        }
    }
}

impl DsqParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::Config(format!("d2r.q_init must lie in (0, 1), got {}", self.q)));
        }
        if !(self.sigma > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "d2r.sigma ({}) and d2r.gamma ({}) must be positive",
                self.sigma, self.gamma
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("d2r.delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    pub fn clamp_q(&mut self) {
        self.q = self.q.clamp(Q_MIN, 1.0 - Q_MIN);
    }
}

/// Soft-quantile threshold of one frame with its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    pub dtau_dq: f64,
    /// `d tau / d v_i` in the original point order (the rank weight of point `i`).
    pub dtau_dv: Vec<f64>,
}

/// Gaussian rank-weighted threshold over values `v` (Doppler magnitudes).
///
/// Ranks are 0-based; the target rank is `q (P - 1)`. Ties in `v` are ranked
/// by position, which leaves `tau` unchanged.
pub fn dsq_threshold(v: &[f64], q: f64, sigma: f64) -> Result<Threshold> {
    let n = v.len();
    if n == 0 {
        return Err(Error::EmptyFrame {
            frame: 0,
            reason: "soft-quantile threshold needs at least one point".into(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let target = q * (n - 1) as f64;
    let logits: Vec<f64> = (0..n)
        .map(|i| -((i as f64 - target).powi(2)) / (2.0 * sigma * sigma))
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logits.iter().map(|a| (a - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|e| e / total).collect();

    let sorted: Vec<f64> = order.iter().map(|&i| v[i]).collect();
    let tau: f64 = w.iter().zip(&sorted).map(|(w, x)| w * x).sum();
    let mean_rank: f64 = w.iter().enumerate().map(|(i, w)| w * i as f64).sum();
    let cov: f64 = w
        .iter()
        .zip(&sorted)
        .enumerate()
        .map(|(i, (w, x))| w * x * (i as f64 - mean_rank))
        .sum();
    let dtau_dq = (n - 1) as f64 * cov / (sigma * sigma);
    let mut dtau_dv = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        dtau_dv[i] = w[rank];
    }
    Ok(Threshold {
        tau,
        dtau_dq,
        dtau_dv,
    })
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `s_i = logistic((v_i - tau) / gamma)` in input order.
pub fn soft_motion_scores(v: &[f64], tau: f64, gamma: f64) -> Vec<f64> {
    v.iter().map(|&x| logistic((x - tau) / gamma)).collect()
}

/// Hard forward pass of the straight-through estimator: 1 where `s > delta`.
pub fn ste_binarize(s: &[f64], delta: f64) -> Vec<f64> {
    s.iter().map(|&x| if x > delta { 1.0 } else { 0.0 }).collect()
}

/// Backward pass of the straight-through estimator: the identity.
pub fn ste_backward(upstream: &[f64]) -> Vec<f64> {
    upstream.to_vec()
}

/// Per-frame partition produced by the soft-quantile threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSplit {
    pub soft_scores: Vec<f64>,
    pub hard_mask: Vec<bool>,
    pub threshold: Threshold,
}

impl FrameSplit {
    pub fn tau(&self) -> f64 {
        self.threshold.tau
    }

    pub fn fast_count(&self) -> usize {
        self.hard_mask.iter().filter(|m| **m).count()
    }
}

/// Threshold, score and binarize one frame's Doppler magnitudes.
pub fn split_frame(magnitudes: &[f64], params: &DsqParams) -> Result<FrameSplit> {
    let threshold = dsq_threshold(magnitudes, params.q, params.sigma)?;
    let soft_scores = soft_motion_scores(magnitudes, threshold.tau, params.gamma);
    let hard_mask = soft_scores.iter().map(|&s| s > params.delta).collect();
    Ok(FrameSplit {
        soft_scores,
        hard_mask,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Duplication factor for fast points.
    pub r: usize,
    /// Output points per frame.
    pub p_goal: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig { r: 5, p_goal: 1024 }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.p_goal == 0 {
            return Err(Error::Config(format!(
                "d2r.r ({}) and d2r.p_goal ({}) must be at least 1",
                self.r, self.p_goal
            )));
        }
        Ok(())
    }
}

/// Row selection of one densified frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseIndices {
    /// `p_goal` indices into the frame's input points: fast branch, then
    /// slow branch, then raw branch.
    pub rows: Vec<usize>,
    /// Fast point indices, ascending, each once.
    pub fast: Vec<usize>,
    /// Copies of each `fast[k]` in the fast branch.
    pub fast_copies: Vec<usize>,
}

/// Tri-branch densification over point indices.
///
/// Fast points are repeated `r` times, slow points kept once, and the rest
/// of the `p_goal` budget is filled by uniform sampling with replacement
/// from all points. When the fast and slow branches alone exceed the budget
/// the extra fast duplicates are subsampled first, keeping one copy of each
/// fast point; only when the frame itself has more than `p_goal` points are
/// slow points (and then fast points) dropped.
pub fn tmpd_indices<R: Rng + ?Sized>(mask: &[bool], cfg: &DensifyConfig, rng: &mut R) -> DenseIndices {
    let n = mask.len();
    let fast: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut slow: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    let goal = cfg.p_goal;
    let mut copies = vec![cfg.r; fast.len()];
    let mut fast_kept = fast.clone();

    if cfg.r * fast.len() + slow.len() > goal {
        if fast.len() + slow.len() <= goal {
            // one copy each, plus a uniform subset of the extra duplicates
            let extra_budget = goal - fast.len() - slow.len();
            let extra_total = (cfg.r - 1) * fast.len();
            copies = vec![1; fast.len()];
            for e in sample(rng, extra_total, extra_budget).into_iter() {
                copies[e % fast.len()] += 1;
            }
        } else if fast.len() <= goal {
            copies = vec![1; fast.len()];
            let mut keep: Vec<usize> = sample(rng, slow.len(), goal - fast.len()).into_vec();
            keep.sort_unstable();
            slow = keep.into_iter().map(|k| slow[k]).collect();
        } else {
            let mut keep: Vec<usize> = sample(rng, fast.len(), goal).into_vec();
            keep.sort_unstable();
            fast_kept = keep.into_iter().map(|k| fast[k]).collect();
            copies = vec![1; fast_kept.len()];
            slow.clear();
        }
    }

    let mut rows = Vec::with_capacity(goal);
    for (&i, &c) in fast_kept.iter().zip(&copies) {
        rows.extend(std::iter::repeat_n(i, c));
    }
    rows.extend_from_slice(&slow);
    while rows.len() < goal {
        rows.push(rng.random_range(0..n));
    }
    DenseIndices {
        rows,
        fast: fast_kept,
        fast_copies: copies,
    }
}

/// Tri-branch densification of a frame given as `[P_t, C]` rows.
pub fn tmpd_densify<R: Rng + ?Sized>(
    points: &[f32],
    channels: usize,
    mask: &[bool],
    cfg: &DensifyConfig,
    rng: &mut R,
) -> Result<(Vec<f32>, DenseIndices)> {
    if points.len() != mask.len() * channels {
        return Err(Error::Shape(format!(
            "{} values do not form {} points of {channels} channels",
            points.len(),
            mask.len()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyFrame {
            frame: 0,
            reason: "densification needs at least one point".into(),
        });
    }
    let idx = tmpd_indices(mask, cfg, rng);
    Ok((gather(points, channels, &idx.rows), idx))
}

/// Repeat-fill to `p_goal` rows without any motion split.
pub fn repeat_fill(n: usize, p_goal: usize) -> Vec<usize> {
    (0..p_goal).map(|j| j % n).collect()
}

fn gather(points: &[f32], channels: usize, rows: &[usize]) -> Vec<f32> {
    rows.iter()
        .flat_map(|&i| points[i * channels..(i + 1) * channels].iter().copied())
        .collect()
}

/// Doppler magnitudes of a frame's distinct points.
pub fn frame_magnitudes(clip: &ClipTensor, frame: usize) -> Vec<f64> {
    clip.distinct_rows(frame)
        .chunks_exact(clip.channels)
        .map(|p| (p[CH_DOPPLER] as f64).abs())
        .collect()
}

/// A clip densified to `[T, p_goal, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseClip {
    pub p_goal: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// `None` for padded frames.
    pub splits: Vec<Option<FrameSplit>>,
    /// Empty for padded frames.
    pub indices: Vec<Option<DenseIndices>>,
}

impl DenseClip {
    pub fn frame(&self, t: usize) -> &[f32] {
        let stride = self.p_goal * self.channels;
        &self.data[t * stride..(t + 1) * stride]
    }

    pub fn fast_sets(&self) -> Vec<Vec<usize>> {
        self.indices
            .iter()
            .map(|i| i.as_ref().map(|d| d.fast.clone()).unwrap_or_default())
            .collect()
    }
}

/// Per-frame threshold, split and densify over a standardized clip. Only the
/// distinct rows of each frame take part; padded frames become zero rows.
/// Frame `t` draws from a stream seeded by `(seed, t)`.
pub fn dgr(clip: &ClipTensor, params: &DsqParams, cfg: &DensifyConfig, seed: u64) -> Result<DenseClip> {
    clip.check_standard()?;
    cfg.validate()?;
    let c = clip.channels;
    let mut data = vec![0f32; clip.frames * cfg.p_goal * c];
    let mut splits = vec![None; clip.frames];
    let mut indices = vec![None; clip.frames];
    for t in clip.valid_frames() {
        let mags = frame_magnitudes(clip, t);
        let split = split_frame(&mags, params).map_err(|e| match e {
            Error::EmptyFrame { reason, .. } => Error::EmptyFrame { frame: t, reason },
            other => other,
        })?;
        let mut rng = seed::rng_at(seed, &[t as u64]);
        let (rows, idx) = tmpd_densify(clip.distinct_rows(t), c, &split.hard_mask, cfg, &mut rng)?;
        data[t * cfg.p_goal * c..(t + 1) * cfg.p_goal * c].copy_from_slice(&rows);
        splits[t] = Some(split);
        indices[t] = Some(idx);
    }
    Ok(DenseClip {
        p_goal: cfg.p_goal,
        channels: c,
        data,
        splits,
        indices,
    })
}
