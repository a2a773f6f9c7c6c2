use serde::{Deserialize, Serialize};

use crate::clip::{ClipTensor, Normalization, CHANNELS};

/// Lower bound on the per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and standard deviation over non-padded points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

fn for_each_row<'a>(clips: impl IntoIterator<Item = &'a ClipTensor>, mut f: impl FnMut(&[f32])) {
    for clip in clips {
        for t in clip.valid_frames() {
            clip.frame(t).chunks_exact(clip.channels).for_each(&mut f);
        }
    }
}

impl NormStats {
    /// Two-pass fit over every row of every non-padded frame.
    pub fn fit<'a>(clips: impl IntoIterator<Item = &'a ClipTensor> + Clone) -> NormStats {
        let mut n = 0usize;
        let mut mean = [0f64; CHANNELS];
        for_each_row(clips.clone(), |p| {
            n += 1;
            for c in 0..CHANNELS {
                mean[c] += p[c] as f64;
            }
        });
        if n == 0 {
            return NormStats {
                mean: [0.0; CHANNELS],
                std: [1.0; CHANNELS],
            };
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = [0f64; CHANNELS];
        for_each_row(clips, |p| {
            for c in 0..CHANNELS {
                var[c] += (p[c] as f64 - mean[c]).powi(2);
            }
        });
        NormStats {
            mean,
            std: var.map(|v| (v / n as f64).sqrt().max(STD_FLOOR)),
        }
    }

    pub fn apply(&self, clip: &mut ClipTensor) {
        let channels = clip.channels;
        let stride = clip.points * channels;
        let valid: Vec<usize> = clip.valid_frames().collect();
        for t in valid {
            for p in clip.data[t * stride..(t + 1) * stride].chunks_exact_mut(channels) {
                for c in 0..CHANNELS {
                    p[c] = ((p[c] as f64 - self.mean[c]) / self.std[c]) as f32;
                }
            }
        }
    }
}

/// Standardize every channel to zero mean and unit variance with either
/// global (`DatasetLevel`) or per-clip (`ClipLevel`) statistics. Padded
/// frames are excluded from statistics and stay zero. Returns the global
/// statistics when they were used.
pub fn normalize(clips: &mut [ClipTensor], mode: Normalization) -> Option<NormStats> {
    match mode {
        Normalization::None => None,
        Normalization::ClipLevel => {
            for clip in clips.iter_mut() {
                let stats = NormStats::fit(std::iter::once(&*clip));
                stats.apply(clip);
                clip.normalization = Normalization::ClipLevel;
            }
            None
        }
        Normalization::DatasetLevel => {
            let stats = NormStats::fit(clips.iter());
            for clip in clips.iter_mut() {
                stats.apply(clip);
                clip.normalization = Normalization::DatasetLevel;
            }
            Some(stats)
        }
    }
}
