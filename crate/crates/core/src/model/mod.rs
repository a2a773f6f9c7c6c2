//! The full network: motion split and densification, point embedding,
//! motion recalibration, a pluggable set backbone, a linear classifier and
//! the text alignment head, with a hand-written backward pass.
//!
//! Only the distinct rows of each frame are embedded. Densified rows are
//! indices into them, and because the embedding, recalibration and the
//! backbone's point MLP act row-wise, evaluating each distinct row once and
//! pooling over the referenced rows gives the same result as running on the
//! full `[T * P_goal]` set.

pub mod backbone;
pub mod tam;

pub use backbone::{
    backbone_names, build_backbone, max_pool, register_backbone, Backbone, BackboneCache,
    BackboneFactory, PointMaxBackbone,
};
pub use tam::{
    class_prompts, classify, fuse, similarity_matrix, tam_similarity, EmbeddingBank, HashEncoder,
    TamCache, TamHead, TextEncoder,
};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::clip::{ClipTensor, CHANNELS, CH_DOPPLER};
use crate::config::ArchConfig;
use crate::d2r::{repeat_fill, split_frame, tmpd_indices, FrameSplit};
use crate::error::{Error, Result};
use crate::mfr::{recalibrate, weighted_summary, weighted_summary_backward, FastSource, FilmCache, FilmHeads, PointEmbedding};
use crate::nn::{join, Linear, MlpCache, Params};
use crate::par::{self, Parallelism};
use crate::seed;

/// How the fast mask enters the motion summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Hard mask forward, identity gradient backward.
    #[default]
    StraightThrough,
    /// Soft scores in both directions; smooth in `q`.
    Soft,
}

#[derive(Debug, Clone)]
pub struct DapNet {
    pub arch: ArchConfig,
    pub classes: usize,
    pub class_names: Vec<String>,
    /// Learnable quantile of the motion threshold.
    pub q: f64,
    pub embed: PointEmbedding,
    pub film: FilmHeads,
    pub backbone: Box<dyn Backbone>,
    pub classifier: Linear,
    pub tam: TamHead,
    /// Frozen class text embeddings.
    pub bank: EmbeddingBank,
}

/// Per-clip values exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Threshold per frame; `None` for padded frames or when the split is off.
    pub taus: Vec<Option<f64>>,
    pub fast_counts: Vec<usize>,
    /// Motion summary when recalibration ran.
    pub summary: Option<Array1<f64>>,
    /// Pooled global feature.
    pub global: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    /// Fused logits.
    pub logits: Array1<f64>,
    /// Classifier logits before fusion.
    pub class_logits: Array1<f64>,
    pub tam_scores: Option<Array1<f64>>,
    pub diagnostics: Diagnostics,
}

struct FrameCache {
    offset: usize,
    split: FrameSplit,
}

struct MfrCache {
    weights: Vec<f64>,
    /// Copies of each row counted by the summary.
    multiplicity: Vec<f64>,
    summary: Array1<f64>,
    gamma: Array1<f64>,
    film: FilmCache,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    embed: MlpCache,
    embedded: Array2<f64>,
    frames: Vec<FrameCache>,
    mfr: Option<MfrCache>,
    referenced: Vec<usize>,
    backbone: BackboneCache,
    tam: Option<TamCache>,
    global: Array1<f64>,
}

/// Softmax cross-entropy with an optional class weight; returns the loss and
/// its gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize, weight: f64) -> (f64, Array1<f64>) {
    let top = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|v| (v - top).exp());
    let z = exp.sum();
    let mut grad = exp / z;
    let loss = -(grad[label].ln()) * weight;
    grad[label] -= 1.0;
    (loss, grad * weight)
}

impl DapNet {
    /// Fresh network. Each component draws from its own seeded stream, so
    /// toggling one module leaves the others' initial weights unchanged.
    pub fn new(arch: &ArchConfig, class_names: &[String], bank: Option<EmbeddingBank>) -> Result<Self> {
        arch.validate()?;
        let k = class_names.len();
        if k == 0 {
            return Err(Error::Validation("the label space is empty".into()));
        }
        let bank = match bank {
            Some(b) => b,
            None => EmbeddingBank::build(
                class_prompts(&arch.tam.template, class_names),
                &HashEncoder {
                    dim: arch.tam.c_text,
                },
            )?,
        };
        bank.check_classes(k)?;
        if bank.dim() != arch.tam.c_text {
            return Err(Error::Config(format!(
                "tam.c_text is {} but the embedding bank is {} wide",
                arch.tam.c_text,
                bank.dim()
            )));
        }
        let s = arch.model.seed;
        let c_emb = arch.mfr.c_emb;
        let d = arch.model.d;
        Ok(DapNet {
            arch: arch.clone(),
            classes: k,
            class_names: class_names.to_vec(),
            q: arch.d2r.q_init,
            embed: PointEmbedding::new(CHANNELS, c_emb, &mut seed::rng_at(s, &[1])),
            film: FilmHeads::new(c_emb, arch.mfr.hidden, &mut seed::rng_at(s, &[2])),
            backbone: build_backbone(&arch.model.backbone, c_emb, arch.model.hidden, d, &mut seed::rng_at(s, &[3]))?,
            classifier: Linear::new(d, k, &mut seed::rng_at(s, &[4])),
            tam: TamHead::new(
                d,
                arch.tam.hidden,
                k,
                arch.tam.c_text,
                arch.tam.projection,
                &mut seed::rng_at(s, &[5]),
            ),
            bank,
        })
    }

    /// Same architecture with every parameter (and `q`) set to zero; used as
    /// a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        DapNet {
            arch: self.arch.clone(),
            classes: self.classes,
            class_names: self.class_names.clone(),
            q: 0.0,
            embed: self.embed.zeros_like(),
            film: self.film.zeros_like(),
            backbone: self.backbone.zeros_like(),
            classifier: Linear::zeros(self.classifier.inputs(), self.classifier.outputs()),
            tam: self.tam.zeros_like(),
            bank: self.bank.clone(),
        }
    }

    fn split_enabled(&self) -> bool {
        self.arch.d2r.enabled
    }

    fn mfr_enabled(&self) -> bool {
        self.arch.d2r.enabled && self.arch.mfr.enabled
    }

    pub fn forward(&self, clip: &ClipTensor, seed: u64) -> Result<Output> {
        Ok(self.forward_cached(clip, seed, Relaxation::StraightThrough)?.0)
    }

    /// Forward over many clips; clip `i` uses `seeds[i]`. Results do not
    /// depend on `mode`.
    pub fn forward_batch(&self, clips: &[&ClipTensor], seeds: &[u64], mode: Parallelism) -> Result<Vec<Output>> {
        if clips.len() != seeds.len() {
            return Err(Error::Shape(format!("{} clips with {} seeds", clips.len(), seeds.len())));
        }
        par::map(mode, clips, |i, c| self.forward(c, seeds[i])).into_iter().collect()
    }

    pub fn forward_cached(&self, clip: &ClipTensor, seed: u64, relaxation: Relaxation) -> Result<(Output, ForwardCache)> {
        clip.check_standard()?;
        let c = clip.channels;
        let dsq = self.arch.d2r.dsq(self.q);
        let densify = self.arch.d2r.densify_config();

        // distinct rows of all valid frames, stacked
        let mut offsets = vec![usize::MAX; clip.frames];
        let mut rows: Vec<f64> = Vec::new();
        let mut n = 0;
        for t in clip.valid_frames() {
            let count = clip.point_counts[t];
            if count == 0 {
                return Err(Error::EmptyFrame {
                    frame: t,
                    reason: "frame is not padded but has no points".into(),
                });
            }
            offsets[t] = n;
            rows.extend(clip.distinct_rows(t).iter().map(|&v| v as f64));
            n += count;
        }
        if n == 0 {
            return Err(Error::Validation("clip has no valid frames".into()));
        }
        let x = Array2::from_shape_vec((n, c), rows).expect("row-major distinct rows");

        let mut frames = Vec::new();
        let mut taus = vec![None; clip.frames];
        let mut fast_counts = vec![0; clip.frames];
        let mut referenced = vec![false; n];
        let mut copies = vec![0usize; n];
        for t in clip.valid_frames() {
            let count = clip.point_counts[t];
            let off = offsets[t];
            let picked: Vec<usize> = if self.split_enabled() {
                let mags: Vec<f64> = (off..off + count).map(|i| x[[i, CH_DOPPLER]].abs()).collect();
                let split = split_frame(&mags, &dsq).map_err(|e| match e {
                    Error::EmptyFrame { reason, .. } => Error::EmptyFrame { frame: t, reason },
                    other => other,
                })?;
                taus[t] = Some(split.tau());
                fast_counts[t] = split.fast_count();
                let picked = if self.arch.d2r.densify {
                    let idx = tmpd_indices(&split.hard_mask, &densify, &mut seed::rng_at(seed, &[t as u64]));
                    for (&f, &k) in idx.fast.iter().zip(&idx.fast_copies) {
                        copies[off + f] = k;
                    }
                    idx.rows
                } else {
                    for (i, &m) in split.hard_mask.iter().enumerate() {
                        copies[off + i] = m as usize;
                    }
                    repeat_fill(count, densify.p_goal)
                };
                frames.push(FrameCache { offset: off, split });
                picked
            } else {
                repeat_fill(count, densify.p_goal)
            };
            for i in picked {
                referenced[off + i] = true;
            }
        }

        let (embedded, embed_cache) = self.embed.mlp.forward_cached(x.view());
        let (features, mfr) = if self.mfr_enabled() {
            let mut weights = vec![0.0; n];
            let mut multiplicity = vec![0.0; n];
            for fc in &frames {
                for (i, (&s, &hard)) in fc.split.soft_scores.iter().zip(&fc.split.hard_mask).enumerate() {
                    let row = fc.offset + i;
                    let k = match self.arch.mfr.fast_source {
                        FastSource::PreDup => 1.0,
                        FastSource::PostDup => copies[row] as f64,
                    };
                    let m = match relaxation {
                        Relaxation::StraightThrough => hard as u8 as f64,
                        Relaxation::Soft => s,
                    };
                    multiplicity[row] = k;
                    weights[row] = k * m;
                }
            }
            let summary = weighted_summary(embedded.view(), &weights);
            let (gamma, beta, film) = self.film.forward(summary.view());
            let f = recalibrate(embedded.view(), gamma.view(), beta.view())?;
            (
                f,
                Some(MfrCache {
                    weights,
                    multiplicity,
                    summary,
                    gamma,
                    film,
                }),
            )
        } else {
            (embedded.clone(), None)
        };

        let referenced: Vec<usize> = (0..n).filter(|&i| referenced[i]).collect();
        let pooled_in = features.select(Axis(0), &referenced);
        let (global, backbone_cache) = self.backbone.forward(pooled_in.view())?;
        let class_logits = classify(&self.classifier, global.view());
        let (logits, tam_scores, tam_cache) = if self.arch.tam.enabled {
            let (s, cache) = self.tam.forward(global.view(), &self.bank)?;
            (fuse(class_logits.view(), s.view(), self.arch.tam.alpha), Some(s), Some(cache))
        } else {
            (class_logits.clone(), None, None)
        };

        let output = Output {
            logits,
            class_logits,
            tam_scores,
            diagnostics: Diagnostics {
                taus,
                fast_counts,
                summary: mfr.as_ref().map(|m| m.summary.clone()),
                global: global.clone(),
            },
        };
        let cache = ForwardCache {
            embed: embed_cache,
            embedded,
            frames,
            mfr,
            referenced,
            backbone: backbone_cache,
            tam: tam_cache,
            global,
        };
        Ok((output, cache))
    }

    /// Accumulate parameter gradients (and `d loss / d q` into `grad.q`)
    /// given the gradient of the loss with respect to the fused logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: ArrayView1<f64>, grad: &mut DapNet) {
        let d_global_cls = self.classifier.backward(
            cache.global.view().insert_axis(Axis(0)),
            dlogits.insert_axis(Axis(0)),
            &mut grad.classifier,
        );
        let mut d_global = d_global_cls.row(0).to_owned();
        if let Some(tc) = &cache.tam {
            let dscores = &dlogits * self.arch.tam.alpha;
            d_global += &self.tam.backward(tc, dscores.view(), &self.bank, &mut grad.tam);
        }

        let d_pooled = self.backbone.backward(&cache.backbone, d_global.view(), grad.backbone.as_mut());
        let mut d_features = Array2::zeros(cache.embedded.raw_dim());
        for (k, &row) in cache.referenced.iter().enumerate() {
            d_features.row_mut(row).assign(&d_pooled.row(k));
        }

        let d_embedded = match &cache.mfr {
            Some(m) => {
                let mut de = &d_features * &m.gamma.view().insert_axis(Axis(0));
                let dgamma = (&d_features * &cache.embedded).sum_axis(Axis(0));
                let dbeta = d_features.sum_axis(Axis(0));
                let dsummary = self.film.backward(&m.film, dgamma.view(), dbeta.view(), &mut grad.film);
                let (de_summary, dweights) =
                    weighted_summary_backward(cache.embedded.view(), &m.weights, m.summary.view(), dsummary.view());
                de += &de_summary;
                // weight = multiplicity * mask; the mask's gradient reaches the
                // soft score unchanged in both relaxations
                let gamma = self.arch.d2r.gamma;
                let mut dq = 0.0;
                for fc in &cache.frames {
                    let mut dtau = 0.0;
                    for (i, &s) in fc.split.soft_scores.iter().enumerate() {
                        let row = fc.offset + i;
                        let ds = dweights[row] * m.multiplicity[row];
                        dtau += ds * (-s * (1.0 - s) / gamma);
                    }
                    dq += dtau * fc.split.threshold.dtau_dq;
                }
                grad.q += dq;
                de
            }
            None => d_features,
        };
        self.embed
            .mlp
            .backward(&cache.embed, d_embedded.view(), &mut grad.embed.mlp);
    }

    /// Loss, output and parameter gradients of one labeled clip.
    pub fn loss_and_grad(
        &self,
        clip: &ClipTensor,
        label: usize,
        seed: u64,
        relaxation: Relaxation,
        class_weight: f64,
    ) -> Result<(f64, Output, DapNet)> {
        if label >= self.classes {
            return Err(Error::Validation(format!(
                "label {label} outside the {}-class label space",
                self.classes
            )));
        }
        let (out, cache) = self.forward_cached(clip, seed, relaxation)?;
        let (loss, dlogits) = cross_entropy(out.logits.view(), label, class_weight);
        let mut grad = self.zeros_like();
        self.backward(&cache, dlogits.view(), &mut grad);
        Ok((loss, out, grad))
    }

    /// Names and sizes of all parameter tensors, `q` included.
    pub fn shapes(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, s| out.push((n.to_string(), s.len())));
        out
    }
}

impl Params for DapNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "q"), std::slice::from_ref(&self.q));
        self.embed.visit(&join(prefix, "embed"), f);
        self.film.visit(&join(prefix, "film"), f);
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
        self.tam.visit(&join(prefix, "tam"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "q"), std::slice::from_mut(&mut self.q));
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.film.visit_mut(&join(prefix, "film"), f);
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
        self.tam.visit_mut(&join(prefix, "tam"), f);
    }
}
