use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Bundle;
use crate::config::Projection;
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache, Params};
use crate::seed;

/// Maps a prompt to a fixed-width embedding.
pub trait TextEncoder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Vec<f64>;
}

/// Deterministic stand-in encoder: the SHA-256 of the prompt seeds a
/// Gaussian vector. Carries no semantics; distinct prompts give nearly
/// orthogonal rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    pub dim: usize,
}

impl TextEncoder for HashEncoder {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Vec<f64> {
        let digest = Sha256::digest(prompt.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let mut rng = seed::rng(u64::from_le_bytes(bytes));
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Substitute each class name into the `[CLS]` slot of the template.
pub fn class_prompts(template: &str, classes: &[String]) -> Vec<String> {
    classes.iter().map(|c| template.replace("[CLS]", c)).collect()
}

/// Class text embeddings, one L2-normalized row per class. Values are held
/// at f32 precision so the bank round-trips exactly through its archive.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub matrix: Array2<f64>,
    pub prompts: Vec<String>,
    pub encoder: String,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    prompts: Vec<String>,
    encoder: String,
    dim: usize,
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| ((v / n) as f32) as f64);
        }
    }
}

impl EmbeddingBank {
    pub fn build(prompts: Vec<String>, encoder: &dyn TextEncoder) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Validation("embedding bank needs at least one prompt".into()));
        }
        let dim = encoder.dim();
        let mut matrix = Array2::zeros((prompts.len(), dim));
        for (i, p) in prompts.iter().enumerate() {
            let v = encoder.encode(p);
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "encoder `{}` returned {} values for a {dim}-wide bank",
                    encoder.name(),
                    v.len()
                )));
            }
            matrix.row_mut(i).assign(&Array1::from(v));
        }
        Self::from_matrix(matrix, prompts, encoder.name())
    }

    /// Wrap a precomputed matrix, normalizing its rows.
    pub fn from_matrix(mut matrix: Array2<f64>, prompts: Vec<String>, encoder: &str) -> Result<Self> {
        if matrix.nrows() != prompts.len() {
            return Err(Error::Validation(format!(
                "embedding matrix has {} rows for {} prompts",
                matrix.nrows(),
                prompts.len()
            )));
        }
        normalize_rows(&mut matrix);
        Ok(EmbeddingBank {
            matrix,
            prompts,
            encoder: encoder.to_string(),
        })
    }

    pub fn classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if self.classes() != classes {
            return Err(Error::Validation(format!(
                "embedding bank has {} classes, label space has {classes}",
                self.classes()
            )));
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        let data: Vec<f32> = self.matrix.iter().map(|&v| v as f32).collect();
        b.insert_f32("data", &data);
        b.insert_json(
            "meta",
            &BankMeta {
                prompts: self.prompts.clone(),
                encoder: self.encoder.clone(),
                dim: self.dim(),
            },
        );
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().write(path)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let meta: BankMeta = b.json("meta")?;
        let k = meta.prompts.len();
        if k == 0 || meta.dim == 0 {
            return Err(b.bad_meta("bank must have at least one prompt and a positive dim"));
        }
        let data = b.f32s("data", k * meta.dim)?;
        let matrix = Array2::from_shape_vec((k, meta.dim), data.iter().map(|&v| v as f64).collect())
            .expect("length checked");
        Self::from_matrix(matrix, meta.prompts, &meta.encoder)
    }

    /// Read a bank archive, checking its class count when one is expected.
    pub fn load(path: &Path, classes: Option<usize>) -> Result<Self> {
        let bank = Self::from_bundle(&Bundle::read(path)?)?;
        if let Some(k) = classes {
            bank.check_classes(k)?;
        }
        Ok(bank)
    }
}

/// Logits of a linear classifier head.
pub fn classify(head: &crate::nn::Linear, global: ArrayView1<f64>) -> Array1<f64> {
    head.forward(global.insert_axis(Axis(0))).row(0).to_owned()
}

/// `y = z + alpha * s`.
pub fn fuse(logits: ArrayView1<f64>, scores: ArrayView1<f64>, alpha: f64) -> Array1<f64> {
    &logits + &(&scores * alpha)
}

fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.outer_iter_mut() {
        let top = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - top).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// Row-softmax of `mmw · textᵀ`.
pub fn similarity_matrix(mmw: ArrayView2<f64>, text: ArrayView2<f64>) -> Result<Array2<f64>> {
    if mmw.dim() != text.dim() {
        return Err(Error::Shape(format!(
            "similarity of {:?} features against {:?} text embeddings",
            mmw.dim(),
            text.dim()
        )));
    }
    Ok(softmax_rows(&mmw.dot(&text.t())))
}

/// Diagonal of the row-softmax similarity: class `k`'s projected feature
/// scored against class `k`'s text embedding.
pub fn tam_similarity(mmw: ArrayView2<f64>, text: ArrayView2<f64>) -> Result<Array1<f64>> {
    Ok(similarity_matrix(mmw, text)?.diag().to_owned())
}

/// Projection of the global feature into the text space.
#[derive(Debug, Clone, PartialEq)]
pub struct TamHead {
    pub proj: Mlp,
    pub projection: Projection,
    pub classes: usize,
    pub c_text: usize,
}

#[derive(Debug, Clone)]
pub struct TamCache {
    mlp: MlpCache,
    norms: Vec<f64>,
    unit: Array2<f64>,
    sim: Array2<f64>,
}

const NORM_FLOOR: f64 = 1e-12;

impl TamHead {
    pub fn new(
        d: usize,
        hidden: usize,
        classes: usize,
        c_text: usize,
        projection: Projection,
        rng: &mut dyn RngCore,
    ) -> Self {
        let out = match projection {
            Projection::PerClass => classes * c_text,
            Projection::Broadcast => c_text,
        };
        TamHead {
            proj: Mlp::new(&[d, hidden, out], false, rng),
            projection,
            classes,
            c_text,
        }
    }

    pub fn zeros_like(&self) -> Self {
        TamHead {
            proj: self.proj.zeros_like(),
            ..self.clone()
        }
    }

    fn rows(&self, flat: ArrayView1<f64>) -> Array2<f64> {
        match self.projection {
            Projection::PerClass => flat
                .to_owned()
                .into_shape_with_order((self.classes, self.c_text))
                .expect("projection width is K * C_text"),
            Projection::Broadcast => {
                let mut m = Array2::zeros((self.classes, self.c_text));
                m.outer_iter_mut().for_each(|mut r| r.assign(&flat));
                m
            }
        }
    }

    /// Similarity scores `s [K]` for one global feature.
    pub fn forward(&self, global: ArrayView1<f64>, bank: &EmbeddingBank) -> Result<(Array1<f64>, TamCache)> {
        let (flat, mlp) = self.proj.forward_cached(global.insert_axis(Axis(0)));
        let raw = self.rows(flat.row(0));
        let mut unit = raw.clone();
        let mut norms = Vec::with_capacity(self.classes);
        for mut row in unit.outer_iter_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            norms.push(n);
            row /= n;
        }
        let sim = similarity_matrix(unit.view(), bank.matrix.view())?;
        Ok((
            sim.diag().to_owned(),
            TamCache {
                mlp,
                norms,
                unit,
                sim,
            },
        ))
    }

    /// Accumulates into `grad` and returns the global-feature gradient.
    pub fn backward(
        &self,
        cache: &TamCache,
        dscores: ArrayView1<f64>,
        bank: &EmbeddingBank,
        grad: &mut TamHead,
    ) -> Array1<f64> {
        let k = self.classes;
        // d s_k / d logits_kj = S_kj (δ_kj - S_kk)
        let mut dlogits = Array2::zeros((k, k));
        for a in 0..k {
            let skk = cache.sim[[a, a]];
            for j in 0..k {
                let delta = if a == j { 1.0 } else { 0.0 };
                dlogits[[a, j]] = dscores[a] * cache.sim[[a, j]] * (delta - skk);
            }
        }
        let dunit = dlogits.dot(&bank.matrix);
        let mut draw = Array2::zeros((k, self.c_text));
        for a in 0..k {
            let u = cache.unit.row(a);
            let du = dunit.row(a);
            let along = u.dot(&du);
            let g = (&du - &(&u * along)) / cache.norms[a];
            draw.row_mut(a).assign(&g);
        }
        let dflat = match self.projection {
            Projection::PerClass => draw
                .into_shape_with_order((1, k * self.c_text))
                .expect("contiguous"),
            Projection::Broadcast => draw.sum_axis(Axis(0)).insert_axis(Axis(0)),
        };
        self.proj
            .backward(&cache.mlp, dflat.view(), &mut grad.proj)
            .row(0)
            .to_owned()
    }
}

impl Params for TamHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.proj.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj.visit_mut(prefix, f)
    }
}
