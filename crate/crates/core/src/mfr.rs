//! Motion-aware feature recalibration: a shared point embedding, a motion
//! summary over fast points, and a channel-wise affine modulation of all
//! point features conditioned on that summary.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Mlp, MlpCache, Params};

/// Which copy of the fast set feeds the motion summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastSource {
    /// Each fast point once.
    #[default]
    PreDup,
    /// Every row of the duplicated fast branch.
    PostDup,
}

impl fmt::Display for FastSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FastSource::PreDup => "pre_dup",
            FastSource::PostDup => "post_dup",
        })
    }
}

impl FromStr for FastSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_dup" => Ok(FastSource::PreDup),
            "post_dup" => Ok(FastSource::PostDup),
            other => Err(Error::Config(format!(
                "unknown mfr.fast_source `{other}` (expected pre_dup or post_dup)"
            ))),
        }
    }
}

/// Shared per-point MLP `C -> C_emb -> C_emb` with ReLU activations.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEmbedding {
    pub mlp: Mlp,
}

impl PointEmbedding {
    pub fn new<R: Rng + ?Sized>(channels: usize, c_emb: usize, rng: &mut R) -> Self {
        PointEmbedding {
            mlp: Mlp::new(&[channels, c_emb, c_emb], true, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PointEmbedding {
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.outputs()
    }

    pub fn embed(&self, points: ArrayView2<f64>) -> Array2<f64> {
        if points.nrows() == 0 {
            return Array2::zeros((0, self.dim()));
        }
        self.mlp.forward(points)
    }
}

impl Params for PointEmbedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.mlp.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.mlp.visit_mut(prefix, f)
    }
}

/// Mean of the fast-point features; zero when there are none.
pub fn motion_summary(fast: ArrayView2<f64>) -> Array1<f64> {
    let w = vec![1.0; fast.nrows()];
    weighted_summary(fast, &w)
}

/// `sum_i w_i F_i / sum_i w_i`, or zero when the weights sum to zero.
pub fn weighted_summary(features: ArrayView2<f64>, weights: &[f64]) -> Array1<f64> {
    let total: f64 = weights.iter().sum();
    let mut c = Array1::zeros(features.ncols());
    if total == 0.0 {
        return c;
    }
    for (row, &w) in features.outer_iter().zip(weights) {
        if w != 0.0 {
            c.scaled_add(w, &row);
        }
    }
    c / total
}

/// Gradients of [`weighted_summary`] with respect to the features and the
/// weights, given the upstream gradient `dc`.
pub fn weighted_summary_backward(
    features: ArrayView2<f64>,
    weights: &[f64],
    summary: ArrayView1<f64>,
    dc: ArrayView1<f64>,
) -> (Array2<f64>, Vec<f64>) {
    let total: f64 = weights.iter().sum();
    let mut df = Array2::zeros(features.raw_dim());
    let mut dw = vec![0.0; weights.len()];
    if total == 0.0 {
        return (df, dw);
    }
    for (i, row) in features.outer_iter().enumerate() {
        if weights[i] != 0.0 {
            df.row_mut(i).scaled_add(weights[i] / total, &dc);
        }
        dw[i] = (&row - &summary).dot(&dc) / total;
    }
    (df, dw)
}

/// `gamma ⊙ F + beta`, broadcast over rows.
pub fn recalibrate(
    features: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let d = features.ncols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!(
            "recalibration of {d} channels with scale of {} and shift of {}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = &features * &gamma.insert_axis(Axis(0));
    out += &beta.insert_axis(Axis(0));
    Ok(out)
}

/// Scale and shift generators conditioned on the motion summary.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmHeads {
    pub scale: Mlp,
    pub shift: Mlp,
}

#[derive(Debug, Clone)]
pub struct FilmCache {
    scale: MlpCache,
    shift: MlpCache,
}

impl FilmHeads {
    /// Identity initialization: the scale head outputs exactly 1 and the
    /// shift head exactly 0 for every input.
    pub fn new<R: Rng + ?Sized>(c_emb: usize, hidden: usize, rng: &mut R) -> Self {
        let mut scale = Mlp::new(&[c_emb, hidden, c_emb], false, rng);
        let mut shift = Mlp::new(&[c_emb, hidden, c_emb], false, rng);
        let last = scale.layers.last_mut().expect("two layers");
        last.weight.fill(0.0);
        last.bias.fill(1.0);
        let last = shift.layers.last_mut().expect("two layers");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        FilmHeads { scale, shift }
    }

    pub fn zeros_like(&self) -> Self {
        FilmHeads {
            scale: self.scale.zeros_like(),
            shift: self.shift.zeros_like(),
        }
    }

    pub fn forward(&self, summary: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>, FilmCache) {
        let c = summary.insert_axis(Axis(0));
        let (g, scale) = self.scale.forward_cached(c);
        let (b, shift) = self.shift.forward_cached(c);
        (
            g.row(0).to_owned(),
            b.row(0).to_owned(),
            FilmCache { scale, shift },
        )
    }

    /// Accumulates into `grad` and returns the summary gradient.
    pub fn backward(
        &self,
        cache: &FilmCache,
        dgamma: ArrayView1<f64>,
        dbeta: ArrayView1<f64>,
        grad: &mut FilmHeads,
    ) -> Array1<f64> {
        let dc_scale = self
            .scale
            .backward(&cache.scale, dgamma.insert_axis(Axis(0)), &mut grad.scale);
        let dc_shift = self
            .shift
            .backward(&cache.shift, dbeta.insert_axis(Axis(0)), &mut grad.shift);
        (dc_scale + dc_shift).row(0).to_owned()
    }
}

impl Params for FilmHeads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.scale.visit(&join(prefix, "scale"), f);
        self.shift.visit(&join(prefix, "shift"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.scale.visit_mut(&join(prefix, "scale"), f);
        self.shift.visit_mut(&join(prefix, "shift"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{flatten, tests::rel_err};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn summary_examples() {
        assert_eq!(motion_summary(array![[1.0, 3.0], [3.0, 1.0]].view()), array![2.0, 2.0]);
        assert_eq!(motion_summary(array![[4.0, -1.0]].view()), array![4.0, -1.0]);
        assert_eq!(motion_summary(Array2::zeros((0, 3)).view()), Array1::<f64>::zeros(3));
    }

    #[test]
    fn recalibrate_examples() {
        let f = array![[2.0, 3.0]];
        assert_eq!(
            recalibrate(f.view(), array![0.5, 2.0].view(), array![1.0, -1.0].view()).unwrap(),
            array![[2.0, 5.0]]
        );
        let g = recalibrate(f.view(), array![0.0, 0.0].view(), array![7.0, 8.0].view()).unwrap();
        assert_eq!(g, array![[7.0, 8.0]]);
        assert!(recalibrate(f.view(), array![1.0].view(), array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn embedding_is_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = PointEmbedding::new(5, 8, &mut rng);
        let x = array![[0.1, 0.2, 0.3, 0.4, 0.5], [0.1, 0.2, 0.3, 0.4, 0.5], [1.0, -1.0, 0.0, 2.0, 0.0]];
        let e = emb.embed(x.view());
        assert_eq!(e.row(0), e.row(1));
        let swapped = emb.embed(array![[1.0, -1.0, 0.0, 2.0, 0.0], [0.1, 0.2, 0.3, 0.4, 0.5]].view());
        assert_eq!(swapped.row(0), e.row(2));
        assert_eq!(swapped.row(1), e.row(0));
        assert_eq!(emb.embed(Array2::zeros((0, 5)).view()).dim(), (0, 8));
    }

    #[test]
    fn identity_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = FilmHeads::new(6, 10, &mut rng);
        for _ in 0..20 {
            let f = Array2::from_shape_fn((9, 6), |_| rng.random_range(-3.0..3.0));
            let fast = f.slice(ndarray::s![..rng.random_range(0..9), ..]).to_owned();
            let c = motion_summary(fast.view());
            let (g, b, _) = heads.forward(c.view());
            assert_eq!(recalibrate(f.view(), g.view(), b.view()).unwrap(), f);
        }
    }

    #[test]
    fn summary_is_order_free() {
        let f = array![[1.0, 2.0], [5.0, -1.0], [0.5, 0.25]];
        let g = array![[0.5, 0.25], [1.0, 2.0], [5.0, -1.0]];
        let a = motion_summary(f.view());
        let b = motion_summary(g.view());
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn row_by_row_equals_batched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Array2::from_shape_fn((7, 4), |_| rng.random_range(-1.0..1.0));
        let g = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let batched = recalibrate(f.view(), g.view(), b.view()).unwrap();
        for i in 0..7 {
            let row = recalibrate(f.slice(ndarray::s![i..i + 1, ..]), g.view(), b.view()).unwrap();
            assert_eq!(row.row(0), batched.row(i));
        }
    }

    /// Loss over embed -> summary -> heads -> recalibrate with a fixed probe.
    fn pipeline_loss(
        emb: &PointEmbedding,
        heads: &FilmHeads,
        x: &Array2<f64>,
        fast: &[f64],
        probe: &Array2<f64>,
    ) -> f64 {
        let e = emb.embed(x.view());
        let c = weighted_summary(e.view(), fast);
        let (g, b, _) = heads.forward(c.view());
        (recalibrate(e.view(), g.view(), b.view()).unwrap() * probe).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let emb = PointEmbedding::new(5, 6, &mut rng);
        let mut heads = FilmHeads::new(6, 8, &mut rng);
        // move away from the identity so every head weight carries gradient
        heads.visit_mut("", &mut |_, s| s.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3)));
        let x = Array2::from_shape_fn((8, 5), |_| rng.random_range(-1.0..1.0));
        let fast: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let probe = Array2::from_shape_fn((8, 6), |_| rng.random_range(-1.0..1.0));

        let (e, emb_cache) = emb.mlp.forward_cached(x.view());
        let c = weighted_summary(e.view(), &fast);
        let (g, _, film_cache) = heads.forward(c.view());
        // d/dF of sum(probe ⊙ (g ⊙ E + b))
        let dg = (&probe * &e).sum_axis(Axis(0));
        let db = probe.sum_axis(Axis(0));
        let mut de = &probe * &g.view().insert_axis(Axis(0));
        let mut gheads = heads.zeros_like();
        let dc = heads.backward(&film_cache, dg.view(), db.view(), &mut gheads);
        let (de_summary, _) = weighted_summary_backward(e.view(), &fast, c.view(), dc.view());
        de += &de_summary;
        let mut gemb = emb.zeros_like();
        emb.mlp.backward(&emb_cache, de.view(), &mut gemb.mlp);

        let h = 1e-6;
        let check = |analytic: Vec<f64>, which: u8| {
            for (k, a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut e2 = emb.clone();
                    let mut h2 = heads.clone();
                    let mut idx = 0;
                    let mut bump = |_: &str, s: &mut [f64]| {
                        for v in s.iter_mut() {
                            if idx == k {
                                *v += delta;
                            }
                            idx += 1;
                        }
                    };
                    if which == 0 {
                        e2.visit_mut("", &mut bump);
                    } else {
                        h2.visit_mut("", &mut bump);
                    }
                    pipeline_loss(&e2, &h2, &x, &fast, &probe)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    rel_err(*a, fd) < 1e-4 || (a - fd).abs() < 1e-7,
                    "param {k} of {which}: {a} vs {fd}"
                );
            }
        };
        check(flatten(&gemb), 0);
        check(flatten(&gheads), 1);
    }

    #[test]
    fn summary_weight_gradient() {
        let f = array![[1.0, 2.0], [3.0, -1.0], [0.0, 4.0]];
        let w = [0.2, 0.7, 0.4];
        let dc = array![0.3, -0.8];
        let c = weighted_summary(f.view(), &w);
        let (_, dw) = weighted_summary_backward(f.view(), &w, c.view(), dc.view());
        let h = 1e-6;
        for i in 0..3 {
            let mut up = w;
            let mut dn = w;
            up[i] += h;
            dn[i] -= h;
            let fd = (weighted_summary(f.view(), &up).dot(&dc) - weighted_summary(f.view(), &dn).dot(&dc)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn fast_source_parses() {
        assert_eq!("post_dup".parse::<FastSource>().unwrap(), FastSource::PostDup);
        assert!("both".parse::<FastSource>().is_err());
    }
}
