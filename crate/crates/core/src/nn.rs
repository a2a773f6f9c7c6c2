//! Dense layers with hand-written backward passes. Row-major batches:
//! inputs are `[N, in]`, weights `[out, in]`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// Visits named parameter tensors as flat slices, in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All parameters concatenated in visiting order.
pub fn flatten(p: &dyn Params) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, s| out.extend_from_slice(s));
    out
}

pub fn param_count(p: &dyn Params) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, s| n += s.len());
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization of weights and bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates into `grad` and returns the input gradient.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice().expect("standard layout"));
        f(&join(prefix, "bias"), self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice_mut().expect("standard layout"));
        f(&join(prefix, "bias"), self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Linear layers with ReLU between them, and optionally after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of every layer; `inputs[0]` is the MLP input.
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn relu_mask(dy: &mut Array2<f64>, activated: &Array2<f64>) {
    ndarray::Zip::from(dy).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

impl Mlp {
    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], final_relu: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        Mlp {
            layers: dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
            final_relu,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.inputs(), l.outputs()))
                .collect(),
            final_relu: self.final_relu,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("nonempty").outputs()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h.view());
            if i < last || self.final_relu {
                relu_inplace(&mut h);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(h.view());
            inputs.push(h);
            h = next;
            if i < last || self.final_relu {
                relu_inplace(&mut h);
            }
        }
        (
            h.clone(),
            MlpCache {
                inputs,
                output: h,
            },
        )
    }

    /// Accumulates into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, dout: ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut dy = dout.to_owned();
        if self.final_relu {
            relu_mask(&mut dy, &cache.output);
        }
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            dy = self.layers[i].backward(x.view(), dy.view(), &mut grad.layers[i]);
            if i > 0 {
                // inputs[i] = relu(pre-activation of layer i-1)
                relu_mask(&mut dy, x);
            }
        }
        dy
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_layer_outputs_bias() {
        let mut l = Linear::zeros(3, 2);
        l.bias[1] = 4.0;
        let y = l.forward(Array2::from_elem((5, 3), 2.0).view());
        assert!(y.column(0).iter().all(|&v| v == 0.0));
        assert!(y.column(1).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[4, 7, 3], true, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()) * &probe).sum();

        let (_, cache) = mlp.forward_cached(x.view());
        let mut grad = mlp.zeros_like();
        let dx = mlp.backward(&cache, probe.view(), &mut grad);
        let analytic = flatten(&grad);

        let h = 1e-6;
        let base = flatten(&mlp);
        for k in 0..base.len() {
            let shifted = |delta: f64| {
                let mut m = mlp.clone();
                let mut idx = 0;
                m.visit_mut("", &mut |_, s| {
                    for v in s.iter_mut() {
                        if idx == k {
                            *v += delta;
                        }
                        idx += 1;
                    }
                });
                loss(&m, &x)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-6 + 1e-4 * fd.abs(), "param {k}: {fd} vs {}", analytic[k]);
        }
        for i in 0..5 {
            for j in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-6 + 1e-4 * fd.abs());
            }
        }
    }

    #[test]
    fn visiting_order_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[2, 3, 1], false, &mut rng);
        let mut names = Vec::new();
        mlp.visit("head", &mut |n, s| names.push((n.to_string(), s.len())));
        assert_eq!(
            names,
            vec![
                ("head.0.weight".to_string(), 6),
                ("head.0.bias".to_string(), 3),
                ("head.1.weight".to_string(), 3),
                ("head.1.bias".to_string(), 1),
            ]
        );
        assert_eq!(param_count(&mlp), 13);
    }
}
