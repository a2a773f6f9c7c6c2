use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::{OnceLock, RwLock};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache, Params};

/// Opaque per-call state a backbone keeps for its backward pass.
pub struct BackboneCache(pub Box<dyn Any + Send + Sync>);

impl fmt::Debug for BackboneCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BackboneCache")
    }
}

/// Set function from point features `[N, C_emb]` to a global feature `[D]`.
pub trait Backbone: Params + Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn forward(&self, features: ArrayView2<f64>) -> Result<(Array1<f64>, BackboneCache)>;
    /// Accumulates parameter gradients into `grad` (a backbone of the same
    /// kind) and returns the feature gradient.
    fn backward(&self, cache: &BackboneCache, dout: ArrayView1<f64>, grad: &mut dyn Backbone) -> Array2<f64>;
    fn zeros_like(&self) -> Box<dyn Backbone>;
    fn clone_box(&self) -> Box<dyn Backbone>;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

impl Clone for Box<dyn Backbone> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Builds a backbone from `(input width, hidden width, output width, rng)`.
pub type BackboneFactory = fn(usize, usize, usize, &mut dyn RngCore) -> Box<dyn Backbone>;

fn registry() -> &'static RwLock<BTreeMap<String, BackboneFactory>> {
    static REG: OnceLock<RwLock<BTreeMap<String, BackboneFactory>>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m: BTreeMap<String, BackboneFactory> = BTreeMap::new();
        m.insert(PointMaxBackbone::NAME.into(), |i, h, o, rng| {
            Box::new(PointMaxBackbone::new(i, h, o, rng))
        });
        RwLock::new(m)
    })
}

/// Make a backbone available under `name`, replacing any previous entry.
pub fn register_backbone(name: &str, factory: BackboneFactory) {
    registry()
        .write()
        .expect("backbone registry poisoned")
        .insert(name.to_string(), factory);
}

pub fn backbone_names() -> Vec<String> {
    registry()
        .read()
        .expect("backbone registry poisoned")
        .keys()
        .cloned()
        .collect()
}

pub fn build_backbone(
    name: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut dyn RngCore,
) -> Result<Box<dyn Backbone>> {
    let factory = registry()
        .read()
        .expect("backbone registry poisoned")
        .get(name)
        .copied()
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown model.backbone `{name}` (registered: {})",
                backbone_names().join(", ")
            ))
        })?;
    Ok(factory(in_dim, hidden, out_dim, rng))
}

/// Reference backbone: shared point MLP `C_emb -> hidden -> D`, then a
/// channel-wise max over all points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMaxBackbone {
    pub mlp: Mlp,
}

struct PointMaxCache {
    mlp: MlpCache,
    /// Winning row per output channel.
    argmax: Vec<usize>,
    rows: usize,
}

impl PointMaxBackbone {
    pub const NAME: &'static str = "reference";

    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut dyn RngCore) -> Self {
        PointMaxBackbone {
            mlp: Mlp::new(&[in_dim, hidden, out_dim], false, rng),
        }
    }
}

impl Params for PointMaxBackbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.mlp.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.mlp.visit_mut(prefix, f)
    }
}

impl Backbone for PointMaxBackbone {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn in_dim(&self) -> usize {
        self.mlp.inputs()
    }

    fn out_dim(&self) -> usize {
        self.mlp.outputs()
    }

    fn forward(&self, features: ArrayView2<f64>) -> Result<(Array1<f64>, BackboneCache)> {
        if features.nrows() == 0 {
            return Err(Error::Shape("backbone needs at least one point".into()));
        }
        if features.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "backbone expects {} feature channels, got {}",
                self.in_dim(),
                features.ncols()
            )));
        }
        let (h, mlp) = self.mlp.forward_cached(features);
        let mut argmax = vec![0usize; h.ncols()];
        let mut out = Array1::from_elem(h.ncols(), f64::NEG_INFINITY);
        for (i, row) in h.outer_iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                if v > out[k] {
                    out[k] = v;
                    argmax[k] = i;
                }
            }
        }
        Ok((
            out,
            BackboneCache(Box::new(PointMaxCache {
                mlp,
                argmax,
                rows: h.nrows(),
            })),
        ))
    }

    fn backward(&self, cache: &BackboneCache, dout: ArrayView1<f64>, grad: &mut dyn Backbone) -> Array2<f64> {
        let cache = cache
            .0
            .downcast_ref::<PointMaxCache>()
            .expect("cache from this backbone");
        let grad = grad
            .as_any_mut()
            .downcast_mut::<PointMaxBackbone>()
            .expect("gradient of the same backbone kind");
        let mut dh = Array2::zeros((cache.rows, self.out_dim()));
        for (k, &i) in cache.argmax.iter().enumerate() {
            dh[[i, k]] += dout[k];
        }
        self.mlp.backward(&cache.mlp, dh.view(), &mut grad.mlp)
    }

    fn zeros_like(&self) -> Box<dyn Backbone> {
        Box::new(PointMaxBackbone {
            mlp: self.mlp.zeros_like(),
        })
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Max over rows, exposed for callers that pool their own features.
pub fn max_pool(features: ArrayView2<f64>) -> Array1<f64> {
    features.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b))
}
