//! Evaluation protocols, metrics, domain-gap statistics and reports.

pub mod metrics;
pub mod report;
pub mod split;
pub mod stats;

pub use metrics::{
    centroid_distance, confusion, coral, covariance, macro_micro, median_bandwidth, mmd, offdiag_acc,
    per_class_acc, Bandwidth,
};
pub use report::{compare, comparison_csv, relative_improvement, Comparison, MetricReport};
pub use split::{split, Protocol, SplitManifest};
pub use stats::{ks_statistic, ks_two_sample};

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::DapNet;
use crate::par::{self, Parallelism};
use crate::seed;

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Which samples feed the source-alignment statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSet {
    /// Test samples only.
    Test,
    /// Training and test samples, so protocols whose test set holds a
    /// single source still compare every source.
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Gaussian kernel bandwidth; `None` uses the median heuristic.
    pub mmd_bandwidth: Option<f64>,
    pub alignment: AlignmentSet,
    /// Per-source cap on samples entering the alignment statistics.
    pub max_alignment_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mmd_bandwidth: None,
            alignment: AlignmentSet::All,
            max_alignment_samples: 1000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.mmd_bandwidth, Some(h) if !(h > 0.0 && h.is_finite())) {
            return Err(Error::Config("eval.mmd_bandwidth must be positive".into()));
        }
        if self.max_alignment_samples < 2 {
            return Err(Error::Config("eval.max_alignment_samples must be at least 2".into()));
        }
        Ok(())
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.mmd_bandwidth.map_or(Bandwidth::Median, Bandwidth::Fixed)
    }
}

/// Seed of the densification draw for evaluation sample `index`.
pub fn eval_seed(base: u64, index: usize) -> u64 {
    seed::derive(base, &[u64::MAX, index as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<usize>,
    /// Global features of the test samples, one row each.
    pub features: Array2<f64>,
}

/// Global features and predictions for every sample of `data`.
pub fn predict(model: &DapNet, data: &Dataset, stream: u64, mode: Parallelism) -> Result<(Array2<f64>, Vec<usize>)> {
    let base = seed::derive(model.arch.d2r.seed, &[stream]);
    let outs = par::map(mode, &data.samples, |i, s| model.forward(&s.clip, eval_seed(base, i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let d = model.backbone.out_dim();
    let mut feats = Array2::zeros((outs.len(), d));
    for (mut row, o) in feats.outer_iter_mut().zip(&outs) {
        row.assign(&o.diagnostics.global);
    }
    Ok((feats, outs.iter().map(|o| argmax(o.logits.view())).collect()))
}

/// Pairwise alignment statistics averaged over every unordered pair of
/// sources: `(centroid, coral, mmd, bandwidth)`.
pub fn alignment(
    groups: &BTreeMap<String, Array2<f64>>,
    cfg: &EvalConfig,
) -> Result<Option<(f64, f64, f64, f64)>> {
    let names: Vec<&String> = groups.keys().collect();
    let mut acc = [0.0; 4];
    let mut pairs = 0.0;
    for a in 0..names.len() {
        for b in a + 1..names.len() {
            let (fa, fb) = (&groups[names[a]], &groups[names[b]]);
            if fa.nrows() < 2 || fb.nrows() < 2 {
                continue;
            }
            let (m, h) = mmd(fa.view(), fb.view(), cfg.bandwidth())?;
            acc[0] += centroid_distance(fa.view(), fb.view())?;
            acc[1] += coral(fa.view(), fb.view())?;
            acc[2] += m;
            acc[3] += h;
            pairs += 1.0;
        }
    }
    Ok((pairs > 0.0).then(|| (acc[0] / pairs, acc[1] / pairs, acc[2] / pairs, acc[3] / pairs)))
}

fn group_by_source(
    sets: &[(&Dataset, &Array2<f64>)],
    cfg: &EvalConfig,
) -> BTreeMap<String, Array2<f64>> {
    let mut rows: BTreeMap<String, Vec<ArrayView1<f64>>> = BTreeMap::new();
    for (data, feats) in sets {
        for (s, f) in data.samples.iter().zip(feats.outer_iter()) {
            rows.entry(s.source.clone()).or_default().push(f);
        }
    }
    rows.into_iter()
        .enumerate()
        .map(|(k, (name, mut r))| {
            if r.len() > cfg.max_alignment_samples {
                r.shuffle(&mut seed::rng_at(cfg.seed, &[k as u64]));
                r.truncate(cfg.max_alignment_samples);
            }
            let m = ndarray::stack(Axis(0), &r).expect("equal widths");
            (name, m)
        })
        .collect()
}

/// Run the model over `test` and assemble the full report. `train`, when
/// given and `cfg.alignment` is `All`, contributes features to the
/// alignment statistics.
pub fn evaluate(
    model: &DapNet,
    protocol: &str,
    test: &Dataset,
    train: Option<&Dataset>,
    cfg: &EvalConfig,
    mode: Parallelism,
) -> Result<Evaluation> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Validation("test set is empty".into()));
    }
    let (features, predictions) = predict(model, test, 0, mode)?;
    let labels: Vec<usize> = test.samples.iter().map(|s| s.label).collect();
    let conf = confusion(&labels, &predictions, model.classes)?;
    let (macro_acc, micro_acc) = macro_micro(&conf)?;
    let sources: Vec<&str> = test.samples.iter().map(|s| s.source.as_str()).collect();
    let offdiag = offdiag_acc(&labels, &predictions, &sources).ok();

    let extra = match (cfg.alignment, train) {
        (AlignmentSet::All, Some(tr)) if !tr.is_empty() => Some((tr, predict(model, tr, 1, mode)?.0)),
        _ => None,
    };
    let mut sets = vec![(test, &features)];
    if let Some((tr, f)) = &extra {
        sets.push((*tr, f));
    }
    let aligned = alignment(&group_by_source(&sets, cfg), cfg)?;

    let report = MetricReport {
        protocol: protocol.to_string(),
        samples: test.len(),
        macro_acc,
        micro_acc,
        offdiag_acc: offdiag,
        centroid_distance: aligned.map(|a| a.0),
        coral: aligned.map(|a| a.1),
        mmd: aligned.map(|a| a.2),
        mmd_bandwidth: aligned.map(|a| a.3),
        class_names: model.class_names.clone(),
        per_class_acc: per_class_acc(&conf),
        confusion: conf,
    };
    Ok(Evaluation {
        report,
        predictions,
        features,
    })
}
