//! Accuracy and source-alignment statistics.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `confusion[true][predicted]` counts.
pub fn confusion(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Array2<u64>> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} labels and {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut m = Array2::zeros((classes, classes));
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= classes || p >= classes {
            return Err(Error::Validation(format!("class index outside {classes} classes")));
        }
        m[[y, p]] += 1;
    }
    Ok(m)
}

/// Recall of each class; `None` where the class has no test samples.
pub fn per_class_acc(confusion: &Array2<u64>) -> Vec<Option<f64>> {
    confusion
        .outer_iter()
        .enumerate()
        .map(|(c, row)| {
            let support: u64 = row.sum();
            (support > 0).then(|| row[c] as f64 / support as f64)
        })
        .collect()
}

/// Macro accuracy (mean recall over classes with support) and micro
/// accuracy (trace over total).
pub fn macro_micro(confusion: &Array2<u64>) -> Result<(f64, f64)> {
    let total: u64 = confusion.sum();
    if total == 0 {
        return Err(Error::Validation("confusion matrix is all zero".into()));
    }
    let recalls: Vec<f64> = per_class_acc(confusion).into_iter().flatten().collect();
    let macro_acc = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let micro = confusion.diag().sum() as f64 / total as f64;
    Ok((macro_acc, micro))
}

/// Cross-source off-diagonal accuracy.
///
/// Enumerates ordered pairs `(i, j)`, `i != j`, where sample `j` comes from
/// a different source than sample `i` and carries the same true class, so
/// `j` acts as a prototype of class `y_i` seen through another source. Each
/// such pair scores `1(y_i == prediction_j)`, and the result is the mean
/// over all pairs. Every sample is therefore weighted by how many
/// same-class samples the other sources contribute.
pub fn offdiag_acc<S: PartialEq>(labels: &[usize], predictions: &[usize], sources: &[S]) -> Result<f64> {
    let n = labels.len();
    if predictions.len() != n || sources.len() != n {
        return Err(Error::Shape("labels, predictions and sources differ in length".into()));
    }
    if sources.iter().all(|s| *s == sources[0]) {
        return Err(Error::Validation("off-diagonal accuracy needs at least two sources".into()));
    }
    // pairs grouped by class: for sample j, partners are same-class samples
    // of other sources
    let mut hits = 0u64;
    let mut pairs = 0u64;
    for j in 0..n {
        let partners = (0..n)
            .filter(|&i| i != j && labels[i] == labels[j] && sources[i] != sources[j])
            .count() as u64;
        pairs += partners;
        if predictions[j] == labels[j] {
            hits += partners;
        }
    }
    if pairs == 0 {
        return Err(Error::Validation("no class is shared between sources".into()));
    }
    Ok(hits as f64 / pairs as f64)
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>, min_rows: usize) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    if a.nrows() < min_rows || b.nrows() < min_rows {
        return Err(Error::Validation(format!("each feature set needs at least {min_rows} rows")));
    }
    Ok(())
}

fn mean_row(a: ArrayView2<f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).expect("non-empty")
}

/// Euclidean distance between the two feature means.
pub fn centroid_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair(a, b, 1)?;
    let d = mean_row(a) - mean_row(b);
    Ok(d.dot(&d).sqrt())
}

/// Unbiased sample covariance `[d, d]`.
pub fn covariance(a: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let centered = &a - &mean_row(a).insert_axis(Axis(0));
    centered.t().dot(&centered) / (n as f64 - 1.0)
}

/// `||C_a - C_b||_F^2 / (4 d^2)` with unbiased covariances.
pub fn coral(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair(a, b, 2)?;
    let d = a.ncols() as f64;
    let diff = covariance(a) - covariance(b);
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / (4.0 * d * d))
}

/// Gaussian kernel bandwidth for [`mmd`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    #[default]
    Median,
    Fixed(f64),
}

fn sq_dist(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median of pairwise Euclidean distances over the pooled rows; 1 when the
/// median is zero.
pub fn median_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let pooled: Vec<_> = a.outer_iter().chain(b.outer_iter()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Biased squared MMD with the kernel `exp(-|x - y|^2 / (2 h^2))`; returns
/// the value and the bandwidth `h` used.
pub fn mmd(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: Bandwidth) -> Result<(f64, f64)> {
    check_pair(a, b, 1)?;
    let h = match bandwidth {
        Bandwidth::Median => median_bandwidth(a, b),
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(Error::Config(format!("eval.mmd_bandwidth must be positive, got {h}"))),
    };
    let k = |x: ArrayView2<f64>, y: ArrayView2<f64>| -> f64 {
        let mut s = 0.0;
        for xi in x.outer_iter() {
            for yj in y.outer_iter() {
                s += (-sq_dist(xi, yj) / (2.0 * h * h)).exp();
            }
        }
        s / (x.nrows() * y.nrows()) as f64
    };
    let value = k(a, a) + k(b, b) - 2.0 * k(a, b);
    Ok((value.max(0.0), h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Brute-force references written against the plain definitions.
    mod oracle {
        pub fn mean(x: &[Vec<f64>]) -> Vec<f64> {
            let d = x[0].len();
            (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / x.len() as f64).collect()
        }

        pub fn cov(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let m = mean(x);
            let d = m.len();
            let mut c = vec![vec![0.0; d]; d];
            for i in 0..d {
                for j in 0..d {
                    let s: f64 = x.iter().map(|r| (r[i] - m[i]) * (r[j] - m[j])).sum();
                    c[i][j] = s / (x.len() as f64 - 1.0);
                }
            }
            c
        }

        pub fn coral(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
            let (ca, cb) = (cov(a), cov(b));
            let d = ca.len();
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += (ca[i][j] - cb[i][j]).powi(2);
                }
            }
            s / (4.0 * (d * d) as f64)
        }

        pub fn centroid(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
            mean(a).iter().zip(mean(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        }

        pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> f64 {
            let k = |x: &Vec<f64>, y: &Vec<f64>| {
                let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
                (-d / (2.0 * h * h)).exp()
            };
            let avg = |x: &[Vec<f64>], y: &[Vec<f64>]| {
                let mut s = 0.0;
                for p in x {
                    for q in y {
                        s += k(p, q);
                    }
                }
                s / (x.len() * y.len()) as f64
            };
            avg(a, a) + avg(b, b) - 2.0 * avg(a, b)
        }

        pub fn macro_micro(y: &[usize], p: &[usize], k: usize) -> (f64, f64) {
            let mut recalls = Vec::new();
            for c in 0..k {
                let support = y.iter().filter(|&&v| v == c).count();
                if support > 0 {
                    let tp = y.iter().zip(p).filter(|(&a, &b)| a == c && b == c).count();
                    recalls.push(tp as f64 / support as f64);
                }
            }
            let correct = y.iter().zip(p).filter(|(a, b)| a == b).count();
            (recalls.iter().sum::<f64>() / recalls.len() as f64, correct as f64 / y.len() as f64)
        }

        pub fn offdiag(y: &[usize], p: &[usize], s: &[u8]) -> f64 {
            let (mut hit, mut total) = (0.0, 0.0);
            for i in 0..y.len() {
                for j in 0..y.len() {
                    if i != j && s[i] != s[j] && y[i] == y[j] {
                        total += 1.0;
                        if y[i] == p[j] {
                            hit += 1.0;
                        }
                    }
                }
            }
            hit / total
        }
    }

    fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
        a.outer_iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn macro_micro_examples() {
        let c = array![[1u64, 1], [0, 98]];
        let (ma, mi) = macro_micro(&c).unwrap();
        assert!((ma - 0.75).abs() < 1e-15 && (mi - 0.99).abs() < 1e-15);
        assert_eq!(macro_micro(&array![[3u64, 0], [0, 5]]).unwrap(), (1.0, 1.0));
        assert!(macro_micro(&Array2::zeros((2, 2))).is_err());
        // zero-support class is left out of the macro mean
        let c = array![[2u64, 0, 0], [0, 0, 0], [1, 0, 1]];
        assert_eq!(macro_micro(&c).unwrap().0, 0.75);
        assert_eq!(per_class_acc(&c), vec![Some(1.0), None, Some(0.5)]);
    }

    #[test]
    fn offdiag_examples() {
        let y = [0, 1, 0, 1];
        let s = ["a", "a", "b", "b"];
        assert_eq!(offdiag_acc(&y, &y, &s).unwrap(), 1.0);
        assert_eq!(offdiag_acc(&y, &[1, 0, 1, 0], &s).unwrap(), 0.0);
        // one error on a sample of source b
        let p = [0, 1, 1, 1];
        let v = offdiag_acc(&y, &p, &s).unwrap();
        assert_eq!(v, oracle::offdiag(&y, &p, &[0, 0, 1, 1]));
        assert_eq!(v, 0.75);
        assert!(offdiag_acc(&y, &y, &["a"; 4]).is_err());
    }

    #[test]
    fn centroid_and_coral_examples() {
        let a = array![[-1.0, 1.0], [1.0, -1.0]];
        let b = array![[3.0, 4.0]];
        assert_eq!(centroid_distance(a.view(), b.view()).unwrap(), 5.0);
        assert_eq!(centroid_distance(a.view(), a.view()).unwrap(), 0.0);
        let va = array![[-1.0], [1.0], [-1.0], [1.0]];
        // unbiased variance of va is 4/3; build a set with variance exactly 1
        let one = array![[-1.0], [1.0]] / 2f64.sqrt();
        assert!((covariance(one.view())[[0, 0]] - 1.0).abs() < 1e-15);
        let zero = array![[2.0], [2.0], [2.0]];
        assert!((coral(one.view(), zero.view()).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(coral(va.view(), va.view()).unwrap(), 0.0);
        assert!(coral(b.view(), a.view()).is_err());
    }

    #[test]
    fn mmd_examples() {
        let a = array![[0.0], [1.0], [2.0]];
        let b = array![[0.5], [1.5], [3.0]];
        let (v, h) = mmd(a.view(), b.view(), Bandwidth::Fixed(1.0)).unwrap();
        assert_eq!(h, 1.0);
        // direct kernel sums by hand
        let k = |d: f64| (-d * d / 2.0).exp();
        let kaa = (3.0 + 2.0 * (2.0 * k(1.0) + k(2.0))) / 9.0;
        let kbb = (3.0 + 2.0 * (k(1.0) + k(2.5) + k(1.5))) / 9.0;
        let kab = (k(0.5) + k(1.5) + k(3.0) + k(0.5) + k(0.5) + k(2.0) + k(1.5) + k(0.5) + k(1.0)) / 9.0;
        assert!((v - (kaa + kbb - 2.0 * kab)).abs() < 1e-12);
        assert!(mmd(a.view(), a.view(), Bandwidth::Median).unwrap().0 < 1e-9);
        let (ab, _) = mmd(a.view(), b.view(), Bandwidth::Median).unwrap();
        let (ba, _) = mmd(b.view(), a.view(), Bandwidth::Median).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(mmd(a.view(), b.view(), Bandwidth::Fixed(0.0)).is_err());
    }

    fn matrix(n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn alignment_metrics_match_oracle(
            (a, b, h) in (2usize..10, 2usize..10, 1usize..4)
                .prop_flat_map(|(n, m, d)| (matrix(n, d), matrix(m, d), 0.2f64..3.0))
        ) {
            let (ra, rb) = (rows(&a), rows(&b));
            prop_assert!((coral(a.view(), b.view()).unwrap() - oracle::coral(&ra, &rb)).abs() <= 1e-9);
            prop_assert!((centroid_distance(a.view(), b.view()).unwrap() - oracle::centroid(&ra, &rb)).abs() <= 1e-9);
            let (v, _) = mmd(a.view(), b.view(), Bandwidth::Fixed(h)).unwrap();
            prop_assert!((v - oracle::mmd(&ra, &rb, h)).abs() <= 1e-9);
            prop_assert!(v >= 0.0 && coral(a.view(), b.view()).unwrap() >= 0.0);
            prop_assert!(coral(a.view(), a.view()).unwrap().abs() <= 1e-12);
        }

        #[test]
        fn coral_ignores_row_order(a in matrix(6, 3), b in matrix(5, 3), shift in 0usize..6) {
            let mut idx: Vec<usize> = (0..6).collect();
            idx.rotate_left(shift);
            let p = a.select(Axis(0), &idx);
            let x = coral(a.view(), b.view()).unwrap();
            prop_assert!((coral(p.view(), b.view()).unwrap() - x).abs() <= 1e-12);
        }

        #[test]
        fn accuracy_metrics_match_oracle(
            pairs in proptest::collection::vec((0usize..4, 0usize..4, 0u8..3), 2..=20)
        ) {
            let y: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let s: Vec<u8> = pairs.iter().map(|p| p.2).collect();
            let c = confusion(&y, &p, 4).unwrap();
            let (ma, mi) = macro_micro(&c).unwrap();
            let (oa, oi) = oracle::macro_micro(&y, &p, 4);
            prop_assert!((ma - oa).abs() <= 1e-9 && (mi - oi).abs() <= 1e-9);
            match offdiag_acc(&y, &p, &s) {
                Ok(v) => prop_assert!((v - oracle::offdiag(&y, &p, &s)).abs() <= 1e-9),
                Err(_) => {
                    let shared = (0..y.len()).any(|i| (0..y.len()).any(|j| s[i] != s[j] && y[i] == y[j]));
                    prop_assert!(!shared);
                }
            }
        }

        #[test]
        fn equal_support_makes_macro_equal_micro(
            per in 1usize..5, k in 2usize..5, preds in proptest::collection::vec(0usize..5, 20)
        ) {
            let y: Vec<usize> = (0..k * per).map(|i| i % k).collect();
            let p: Vec<usize> = y.iter().zip(preds.iter().cycle()).map(|(_, &q)| q % k).collect();
            let (ma, mi) = macro_micro(&confusion(&y, &p, k).unwrap()).unwrap();
            prop_assert!((ma - mi).abs() <= 1e-12);
        }
    }
}
