use crate::clip::{ClipTensor, CHANNELS, FRAMES, POINTS};
use crate::error::{Error, Result};
use crate::ingest::RawSequence;

/// Frame indices kept by uniform temporal downsampling of `frames` frames to
/// `target`: `floor(k * frames / target)` for `k = 0..target`, or every frame
/// when there are no more than `target`.
pub fn temporal_indices(frames: usize, target: usize) -> Vec<usize> {
    if frames <= target {
        (0..frames).collect()
    } else {
        (0..target).map(|k| k * frames / target).collect()
    }
}

/// Farthest point sampling over xyz coordinates.
///
/// Starts from the point farthest from the centroid, then repeatedly picks
/// the unselected point with the largest distance to its nearest selected
/// point. Ties go to the lowest index.
pub fn farthest_point_sample(points: &[[f32; 3]], target: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if target == 0 || target > n {
        return Err(Error::Validation(format!(
            "cannot sample {target} of {n} points; use repeat sampling when fewer points than the target"
        )));
    }
    let sq = |a: &[f32; 3], b: &[f64; 3]| -> f64 {
        (0..3).map(|k| (a[k] as f64 - b[k]).powi(2)).sum()
    };
    let mut centroid = [0f64; 3];
    for p in points {
        for k in 0..3 {
            centroid[k] += p[k] as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);

    let argmax = |values: &[f64], selected: &[bool]| -> usize {
        let mut best = usize::MAX;
        for i in 0..values.len() {
            if selected[i] {
                continue;
            }
            if best == usize::MAX || values[i] > values[best] {
                best = i;
            }
        }
        best
    };

    let mut selected = vec![false; n];
    let to_centroid: Vec<f64> = points.iter().map(|p| sq(p, &centroid)).collect();
    let first = argmax(&to_centroid, &selected);
    let mut order = Vec::with_capacity(target);
    order.push(first);
    selected[first] = true;
    let mut min_dist = vec![f64::INFINITY; n];
    let mut last = first;
    while order.len() < target {
        let anchor = points[last].map(f64::from);
        for i in 0..n {
            if !selected[i] {
                let d = sq(&points[i], &anchor);
                if d < min_dist[i] {
                    min_dist[i] = d;
                }
            }
        }
        last = argmax(&min_dist, &selected);
        selected[last] = true;
        order.push(last);
    }
    Ok(order)
}

/// Slot `j` of the output takes point `j mod n`.
pub fn cyclic_repeat(n: usize, target: usize) -> Vec<usize> {
    (0..target).map(|j| j % n).collect()
}

/// Standardize pre-grouped frames into a `[32, 64, 5]` clip.
pub fn standardize_frames(frames: &[Vec<[f32; CHANNELS]>]) -> Result<ClipTensor> {
    if frames.is_empty() {
        return Err(Error::Validation("clip has no frames".into()));
    }
    if let Some(t) = frames.iter().position(Vec::is_empty) {
        return Err(Error::EmptyFrame {
            frame: t,
            reason: "frame has no points".into(),
        });
    }
    let mut clip = ClipTensor::zeros(FRAMES, POINTS, CHANNELS);
    for (slot, src) in temporal_indices(frames.len(), FRAMES).into_iter().enumerate() {
        let pts = &frames[src];
        let picks = if pts.len() > POINTS {
            let xyz: Vec<[f32; 3]> = pts.iter().map(|p| [p[0], p[1], p[2]]).collect();
            farthest_point_sample(&xyz, POINTS)?
        } else {
            cyclic_repeat(pts.len(), POINTS)
        };
        for (j, &i) in picks.iter().enumerate() {
            clip.point_mut(slot, j).copy_from_slice(&pts[i]);
        }
        clip.pad_mask[slot] = false;
        clip.point_counts[slot] = pts.len().min(POINTS);
    }
    Ok(clip)
}

/// Standardize a parsed sequence: temporal downsampling or zero padding to
/// 32 frames, then FPS or cyclic repeat sampling to 64 points per frame.
pub fn standardize_clip(seq: &RawSequence) -> Result<ClipTensor> {
    let frames: Vec<Vec<[f32; CHANNELS]>> = seq
        .frames()
        .into_iter()
        .map(|(_, rows)| rows.iter().map(|r| r.values).collect())
        .collect();
    standardize_frames(&frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::test_util::seq_with_counts;

    #[test]
    fn short_clip_is_padded() {
        let clip = standardize_clip(&seq_with_counts(&[5; 20])).unwrap();
        assert!(clip.is_standard());
        for t in 0..FRAMES {
            assert_eq!(clip.pad_mask[t], t >= 20);
            if t >= 20 {
                assert!(clip.frame(t).iter().all(|&v| v == 0.0));
                assert_eq!(clip.point_counts[t], 0);
            } else {
                assert_eq!(clip.point_counts[t], 5);
            }
        }
    }

    #[test]
    fn forty_frames_use_uniform_indices() {
        let idx = temporal_indices(40, 32);
        assert_eq!(&idx[..9], &[0, 1, 2, 3, 5, 6, 7, 8, 10]);
        let expected: Vec<usize> = (0..32).map(|k| (k * 40) / 32).collect();
        assert_eq!(idx, expected);
        let clip = standardize_clip(&seq_with_counts(&[3; 40])).unwrap();
        // x carries the original frame index
        let picked: Vec<usize> = (0..32).map(|t| clip.point(t, 0)[0] as usize).collect();
        assert_eq!(picked, expected);
        assert!(clip.pad_mask.iter().all(|p| !p));
    }

    #[test]
    fn three_points_repeat_cyclically() {
        let clip = standardize_clip(&seq_with_counts(&[3])).unwrap();
        let mut counts = [0usize; 3];
        for j in 0..POINTS {
            counts[clip.point(0, j)[1] as usize] += 1;
        }
        assert_eq!(counts, [22, 21, 21]);
        assert_eq!(clip.point_counts[0], 3);
    }

    #[test]
    fn dense_frame_uses_fps() {
        let clip = standardize_clip(&seq_with_counts(&[100, 64])).unwrap();
        let mut seen: Vec<i32> = (0..POINTS).map(|j| clip.point(0, j)[1] as i32).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
        assert_eq!(clip.point_counts[0], 64);
        assert_eq!(clip.point_counts[1], 64);
    }

    #[test]
    fn empty_frame_is_named() {
        let frames = vec![vec![[0.0; 5]], vec![], vec![[1.0; 5]]];
        match standardize_frames(&frames) {
            Err(Error::EmptyFrame { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fps_collinear() {
        let pts: Vec<[f32; 3]> = (0..10).map(|i| [i as f32, 0.0, 0.0]).collect();
        let mut got = farthest_point_sample(&pts, 2).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 9]);
    }

    #[test]
    fn fps_full_selection_and_errors() {
        let pts: Vec<[f32; 3]> = (0..6).map(|i| [(i * i) as f32, 1.0, -(i as f32)]).collect();
        let mut all = farthest_point_sample(&pts, 6).unwrap();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(farthest_point_sample(&pts, 7).is_err());
        assert!(farthest_point_sample(&pts, 0).is_err());
    }

    /// Brute-force max-min selection used as an oracle.
    fn fps_oracle(pts: &[[f32; 3]], m: usize) -> Vec<usize> {
        let d = |a: &[f32; 3], b: &[f32; 3]| -> f64 {
            (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
        };
        let n = pts.len() as f64;
        let c = [0, 1, 2].map(|k| pts.iter().map(|p| p[k] as f64).sum::<f64>() / n);
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in pts.iter().enumerate() {
            let dd: f64 = (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum();
            if dd > best_d {
                best_d = dd;
                best = i;
            }
        }
        let mut sel = vec![best];
        while sel.len() < m {
            let mut best = usize::MAX;
            let mut best_d = -1.0;
            for i in 0..pts.len() {
                if sel.contains(&i) {
                    continue;
                }
                let md = sel.iter().map(|&s| d(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
                if md > best_d {
                    best_d = md;
                    best = i;
                }
            }
            sel.push(best);
        }
        sel
    }

    #[test]
    fn duplicates_wait_for_distinct_points() {
        // points 0..4 distinct, 5..9 duplicate point 0..4
        let mut pts: Vec<[f32; 3]> = (0..5).map(|i| [i as f32, (i % 2) as f32, 0.0]).collect();
        pts.extend(pts.clone());
        let sel = farthest_point_sample(&pts, 5).unwrap();
        let mut base: Vec<usize> = sel.iter().map(|i| i % 5).collect();
        base.sort();
        base.dedup();
        assert_eq!(base.len(), 5, "{sel:?}");
        assert_eq!(sel, fps_oracle(&pts, 5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cloud() -> impl Strategy<Value = Vec<[f32; 3]>> {
            prop::collection::vec(prop::array::uniform3(-5i32..5), 1..40)
                .prop_map(|v| v.into_iter().map(|p| p.map(|c| c as f32 * 0.5)).collect())
        }

        proptest! {
            #[test]
            fn fps_matches_oracle(pts in cloud(), frac in 0.0f64..1.0) {
                let m = 1 + ((pts.len() - 1) as f64 * frac) as usize;
                prop_assert_eq!(farthest_point_sample(&pts, m).unwrap(), fps_oracle(&pts, m));
            }

            #[test]
            fn standardized_points_come_from_input(counts in prop::collection::vec(1usize..120, 1..50)) {
                let seq = seq_with_counts(&counts);
                let clip = standardize_clip(&seq).unwrap();
                prop_assert!(clip.is_standard());
                let valid = counts.len().min(FRAMES);
                prop_assert_eq!(clip.pad_mask.iter().filter(|p| !**p).count(), valid);
                for t in clip.valid_frames() {
                    for j in 0..POINTS {
                        let p = clip.point(t, j);
                        prop_assert!(seq.rows.iter().any(|r| r.values == p));
                    }
                }
            }
        }
    }
}
