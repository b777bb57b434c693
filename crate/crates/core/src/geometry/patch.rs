//! Farthest point sampling and kNN patch grouping.
//!
//! Both operate on positions only and break distance ties by the lowest
//! point index, so selections are fully deterministic.

use crate::error::{Error, Result};
use crate::geometry::{dist2, PointCloud};

/// Greedy farthest point sampling: start at `start`, then repeatedly take
/// the point maximizing the minimum squared distance to the selected set.
pub fn farthest_point_sample(pc: &PointCloud, p: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if p == 0 || p > n {
        return Err(Error::Usage(format!(
            "farthest_point_sample needs 1 <= P <= N, got P={p}, N={n}"
        )));
    }
    if start >= n {
        return Err(Error::Usage(format!(
            "start index {start} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(p);
    selected.push(start);
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| dist2(pc.pos(i), pc.pos(start)))
        .collect();
    while selected.len() < p {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for i in 0..n {
            let d = dist2(pc.pos(i), pc.pos(best));
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(selected)
}

/// One patch set: P centers and for each its N' nearest member rows,
/// positions re-centered to the patch center. The center's original
/// position is kept for positional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub centers: Vec<usize>,
    pub center_positions: Vec<[f64; 3]>,
    pub members: Vec<Vec<usize>>,
    /// Per patch, N' rows of [pos - center_pos, color, normal].
    pub points: Vec<Vec<[f64; 9]>>,
}

/// Group the N' nearest points (by position, ties by lowest index, center
/// included) around each center and re-center their positions.
pub fn knn_group(pc: &PointCloud, centers: &[usize], k: usize) -> Result<PatchSet> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(Error::Usage(format!(
            "knn_group needs 1 <= N' <= N, got N'={k}, N={n}"
        )));
    }
    if centers.is_empty() {
        return Err(Error::Usage("knn_group needs at least one center".into()));
    }
    for &c in centers {
        if c >= n {
            return Err(Error::Usage(format!(
                "center index {c} out of range for {n} points"
            )));
        }
    }
    let mut members = Vec::with_capacity(centers.len());
    let mut points = Vec::with_capacity(centers.len());
    let mut center_positions = Vec::with_capacity(centers.len());
    for &c in centers {
        let cpos = pc.pos(c);
        let mut order: Vec<(f64, usize)> = (0..n).map(|i| (dist2(pc.pos(i), cpos), i)).collect();
        order.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let mut rows = Vec::with_capacity(k);
        let mut idxs = Vec::with_capacity(k);
        for &(_, i) in order.iter().take(k) {
            let mut row = pc.points[i];
            row[0] -= cpos[0];
            row[1] -= cpos[1];
            row[2] -= cpos[2];
            rows.push(row);
            idxs.push(i);
        }
        members.push(idxs);
        points.push(rows);
        center_positions.push(cpos);
    }
    Ok(PatchSet {
        patch_size: k,
        centers: centers.to_vec(),
        center_positions,
        members,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn line_cloud(xs: &[f64]) -> PointCloud {
        PointCloud {
            points: xs
                .iter()
                .map(|&x| [x, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0])
                .collect(),
        }
    }

    fn random_cloud(rng: &mut SeededRng, n: usize) -> PointCloud {
        PointCloud {
            points: (0..n)
                .map(|_| {
                    [
                        rng.range(-1.0, 1.0),
                        rng.range(-1.0, 1.0),
                        rng.range(-1.0, 1.0),
                        0.5,
                        0.5,
                        0.5,
                        0.0,
                        0.0,
                        1.0,
                    ]
                })
                .collect(),
        }
    }

    /// Brute-force greedy FPS, written independently from the production
    /// routine: recompute the full min-distance each round.
    fn fps_oracle(pc: &PointCloud, p: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < p {
            let mut best_i = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            // Ascending scan with a strict > keeps the lowest index on ties.
            for i in 0..pc.len() {
                let d = sel
                    .iter()
                    .map(|&s| dist2(pc.pos(i), pc.pos(s)))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best_i = i;
                }
            }
            sel.push(best_i);
        }
        sel
    }

    #[test]
    fn test_fps_collinear_examples() {
        let pc = line_cloud(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(farthest_point_sample(&pc, 2, 0).unwrap(), vec![0, 3]);
        // Points 1 and 2 tie at min-distance 1; the lower index wins.
        assert_eq!(farthest_point_sample(&pc, 3, 0).unwrap(), vec![0, 3, 1]);
        assert_eq!(farthest_point_sample(&pc, 4, 0).unwrap(), vec![0, 3, 1, 2]);
    }

    #[test]
    fn test_fps_matches_bruteforce_oracle() {
        let mut rng = SeededRng::new(31);
        for trial in 0..60 {
            let n = 2 + rng.index(63);
            let p = 1 + rng.index(n.min(16));
            let pc = random_cloud(&mut rng, n);
            let got = farthest_point_sample(&pc, p, 0).unwrap();
            let want = fps_oracle(&pc, p, 0);
            assert_eq!(got, want, "trial {trial}: N={n} P={p}");
        }
    }

    #[test]
    fn test_fps_covering_property() {
        let mut rng = SeededRng::new(77);
        let pc = random_cloud(&mut rng, 48);
        let p = 12;
        let sel = farthest_point_sample(&pc, p, 0).unwrap();
        // Distance at which the last center was selected.
        let prior = &sel[..p - 1];
        let last = sel[p - 1];
        let last_d = prior
            .iter()
            .map(|&s| dist2(pc.pos(last), pc.pos(s)))
            .fold(f64::INFINITY, f64::min);
        for i in 0..pc.len() {
            let d = sel
                .iter()
                .map(|&s| dist2(pc.pos(i), pc.pos(s)))
                .fold(f64::INFINITY, f64::min);
            assert!(d <= last_d + 1e-12);
        }
    }

    #[test]
    fn test_fps_rejects_bad_args() {
        let pc = line_cloud(&[0.0, 1.0]);
        assert!(farthest_point_sample(&pc, 3, 0).is_err());
        assert!(farthest_point_sample(&pc, 0, 0).is_err());
        assert!(farthest_point_sample(&pc, 1, 5).is_err());
    }

    #[test]
    fn test_knn_collinear_example() {
        let pc = line_cloud(&[0.0, 1.0, 2.0, 3.0]);
        let set = knn_group(&pc, &[0], 2).unwrap();
        assert_eq!(set.members[0], vec![0, 1]);
        assert_eq!(set.points[0][0][0], 0.0);
        assert_eq!(set.points[0][1][0], 1.0);
        assert_eq!(set.center_positions[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn test_knn_single_member_patches() {
        let pc = line_cloud(&[0.0, 5.0, 9.0]);
        let set = knn_group(&pc, &[0, 1, 2], 1).unwrap();
        for (i, m) in set.members.iter().enumerate() {
            assert_eq!(m, &vec![i]);
            assert_eq!(&set.points[i][0][0..3], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn test_knn_duplicate_points_tie_by_index() {
        // Point 2 coincides with point 0; both are distance 0 from center 2,
        // and index 0 sorts first.
        let pc = line_cloud(&[0.0, 4.0, 0.0, 9.0]);
        let set = knn_group(&pc, &[2], 2).unwrap();
        assert_eq!(set.members[0], vec![0, 2]);
    }

    #[test]
    fn test_knn_matches_fullsort_oracle() {
        let mut rng = SeededRng::new(55);
        for _ in 0..40 {
            let n = 2 + rng.index(63);
            let k = 1 + rng.index(n);
            let pc = random_cloud(&mut rng, n);
            let centers: Vec<usize> = (0..4.min(n)).collect();
            let set = knn_group(&pc, &centers, k).unwrap();
            for (pi, &c) in centers.iter().enumerate() {
                // Independent full sort.
                let mut all: Vec<(f64, usize)> = (0..n)
                    .map(|i| (dist2(pc.pos(i), pc.pos(c)), i))
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let want: Vec<usize> = all[..k].iter().map(|&(_, i)| i).collect();
                assert_eq!(set.members[pi], want);
            }
        }
    }

    #[test]
    fn test_knn_preserves_colors_and_normals() {
        let mut rng = SeededRng::new(4);
        let pc = random_cloud(&mut rng, 20);
        let set = knn_group(&pc, &[3, 7], 5).unwrap();
        for (pi, rows) in set.points.iter().enumerate() {
            for (ri, row) in rows.iter().enumerate() {
                let src = &pc.points[set.members[pi][ri]];
                assert_eq!(&row[3..9], &src[3..9]);
            }
        }
    }

    #[test]
    fn test_knn_rejects_bad_args() {
        let pc = line_cloud(&[0.0, 1.0]);
        assert!(knn_group(&pc, &[0], 3).is_err());
        assert!(knn_group(&pc, &[0], 0).is_err());
        assert!(knn_group(&pc, &[9], 1).is_err());
        assert!(knn_group(&pc, &[], 1).is_err());
    }
}
