//! Lloyd k-means with k-means++ seeding and farthest-point repair for empty
//! clusters. Shared by the cluster-head initialization, the bag-of-words
//! vocabulary, pseudo-activity grouping, and per-group action clustering.

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// k x d centroid matrix.
    pub centroids: Tensor,
    /// Cluster index per input row.
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

/// Best of several seeded runs by within-cluster inertia. Deterministic
/// given `seed`; used by the decode stages where a bad local minimum is
/// costly.
pub fn kmeans_restarts(
    points: &Tensor,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let mut best: Option<(f64, KMeansResult)> = None;
    for r in 0..restarts.max(1) {
        let result = kmeans(points, k, seed.wrapping_add(0x9E37 * r as u64), max_iter, tol)?;
        let score = inertia(points, &result);
        if best.as_ref().map_or(true, |(s, _)| score < *s) {
            best = Some((score, result));
        }
    }
    Ok(best.expect("at least one restart ran").1)
}

fn inertia(points: &Tensor, result: &KMeansResult) -> f64 {
    let mut total = 0.0;
    for (r, &a) in result.assignments.iter().enumerate() {
        for (x, y) in points.row(r).iter().zip(result.centroids.row(a).iter()) {
            let d = x - y;
            total += d * d;
        }
    }
    total
}

/// Run k-means over the rows of `points`.
///
/// Deterministic given `seed`; ties in assignment go to the lowest cluster
/// index. Empty clusters are re-seeded from the point farthest from its
/// assigned centroid, so the call never fails once `points.rows >= k`.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Contract("kmeans requires k >= 1".into()));
    }
    if points.rows < k {
        return Err(Error::Contract(format!(
            "kmeans requires at least k={} points, got {}",
            k, points.rows
        )));
    }
    let mut rng = Rng::new(seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let mut assignments = vec![0usize; points.rows];

    let mut iterations = 0;
    for iter in 0..max_iter {
        iterations = iter + 1;
        assign(points, &centroids, &mut assignments);
        repair_empty_clusters(points, &mut centroids, &mut assignments);

        let next = means(points, &assignments, k, &centroids);
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let mut d = 0.0;
            for j in 0..points.cols {
                let delta = next.at(c, j) - centroids.at(c, j);
                d += delta * delta;
            }
            shift = shift.max(d.sqrt());
        }
        centroids = next;
        if shift < tol {
            break;
        }
    }
    assign(points, &centroids, &mut assignments);
    repair_empty_clusters(points, &mut centroids, &mut assignments);
    Ok(KMeansResult { centroids, assignments, iterations })
}

/// Nearest centroid per row (ties to lowest index).
pub fn assign(points: &Tensor, centroids: &Tensor, out: &mut [usize]) {
    for r in 0..points.rows {
        out[r] = nearest_centroid(points.row(r), centroids).0;
    }
}

pub fn nearest_centroid(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows {
        let mut d = 0.0;
        for (x, y) in point.iter().zip(centroids.row(c).iter()) {
            let delta = x - y;
            d += delta * delta;
        }
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn plus_plus_seed(points: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let n = points.rows;
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.next_below(n));
    let mut min_d = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = *chosen.last().unwrap();
        for r in 0..n {
            let mut d = 0.0;
            for (x, y) in points.row(r).iter().zip(points.row(last).iter()) {
                let delta = x - y;
                d += delta * delta;
            }
            min_d[r] = min_d[r].min(d);
        }
        let total: f64 = min_d.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centroid; pick uniformly
            rng.next_below(n)
        } else {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (r, &d) in min_d.iter().enumerate() {
                acc += d;
                if acc >= target {
                    pick = r;
                    break;
                }
            }
            pick
        };
        chosen.push(next);
    }
    let mut centroids = Tensor::zeros(k, points.cols);
    for (c, &r) in chosen.iter().enumerate() {
        centroids.data[c * points.cols..(c + 1) * points.cols].copy_from_slice(points.row(r));
    }
    centroids
}

fn means(points: &Tensor, assignments: &[usize], k: usize, fallback: &Tensor) -> Tensor {
    let mut sums = Tensor::zeros(k, points.cols);
    let mut counts = vec![0usize; k];
    for (r, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for j in 0..points.cols {
            sums.data[a * points.cols + j] += points.at(r, j);
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            // keep the previous centroid; the repair pass will move it
            sums.data[c * points.cols..(c + 1) * points.cols].copy_from_slice(fallback.row(c));
        } else {
            let inv = 1.0 / counts[c] as f64;
            for j in 0..points.cols {
                sums.data[c * points.cols + j] *= inv;
            }
        }
    }
    sums
}

fn repair_empty_clusters(points: &Tensor, centroids: &mut Tensor, assignments: &mut [usize]) {
    loop {
        let mut counts = vec![0usize; centroids.rows];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let empty = match counts.iter().position(|&c| c == 0) {
            Some(e) => e,
            None => return,
        };
        // farthest point from its current centroid, skipping singleton donors
        let mut far = None;
        let mut far_d = -1.0;
        for r in 0..points.rows {
            if counts[assignments[r]] <= 1 {
                continue;
            }
            let mut d = 0.0;
            for (x, y) in points.row(r).iter().zip(centroids.row(assignments[r]).iter()) {
                let delta = x - y;
                d += delta * delta;
            }
            if d > far_d {
                far_d = d;
                far = Some(r);
            }
        }
        let r = match far {
            Some(r) => r,
            None => return, // fewer distinct donors than empty clusters
        };
        for j in 0..points.cols {
            centroids.data[empty * points.cols + j] = points.at(r, j);
        }
        assignments[r] = empty;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs() -> Tensor {
        let mut rows = Vec::new();
        let mut rng = Rng::new(17);
        for _ in 0..30 {
            rows.push(vec![
                5.0 + 0.1 * rng.next_gaussian(),
                5.0 + 0.1 * rng.next_gaussian(),
            ]);
        }
        for _ in 0..30 {
            rows.push(vec![
                -5.0 + 0.1 * rng.next_gaussian(),
                -5.0 + 0.1 * rng.next_gaussian(),
            ]);
        }
        Tensor::from_rows(&rows)
    }

    #[test]
    fn recovers_separated_blobs() {
        let points = two_blobs();
        let res = kmeans(&points, 2, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        // one centroid near (5,5), the other near (-5,-5)
        let mut found_pos = false;
        let mut found_neg = false;
        for c in 0..2 {
            let row = res.centroids.row(c);
            if (row[0] - 5.0).abs() < 0.2 && (row[1] - 5.0).abs() < 0.2 {
                found_pos = true;
            }
            if (row[0] + 5.0).abs() < 0.2 && (row[1] + 5.0).abs() < 0.2 {
                found_neg = true;
            }
        }
        assert!(found_pos && found_neg, "centroids {:?}", res.centroids);
        // first and second halves end up in different clusters
        assert_ne!(res.assignments[0], res.assignments[59]);
    }

    #[test]
    fn centroid_equals_exact_mean_of_blob() {
        let points = two_blobs();
        let res = kmeans(&points, 2, 3, DEFAULT_MAX_ITER, 1e-12).unwrap();
        // brute-force: mean of the rows assigned to each cluster
        for c in 0..2 {
            let members: Vec<usize> =
                (0..60).filter(|&r| res.assignments[r] == c).collect();
            assert!(!members.is_empty());
            for j in 0..2 {
                let mean: f64 =
                    members.iter().map(|&r| points.at(r, j)).sum::<f64>() / members.len() as f64;
                assert!((res.centroids.at(c, j) - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let points = two_blobs();
        let a = kmeans(&points, 4, 9, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let b = kmeans(&points, 4, 9, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(a.centroids.data, b.centroids.data);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn repairs_empty_clusters() {
        // 4 distinct points, k=3, duplicated mass at origin tempts k-means
        // into an empty cluster; repair must keep all 3 non-empty.
        let mut rows = vec![vec![0.0, 0.0]; 20];
        rows.push(vec![10.0, 0.0]);
        rows.push(vec![0.0, 10.0]);
        rows.push(vec![10.0, 10.0]);
        let points = Tensor::from_rows(&rows);
        let res = kmeans(&points, 3, 5, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let mut counts = vec![0usize; 3];
        for &a in &res.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "counts {counts:?}");
    }

    #[test]
    fn too_few_points_is_contract_error() {
        let points = Tensor::from_rows(&[vec![1.0, 2.0]]);
        assert!(kmeans(&points, 2, 0, 10, 1e-4).is_err());
    }
}
