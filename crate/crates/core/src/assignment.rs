//! Rectangular assignment via the Hungarian algorithm (potentials +
//! shortest augmenting paths, O(n^2 m)).

/// Maximum-weight one-to-one assignment of rows to columns.
///
/// `weights` is rectangular (rows x cols), entries non-negative. Returns
/// `assignment[row] = Some(col)` for matched rows and `None` for rows left
/// unmatched (possible only when rows > cols), together with the total
/// matched weight. Every column is used at most once; min(rows, cols)
/// pairs are always matched.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> (Vec<Option<usize>>, f64) {
    let n_rows = weights.len();
    if n_rows == 0 {
        return (Vec::new(), 0.0);
    }
    let n_cols = weights[0].len();
    debug_assert!(weights.iter().all(|r| r.len() == n_cols), "ragged weight matrix");
    if n_cols == 0 {
        return (vec![None; n_rows], 0.0);
    }

    // convert to a min-cost square problem: cost = max_w - w, padded with
    // max_w (weight zero) so padding never beats a real entry
    let max_w = weights
        .iter()
        .flat_map(|r| r.iter())
        .cloned()
        .fold(0.0_f64, f64::max);
    let n = n_rows.max(n_cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < n_rows && j < n_cols {
            max_w - weights[i][j]
        } else {
            max_w
        }
    };

    // 1-indexed potentials/matching as in the classic formulation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; n_rows];
    let mut total = 0.0;
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < n_rows && j - 1 < n_cols {
            assignment[i - 1] = Some(j - 1);
            total += weights[i - 1][j - 1];
        }
    }
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Exhaustive maximum over all injective row -> column maps.
    fn brute_force_max(weights: &[Vec<f64>]) -> f64 {
        let rows = weights.len();
        let cols = weights[0].len();
        let mut best = f64::NEG_INFINITY;
        let mut cols_perm: Vec<usize> = (0..cols).collect();
        permute(&mut cols_perm, 0, &mut |perm| {
            let total: f64 = (0..rows.min(cols)).map(|r| weights[r][perm[r]]).sum();
            if total > best {
                best = total;
            }
        });
        // rows > cols: also consider which rows stay unmatched
        if rows > cols {
            let mut rows_perm: Vec<usize> = (0..rows).collect();
            best = f64::NEG_INFINITY;
            permute(&mut rows_perm, 0, &mut |rperm| {
                let total: f64 = (0..cols).map(|c| weights[rperm[c]][c]).sum();
                if total > best {
                    best = total;
                }
            });
        }
        best
    }

    fn permute<F: FnMut(&[usize])>(items: &mut Vec<usize>, k: usize, f: &mut F) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, f);
            items.swap(k, i);
        }
    }

    #[test]
    fn diagonal_matrix_gives_identity() {
        let w = vec![
            vec![5.0, 0.0, 0.0],
            vec![0.0, 7.0, 0.0],
            vec![0.0, 0.0, 3.0],
        ];
        let (assign, total) = max_weight_assignment(&w);
        assert_eq!(assign, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(total, 15.0);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = Rng::new(2024);
        for trial in 0..100 {
            let rows = rng.next_range(1, 6);
            let cols = rng.next_range(1, 6);
            let w: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.next_below(100) as f64).collect())
                .collect();
            let (_, total) = max_weight_assignment(&w);
            let expect = brute_force_max(&w);
            assert_eq!(total, expect, "trial {trial}: {w:?}");
        }
    }

    #[test]
    fn rectangular_leaves_extra_rows_unmatched() {
        let w = vec![
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
        ];
        let (assign, total) = max_weight_assignment(&w);
        let matched = assign.iter().filter(|a| a.is_some()).count();
        assert_eq!(matched, 2);
        assert_eq!(total, 9.0); // rows 1 and 2 matched, row 0 left out
        assert_eq!(assign[0], None);
    }

    #[test]
    fn assignment_is_injective() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let rows = rng.next_range(2, 8);
            let cols = rng.next_range(2, 8);
            let w: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.next_f64() * 10.0).collect())
                .collect();
            let (assign, _) = max_weight_assignment(&w);
            let mut seen = std::collections::HashSet::new();
            for a in assign.into_iter().flatten() {
                assert!(seen.insert(a), "column {a} used twice");
            }
        }
    }
}
