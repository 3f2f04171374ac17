//! k-means++ seeding followed by Lloyd iterations.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_MAX_ITER: usize = 300;

/// Columns per distance tile; bounds the `K x tile` scratch matrix.
const TILE: usize = 2048;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `d x K`, one centre per column.
    pub centers: DMatrix<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after every assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one assignment step")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn column(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let d = m.nrows();
    &m.as_slice()[j * d..(j + 1) * d]
}

/// Clusters the columns of `points` into `k` groups.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let m = points.ncols();
    if k == 0 {
        return Err(Error::param("k-means needs K >= 1"));
    }
    if m < k {
        return Err(Error::param(format!("k-means needs at least K = {k} points, got {m}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }

    let mut rng = rng::substream(seed, rng::Stream::KMeans, 0);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let point_norms: Vec<f64> = (0..m).map(|j| column(points, j).iter().map(|v| v * v).sum()).collect();

    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        let next = assign(points, &point_norms, &centers, &assignments);
        let objective: f64 = (0..m).map(|j| sq_dist(column(points, j), column(&centers, next[j]))).sum();
        if let Some(&prev) = history.last() {
            debug_assert!(
                objective <= prev * (1.0 + 1e-12) + 1e-12,
                "k-means objective increased: {prev} -> {objective}"
            );
        }
        history.push(objective);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        if iterations == max_iter {
            break;
        }
        iterations += 1;
        centers = update_centers(points, &mut assignments, &centers, k);
    }

    if !converged {
        log::warn!("k-means stopped after {max_iter} iterations without reaching a fixpoint");
        centers = update_centers(points, &mut assignments, &centers, k);
    }

    Ok(KMeansResult { centers, assignments, objective_history: history, iterations, converged })
}

/// D²-weighted seeding; exact squared distances throughout.
fn plus_plus_init<R: Rng>(points: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let (d, m) = (points.nrows(), points.ncols());
    let mut chosen = Vec::with_capacity(k);
    let first = rng.random_range(0..m);
    chosen.push(first);
    let mut nearest: Vec<f64> = (0..m).map(|j| sq_dist(column(points, j), column(points, first))).collect();

    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (j, &w) in nearest.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(j);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every point coincides with a chosen centre.
            rng.random_range(0..m)
        };
        chosen.push(pick);
        let c = column(points, pick).to_vec();
        nearest.par_iter_mut().enumerate().for_each(|(j, best)| {
            let dist = sq_dist(column(points, j), &c);
            if dist < *best {
                *best = dist;
            }
        });
    }

    let mut centers = DMatrix::zeros(d, k);
    for (c, &j) in chosen.iter().enumerate() {
        centers.column_mut(c).copy_from(&points.column(j));
    }
    centers
}

/// Nearest centre per point via `‖x‖² − 2·cᵀx + ‖c‖²`. Ties keep the
/// previous assignment, otherwise go to the lower centre index. Tiles are
/// independent so the result does not depend on the thread count.
fn assign(points: &DMatrix<f64>, point_norms: &[f64], centers: &DMatrix<f64>, previous: &[usize]) -> Vec<usize> {
    let (d, m) = (points.nrows(), points.ncols());
    let k = centers.ncols();
    let centers_t = centers.transpose();
    let center_norms: Vec<f64> = (0..k).map(|c| column(centers, c).iter().map(|v| v * v).sum()).collect();

    let starts: Vec<usize> = (0..m).step_by(TILE).collect();
    let tiles: Vec<Vec<usize>> = starts
        .par_iter()
        .map(|&start| {
            let width = TILE.min(m - start);
            let tile = points.view((0, start), (d, width));
            let mut dots = DMatrix::zeros(k, width);
            dots.gemm(1.0, &centers_t, &tile, 0.0);
            (0..width)
                .map(|j| {
                    let xn = point_norms[start + j];
                    let col = &dots.as_slice()[j * k..(j + 1) * k];
                    let (mut best, mut best_dist) = match previous.get(start + j) {
                        Some(&p) => (p, xn - 2.0 * col[p] + center_norms[p]),
                        None => (0, f64::INFINITY),
                    };
                    for (c, &dot) in col.iter().enumerate() {
                        let dist = xn - 2.0 * dot + center_norms[c];
                        if dist < best_dist {
                            best_dist = dist;
                            best = c;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    tiles.concat()
}

/// Cluster means. An empty cluster takes over the point farthest from its
/// current centre (lowest index on ties) before the means are formed.
fn update_centers(points: &DMatrix<f64>, assignments: &mut [usize], centers: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let (d, m) = (points.nrows(), points.ncols());
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    if counts.contains(&0) {
        let mut dist: Vec<f64> = (0..m).map(|j| sq_dist(column(points, j), column(centers, assignments[j]))).collect();
        for empty in 0..k {
            if counts[empty] != 0 {
                continue;
            }
            let mut far = None;
            let mut far_dist = -1.0;
            for j in 0..m {
                if counts[assignments[j]] > 1 && dist[j] > far_dist {
                    far_dist = dist[j];
                    far = Some(j);
                }
            }
            let j = far.expect("m >= K leaves a cluster with two or more points");
            counts[assignments[j]] -= 1;
            counts[empty] = 1;
            assignments[j] = empty;
            dist[j] = 0.0;
        }
    }

    let mut sums = DMatrix::zeros(d, k);
    for (j, &a) in assignments.iter().enumerate() {
        let mut col = sums.column_mut(a);
        col += points.column(j);
    }
    for (c, &count) in counts.iter().enumerate() {
        let mut col = sums.column_mut(c);
        col /= count as f64;
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, xs.len(), xs)
    }

    fn sorted_centers(r: &KMeansResult) -> Vec<f64> {
        let mut c: Vec<f64> = r.centers.iter().copied().collect();
        c.sort_by(f64::total_cmp);
        c
    }

    #[test]
    fn two_well_separated_pairs() {
        let r = kmeans(&line(&[0.0, 1.0, 10.0, 11.0]), 2, 0, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sorted_centers(&r), vec![0.5, 10.5]);
        assert!(r.converged);
    }

    #[test]
    fn duplicated_dataset_keeps_centres() {
        let r = kmeans(&line(&[0.0, 0.0, 1.0, 1.0, 10.0, 10.0, 11.0, 11.0]), 2, 3, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sorted_centers(&r), vec![0.5, 10.5]);
    }

    #[test]
    fn k_equal_m_returns_the_points() {
        let pts = DMatrix::from_column_slice(2, 4, &[0.0, 0.0, 1.0, 5.0, -3.0, 2.0, 7.0, 7.0]);
        let r = kmeans(&pts, 4, 9, DEFAULT_MAX_ITER).unwrap();
        let mut got: Vec<(f64, f64)> = (0..4).map(|c| (r.centers[(0, c)], r.centers[(1, c)])).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(-3.0, 2.0), (0.0, 0.0), (1.0, 5.0), (7.0, 7.0)]);
        assert_eq!(r.objective(), 0.0);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let r = kmeans(&line(&[1.0, 2.0, 6.0]), 1, 0, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.centers[(0, 0)], 3.0);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(kmeans(&line(&[1.0, 2.0]), 3, 0, 10), Err(Error::Parameter(_))));
    }

    #[test]
    fn identical_points_fill_every_cluster() {
        let r = kmeans(&line(&[4.0; 6]), 3, 1, DEFAULT_MAX_ITER).unwrap();
        assert!(r.centers.iter().all(|&c| c == 4.0));
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = rng::seeded(2);
        let pts = DMatrix::from_fn(3, 500, |_, _| rng.random_range(-5.0..5.0));
        let r = kmeans(&pts, 7, 4, DEFAULT_MAX_ITER).unwrap();
        for w in r.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        let again = kmeans(&pts, 7, 4, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(r.centers, again.centers);
    }
}
