use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{euclidean, squared_euclidean, Matrix};
use crate::rng::stage_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_euclidean(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init(data: &Matrix, k: usize, seed: u64) -> Matrix {
    let n = data.rows();
    let mut rng = stage_rng(seed, "kmeans++");
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_euclidean(data.row(i), data.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[pick] <= 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // Every point coincides with a chosen centroid.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(squared_euclidean(data.row(i), data.row(next)));
        }
    }
    data.select_rows(&chosen)
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(data: &Matrix, labels: &mut [usize], centroids: &Matrix, k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for i in 0..data.rows() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = squared_euclidean(data.row(i), centroids.row(labels[i]));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        match far {
            Some(i) => labels[i] = empty,
            None => return,
        }
    }
}

fn update_centroids(data: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let mut centroids = Matrix::zeros(k, data.cols());
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (c, x) in centroids.row_mut(l).iter_mut().zip(data.row(i)) {
            *c += x;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let inv = 1.0 / count.max(1) as f64;
        centroids.row_mut(c).iter_mut().for_each(|v| *v *= inv);
    }
    centroids
}

fn inertia_of(data: &Matrix, labels: &[usize], centroids: &Matrix) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_euclidean(data.row(i), centroids.row(l)))
        .sum()
}

/// Seeded k-means++ followed by Lloyd iterations.
///
/// Nearest-centroid ties go to the lowest centroid index. Iteration stops
/// when the relative inertia change drops below `tol`, labels stop
/// changing, or `max_iter` is reached.
pub fn kmeans(data: &Matrix, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterAssignment> {
    let n = data.rows();
    if k == 0 {
        return Err(Error::invalid("k-means needs K >= 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("k-means needs n >= K, got n={n}, K={k}")));
    }
    let mut centroids = kmeans_pp_init(data, k, seed);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut inertia = f64::INFINITY;

    for _ in 0..max_iter.max(1) {
        let mut new_labels: Vec<usize> = (0..n).map(|i| nearest(data.row(i), &centroids).0).collect();
        repair_empty(data, &mut new_labels, &centroids, k);
        let changed = new_labels != labels;
        labels = new_labels;
        centroids = update_centroids(data, &labels, k);
        let current = inertia_of(data, &labels, &centroids);
        trace.push(current);
        let rel = if inertia.is_finite() {
            (inertia - current).abs() / inertia.max(f64::MIN_POSITIVE)
        } else {
            f64::INFINITY
        };
        inertia = current;
        if !changed || rel < tol {
            break;
        }
    }

    Ok(ClusterAssignment {
        k,
        labels,
        centroids,
        inertia,
        inertia_trace: trace,
    })
}

pub fn kmeans_with(data: &Matrix, params: &KMeansParams) -> Result<ClusterAssignment> {
    kmeans(data, params.k, params.seed, params.max_iter, params.tol)
}

/// Mean silhouette coefficient of an assignment (Euclidean). Points in
/// singleton clusters contribute 0.
pub fn silhouette_score(data: &Matrix, labels: &[usize], k: usize) -> f64 {
    let n = data.rows();
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += euclidean(data.row(i), data.row(j));
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Picks K in `[k_min, k_max]` maximising the mean silhouette; ties go to
/// the smaller K.
pub fn silhouette_select_k(data: &Matrix, k_min: usize, k_max: usize, seed: u64) -> Result<usize> {
    if k_min < 2 || k_max < k_min {
        return Err(Error::invalid(format!("empty silhouette range [{k_min}, {k_max}]")));
    }
    if k_max >= data.rows() {
        return Err(Error::invalid(format!(
            "silhouette range upper bound {k_max} must be below n={}",
            data.rows()
        )));
    }
    let mut best = (k_min, f64::NEG_INFINITY);
    for k in k_min..=k_max {
        let assignment = kmeans(data, k, seed, 100, 1e-6)?;
        let s = silhouette_score(data, &assignment.labels, k);
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push(vec![
                    center[0] + noise.sample(&mut rng),
                    center[1] + noise.sample(&mut rng),
                ]);
                truth.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), truth)
    }

    fn agreement_up_to_permutation(a: &[usize], b: &[usize]) -> f64 {
        let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
        same.max(a.len() - same) as f64 / a.len() as f64
    }

    #[test]
    fn one_dimensional_pairs() {
        let data = Matrix::new(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let a = kmeans(&data, 2, 1, 100, 1e-6).unwrap();
        assert_eq!(a.labels[0], a.labels[1]);
        assert_eq!(a.labels[2], a.labels[3]);
        assert_ne!(a.labels[0], a.labels[2]);
        assert!((a.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn identical_points_are_repaired() {
        let data = Matrix::new(5, 2, vec![1.5; 10]).unwrap();
        let a = kmeans(&data, 2, 3, 100, 1e-6).unwrap();
        let mut sizes = a.sizes();
        sizes.sort();
        assert_eq!(sizes, vec![1, 4]);
        assert_eq!(a.inertia, 0.0);
    }

    #[test]
    fn separated_blobs_recovered() {
        let (data, truth) = blobs(&[[0.0, 0.0], [10.0, 0.0]], 50, 0.1, 11);
        let a = kmeans(&data, 2, 4, 100, 1e-6).unwrap();
        assert_eq!(agreement_up_to_permutation(&a.labels, &truth), 1.0);
    }

    #[test]
    fn inertia_is_monotone_and_runs_are_reproducible() {
        let (data, _) = blobs(&[[0.0, 0.0], [3.0, 1.0], [1.0, 4.0]], 40, 1.2, 2);
        let a = kmeans(&data, 3, 8, 100, 0.0).unwrap();
        assert!(a.inertia_trace.windows(2).all(|w| w[1] <= w[0]));
        let b = kmeans(&data, 3, 8, 100, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let data = Matrix::new(1, 1, vec![0.0]).unwrap();
        assert!(kmeans(&data, 2, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn silhouette_picks_blob_count() {
        let (two, _) = blobs(&[[0.0, 0.0], [10.0, 10.0]], 30, 0.2, 5);
        assert_eq!(silhouette_select_k(&two, 2, 5, 1).unwrap(), 2);
        let (three, _) = blobs(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 30, 0.2, 6);
        assert_eq!(silhouette_select_k(&three, 2, 5, 1).unwrap(), 3);
        let tiny = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]).unwrap();
        assert_eq!(silhouette_select_k(&tiny, 2, 2, 1).unwrap(), 2);
        assert!(silhouette_select_k(&tiny, 3, 2, 1).is_err());
    }

    #[test]
    fn silhouette_matches_direct_formula() {
        // Two points per cluster, hand-computed: a = 1, b = mean distance to the other pair.
        let data = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]]).unwrap();
        let s = silhouette_score(&data, &[0, 0, 1, 1], 2);
        let s0 = (10.5 - 1.0) / 10.5;
        let s1 = (9.5 - 1.0) / 9.5;
        assert!((s - (s0 + s1) / 2.0).abs() < 1e-12);
    }
}
