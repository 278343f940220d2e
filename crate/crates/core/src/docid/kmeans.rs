//! Seeded k-means++ with Lloyd refinement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor2;

const MAX_ITERS: usize = 100;
const REL_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Cluster index per input row. Index 0 is the largest cluster.
    pub assignments: Vec<usize>,
    /// `k × d`; rows of clusters that ended up empty hold their last seed.
    pub centroids: Tensor2,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.nrows()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn non_empty(&self) -> usize {
        self.cluster_sizes().iter().filter(|&&s| s > 0).count()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(m: &Tensor2, i: usize) -> &[f64] {
    m.row(i).to_slice().expect("row-major tensor")
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn inertia(points: &Tensor2, centroids: &Tensor2, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(row(points, i), row(centroids, c)))
        .sum()
}

/// Clusters the rows of `points` into at most `k` groups.
///
/// When `k` exceeds the number of points every point gets its own cluster and
/// the remaining indices stay unused.
pub fn kmeans(points: &Tensor2, k: usize, seed: u64) -> Result<KMeansResult> {
    let (n, d) = points.dim();
    if k == 0 {
        return Err(Error::Config("kmeans needs k >= 1".into()));
    }
    if n == 0 {
        return Err(Error::Data("kmeans needs at least one point".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("kmeans input contains non-finite values".into()));
    }
    let points = &points.as_standard_layout().into_owned();
    if k >= n {
        let mut centroids = Tensor2::zeros((k, d));
        centroids.slice_mut(ndarray::s![..n, ..]).assign(points);
        return Ok(KMeansResult {
            assignments: (0..n).collect(),
            centroids,
            inertia: 0.0,
            iterations: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut current = 0.0;
    while iterations < MAX_ITERS {
        iterations += 1;
        assign(points, &centroids, &mut assignments);
        repair_empty(points, &mut centroids, &mut assignments, k);
        update_centroids(points, &mut centroids, &assignments);
        current = inertia(points, &centroids, &assignments);
        if current == 0.0 || (prev - current).abs() <= REL_TOL * prev {
            break;
        }
        prev = current;
    }
    let (assignments, centroids) = relabel(&assignments, &centroids);
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia: current,
        iterations,
    })
}

fn plus_plus_init(points: &Tensor2, k: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let (n, d) = points.dim();
    let mut centroids = Tensor2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(points, i), row(points, first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(row(points, i), row(points, pick)));
        }
    }
    centroids
}

/// Nearest centroid per point; ties go to the lower index.
fn assign(points: &Tensor2, centroids: &Tensor2, assignments: &mut [usize]) {
    for (i, a) in assignments.iter_mut().enumerate() {
        let p = row(points, i);
        let mut best = (f64::INFINITY, 0);
        for c in 0..centroids.nrows() {
            let dist = sq_dist(p, row(centroids, c));
            if dist < best.0 {
                best = (dist, c);
            }
        }
        *a = best.1;
    }
}

/// Seeds each empty cluster with the point of the largest cluster lying
/// farthest from that cluster's centroid. Clusters of identical points are left
/// alone since there is nothing to split.
fn repair_empty(points: &Tensor2, centroids: &mut Tensor2, assignments: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).expect("k >= 1");
        if sizes[largest] < 2 {
            return;
        }
        let mut mean = vec![0.0; points.ncols()];
        for (i, _) in assignments.iter().enumerate().filter(|(_, &a)| a == largest) {
            for (m, v) in mean.iter_mut().zip(row(points, i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= sizes[largest] as f64);
        let (far, dist) = assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == largest)
            .map(|(i, _)| (i, sq_dist(row(points, i), &mean)))
            .fold((usize::MAX, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if dist <= 0.0 {
            return;
        }
        assignments[far] = empty;
        centroids.row_mut(empty).assign(&points.row(far));
    }
}

fn update_centroids(points: &Tensor2, centroids: &mut Tensor2, assignments: &[usize]) {
    let k = centroids.nrows();
    let mut sums = Tensor2::zeros(centroids.raw_dim());
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        let mut s = sums.row_mut(a);
        s += &points.row(i);
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mean = &sums.row(c) / counts[c] as f64;
            centroids.row_mut(c).assign(&mean);
        }
    }
}

/// Renumbers clusters by descending size, ties by smallest member index.
fn relabel(assignments: &[usize], centroids: &Tensor2) -> (Vec<usize>, Tensor2) {
    let k = centroids.nrows();
    let mut sizes = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (i, &a) in assignments.iter().enumerate() {
        sizes[a] += 1;
        first[a] = first[a].min(i);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(sizes[c]), first[c], c));
    let mut new_of = vec![0; k];
    let mut out = Tensor2::zeros(centroids.raw_dim());
    for (new, &old) in order.iter().enumerate() {
        new_of[old] = new;
        out.row_mut(new).assign(&centroids.row(old));
    }
    (assignments.iter().map(|&a| new_of[a]).collect(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separated_pairs() {
        let pts = array![[0.0], [0.1], [10.0], [10.1]];
        let r = kmeans(&pts, 2, 0).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
        let r = kmeans(&pts, 1, 7).unwrap();
        assert_eq!(r.assignments, vec![0, 0, 0]);
        assert!((r.centroids[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((r.centroids[[0, 1]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn more_clusters_than_points() {
        let pts = array![[1.0], [2.0]];
        let r = kmeans(&pts, 5, 0).unwrap();
        assert_eq!(r.assignments, vec![0, 1]);
        assert_eq!(r.centroids.nrows(), 5);
    }

    #[test]
    fn identical_points_stay_together() {
        let pts = Tensor2::from_elem((12, 3), 0.5);
        let r = kmeans(&pts, 4, 3).unwrap();
        assert!(r.assignments.iter().all(|&a| a == 0));
        assert_eq!(r.non_empty(), 1);
    }

    #[test]
    fn labels_follow_size() {
        let pts = array![[0.0], [10.0], [10.1], [10.2]];
        let r = kmeans(&pts, 2, 1).unwrap();
        assert_eq!(r.assignments, vec![1, 0, 0, 0]);
    }

    #[test]
    fn zero_k_and_empty_input_error() {
        assert!(kmeans(&array![[1.0]], 0, 0).is_err());
        assert!(kmeans(&Tensor2::zeros((0, 2)), 2, 0).is_err());
    }
}
