//! Lloyd's k-means with k-means++ seeding.
//!
//! Distances and the objective are computed in f64 over f32 points so the
//! recorded objective trace is exactly non-increasing.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PqError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the relative objective improvement falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 100,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignments: Vec<usize>,
    /// Objective after seeding, then after every completed Lloyd iteration.
    pub objective_trace: Vec<f64>,
    /// Clusters that were re-seeded because they emptied.
    pub reseeded: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid and its squared distance; ties go to the lowest index.
#[inline]
pub(crate) fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(
    points: &[f32],
    dim: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f32>, PqError> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    for chosen in 1..k {
        let dist = WeightedIndex::new(&d2).map_err(|_| PqError::TooFewDistinct {
            distinct: chosen,
            k,
        })?;
        let next = dist.sample(rng);
        let c = &points[next * dim..(next + 1) * dim];
        centroids.extend_from_slice(c);
        for (p, d) in points.chunks_exact(dim).zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, c));
        }
    }
    Ok(centroids)
}

/// Per-cluster sum of squared distances, summed in cluster order.
fn objective(points: &[f32], dim: usize, centroids: &[f32], assignments: &[usize]) -> f64 {
    let k = centroids.len() / dim;
    let mut per_cluster = vec![0.0f64; k];
    for (p, &a) in points.chunks_exact(dim).zip(assignments) {
        per_cluster[a] += sq_dist(p, &centroids[a * dim..(a + 1) * dim]);
    }
    per_cluster.iter().sum()
}

/// Clusters `points` (`n × dim`, row-major) into `cfg.k` groups.
pub fn kmeans(points: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<KMeansResult, PqError> {
    let n = points.len().checked_div(dim).unwrap_or(0);
    if cfg.k == 0 || n < cfg.k {
        return Err(PqError::TooFewRows { rows: n, k: cfg.k });
    }
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_plus_plus(points, dim, k, &mut rng)?;
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    for (i, p) in points.chunks_exact(dim).enumerate() {
        (assignments[i], dists[i]) = nearest(p, &centroids, dim);
    }
    let mut trace = vec![objective(points, dim, &centroids, &assignments)];
    let mut reseeded = 0;

    for _ in 0..cfg.max_iters {
        let prev_obj = *trace.last().unwrap();
        let prev_state = (centroids.clone(), assignments.clone());

        // Assignment.
        for (i, p) in points.chunks_exact(dim).enumerate() {
            (assignments[i], dists[i]) = nearest(p, &centroids, dim);
        }

        // Empty clusters take the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n).filter(|&i| counts[assignments[i]] > 1).fold(
                None,
                |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                },
            );
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
                dists[i] = 0.0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
                reseeded += 1;
            }
        }

        // Update: a mean replaces the centroid only if it does not raise that cluster's error.
        let mut sums = vec![0.0f64; k * dim];
        for (p, &a) in points.chunks_exact(dim).zip(&assignments) {
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut old_err = vec![0.0f64; k];
        let mut new_err = vec![0.0f64; k];
        let means: Vec<f32> = sums
            .chunks_exact(dim)
            .zip(&counts)
            .flat_map(|(s, &cnt)| {
                s.iter().map(move |v| {
                    if cnt > 0 {
                        (v / cnt as f64) as f32
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        for (p, &a) in points.chunks_exact(dim).zip(&assignments) {
            old_err[a] += sq_dist(p, &centroids[a * dim..(a + 1) * dim]);
            new_err[a] += sq_dist(p, &means[a * dim..(a + 1) * dim]);
        }
        for c in 0..k {
            if counts[c] > 0 && new_err[c] <= old_err[c] {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&means[c * dim..(c + 1) * dim]);
            }
        }

        let obj = objective(points, dim, &centroids, &assignments);
        if obj > prev_obj {
            // Rounding noise at convergence; keep the previous state.
            (centroids, assignments) = prev_state;
            break;
        }
        trace.push(obj);
        if prev_obj == 0.0 || (prev_obj - obj) / prev_obj < cfg.tol {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        objective_trace: trace,
        reseeded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    #[test]
    fn exactly_k_distinct_points_are_fixed() {
        let pts: Vec<f32> = (0..8)
            .flat_map(|i| [i as f32, (i * i) as f32 * 0.5])
            .collect();
        let res = kmeans(&pts, 2, &KMeansConfig::new(8, 3)).unwrap();
        assert_eq!(res.objective(), 0.0);
        let mut got: Vec<(u32, u32)> = res
            .centroids
            .chunks(2)
            .map(|c| (c[0].to_bits(), c[1].to_bits()))
            .collect();
        let mut want: Vec<(u32, u32)> = pts
            .chunks(2)
            .map(|c| (c[0].to_bits(), c[1].to_bits()))
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn recovers_blob_means() {
        let means = [[-3.0f32, -3.0], [3.0, -3.0], [-3.0, 3.0], [3.0, 3.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0f32, 0.1).unwrap();
        let mut pts = Vec::new();
        for i in 0..200 {
            let m = means[i % 4];
            pts.push(m[0] + noise.sample(&mut rng));
            pts.push(m[1] + noise.sample(&mut rng));
        }
        let res = kmeans(&pts, 2, &KMeansConfig::new(4, 5)).unwrap();
        for m in means {
            let best = res
                .centroids
                .chunks(2)
                .map(|c| sq_dist(c, &m).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.05, "mean {m:?} missed by {best}");
        }
    }

    #[test]
    fn too_few_rows_and_duplicates() {
        assert!(matches!(
            kmeans(&[0.0; 6], 2, &KMeansConfig::new(4, 0)),
            Err(PqError::TooFewRows { rows: 3, k: 4 })
        ));
        assert!(matches!(
            kmeans(&[1.0; 12], 2, &KMeansConfig::new(4, 0)),
            Err(PqError::TooFewDistinct { .. })
        ));
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts: Vec<f32> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let res = kmeans(&pts, 3, &KMeansConfig::new(32, 1)).unwrap();
        assert!(res.objective_trace.len() > 2);
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
    }
}
