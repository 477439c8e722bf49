//! k-means over embedding vectors, plus the brute-force reference search
//! and the adjusted Rand index.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Result of a clustering run.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
}

/// Restarts folded into [`kmeans`]; the best inertia wins.
pub const KMEANS_RESTARTS: u64 = 5;

/// Assignments enumerated by [`exhaustive_min_sse`] are capped at this.
pub const EXHAUSTIVE_CAP: u128 = 2_000_000;

fn check_points(points: &[Vec<f64>], n: usize) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::input("no points to cluster".to_string()));
    }
    if n == 0 {
        return Err(Error::input("cluster count must be >= 1".to_string()));
    }
    if n > points.len() {
        return Err(Error::input(format!(
            "{} clusters requested for {} points",
            n,
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::input("zero-dimensional points".to_string()));
    }
    for p in points {
        if p.len() != dim {
            return Err(Error::shape(format!(
                "point dims disagree: {} vs {}",
                dim,
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite point coordinate".to_string()));
        }
    }
    Ok(dim)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn assign_nearest(centroids: &[Vec<f64>], point: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Global minimum-SSE partition by enumerating every assignment of points
/// to `n` clusters. Ties resolve to the lexicographically lowest
/// assignment vector. Exists to judge [`kmeans`], so it refuses instances
/// past [`EXHAUSTIVE_CAP`].
pub fn exhaustive_min_sse(points: &[Vec<f64>], n: usize) -> Result<(Vec<usize>, f64)> {
    let dim = check_points(points, n)?;
    let count = points.len();
    let total = (n as u128).checked_pow(count as u32).unwrap_or(u128::MAX);
    if total > EXHAUSTIVE_CAP {
        return Err(Error::Capacity(format!(
            "{}^{} assignments exceed the exhaustive search cap",
            n, count
        )));
    }
    let mut assignment = vec![0usize; count];
    let mut best_assignment = assignment.clone();
    let mut best_sse = sse_of(points, &assignment, n, dim);
    loop {
        // Advance base-n, last position least significant, so enumeration
        // is lexicographic over the assignment vector.
        let mut pos = count;
        loop {
            if pos == 0 {
                return Ok((best_assignment, best_sse));
            }
            pos -= 1;
            assignment[pos] += 1;
            if assignment[pos] < n {
                break;
            }
            assignment[pos] = 0;
        }
        let sse = sse_of(points, &assignment, n, dim);
        if sse < best_sse {
            best_sse = sse;
            best_assignment = assignment.clone();
        }
    }
}

fn sse_of(points: &[Vec<f64>], assignment: &[usize], n: usize, dim: usize) -> f64 {
    let mut sums = vec![0.0; n * dim];
    let mut counts = vec![0usize; n];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut sse = 0.0;
    for (p, &a) in points.iter().zip(assignment) {
        let c = counts[a] as f64;
        for (j, v) in p.iter().enumerate() {
            let mean = sums[a * dim + j] / c;
            sse += (v - mean) * (v - mean);
        }
    }
    sse
}

/// Lloyd iterations from a k-means++ seeding. Returns the model and the
/// inertia after each iteration.
pub fn kmeans_single(
    points: &[Vec<f64>],
    n: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<(ClusterModel, Vec<f64>)> {
    let dim = check_points(points, n)?;
    let mut r = rng::stream_rng(seed, "kmeans", 0);

    // k-means++ seeding: first centroid uniform, the rest sampled with
    // probability proportional to squared distance from the chosen set.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n);
    centroids.push(points[r.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < n {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = r.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            r.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; points.len()];
    let mut inertia = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations_run = 0;
    for _ in 0..max_iter {
        iterations_run += 1;
        for (i, p) in points.iter().enumerate() {
            assignment[i] = assign_nearest(&centroids, p);
        }
        let mut counts = vec![0usize; n];
        let mut sums = vec![vec![0.0; dim]; n];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        // An emptied cluster restarts at the point farthest from its
        // current centroid.
        let mut claimed: Vec<usize> = Vec::new();
        for c in 0..n {
            if counts[c] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if claimed.contains(&i) || counts[assignment[i]] <= 1 {
                    continue;
                }
                let d = sq_dist(p, &centroids[assignment[i]]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                claimed.push(i);
                let old = assignment[i];
                counts[old] -= 1;
                for (s, v) in sums[old].iter_mut().zip(&points[i]) {
                    *s -= v;
                }
                assignment[i] = c;
                counts[c] = 1;
                sums[c].copy_from_slice(&points[i]);
            }
        }
        for c in 0..n {
            if counts[c] > 0 {
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        let new_inertia: f64 = points
            .iter()
            .zip(&assignment)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        trace.push(new_inertia);
        if (inertia - new_inertia).abs() <= tol {
            inertia = new_inertia;
            break;
        }
        inertia = new_inertia;
    }
    // Assignments must match the final centroids exactly.
    for (i, p) in points.iter().enumerate() {
        assignment[i] = assign_nearest(&centroids, p);
    }
    let model = ClusterModel { centroids, assignment, inertia, iterations_run };
    Ok((model, trace))
}

/// Best of [`KMEANS_RESTARTS`] seeded runs of [`kmeans_single`].
pub fn kmeans(
    points: &[Vec<f64>],
    n: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for restart in 0..KMEANS_RESTARTS {
        let (model, _) = kmeans_single(points, n, rng::derive(seed, "restart", restart), max_iter, tol)?;
        if best.as_ref().map_or(true, |b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "labelings cover {} and {} items",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::input("empty labelings".to_string()));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let index: f64 = table.iter().map(|&v| comb2(v)).sum();
    let row_sum: f64 = rows.iter().map(|&v| comb2(v)).sum();
    let col_sum: f64 = cols.iter().map(|&v| comb2(v)).sum();
    let total = comb2(a.len() as u64);
    let expected = row_sum * col_sum / total;
    let max_index = 0.5 * (row_sum + col_sum);
    if (max_index - expected).abs() < 1e-12 {
        // Both labelings are trivial; identical structure scores 1.
        return Ok(if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}
