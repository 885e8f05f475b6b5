//! Point-set distances: Chamfer and exact / entropic earth mover's.

use ndarray::Array2;

use crate::error::{invalid, shape, Result};
use crate::pointcloud::PointCloud;
use crate::Scalar;

fn dist<T: Scalar>(a: &Array2<T>, i: usize, b: &Array2<T>, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>().sqrt()
}

fn directed<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    (0..a.nrows())
        .map(|i| (0..b.nrows()).map(|j| dist(a, i, b, j)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.nrows() as f64
}

/// Mean distance from each generated point to its nearest reference point;
/// `symmetric` averages both directions.
pub fn chamfer<T: Scalar>(gen: &PointCloud<T>, reference: &PointCloud<T>, symmetric: bool) -> Result<f64> {
    if gen.dim() != reference.dim() {
        return Err(shape("chamfer distance needs equal point dimensions"));
    }
    let (a, b) = (gen.points(), reference.points());
    let fwd = directed(a, b);
    Ok(if symmetric { 0.5 * (fwd + directed(b, a)) } else { fwd })
}

/// Minimum-cost perfect matching for a square cost matrix (Hungarian method
/// with potentials, `O(n^3)`). Returns `assignment[row] = col`.
pub fn hungarian(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(shape("assignment needs a square cost matrix"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmdResult {
    /// Mean matched distance.
    pub value: f64,
    /// False when the entropic approximation was used.
    pub exact: bool,
}

/// Largest cloud size solved exactly.
pub const EMD_EXACT_LIMIT: usize = 1024;

fn cost_matrix<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| dist(a, i, b, j))
}

/// Earth mover's distance between equal-size clouds: exact assignment up to
/// [`EMD_EXACT_LIMIT`] points, Sinkhorn above it.
pub fn emd<T: Scalar>(gen: &PointCloud<T>, reference: &PointCloud<T>) -> Result<EmdResult> {
    if gen.dim() != reference.dim() {
        return Err(shape("EMD needs equal point dimensions"));
    }
    if gen.n_points() != reference.n_points() {
        return Err(invalid(format!("exact EMD needs equal sizes, got {} and {}", gen.n_points(), reference.n_points())));
    }
    let cost = cost_matrix(gen.points(), reference.points());
    let n = cost.nrows();
    if n <= EMD_EXACT_LIMIT {
        let a = hungarian(&cost)?;
        let value = a.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64;
        Ok(EmdResult { value, exact: true })
    } else {
        Ok(EmdResult { value: sinkhorn(&cost, 0.01, 500), exact: false })
    }
}

/// Entropic optimal transport cost with uniform marginals (log-domain iterations).
pub fn sinkhorn(cost: &Array2<f64>, epsilon_rel: f64, iterations: usize) -> f64 {
    let (n, m) = cost.dim();
    let scale = cost.iter().copied().fold(0.0, f64::max).max(1e-12);
    let eps = epsilon_rel * scale;
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let lse = |it: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = it.collect();
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    for _ in 0..iterations {
        for i in 0..n {
            f[i] = -eps * lse(&mut (0..m).map(|j| (g[j] - cost[[i, j]]) / eps + lb));
        }
        for j in 0..m {
            g[j] = -eps * lse(&mut (0..n).map(|i| (f[i] - cost[[i, j]]) / eps + la));
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = ((f[i] + g[j] - cost[[i, j]]) / eps + la + lb).exp();
            total += p * cost[[i, j]];
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::random_permutation;
    use crate::rng::{seeded, standard_normal};

    fn cloud(seed: u64, n: usize) -> PointCloud<f64> {
        PointCloud::new(standard_normal(&mut seeded(seed), n, 3)).unwrap()
    }

    #[test]
    fn chamfer_cases() {
        let x = cloud(0, 20);
        assert_eq!(chamfer(&x, &x, false).unwrap(), 0.0);
        let p = x.permute(&random_permutation(20, &mut seeded(1))).unwrap();
        assert_eq!(chamfer(&x, &p, true).unwrap(), 0.0);
        let a = PointCloud::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let b = PointCloud::from_rows(&[[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(chamfer(&a, &b, false).unwrap(), 5.0);
    }

    #[test]
    fn emd_two_point_swap() {
        let a = PointCloud::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let b = PointCloud::from_rows(&[[1.1, 0.0], [0.0, 0.2]]).unwrap();
        let c = cost_matrix(a.points(), b.points());
        let best = ((c[[0, 0]] + c[[1, 1]]).min(c[[0, 1]] + c[[1, 0]])) / 2.0;
        assert!((emd(&a, &b).unwrap().value - best).abs() < 1e-15);
        let x = cloud(3, 12);
        assert_eq!(emd(&x, &x).unwrap().value, 0.0);
        assert!(emd(&x, &cloud(3, 11)).is_err());
    }

    #[test]
    fn sinkhorn_close_to_exact() {
        let (a, b) = (cloud(4, 30), cloud(5, 30));
        let exact = emd(&a, &b).unwrap().value;
        let approx = sinkhorn(&cost_matrix(a.points(), b.points()), 0.002, 2000);
        assert!((approx - exact).abs() / exact < 0.05, "{approx} vs {exact}");
    }
}
