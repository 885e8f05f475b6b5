//! Point-cloud value types, normalization, resampling and file formats.

mod dataset;
pub mod io;
mod synthetic;

pub use dataset::{LabeledDataset, Split};
pub use synthetic::{generate_synthetic_dataset, sample_shape, ShapeFamily, ShapeParams, ShapeSpec};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{invalid, shape, DamError, Result};
use crate::rng::seeded;
use crate::Scalar;

/// An ordered array of `N` points in `D` coordinates.
///
/// Rows are points. Construction rejects non-finite coordinates, `N == 0`
/// and `D < 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Array2<T>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Array2<T>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if d < 2 {
            return Err(invalid(format!("point dimension must be >= 2, got {d}")));
        }
        if let Some((idx, _)) = points.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DamError::NonFinite(format!(
                "coordinate {} of point {} is not finite",
                idx % d,
                idx / d
            )));
        }
        Ok(Self { points })
    }

    pub fn from_rows<const D: usize>(rows: &[[T; D]]) -> Result<Self> {
        let flat: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let points = Array2::from_shape_vec((rows.len(), D), flat).map_err(|e| shape(e.to_string()))?;
        Self::new(points)
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<T> {
        &self.points
    }

    pub fn into_points(self) -> Array2<T> {
        self.points
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, T> {
        self.points.row(i)
    }

    pub fn centroid(&self) -> Array1<T> {
        self.points.mean_axis(Axis(0)).expect("non-empty cloud")
    }

    pub fn max_norm(&self) -> T {
        self.points
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(T::zero(), T::max)
    }

    /// Centers on the centroid and scales so the farthest point has norm 1.
    ///
    /// A degenerate cloud (all points coincide) maps to all zeros.
    pub fn normalize_unit_sphere(&self) -> Result<Self> {
        let centroid = self.centroid();
        let mut centered = &self.points - &centroid.insert_axis(Axis(0));
        let radius = centered
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(T::zero(), T::max);
        if radius > T::zero() {
            centered.mapv_inplace(|v| v / radius);
        } else {
            centered.fill(T::zero());
        }
        Self::new(centered)
    }

    /// `out[i] = self[perm[i]]`. `perm` must be a bijection on `0..N`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_points())?;
        Ok(Self { points: self.points.select(Axis(0), perm) })
    }

    /// Draws `n_target` points: without replacement when `n_target <= N`,
    /// with replacement otherwise.
    pub fn resample_fixed(&self, n_target: usize, seed: u64) -> Result<Self> {
        if n_target == 0 {
            return Err(invalid("n_target must be positive"));
        }
        let n = self.n_points();
        let mut rng = seeded(seed);
        let idx: Vec<usize> = if n_target <= n {
            sample_indices(&mut rng, n, n_target).into_vec()
        } else {
            (0..n_target).map(|_| rng.gen_range(0..n)).collect()
        };
        Ok(Self { points: self.points.select(Axis(0), &idx) })
    }

    pub fn map_points(&self, f: impl Fn(&Array2<T>) -> Array2<T>) -> Result<Self> {
        Self::new(f(&self.points))
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud { points: self.points.mapv(|v| U::lit(v.as_f64())) }
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(invalid(format!("permutation has length {}, expected {n}", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(invalid("permutation is not a bijection"));
        }
    }
    Ok(())
}

/// Inverse of a permutation produced for [`PointCloud::permute`].
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Uniformly random permutation of `0..n`.
pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cloud(rows: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::from_rows(rows).unwrap()
    }

    #[test]
    fn rejects_nan_and_empty() {
        assert!(PointCloud::<f64>::new(Array2::zeros((0, 3))).is_err());
        assert!(PointCloud::<f64>::new(Array2::zeros((3, 1))).is_err());
        let mut p = Array2::<f64>::zeros((2, 3));
        p[[1, 2]] = f64::NAN;
        assert!(matches!(PointCloud::new(p), Err(DamError::NonFinite(_))));
    }

    #[test]
    fn normalize_contract() {
        let c = cloud(&[[1.0, 2.0, 3.0], [4.0, -1.0, 0.5], [0.0, 0.0, 7.0], [2.0, 2.0, 2.0]]);
        let n = c.normalize_unit_sphere().unwrap();
        assert!(n.centroid().iter().all(|v| v.abs() <= 1e-6));
        assert_abs_diff_eq!(n.max_norm(), 1.0, epsilon = 1e-6);

        let again = n.normalize_unit_sphere().unwrap();
        assert_abs_diff_eq!(again.points(), n.points(), epsilon = 1e-6);

        let shifted = c.map_points(|p| p + 5.0).unwrap().normalize_unit_sphere().unwrap();
        assert_abs_diff_eq!(shifted.points(), n.points(), epsilon = 1e-6);
    }

    #[test]
    fn antipodal_pair_unchanged() {
        let c = cloud(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let n = c.normalize_unit_sphere().unwrap();
        assert_abs_diff_eq!(n.points(), c.points(), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_single_point_to_zero() {
        let c = cloud(&[[3.0, 4.0, 5.0]]);
        let n = c.normalize_unit_sphere().unwrap();
        assert!(n.points().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permute_contract() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(c.permute(&[0, 1, 2]).unwrap(), c);
        let perm = [2, 0, 1];
        let p = c.permute(&perm).unwrap();
        assert_eq!(p.point(0)[0], 2.0);
        assert_eq!(p.permute(&invert_permutation(&perm)).unwrap(), c);
        assert!(c.permute(&[0, 0, 1]).is_err());
        assert!(c.permute(&[0, 1]).is_err());
        assert!(c.permute(&[0, 1, 3]).is_err());
    }

    #[test]
    fn resample_contract() {
        let base = Array2::from_shape_fn((1024, 3), |(i, j)| (i * 3 + j) as f64);
        let c = PointCloud::new(base).unwrap();
        let r = c.resample_fixed(1024, 3).unwrap();
        let mut firsts: Vec<i64> = r.points().column(0).iter().map(|&v| v as i64).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..1024).map(|i| i * 3).collect::<Vec<_>>());
        assert_eq!(r, c.resample_fixed(1024, 3).unwrap());

        let small = PointCloud::new(Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64)).unwrap();
        let up = small.resample_fixed(20, 9).unwrap();
        assert_eq!(up.n_points(), 20);
        for row in up.points().rows() {
            let i = row[0] as usize / 3;
            assert_eq!(row, small.point(i));
        }
        assert!(small.resample_fixed(0, 1).is_err());
    }
}
