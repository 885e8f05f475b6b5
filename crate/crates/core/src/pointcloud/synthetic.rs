//! Parametric surface families used as a desk-scale labeled dataset.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, PointCloud, Split};
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, normal_scalar, seeded};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Sphere,
    Plane,
    Torus,
    Cone,
    Cylinder,
    Box,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Sphere,
        ShapeFamily::Plane,
        ShapeFamily::Torus,
        ShapeFamily::Cone,
        ShapeFamily::Cylinder,
        ShapeFamily::Box,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Plane => "plane",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Box => "box",
        }
    }
}

/// Sampling recipe for one class.
///
/// `scale` bounds the primary size (radius, half-width, major radius);
/// `aspect` bounds the secondary proportion relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
    pub jitter_sigma: f64,
    pub n_points: usize,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, n_points: usize) -> Self {
        let aspect = match family {
            ShapeFamily::Sphere => (1.0, 1.0),
            ShapeFamily::Plane => (0.6, 1.0),
            ShapeFamily::Torus => (0.2, 0.4),
            ShapeFamily::Cone => (1.2, 2.0),
            ShapeFamily::Cylinder => (0.8, 1.5),
            ShapeFamily::Box => (0.5, 1.0),
        };
        Self { family, scale: (0.5, 1.0), aspect, jitter_sigma: 0.01, n_points }
    }

    /// The first `k` families, in declaration order, with default parameters.
    pub fn toy_set(k: usize, n_points: usize) -> Vec<ShapeSpec> {
        ShapeFamily::ALL.iter().take(k).map(|&f| ShapeSpec::new(f, n_points)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        let (alo, ahi) = self.aspect;
        if !(lo > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
            return Err(invalid(format!("{}: scale range ({lo}, {hi}) must be positive and ordered", self.family.name())));
        }
        if !(alo > 0.0 && ahi >= alo && ahi.is_finite()) {
            return Err(invalid(format!("{}: aspect range ({alo}, {ahi}) must be positive and ordered", self.family.name())));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma < 0.1) {
            return Err(invalid(format!("{}: jitter_sigma {} must lie in [0, 0.1)", self.family.name(), self.jitter_sigma)));
        }
        if self.n_points == 0 {
            return Err(invalid("n_points must be positive"));
        }
        Ok(())
    }
}

/// Parameters actually drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub size: f64,
    pub aspect: f64,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// One raw (unnormalized) surface sample centered at the origin.
pub fn sample_shape<T: Scalar>(spec: &ShapeSpec, rng: &mut impl Rng) -> Result<(PointCloud<T>, ShapeParams)> {
    spec.validate()?;
    let size = uniform(rng, spec.scale);
    let aspect = uniform(rng, spec.aspect);
    let n = spec.n_points;
    let mut pts = Array2::<f64>::zeros((n, 3));
    for i in 0..n {
        let p = match spec.family {
            ShapeFamily::Sphere => {
                let v = [normal_scalar(rng), normal_scalar(rng), normal_scalar(rng)];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                [size * v[0] / norm, size * v[1] / norm, size * v[2] / norm]
            }
            ShapeFamily::Plane => {
                let a = size;
                let b = size * aspect;
                [rng.gen_range(-a..a), rng.gen_range(-b..b), 0.0]
            }
            ShapeFamily::Torus => {
                let major = size;
                let minor = size * aspect;
                // rejection on the area element (R + r cos v)
                loop {
                    let u = rng.gen_range(0.0..2.0 * PI);
                    let v = rng.gen_range(0.0..2.0 * PI);
                    let w: f64 = rng.gen();
                    if w * (major + minor) <= major + minor * v.cos() {
                        let ring = major + minor * v.cos();
                        break [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                    }
                }
            }
            ShapeFamily::Cone => {
                let radius = size;
                let height = size * aspect;
                let s = rng.gen::<f64>().sqrt();
                let u = rng.gen_range(0.0..2.0 * PI);
                let r = radius * s;
                [r * u.cos(), r * u.sin(), height * (0.5 - s)]
            }
            ShapeFamily::Cylinder => {
                let radius = size;
                let height = 2.0 * size * aspect;
                let u = rng.gen_range(0.0..2.0 * PI);
                [radius * u.cos(), radius * u.sin(), rng.gen_range(-height / 2.0..height / 2.0)]
            }
            ShapeFamily::Box => {
                let h = [size, size * aspect, size * (0.5 + 0.5 * aspect)];
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut axis = 0;
                while axis < 2 && pick >= areas[axis] {
                    pick -= areas[axis];
                    axis += 1;
                }
                let mut p = [0.0; 3];
                for (k, pk) in p.iter_mut().enumerate() {
                    *pk = if k == axis {
                        if rng.gen::<bool>() {
                            h[k]
                        } else {
                            -h[k]
                        }
                    } else {
                        rng.gen_range(-h[k]..h[k])
                    };
                }
                p
            }
        };
        for k in 0..3 {
            pts[[i, k]] = p[k] + spec.jitter_sigma * normal_scalar(rng);
        }
    }
    let cloud = PointCloud::new(pts.mapv(T::lit))?;
    Ok((cloud, ShapeParams { size, aspect }))
}

/// `per_class` normalized samples for each spec; label `k` is `specs[k]`.
///
/// Each sample draws from its own stream derived from `(seed, class, index)`.
pub fn generate_synthetic_dataset<T: Scalar>(
    specs: &[ShapeSpec],
    per_class: usize,
    seed: u64,
    split: Split,
) -> Result<LabeledDataset<T>> {
    if specs.is_empty() {
        return Err(invalid("at least one shape spec is required"));
    }
    if per_class == 0 {
        return Err(invalid("per_class must be at least 1"));
    }
    let n = specs[0].n_points;
    for s in specs {
        s.validate()?;
        if s.n_points != n {
            return Err(invalid("all shape specs must share n_points"));
        }
    }
    let mut clouds = Vec::with_capacity(specs.len() * per_class);
    let mut labels = Vec::with_capacity(specs.len() * per_class);
    for (label, spec) in specs.iter().enumerate() {
        for i in 0..per_class {
            let stream = (label as u64) << 32 | i as u64;
            let mut rng = seeded(derive_seed(seed, stream));
            let (raw, _) = sample_shape::<T>(spec, &mut rng)?;
            clouds.push(raw.normalize_unit_sphere()?);
            labels.push(label);
        }
    }
    let names = specs.iter().map(|s| s.family.name().to_string()).collect();
    LabeledDataset::new(clouds, labels, names, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_and_determinism() {
        let specs = vec![ShapeSpec::new(ShapeFamily::Sphere, 64), ShapeSpec::new(ShapeFamily::Box, 64)];
        let a = generate_synthetic_dataset::<f64>(&specs, 10, 7, Split::Train).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.class_counts(), vec![10, 10]);
        assert!(a.clouds().iter().all(|c| c.n_points() == 64));
        let b = generate_synthetic_dataset::<f64>(&specs, 10, 7, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset::<f64>(&specs, 10, 8, Split::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn normalized_members() {
        let specs = ShapeSpec::toy_set(6, 128);
        let ds = generate_synthetic_dataset::<f64>(&specs, 3, 1, Split::Test).unwrap();
        for c in ds.clouds() {
            assert!(c.centroid().iter().all(|v| v.abs() <= 1e-6));
            assert!((c.max_norm() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn sphere_radius_band() {
        let spec = ShapeSpec { jitter_sigma: 0.02, ..ShapeSpec::new(ShapeFamily::Sphere, 2000) };
        let mut rng = seeded(11);
        let (cloud, params) = sample_shape::<f64>(&spec, &mut rng).unwrap();
        let (lo, hi) = (params.size - 3.0 * spec.jitter_sigma, params.size + 3.0 * spec.jitter_sigma);
        let inside = cloud
            .points()
            .rows()
            .into_iter()
            .filter(|r| {
                let n = r.dot(r).sqrt();
                n >= lo && n <= hi
            })
            .count();
        assert!(inside as f64 >= 0.99 * 2000.0, "{inside} of 2000 inside band");
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = ShapeSpec::new(ShapeFamily::Cone, 16);
        s.scale = (-1.0, 1.0);
        let err = generate_synthetic_dataset::<f64>(&[s], 2, 0, Split::Train).unwrap_err();
        assert!(err.to_string().contains("scale"));
        let mut s = ShapeSpec::new(ShapeFamily::Cone, 16);
        s.jitter_sigma = 0.2;
        assert!(s.validate().is_err());
        assert!(generate_synthetic_dataset::<f64>(&[], 2, 0, Split::Train).is_err());
        assert!(generate_synthetic_dataset::<f64>(&ShapeSpec::toy_set(2, 8), 0, 0, Split::Train).is_err());
    }
}
