//! Generation-quality scores computed from classifier outputs.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

/// Probability floor applied before logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    #[default]
    Diagonal,
    Full,
}

fn moments(set: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(invalid("FID needs at least two latents per set"));
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(shape("latent vectors must share a positive width"));
    }
    let n = set.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| set.iter().map(|v| v[k]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (v[i] - mean[i]) * (v[j] - mean[j]);
            }
        }
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two latent sets.
pub fn fid_latent(gen: &[Vec<f64>], real: &[Vec<f64>], cov: Covariance) -> Result<f64> {
    let (mg, cg) = moments(gen)?;
    let (mr, cr) = moments(real)?;
    if mg.len() != mr.len() {
        return Err(shape("latent widths differ between sets"));
    }
    let mean_term: f64 = mg.iter().zip(&mr).map(|(a, b)| (a - b).powi(2)).sum();
    let trace_term = match cov {
        Covariance::Diagonal => (0..mg.len())
            .map(|k| {
                let (a, b) = (cg[(k, k)], cr[(k, k)]);
                a + b - 2.0 * (a * b).sqrt()
            })
            .sum::<f64>(),
        Covariance::Full => {
            // Tr((Cr^1/2 Cg Cr^1/2)^1/2) equals Tr((Cr Cg)^1/2)
            let rs = psd_sqrt(&cr);
            let inner = &rs * &cg * &rs;
            let inner = (&inner + inner.transpose()) * 0.5;
            let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
            cg.trace() + cr.trace() - 2.0 * cross
        }
    };
    Ok((mean_term + trace_term).max(0.0))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            a * (a / b).ln()
        })
        .sum()
}

/// `exp` of the mean pairwise KL divergence between predictive distributions, `i != j`.
pub fn modified_is(probs: &[Vec<f64>]) -> Result<f64> {
    let n = probs.len();
    if n < 2 {
        return Err(invalid("m-IS needs at least two samples"));
    }
    if probs.iter().any(|p| p.len() != probs[0].len()) {
        return Err(shape("predictive distributions differ in class count"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += kl(&probs[i], &probs[j]);
            }
        }
    }
    Ok((total / (n * (n - 1)) as f64).exp())
}

/// `m_is - (ln fid + ln cd) / 2`
pub fn pcams(m_is: f64, fid: f64, cd: f64) -> Result<f64> {
    if !(fid > 0.0 && cd > 0.0) {
        return Err(invalid("PCAMS needs positive FID and CD; floor them upstream (e.g. at 1e-12)"));
    }
    Ok(m_is - (fid.ln() + cd.ln()) / 2.0)
}

/// Fraction of predictions equal to their targets.
pub fn msr(predicted: &[usize], targets: &[usize]) -> Result<f64> {
    if predicted.len() != targets.len() || predicted.is_empty() {
        return Err(shape("mSR needs aligned, non-empty prediction and target lists"));
    }
    Ok(predicted.iter().zip(targets).filter(|(a, b)| a == b).count() as f64 / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_scalar, seeded};

    #[test]
    fn fid_cases() {
        let set: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        assert!(fid_latent(&set, &set, Covariance::Diagonal).unwrap().abs() < 1e-8);
        assert!(fid_latent(&set, &set, Covariance::Full).unwrap().abs() < 1e-8);
        // unit variances along both axes, means (0,0) and (1,0)
        let g = [vec![1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0], vec![-1.0, 1.0]];
        let scale = (3.0f64 / 4.0).sqrt();
        let g: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let r: Vec<Vec<f64>> = g.iter().map(|v| vec![v[0] + 1.0, v[1]]).collect();
        assert!((fid_latent(&g, &r, Covariance::Diagonal).unwrap() - 1.0).abs() < 1e-12);
        assert!(fid_latent(&set[..1], &set, Covariance::Diagonal).is_err());
    }

    #[test]
    fn full_and_diagonal_agree_on_axis_aligned_data() {
        let mut rng = seeded(3);
        let mk = |rng: &mut _, s: [f64; 3], m: f64| -> Vec<Vec<f64>> {
            (0..4000).map(|_| (0..3).map(|k| m + s[k] * normal_scalar(rng)).collect()).collect()
        };
        let a = mk(&mut rng, [1.0, 2.0, 0.5], 0.0);
        let b = mk(&mut rng, [1.5, 1.0, 0.8], 0.7);
        let d = fid_latent(&a, &b, Covariance::Diagonal).unwrap();
        let f = fid_latent(&a, &b, Covariance::Full).unwrap();
        assert!((d - f).abs() / d < 0.05, "{d} {f}");
    }

    #[test]
    fn m_is_cases() {
        let same = vec![vec![0.2, 0.8]; 5];
        assert!((modified_is(&same).unwrap() - 1.0).abs() < 1e-15);
        let e: f64 = 0.1;
        let p = vec![vec![1.0 - e, e], vec![e, 1.0 - e]];
        let k = (1.0 - e) * ((1.0 - e) / e).ln() + e * (e / (1.0 - e)).ln();
        assert!((modified_is(&p).unwrap() - k.exp()).abs() < 1e-12);
        assert!(modified_is(&p[..1]).is_err());
    }

    #[test]
    fn pcams_cases() {
        assert_eq!(pcams(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((pcams(1.781, 0.009, 0.045).unwrap() - 5.68).abs() <= 0.01);
        assert!((pcams(1.461, 0.014, 0.074).unwrap() - 4.89).abs() <= 0.01);
        assert!(pcams(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn msr_cases() {
        assert_eq!(msr(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(msr(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(msr(&[0], &[]).is_err());
    }
}
