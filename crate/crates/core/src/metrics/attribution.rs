//! Saliency-map quality: ablation faithfulness and coherence across diffusion steps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{invalid, shape, DamError, Result};
use crate::igd::SaliencySequence;
use crate::pointcloud::PointCloud;
use crate::Scalar;

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(shape("Spearman needs two equal-length vectors of length >= 2"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(DamError::Numeric("Spearman coefficient undefined for constant input".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Move ablated points onto the cloud centroid.
    #[default]
    Centroid,
    /// Drop ablated points (at least one point is always kept).
    Delete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub fractions: Vec<f64>,
    /// Confidence after ablating the highest-attributed points first.
    pub positive: Vec<f64>,
    /// Confidence after ablating the lowest-attributed points first.
    pub negative: Vec<f64>,
    /// Trapezoidal area of `negative - positive` over the fractions.
    pub area: f64,
    pub class: usize,
}

/// Orders points by decreasing (`descending`) or increasing attribution; ties go to the lower index.
fn ablation_order(psi: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..psi.len()).collect();
    idx.sort_by(|&i, &j| {
        let c = if descending { psi[j].total_cmp(&psi[i]) } else { psi[i].total_cmp(&psi[j]) };
        c.then(i.cmp(&j))
    });
    idx
}

fn ablate<T: Scalar>(x: &PointCloud<T>, removed: &[usize], mode: Ablation) -> Result<PointCloud<T>> {
    match mode {
        Ablation::Centroid => {
            let c = x.centroid();
            let mut pts = x.points().clone();
            for &i in removed {
                pts.row_mut(i).assign(&c);
            }
            PointCloud::new(pts)
        }
        Ablation::Delete => {
            let mut keep = vec![true; x.n_points()];
            for &i in removed {
                keep[i] = false;
            }
            let rows: Vec<usize> = (0..x.n_points()).filter(|&i| keep[i]).collect();
            let pts = Array2::from_shape_fn((rows.len(), x.dim()), |(r, j)| x.points()[[rows[r], j]]);
            PointCloud::new(pts)
        }
    }
}

/// Ablation fractions `0, step, 2 step, ..., j`.
pub fn ablation_fractions(j: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && j > 0.0 && j <= 1.0 + 1e-12) {
        return Err(invalid("need 0 < j <= 1 and a positive step"));
    }
    let k = (j / step).round();
    if ((k * step) - j).abs() > 1e-9 {
        return Err(invalid(format!("j = {j} is not a multiple of the step {step}")));
    }
    Ok((0..=k as usize).map(|i| (i as f64 * step).min(1.0)).collect())
}

/// Area between the confidence curves of the two ablation orders.
///
/// Confidence is the probability of the class predicted on the intact cloud.
/// The area integrates `negative - positive`, so maps whose top-ranked points
/// matter most score high and uninformative maps score near zero.
pub fn faithfulness_area<T: Scalar>(
    model: &Classifier<T>,
    x: &PointCloud<T>,
    psi: &[f64],
    j: f64,
    step: f64,
    mode: Ablation,
) -> Result<FaithfulnessCurve> {
    let n = x.n_points();
    if psi.len() != n {
        return Err(shape(format!("saliency has {} entries for {n} points", psi.len())));
    }
    let fractions = ablation_fractions(j, step)?;
    let class = model.classify(x, None)?.predicted();
    let max_removed = if mode == Ablation::Delete { n - 1 } else { n };
    let arm = |descending: bool| -> Result<Vec<f64>> {
        let order = ablation_order(psi, descending);
        fractions
            .iter()
            .map(|&f| {
                let k = ((f * n as f64).round() as usize).min(max_removed);
                let xa = ablate(x, &order[..k], mode)?;
                Ok(model.classify(&xa, None)?.probabilities[class].as_f64())
            })
            .collect()
    };
    let positive = arm(true)?;
    let negative = arm(false)?;
    let gap: Vec<f64> = negative.iter().zip(&positive).map(|(a, b)| a - b).collect();
    let area = trapezoid(&fractions, &gap);
    Ok(FaithfulnessCurve { fractions, positive, negative, area, class })
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub l_var: f64,
    pub l_d: f64,
    pub l_w: f64,
    /// `None` when no consecutive pair has a defined rank correlation.
    pub l_sc: Option<f64>,
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Stability of a saliency sequence over the emitted steps.
///
/// Identical consecutive maps count as rank correlation 1; a pair where only
/// one map is constant has no defined correlation and is skipped.
pub fn coherence(seq: &SaliencySequence) -> Result<CoherenceReport> {
    let maps: Vec<&[f64]> = seq.maps.iter().map(|m| m.psi.as_slice()).collect();
    let k = maps.len();
    if k < 2 {
        return Err(invalid("coherence needs at least two maps"));
    }
    let l_var = maps.iter().map(|m| variance(m)).sum::<f64>() / k as f64;
    let l_d = maps.windows(2).map(|w| mean_abs_diff(w[1], w[0])).sum::<f64>() / (k - 1) as f64;
    let n = maps[0].len();
    let l_w = (0..k)
        .map(|t| {
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(k - 1);
            let w = (hi - lo + 1) as f64;
            // deviation from the window mean as a mean of differences, exactly 0 for equal maps
            (0..n).map(|i| ((lo..=hi).map(|s| maps[s][i] - maps[t][i]).sum::<f64>() / w).abs()).sum::<f64>() / n as f64
        })
        .sum::<f64>()
        / k as f64;
    let scs: Vec<f64> = maps
        .windows(2)
        .filter_map(|w| if w[0] == w[1] { Some(1.0) } else { spearman(w[0], w[1]).ok() })
        .collect();
    let l_sc = (!scs.is_empty()).then(|| scs.iter().sum::<f64>() / scs.len() as f64);
    Ok(CoherenceReport { l_var, l_d, l_w, l_sc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::igd::{random_sequence, Reduction, SaliencyMap, SaliencyMethod};
    use proptest::prelude::*;

    fn seq(maps: Vec<Vec<f64>>) -> SaliencySequence {
        let k = maps.len();
        let maps = maps.into_iter().enumerate().map(|(i, p)| SaliencyMap::new(p, (k - i) * 10, Reduction::Sum).unwrap()).collect();
        SaliencySequence::new(SaliencyMethod::Igd, 10, maps).unwrap()
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn constant_sequence_coherence() {
        let psi = vec![0.3, -1.0, 2.0, 0.5];
        let r = coherence(&seq(vec![psi.clone(); 5])).unwrap();
        assert_eq!((r.l_d, r.l_w, r.l_sc), (0.0, 0.0, Some(1.0)));
        assert!((r.l_var - variance(&psi)).abs() < 1e-15);
        let flat = coherence(&seq(vec![vec![2.0; 4]; 3])).unwrap();
        assert_eq!((flat.l_d, flat.l_w, flat.l_sc), (0.0, 0.0, Some(1.0)));
        let rev = coherence(&seq(vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]])).unwrap();
        assert_eq!(rev.l_sc, Some(-1.0));
    }

    #[test]
    fn random_sequence_has_low_rank_coherence() {
        let s = random_sequence(2000, 250, 50, 4).unwrap();
        assert!(coherence(&s).unwrap().l_sc.unwrap().abs() < 0.1);
    }

    #[test]
    fn fractions() {
        let f = ablation_fractions(1.0, 0.05).unwrap();
        assert_eq!(f.len(), 21);
        assert_eq!(*f.last().unwrap(), 1.0);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(ablation_fractions(0.5, 0.05).unwrap().len(), 11);
        assert!(ablation_fractions(0.33, 0.05).is_err());
    }

    proptest! {
        #[test]
        fn coherence_bounds(maps in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 2..6)) {
            let r = coherence(&seq(maps)).unwrap();
            prop_assert!(r.l_var >= 0.0 && r.l_d >= 0.0 && r.l_w >= 0.0);
            if let Some(sc) = r.l_sc {
                prop_assert!((-1.0..=1.0).contains(&sc));
            }
        }

        #[test]
        fn constant_sequences_are_exactly_stable(psi in proptest::collection::vec(-5.0f64..5.0, 2..12), k in 2usize..7) {
            let r = coherence(&seq(vec![psi; k])).unwrap();
            prop_assert_eq!((r.l_d, r.l_w, r.l_sc), (0.0, 0.0, Some(1.0)));
        }

        #[test]
        fn ablation_orders_are_reverses_up_to_ties(psi in proptest::collection::vec(-3i32..3, 1..20)) {
            let psi: Vec<f64> = psi.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = psi.iter().map(|v| -v).collect();
            prop_assert_eq!(ablation_order(&psi, true), ablation_order(&neg, false));
        }
    }
}
