//! Attribution along the diffusion path (IGD), linear-path integrated
//! gradients, and a random baseline, as per-point saliency maps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::{ActivationMode, Classifier, NeuronSelector};
use crate::error::{invalid, shape, DamError, Result};
use crate::rng::{derive_seed, seeded, standard_normal};
use crate::sampler::DiffusionTrajectory;
use crate::Scalar;

/// How the `N x D` elementwise attribution becomes one value per point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    AbsSum,
    Norm,
}

impl Reduction {
    pub fn apply<T: Scalar>(self, a: &Array2<T>) -> Vec<f64> {
        a.outer_iter()
            .map(|row| match self {
                Reduction::Sum => row.iter().map(|v| v.as_f64()).sum(),
                Reduction::AbsSum => row.iter().map(|v| v.as_f64().abs()).sum(),
                Reduction::Norm => row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt(),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMethod {
    Igd,
    Ig,
    Random,
}

impl std::str::FromStr for SaliencyMethod {
    type Err = DamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "igd" => Ok(SaliencyMethod::Igd),
            "ig" => Ok(SaliencyMethod::Ig),
            "random" | "rdm" => Ok(SaliencyMethod::Random),
            other => Err(invalid(format!("unknown saliency method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub psi: Vec<f64>,
    /// Noise level the map describes.
    pub t_emitted: usize,
    pub reduction: Reduction,
}

impl SaliencyMap {
    pub fn new(psi: Vec<f64>, t_emitted: usize, reduction: Reduction) -> Result<Self> {
        if psi.is_empty() {
            return Err(invalid("saliency map needs at least one point"));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(DamError::NonFinite("saliency value is not finite".into()));
        }
        Ok(Self { psi, t_emitted, reduction })
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }
}

/// Maps ordered by strictly decreasing `t_emitted`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySequence {
    pub method: SaliencyMethod,
    pub stride: usize,
    pub maps: Vec<SaliencyMap>,
}

impl SaliencySequence {
    pub fn new(method: SaliencyMethod, stride: usize, maps: Vec<SaliencyMap>) -> Result<Self> {
        if maps.windows(2).any(|w| w[1].t_emitted >= w[0].t_emitted) {
            return Err(invalid("saliency maps must have strictly decreasing time"));
        }
        if maps.windows(2).any(|w| w[1].len() != w[0].len()) {
            return Err(shape("saliency maps differ in point count"));
        }
        Ok(Self { method, stride, maps })
    }

    pub fn last(&self) -> Option<&SaliencyMap> {
        self.maps.last()
    }
}

/// Levels `t < T` with `(T - t) % stride == 0`, plus `t = 0`, in decreasing order.
pub fn emission_levels(steps: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(invalid("emit stride must be positive"));
    }
    if stride > steps {
        return Err(invalid(format!("emit stride {stride} exceeds the {steps} diffusion steps")));
    }
    let mut out: Vec<usize> = (0..steps).rev().filter(|t| (steps - t).is_multiple_of(stride)).collect();
    if out.last() != Some(&0) {
        out.push(0);
    }
    Ok(out)
}

/// Running-sum IGD from the gradients stored in the trajectory.
pub fn igd_attribution<T: Scalar>(traj: &DiffusionTrajectory<T>, stride: usize, reduction: Reduction) -> Result<SaliencySequence> {
    igd_from_gradients(traj, &traj.grads, stride, reduction)
}

/// IGD with gradients recomputed under another activation mode.
pub fn igd_attribution_recomputed<T: Scalar>(
    model: &Classifier<T>,
    traj: &DiffusionTrajectory<T>,
    target: &NeuronSelector,
    mode: ActivationMode,
    stride: usize,
    reduction: Reduction,
) -> Result<SaliencySequence> {
    if !traj.is_full() {
        return Err(invalid("recomputing gradients needs every trajectory state"));
    }
    let grads = traj.states[..traj.steps]
        .iter()
        .map(|s| model.activation_gradient(s, None, target, mode).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    igd_from_gradients(traj, &grads, stride, reduction)
}

fn igd_from_gradients<T: Scalar>(traj: &DiffusionTrajectory<T>, grads: &[Array2<T>], stride: usize, reduction: Reduction) -> Result<SaliencySequence> {
    let steps = traj.steps;
    if steps == 0 || grads.len() != steps || traj.states.is_empty() {
        return Err(invalid("trajectory is empty or its gradients are incomplete"));
    }
    let levels = emission_levels(steps, stride)?;
    let x_t_start = traj.initial_state();
    let mut acc = Array2::<T>::zeros(x_t_start.dim());
    let mut maps = Vec::with_capacity(levels.len());
    let mut next = levels.iter().peekable();
    // after adding grads[k] (level T - k) the sum covers levels t+1..=T with t = T - k - 1
    for (k, g) in grads.iter().enumerate() {
        if g.dim() != acc.dim() {
            return Err(shape("gradient shape differs from the state shape"));
        }
        acc += g;
        let t = steps - k - 1;
        if next.peek() == Some(&&t) {
            next.next();
            let x_t = traj.state_at_level(t).ok_or_else(|| invalid(format!("trajectory does not keep the state at level {t}")))?;
            let inv = T::lit(1.0 / (steps - t) as f64);
            let mut contrib = x_t - x_t_start;
            contrib.zip_mut_with(&acc, |c, &a| *c = *c * a * inv);
            maps.push(SaliencyMap::new(reduction.apply(&contrib), t, reduction)?);
        }
    }
    SaliencySequence::new(SaliencyMethod::Igd, stride, maps)
}

/// Midpoint-rule integral of `grad` along `baseline + a (x - baseline)`, times `x - baseline`.
pub fn integrate_linear_path<T: Scalar>(
    x: &Array2<T>,
    baseline: &Array2<T>,
    steps: usize,
    mut grad: impl FnMut(&Array2<T>) -> Result<Array2<T>>,
) -> Result<Array2<T>> {
    if steps == 0 {
        return Err(invalid("integration needs at least one step"));
    }
    if x.dim() != baseline.dim() {
        return Err(shape("input and baseline shapes differ"));
    }
    let diff = x - baseline;
    let mut acc = Array2::<T>::zeros(x.dim());
    for k in 0..steps {
        let alpha = T::lit((k as f64 + 0.5) / steps as f64);
        let mut p = baseline.clone();
        p.zip_mut_with(&diff, |v, &d| *v += alpha * d);
        acc += &grad(&p)?;
    }
    let inv = T::lit(1.0 / steps as f64);
    acc.zip_mut_with(&diff, |a, &d| *a = *a * inv * d);
    Ok(acc)
}

/// Elementwise (un-reduced) linear-path integrated gradients of a classifier target.
pub fn linear_ig_elementwise<T: Scalar>(
    model: &Classifier<T>,
    x: &Array2<T>,
    baseline: &Array2<T>,
    steps: usize,
    target: &NeuronSelector,
    mode: ActivationMode,
) -> Result<Array2<T>> {
    integrate_linear_path(x, baseline, steps, |p| model.activation_gradient(p, None, target, mode).map(|(_, g)| g))
}

#[allow(clippy::too_many_arguments)]
pub fn linear_ig<T: Scalar>(
    model: &Classifier<T>,
    x: &Array2<T>,
    baseline: &Array2<T>,
    steps: usize,
    target: &NeuronSelector,
    mode: ActivationMode,
    reduction: Reduction,
    t_emitted: usize,
) -> Result<SaliencyMap> {
    let e = linear_ig_elementwise(model, x, baseline, steps, target, mode)?;
    SaliencyMap::new(reduction.apply(&e), t_emitted, reduction)
}

/// Linear IG from `x_T` to each state IGD would emit.
pub fn linear_ig_over_trajectory<T: Scalar>(
    model: &Classifier<T>,
    traj: &DiffusionTrajectory<T>,
    stride: usize,
    steps: usize,
    target: &NeuronSelector,
    mode: ActivationMode,
    reduction: Reduction,
) -> Result<SaliencySequence> {
    let baseline = traj.initial_state();
    let maps = emission_levels(traj.steps, stride)?
        .into_iter()
        .map(|t| {
            let x_t = traj.state_at_level(t).ok_or_else(|| invalid(format!("trajectory does not keep the state at level {t}")))?;
            linear_ig(model, x_t, baseline, steps, target, mode, reduction, t)
        })
        .collect::<Result<Vec<_>>>()?;
    SaliencySequence::new(SaliencyMethod::Ig, stride, maps)
}

/// I.i.d. standard-normal attributions.
pub fn random_attribution(n: usize, seed: u64, t_emitted: usize) -> Result<SaliencyMap> {
    if n == 0 {
        return Err(invalid("random attribution needs N >= 1"));
    }
    let v = standard_normal::<f64>(&mut seeded(seed), n, 1);
    SaliencyMap::new(v.into_raw_vec_and_offset().0, t_emitted, Reduction::Sum)
}

pub fn random_sequence(n: usize, steps: usize, stride: usize, seed: u64) -> Result<SaliencySequence> {
    let maps = emission_levels(steps, stride)?
        .into_iter()
        .map(|t| random_attribution(n, derive_seed(seed, t as u64), t))
        .collect::<Result<Vec<_>>>()?;
    SaliencySequence::new(SaliencyMethod::Random, stride, maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::random_permutation;
    use crate::sampler::tests::tiny_models;
    use crate::sampler::{dam_sample, GuidanceConfig, Models};

    fn synthetic_traj(steps: usize, n: usize, seed: u64, zero_grads: bool) -> DiffusionTrajectory<f64> {
        let mut rng = seeded(seed);
        let states: Vec<Array2<f64>> = (0..=steps).map(|_| standard_normal(&mut rng, n, 3)).collect();
        let grads = (0..steps)
            .map(|_| if zero_grads { Array2::zeros((n, 3)) } else { standard_normal(&mut rng, n, 3) })
            .collect();
        DiffusionTrajectory { steps, label: 0, levels: (0..=steps).rev().collect(), states, grads, activations: vec![0.0; steps] }
    }

    #[test]
    fn emission_cadence() {
        assert_eq!(emission_levels(250, 50).unwrap(), vec![200, 150, 100, 50, 0]);
        assert_eq!(emission_levels(10, 3).unwrap(), vec![7, 4, 1, 0]);
        assert!(emission_levels(10, 11).is_err());
        let tr = synthetic_traj(250, 4, 0, false);
        assert_eq!(igd_attribution(&tr, 50, Reduction::Sum).unwrap().maps.len(), 5);
    }

    #[test]
    fn zero_gradients_give_zero_maps() {
        let tr = synthetic_traj(20, 6, 1, true);
        let seq = igd_attribution(&tr, 5, Reduction::Sum).unwrap();
        assert!(seq.maps.iter().all(|m| m.psi.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_step_formula() {
        let tr = synthetic_traj(1, 5, 2, false);
        let seq = igd_attribution(&tr, 1, Reduction::Sum).unwrap();
        assert_eq!(seq.maps.len(), 1);
        let want = Reduction::Sum.apply(&((&tr.states[1] - &tr.states[0]) * &tr.grads[0]));
        assert_eq!(seq.maps[0].psi, want);
    }

    #[test]
    fn running_sum_matches_scratch() {
        let tr = synthetic_traj(30, 7, 3, false);
        let seq = igd_attribution(&tr, 4, Reduction::Sum).unwrap();
        for m in &seq.maps {
            let t = m.t_emitted;
            let mut sum = Array2::<f64>::zeros((7, 3));
            for s in t + 1..=30 {
                sum += tr.grad_at_level(s).unwrap();
            }
            let want = Reduction::Sum.apply(&((tr.state_at_level(t).unwrap() - &tr.states[0]) * &sum / (30 - t) as f64));
            assert!(m.psi.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-10));
        }
    }

    #[test]
    fn igd_equivariant_under_point_permutation() {
        let tr = synthetic_traj(12, 9, 4, false);
        let perm = random_permutation(9, &mut seeded(5));
        let p = |a: &Array2<f64>| Array2::from_shape_fn((9, 3), |(i, j)| a[[perm[i], j]]);
        let tp = DiffusionTrajectory { states: tr.states.iter().map(p).collect(), grads: tr.grads.iter().map(p).collect(), ..tr.clone() };
        let a = igd_attribution(&tr, 3, Reduction::Sum).unwrap();
        let b = igd_attribution(&tp, 3, Reduction::Sum).unwrap();
        for (ma, mb) in a.maps.iter().zip(&b.maps) {
            assert!((0..9).all(|i| (ma.psi[perm[i]] - mb.psi[i]).abs() <= 1e-12));
        }
    }

    #[test]
    fn linear_function_oracle() {
        let w = standard_normal::<f64>(&mut seeded(8), 6, 3);
        let x = standard_normal::<f64>(&mut seeded(1), 6, 3);
        let base = standard_normal::<f64>(&mut seeded(2), 6, 3);
        let ig = integrate_linear_path(&x, &base, 3, |_| Ok(w.clone())).unwrap();
        let want = &w * &(&x - &base);
        assert!((&ig - &want).iter().all(|d| d.abs() <= 1e-12));
        let tr = DiffusionTrajectory { steps: 1, label: 0, levels: vec![1, 0], states: vec![base.clone(), x.clone()], grads: vec![w.clone()], activations: vec![0.0] };
        let igd = igd_attribution(&tr, 1, Reduction::Sum).unwrap();
        assert_eq!(igd.maps[0].psi, Reduction::Sum.apply(&want));
    }

    #[test]
    fn ig_zero_at_baseline_and_complete() {
        let (_, f, _) = tiny_models(3);
        let x = standard_normal::<f64>(&mut seeded(1), 6, 3);
        let sel = NeuronSelector::Class { class: 1 };
        let ig = linear_ig_elementwise(&f, &x, &x, 8, &sel, ActivationMode::LogSoftmax).unwrap();
        assert!(ig.iter().all(|&v| v == 0.0));
        let base = Array2::zeros((6, 3));
        let ig = linear_ig_elementwise(&f, &x, &base, 256, &sel, ActivationMode::LogSoftmax).unwrap();
        let fx = f.activation_gradient(&x, None, &sel, ActivationMode::LogSoftmax).unwrap().0;
        let fb = f.activation_gradient(&base, None, &sel, ActivationMode::LogSoftmax).unwrap().0;
        assert!((ig.sum() - (fx - fb)).abs() <= 0.01 * (fx - fb).abs().max(1e-3));
    }

    #[test]
    fn random_maps() {
        let a = random_attribution(10_000, 3, 0).unwrap();
        assert_eq!(a, random_attribution(10_000, 3, 0).unwrap());
        let mean = a.psi.iter().sum::<f64>() / 1e4;
        let var = a.psi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05);
        let b = random_attribution(10_000, 4, 0).unwrap();
        assert!(crate::metrics::spearman(&a.psi, &b.psi).unwrap().abs() < 0.1);
    }

    #[test]
    fn sequences_from_real_trajectory() {
        let (dm, f, fp) = tiny_models(7);
        let models = Models { diffusion: &dm, classifier: &f, noised: Some(&fp) };
        let cfg = GuidanceConfig::for_class(1, 10, 2);
        let s = dam_sample(&models, 1, &cfg).unwrap();
        let igd = igd_attribution(&s.trajectory, 4, Reduction::Sum).unwrap();
        let ig = linear_ig_over_trajectory(&f, &s.trajectory, 4, 16, &cfg.target, cfg.mode, Reduction::Sum).unwrap();
        assert_eq!(igd.maps.len(), ig.maps.len());
        let re = igd_attribution_recomputed(&f, &s.trajectory, &cfg.target, cfg.mode, 4, Reduction::Sum).unwrap();
        assert_eq!(re, igd);
    }
}
