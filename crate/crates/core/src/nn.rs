//! Parameter storage, per-point linear layers, and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{invalid, DamError, Result};
use crate::rng::normal_scalar;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> Params<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> &[Array2<T>] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Registers every tensor as a graph leaf, in storage order.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect()
    }

    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Array2<T>> {
        bound.0.iter().zip(&self.tensors).map(|(&v, t)| grads.take_or_zeros(v, t.dim())).collect()
    }

    pub fn snapshot(&self) -> ParamsSnapshot {
        ParamsSnapshot {
            entries: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| TensorSnapshot {
                    name: n.clone(),
                    shape: [t.nrows(), t.ncols()],
                    values: t.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a snapshot with identical names and shapes.
    pub fn load(&mut self, snap: &ParamsSnapshot) -> Result<()> {
        if snap.entries.len() != self.tensors.len() {
            return Err(DamError::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                snap.entries.len(),
                self.tensors.len()
            )));
        }
        for ((e, name), t) in snap.entries.iter().zip(&self.names).zip(self.tensors.iter_mut()) {
            if &e.name != name || e.shape != [t.nrows(), t.ncols()] || e.values.len() != t.len() {
                return Err(DamError::Format(format!("tensor {name} does not match checkpoint entry {}", e.name)));
            }
            *t = Array2::from_shape_vec((e.shape[0], e.shape[1]), e.values.iter().map(|&v| T::lit(v)).collect())
                .map_err(|err| DamError::Format(err.to_string()))?;
        }
        Ok(())
    }
}

/// Graph leaves for a [`Params`] set.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSnapshot {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamsSnapshot {
    pub entries: Vec<TensorSnapshot>,
}

/// Per-point affine map `x W + b` (a width-1 convolution across points).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<T: Scalar>(params: &mut Params<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || T::lit(std * normal_scalar(rng)));
        Self::from_weights(params, name, w)
    }

    pub fn zeros<T: Scalar>(params: &mut Params<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::from_weights(params, name, Array2::zeros((fan_in, fan_out)))
    }

    fn from_weights<T: Scalar>(params: &mut Params<T>, name: &str, w: Array2<T>) -> Self {
        let (fan_in, fan_out) = w.dim();
        let weight = params.add(format!("{name}.weight"), w);
        let bias = params.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, b: &Bound, x: Var) -> Var {
        let h = g.matmul(x, b.var(self.weight));
        g.add_bias(h, b.var(self.bias))
    }
}

/// Exponential decay from `start` to `end` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.start;
        }
        let frac = step as f64 / (total - 1) as f64;
        self.start * (self.end / self.start).powf(frac.min(1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: Option<f64>,
    step: usize,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &Params<T>, clip: Option<f64>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, params: &mut Params<T>, grads: &[Array2<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid("gradient count does not match parameter count"));
        }
        let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(DamError::Numeric("non-finite gradient".into()));
        }
        let factor = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::lit(lr * bc2.sqrt() / bc1);
        let (tb1, tb2, eps, f) = (T::lit(b1), T::lit(b2), T::lit(self.eps * bc2.sqrt()), T::lit(factor));
        for (k, g) in grads.iter().enumerate() {
            let p = &mut params.tensors[k];
            ndarray::Zip::from(p)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * f;
                    *m = tb1 * *m + (T::one() - tb1) * g;
                    *v = tb2 * *v + (T::one() - tb2) * g * g;
                    *p -= step_size * *m / (v.sqrt() + eps);
                });
        }
        Ok(())
    }

    pub fn state(&self) -> AdamState {
        let flat = |xs: &[Array2<T>]| xs.iter().map(|a| a.iter().map(|v| v.as_f64()).collect()).collect();
        AdamState { step: self.step, m: flat(&self.m), v: flat(&self.v) }
    }

    pub fn restore(&mut self, state: &AdamState) -> Result<()> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(DamError::Format("optimizer state does not match model".into()));
        }
        for (dst, src) in self.m.iter_mut().zip(&state.m).chain(self.v.iter_mut().zip(&state.v)) {
            if dst.len() != src.len() {
                return Err(DamError::Format("optimizer moment size mismatch".into()));
            }
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::lit(s);
            }
        }
        self.step = state.step;
        Ok(())
    }
}

/// Mean loss and mean parameter gradient over a batch.
///
/// Samples are evaluated in parallel and reduced in input order so the
/// result does not depend on the thread count.
pub fn batch_gradients<T, S, F>(params: &Params<T>, samples: &[S], f: F) -> Result<(f64, Vec<Array2<T>>)>
where
    T: Scalar,
    S: Sync,
    F: Fn(&S) -> Result<(f64, Vec<Array2<T>>)> + Sync,
{
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let results: Vec<Result<(f64, Vec<Array2<T>>)>> = samples.par_iter().map(&f).collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(DamError::Numeric(format!("loss became {l}")));
        }
        loss += l;
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += gi;
        }
    }
    let scale = T::lit(1.0 / samples.len() as f64);
    for t in &mut total {
        t.mapv_inplace(|v| v * scale);
    }
    Ok((loss / samples.len() as f64, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = Params::<f64>::default();
        let id = params.add("x", Array2::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&params, None);
        for _ in 0..2000 {
            let g = vec![params.get(id).mapv(|v| 2.0 * (v - 1.0))];
            opt.update(&mut params, &g, 0.01).unwrap();
        }
        assert!(params.get(id).iter().all(|&v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = seeded(0);
        let mut a = Params::<f64>::default();
        Linear::new(&mut a, "l", 3, 4, &mut rng);
        let snap = a.snapshot();
        let mut b = Params::<f64>::default();
        Linear::zeros(&mut b, "l", 3, 4);
        b.load(&snap).unwrap();
        assert_eq!(a, b);
        let mut c = Params::<f64>::default();
        Linear::zeros(&mut c, "l", 3, 5);
        assert!(c.load(&snap).is_err());
    }

    #[test]
    fn lr_decay_endpoints() {
        let s = LrSchedule { start: 1e-2, end: 1e-4 };
        assert!((s.at(0, 100) - 1e-2).abs() < 1e-15);
        assert!((s.at(99, 100) - 1e-4).abs() < 1e-15);
        assert!(s.at(50, 100) < 1e-2 && s.at(50, 100) > 1e-4);
    }
}
