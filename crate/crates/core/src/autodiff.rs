//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] records operations on `Array2` values. Point clouds travel as
//! `N x C` matrices with one row per point, so every per-point map is a
//! right-multiplication and never mixes rows.

use std::ops::Deref;

use ndarray::{Array2, Axis, Zip};

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Val<'p, T> {
    Own(Array2<T>),
    Ref(&'p Array2<T>),
}

impl<T> Deref for Val<'_, T> {
    type Target = Array2<T>;
    fn deref(&self) -> &Array2<T> {
        match self {
            Val::Own(a) => a,
            Val::Ref(a) => a,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// column-wise max over rows, with the winning row per column
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    Select(Var, usize, usize),
    Reshape(Var),
}

struct Node<'p, T> {
    value: Val<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Parameters are borrowed for the lifetime `'p`.
pub struct Graph<'p, T> {
    nodes: Vec<Node<'p, T>>,
    track_params: bool,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros shaped like `like` if `v` did not influence the root.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<T> {
        self.grads[v.0].take().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// `track_params` controls whether parameter leaves receive gradients.
    pub fn new(track_params: bool) -> Self {
        Self { nodes: Vec::with_capacity(128), track_params }
    }

    fn push(&mut self, value: Val<'p, T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    pub fn param(&mut self, p: &'p Array2<T>) -> Var {
        let rg = self.track_params;
        self.push(Val::Ref(p), Op::Leaf, rg)
    }

    pub fn input(&mut self, a: Array2<T>, requires_grad: bool) -> Var {
        self.push(Val::Own(a), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, a: Array2<T>) -> Var {
        self.input(a, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Val::Own(y), Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(Val::Own(y), Op::MatMulNT(a, b), rg)
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let y = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(Val::Own(y), Op::AddBias(a, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Val::Own(y), Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Val::Own(y), Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Val::Own(y), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a) * c;
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(T::tanh);
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(T::exp);
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::Exp(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let y = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::LogSoftmaxRows(a), rg)
    }

    /// Max over the row (point) axis: `N x C -> 1 x C`. Ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.ncols();
        let mut arg = vec![0usize; c];
        let mut best = Array2::from_elem((1, c), T::neg_infinity());
        for (i, row) in x.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best[[0, j]] {
                    best[[0, j]] = v;
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Val::Own(best), Op::MaxRows(a, arg), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let y = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let y = Array2::from_elem((1, 1), x.sum() / T::lit(x.len() as f64));
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::MeanAll(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Val::Own(y), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Broadcasts a `1 x C` row to `n x C`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), 1, "repeat_rows expects a single row");
        let y = x.broadcast((n, x.ncols())).expect("broadcast").to_owned();
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::RepeatRows(a), rg)
    }

    pub fn select(&mut self, a: Var, row: usize, col: usize) -> Var {
        let y = Array2::from_elem((1, 1), self.value(a)[[row, col]]);
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::Select(a, row, col), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let flat: Vec<T> = x.iter().copied().collect();
        let y = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count differs");
        let rg = self.rg(a);
        self.push(Val::Own(y), Op::Reshape(a), rg)
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let acc = |v: Var, g: Array2<T>, grads: &mut Vec<Option<Array2<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, gy.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).t().dot(&gy), &mut grads);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.rg(*a) {
                        acc(*a, gy.dot(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, gy.t().dot(self.value(*a)), &mut grads);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.rg(*b) {
                        acc(*b, gy.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, gy, &mut grads);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(*b, gy.clone(), &mut grads);
                    }
                    acc(*a, gy, &mut grads);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        acc(*b, gy.mapv(|v| -v), &mut grads);
                    }
                    acc(*a, gy, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, &gy * self.value(*b), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, &gy * self.value(*a), &mut grads);
                    }
                }
                Op::Scale(a, c) => acc(*a, gy * *c, &mut grads),
                Op::Relu(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                        if x <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    acc(*a, g, &mut grads);
                }
                Op::Tanh(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(&*node.value).for_each(|g, &y| *g *= T::one() - y * y);
                    acc(*a, g, &mut grads);
                }
                Op::Exp(a) => acc(*a, gy * &*node.value, &mut grads),
                Op::SoftmaxRows(a) => {
                    let y = &*node.value;
                    let mut g = &gy * y;
                    let s = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    g -= &(y * &s);
                    acc(*a, g, &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(T::exp);
                    let s = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, gy - &(p * &s), &mut grads);
                }
                Op::MaxRows(a, arg) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    for (j, &i) in arg.iter().enumerate() {
                        g[[i, j]] = gy[[0, j]];
                    }
                    acc(*a, g, &mut grads);
                }
                Op::MeanRows(a) => {
                    let (n, c) = self.value(*a).dim();
                    let g = gy.broadcast((n, c)).expect("broadcast").mapv(|v| v / T::lit(n as f64));
                    acc(*a, g, &mut grads);
                }
                Op::SumAll(a) => {
                    let g = Array2::from_elem(self.value(*a).dim(), gy[[0, 0]]);
                    acc(*a, g, &mut grads);
                }
                Op::MeanAll(a) => {
                    let x = self.value(*a);
                    let g = Array2::from_elem(x.dim(), gy[[0, 0]] / T::lit(x.len() as f64));
                    acc(*a, g, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.rg(p) {
                            acc(p, gy.slice(ndarray::s![.., start..start + w]).to_owned(), &mut grads);
                        }
                        start += w;
                    }
                }
                Op::RepeatRows(a) => acc(*a, gy.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads),
                Op::Select(a, r, c) => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    g[[*r, *c]] = gy[[0, 0]];
                    acc(*a, g, &mut grads);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let flat: Vec<T> = gy.iter().copied().collect();
                    acc(*a, Array2::from_shape_vec(dim, flat).expect("reshape"), &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

pub fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

pub fn log_softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};

    /// Central-difference check of d(root)/d(input) for a graph builder.
    fn check<F>(x: Array2<f64>, build: F)
    where
        F: Fn(&mut Graph<'_, f64>, Var) -> Var,
    {
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new(false);
            let v = g.input(x.clone(), true);
            let r = build(&mut g, v);
            g.scalar(r)
        };
        let mut g = Graph::new(false);
        let v = g.input(x.clone(), true);
        let r = build(&mut g, v);
        let grads = g.backward(r);
        let an = grads.get(v).unwrap().clone();
        let h = 1e-5;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
                assert!((fd - an[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()), "({i},{j}) fd {fd} an {}", an[[i, j]]);
            }
        }
    }

    fn mr_cols(g: &Graph<'_, f64>, v: Var) -> usize {
        g.value(v).len()
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = seeded(1);
        let x = standard_normal::<f64>(&mut rng, 5, 4);
        let w = standard_normal::<f64>(&mut rng, 4, 3);
        let b = standard_normal::<f64>(&mut rng, 1, 3);
        let k = standard_normal::<f64>(&mut rng, 5, 4);
        check(x.clone(), |g, v| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let h = g.matmul(v, w);
            let h = g.add_bias(h, b);
            let h = g.tanh(h);
            let s = g.softmax_rows(h);
            let l = g.log_softmax_rows(h);
            let m = g.mul(s, l);
            g.sum_all(m)
        });
        check(x.clone(), |g, v| {
            let k = g.constant(k.clone());
            let a = g.matmul_nt(v, k);
            let s = g.softmax_rows(a);
            let o = g.matmul(s, v);
            let m = g.max_rows(o);
            let e = g.exp(m);
            let c = g.concat_cols(&[e, m]);
            let r = g.repeat_rows(c, 3);
            let r = g.scale(r, 0.5);
            let mr = g.mean_rows(r);
            let q = g.select(mr, 0, 2);
            let mr = g.reshape(mr, 2, mr_cols(g, mr) / 2);
            let t = g.mean_all(mr);
            g.sub(q, t)
        });
        check(x, |g, v| {
            let sq = g.mul(v, v);
            let r = g.relu(v);
            let a = g.add(sq, r);
            g.mean_all(a)
        });
    }

    #[test]
    fn params_untracked_in_inference_mode() {
        let w = Array2::<f64>::ones((2, 2));
        let mut g = Graph::new(false);
        let p = g.param(&w);
        let x = g.input(Array2::ones((1, 2)), true);
        let y = g.matmul(x, p);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(p).is_none());
        assert_eq!(grads.get(x).unwrap(), &Array2::from_elem((1, 2), 2.0));
    }
}
