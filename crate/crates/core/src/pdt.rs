//! Point Diffusion Transformer: a noise predictor built only from per-point
//! linear maps and self-attention over the point axis.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::classifier::TimeCode;
use crate::error::{invalid, shape, Result};
use crate::nn::{Bound, Linear, Params};
use crate::rng::seeded;
use crate::Scalar;

/// Where a decoder attention input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// The (projected) augmented input `x*`.
    RawX,
    /// The encoder output `PDE(x*)`.
    Encoded,
    /// `x* + PDE(x*)`.
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionInputMode {
    pub query: AttentionSource,
    pub key: AttentionSource,
    pub value: AttentionSource,
}

impl Default for AttentionInputMode {
    fn default() -> Self {
        Self::pdt()
    }
}

impl AttentionInputMode {
    /// Query and key from the residual, value from the raw input.
    pub fn pdt() -> Self {
        use AttentionSource::*;
        Self { query: Residual, key: Residual, value: RawX }
    }

    pub fn all_encoded() -> Self {
        use AttentionSource::*;
        Self { query: Encoded, key: Encoded, value: Encoded }
    }

    /// The four alternative decoder wirings plus the default one.
    pub fn studied() -> [(&'static str, Self); 5] {
        use AttentionSource::*;
        [
            ("enc-enc-enc", Self::all_encoded()),
            ("enc-raw-raw", Self { query: Encoded, key: RawX, value: RawX }),
            ("raw-enc-enc", Self { query: RawX, key: Encoded, value: Encoded }),
            ("raw-raw-enc", Self { query: RawX, key: RawX, value: Encoded }),
            ("pdt", Self::pdt()),
        ]
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::studied()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| invalid(format!("unknown attention mode {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdtConfig {
    pub point_dim: usize,
    /// `D_p`, width of the latent shape code.
    pub latent_dim: usize,
    /// `D_l`, one-hot label width.
    pub n_classes: usize,
    pub time_code_len: usize,
    /// Model widths of the stacked encoder attention blocks.
    pub widths: Vec<usize>,
    pub n_heads: usize,
    pub attention: AttentionInputMode,
    /// Start with a zero output projection so the initial prediction is 0.
    pub zero_output: bool,
}

impl PdtConfig {
    pub fn new(point_dim: usize, latent_dim: usize, n_classes: usize, time_code_len: usize) -> Self {
        Self {
            point_dim,
            latent_dim,
            n_classes,
            time_code_len,
            widths: vec![64, 128, 256],
            n_heads: 3,
            attention: AttentionInputMode::pdt(),
            zero_output: true,
        }
    }

    pub fn augmented_width(&self) -> usize {
        self.point_dim + self.latent_dim + self.n_classes + self.time_code_len
    }

    /// Per-head channel count for a block of width `w`.
    pub fn head_dim(&self, w: usize) -> usize {
        w.div_ceil(self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_dim < 1 || self.n_classes < 1 {
            return Err(invalid("PDT needs point_dim >= 1 and n_classes >= 1"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.n_heads == 0 {
            return Err(invalid("PDT needs non-empty positive widths and at least one head"));
        }
        Ok(())
    }
}

/// Per-point concatenation `[x_t | z | one-hot label | time code]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedInput<T> {
    pub x_star: Array2<T>,
    pub point_dim: usize,
}

pub fn build_augmented_input<T: Scalar>(
    x_t: &Array2<T>,
    z: &Array1<T>,
    label: usize,
    n_classes: usize,
    time: &TimeCode,
) -> Result<AugmentedInput<T>> {
    if label >= n_classes {
        return Err(invalid(format!("label {label} out of range for {n_classes} classes")));
    }
    let (n, d) = x_t.dim();
    let mut shared = Vec::with_capacity(z.len() + n_classes + time.len());
    shared.extend(z.iter().copied());
    shared.extend((0..n_classes).map(|c| if c == label { T::one() } else { T::zero() }));
    shared.extend(time.bits.iter().map(|&b| T::lit(b as f64)));
    let width = d + shared.len();
    let mut x_star = Array2::zeros((n, width));
    for (mut row, src) in x_star.outer_iter_mut().zip(x_t.outer_iter()) {
        for j in 0..d {
            row[j] = src[j];
        }
        for (j, &v) in shared.iter().enumerate() {
            row[d + j] = v;
        }
    }
    Ok(AugmentedInput { x_star, point_dim: d })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Attention {
    q: Vec<Linear>,
    k: Vec<Linear>,
    v: Vec<Linear>,
    out: Linear,
    head_dim: usize,
}

impl Attention {
    fn new<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        in_dims: [usize; 3],
        width: usize,
        cfg: &PdtConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let hd = cfg.head_dim(width);
        let mut mk = |tag: &str, fan: usize, rng: &mut _| {
            (0..cfg.n_heads).map(|h| Linear::new(params, &format!("{name}.{tag}{h}"), fan, hd, rng)).collect::<Vec<_>>()
        };
        let q = mk("q", in_dims[0], rng);
        let k = mk("k", in_dims[1], rng);
        let v = mk("v", in_dims[2], rng);
        let out = Linear::new(params, &format!("{name}.out"), hd * cfg.n_heads, width, rng);
        Self { q, k, v, out, head_dim: hd }
    }

    /// Multi-head scaled dot-product attention; softmax runs over the key points.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, b: &Bound, q_in: Var, k_in: Var, v_in: Var) -> Var {
        let scale = T::lit(1.0 / (self.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.q.len());
        for h in 0..self.q.len() {
            let q = self.q[h].forward(g, b, q_in);
            let k = self.k[h].forward(g, b, k_in);
            let v = self.v[h].forward(g, b, v_in);
            let s = g.matmul_nt(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, v));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, b, cat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EncoderBlock {
    attn: Attention,
    skip: Linear,
}

/// Parameter layout of a PDT; the tensors live in a caller-owned [`Params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdtNet {
    config: PdtConfig,
    blocks: Vec<EncoderBlock>,
    input_proj: Linear,
    dec_attn: Attention,
    dec_hidden: Linear,
    dec_out: Linear,
}

/// Intermediate handles of one PDT evaluation.
pub struct PdtVars {
    pub encoded: Var,
    pub output: Var,
}

impl PdtNet {
    pub fn new<T: Scalar>(params: &mut Params<T>, config: PdtConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let din = config.augmented_width();
        let mut blocks = Vec::new();
        let mut fan = din;
        for (i, &w) in config.widths.iter().enumerate() {
            let attn = Attention::new(params, &format!("pde{i}"), [fan; 3], w, &config, rng);
            let skip = Linear::new(params, &format!("pde{i}.skip"), fan, w, rng);
            blocks.push(EncoderBlock { attn, skip });
            fan = w;
        }
        let w = fan;
        let input_proj = Linear::new(params, "pdd.in", din, w, rng);
        let dec_attn = Attention::new(params, "pdd", [w; 3], w, &config, rng);
        let dec_hidden = Linear::new(params, "pdd.hidden", w, w, rng);
        let dec_out = if config.zero_output {
            Linear::zeros(params, "pdd.out", w, config.point_dim)
        } else {
            Linear::new(params, "pdd.out", w, config.point_dim, rng)
        };
        Ok(Self { config, blocks, input_proj, dec_attn, dec_hidden, dec_out })
    }

    pub fn config(&self) -> &PdtConfig {
        &self.config
    }

    /// Encoder: stacked self-attention blocks with per-point skip maps.
    pub fn pde<T: Scalar>(&self, g: &mut Graph<'_, T>, b: &Bound, x_star: Var) -> Var {
        let mut h = x_star;
        for blk in &self.blocks {
            let a = blk.attn.forward(g, b, h, h, h);
            let s = blk.skip.forward(g, b, h);
            let sum = g.add(a, s);
            h = g.relu(sum);
        }
        h
    }

    /// Decoder: attention whose query/key/value sources follow the configured mode.
    pub fn pdd<T: Scalar>(&self, g: &mut Graph<'_, T>, b: &Bound, x_star: Var, encoded: Var) -> Var {
        let raw = self.input_proj.forward(g, b, x_star);
        let residual = g.add(raw, encoded);
        let pick = |s: AttentionSource| match s {
            AttentionSource::RawX => raw,
            AttentionSource::Encoded => encoded,
            AttentionSource::Residual => residual,
        };
        let m = self.config.attention;
        let a = self.dec_attn.forward(g, b, pick(m.query), pick(m.key), pick(m.value));
        let h = g.add(a, residual);
        let h = g.relu(h);
        let h = self.dec_hidden.forward(g, b, h);
        let h = g.relu(h);
        self.dec_out.forward(g, b, h)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, b: &Bound, x_star: Var) -> PdtVars {
        let encoded = self.pde(g, b, x_star);
        let output = self.pdd(g, b, x_star, encoded);
        PdtVars { encoded, output }
    }

    fn check(&self, input: &AugmentedInput<impl Scalar>) -> Result<()> {
        if input.x_star.ncols() != self.config.augmented_width() || input.point_dim != self.config.point_dim {
            return Err(shape(format!(
                "augmented input has width {}, PDT expects {}",
                input.x_star.ncols(),
                self.config.augmented_width()
            )));
        }
        Ok(())
    }
}

/// A PDT bundled with its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Pdt<T> {
    pub net: PdtNet,
    pub params: Params<T>,
}

impl<T: Scalar> Pdt<T> {
    pub fn new(config: PdtConfig, seed: u64) -> Result<Self> {
        let mut params = Params::default();
        let net = PdtNet::new(&mut params, config, &mut seeded(seed))?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &PdtConfig {
        self.net.config()
    }

    pub fn pde_forward(&self, input: &AugmentedInput<T>) -> Result<Array2<T>> {
        self.net.check(input)?;
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g);
        let x = g.constant(input.x_star.clone());
        let e = self.net.pde(&mut g, &b, x);
        Ok(g.value(e).clone())
    }

    pub fn pdd_forward(&self, input: &AugmentedInput<T>, pde_out: &Array2<T>) -> Result<Array2<T>> {
        self.net.check(input)?;
        let w = *self.config().widths.last().expect("validated");
        if pde_out.dim() != (input.x_star.nrows(), w) {
            return Err(shape(format!("encoder output is {:?}, expected ({}, {w})", pde_out.dim(), input.x_star.nrows())));
        }
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g);
        let x = g.constant(input.x_star.clone());
        let e = g.constant(pde_out.clone());
        let out = self.net.pdd(&mut g, &b, x, e);
        Ok(g.value(out).clone())
    }

    /// Predicted noise for `x_t` given latent code, label and time code.
    pub fn forward(&self, x_t: &Array2<T>, z: &Array1<T>, label: usize, time: &TimeCode) -> Result<Array2<T>> {
        let cfg = self.config();
        if x_t.ncols() != cfg.point_dim || z.len() != cfg.latent_dim || time.len() != cfg.time_code_len {
            return Err(shape("PDT input widths do not match its configuration"));
        }
        let input = build_augmented_input(x_t, z, label, cfg.n_classes, time)?;
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g);
        let x = g.constant(input.x_star);
        let out = self.net.forward(&mut g, &b, x).output;
        Ok(g.value(out).clone())
    }
}

/// Rows of `a` equal rows of `b` reordered by `perm` (`b[i] = a[perm[i]]`), within `tol`.
pub fn rows_permuted<T: Scalar>(a: &Array2<T>, b: &Array2<T>, perm: &[usize], tol: f64) -> bool {
    a.dim() == b.dim()
        && perm.len() == a.nrows()
        && perm.iter().enumerate().all(|(i, &p)| {
            a.index_axis(Axis(0), p).iter().zip(b.index_axis(Axis(0), i)).all(|(x, y)| (*x - *y).abs().as_f64() <= tol)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::encode_time_binary;
    use crate::pointcloud::random_permutation;
    use crate::rng::standard_normal;
    use proptest::prelude::*;

    fn small_cfg() -> PdtConfig {
        PdtConfig { widths: vec![12, 18], zero_output: false, ..PdtConfig::new(3, 5, 4, 8) }
    }

    fn inputs(seed: u64, n: usize) -> (Array2<f64>, Array1<f64>, TimeCode) {
        let mut rng = seeded(seed);
        let x = standard_normal(&mut rng, n, 3);
        let z = standard_normal(&mut rng, 1, 5).row(0).to_owned();
        (x, z, encode_time_binary(17, 250).unwrap())
    }

    #[test]
    fn augmented_rows_share_condition_segments() {
        let (x, z, code) = inputs(0, 2);
        let a = build_augmented_input(&x, &z, 2, 4, &code).unwrap();
        assert_eq!(a.x_star.ncols(), 3 + 5 + 4 + 8);
        assert_eq!(a.x_star.slice(ndarray::s![0, 3..]), a.x_star.slice(ndarray::s![1, 3..]));
        let onehot: Vec<f64> = a.x_star.slice(ndarray::s![0, 8..12]).to_vec();
        assert_eq!(onehot, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(build_augmented_input(&x, &z, 4, 4, &code).is_err());
    }

    #[test]
    fn single_point_attention_is_value_projection() {
        let cfg = PdtConfig { widths: vec![6], n_heads: 1, ..small_cfg() };
        let m = Pdt::<f64>::new(cfg.clone(), 1).unwrap();
        let (x, z, code) = inputs(1, 1);
        let inp = build_augmented_input(&x, &z, 0, 4, &code).unwrap();
        let got = m.pde_forward(&inp).unwrap();
        // relu(out(v(x)) + skip(x)), computed by hand
        let blk = &m.net.blocks[0];
        let lin = |l: &Linear, a: &Array2<f64>| a.dot(m.params.get(l.weight)) + m.params.get(l.bias);
        let v = lin(&blk.attn.v[0], &inp.x_star);
        let want = (lin(&blk.attn.out, &v) + lin(&blk.skip, &inp.x_star)).mapv(|t| t.max(0.0));
        assert!((&got - &want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn zero_output_projection_predicts_zero() {
        let m = Pdt::<f64>::new(PdtConfig { zero_output: true, ..small_cfg() }, 2).unwrap();
        let (x, z, code) = inputs(2, 10);
        assert!(m.forward(&x, &z, 1, &code).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_point_gives_duplicated_row() {
        let m = Pdt::<f64>::new(small_cfg(), 3).unwrap();
        let (x, z, code) = inputs(3, 9);
        let mut xd = Array2::zeros((10, 3));
        xd.slice_mut(ndarray::s![..9, ..]).assign(&x);
        xd.row_mut(9).assign(&x.row(4));
        let out = m.forward(&xd, &z, 1, &code).unwrap();
        assert!((&out.row(9) - &out.row(4)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn all_modes_run_and_shapes_checked() {
        for (_, mode) in AttentionInputMode::studied() {
            let m = Pdt::<f64>::new(PdtConfig { attention: mode, ..small_cfg() }, 4).unwrap();
            let (x, z, code) = inputs(4, 7);
            assert_eq!(m.forward(&x, &z, 3, &code).unwrap().dim(), (7, 3));
        }
        let m = Pdt::<f64>::new(small_cfg(), 4).unwrap();
        let (x, _, code) = inputs(4, 7);
        assert!(m.forward(&x, &Array1::zeros(4), 0, &code).is_err());
        let inp = build_augmented_input(&x, &Array1::zeros(5), 0, 4, &code).unwrap();
        assert!(m.pdd_forward(&inp, &Array2::zeros((7, 5))).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn encoder_decoder_and_full_model_are_equivariant(seed in 0u64..10_000, n in 1usize..24) {
            let m = Pdt::<f64>::new(small_cfg(), 7).unwrap();
            let (x, z, code) = inputs(seed, n);
            let perm = random_permutation(n, &mut seeded(seed ^ 0xabc));
            let xp = Array2::from_shape_fn((n, 3), |(i, j)| x[[perm[i], j]]);
            let a = build_augmented_input(&x, &z, 1, 4, &code).unwrap();
            let ap = build_augmented_input(&xp, &z, 1, 4, &code).unwrap();
            prop_assert!(rows_permuted(&a.x_star, &ap.x_star, &perm, 0.0));
            let e = m.pde_forward(&a).unwrap();
            let ep = m.pde_forward(&ap).unwrap();
            prop_assert!(rows_permuted(&e, &ep, &perm, 1e-9));
            prop_assert!(rows_permuted(&m.pdd_forward(&a, &e).unwrap(), &m.pdd_forward(&ap, &ep).unwrap(), &perm, 1e-9));
            prop_assert!(rows_permuted(&m.forward(&x, &z, 1, &code).unwrap(), &m.forward(&xp, &z, 1, &code).unwrap(), &perm, 1e-9));
        }
    }
}
