//! Noise schedules, forward diffusion kernels, the latent shape encoder, the
//! conditional reverse step, and DDPM training.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::classifier::{encode_time_binary, time_code_width, TimeCode};
use crate::error::{invalid, shape, DamError, Result};
use crate::nn::{batch_gradients, Adam, AdamState, Bound, Linear, LrSchedule, Params, ParamsSnapshot};
use crate::pdt::{PdtConfig, PdtNet};
use crate::pointcloud::{LabeledDataset, PointCloud};
use crate::rng::{derive_seed, seeded, standard_normal};
use crate::Scalar;

pub const DIFFUSION_CHECKPOINT_VERSION: &str = "dam-ddpm-v1";

const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine { offset: f64 },
    Linear { start: f64, end: f64 },
}

/// Variance schedule over noise levels `0..=T`.
///
/// `alpha_bar(0) == 1`; step `t` in `1..=T` moves from level `t - 1` to `t`
/// with variance `beta(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64, offset: f64) -> f64 {
    (((t / steps + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

impl NoiseSchedule {
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(invalid("schedule needs T >= 2"));
        }
        if !(offset > 0.0) {
            return Err(invalid("cosine offset must be positive"));
        }
        let f0 = cosine_f(0.0, steps as f64, offset);
        let mut alpha_bars = vec![1.0];
        let mut betas = Vec::with_capacity(steps);
        for t in 1..=steps {
            let direct = cosine_f(t as f64, steps as f64, offset) / f0;
            let prev = alpha_bars[t - 1];
            let beta = 1.0 - direct / prev;
            if beta > MAX_BETA {
                betas.push(MAX_BETA);
                alpha_bars.push(prev * (1.0 - MAX_BETA));
            } else {
                betas.push(beta);
                alpha_bars.push(direct);
            }
        }
        Self::checked(ScheduleKind::Cosine { offset }, betas, alpha_bars)
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(invalid("schedule needs T >= 2"));
        }
        if !(0.0 < start && start <= end && end < 1.0) {
            return Err(invalid("linear schedule needs 0 < start <= end < 1"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|k| match k {
                0 => start,
                k if k == steps - 1 => end,
                k => start + (end - start) * k as f64 / (steps - 1) as f64,
            })
            .collect();
        let mut alpha_bars = vec![1.0];
        for b in &betas {
            let last = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(last * (1.0 - b));
        }
        Self::checked(ScheduleKind::Linear { start, end }, betas, alpha_bars)
    }

    /// Cosine schedule with offset 0.008 over 250 steps.
    pub fn default_cosine() -> Self {
        Self::cosine(250, 0.008).expect("valid constants")
    }

    fn checked(kind: ScheduleKind, betas: Vec<f64>, alpha_bars: Vec<f64>) -> Result<Self> {
        let s = Self { kind, steps: betas.len(), betas, alpha_bars };
        s.validate()?;
        Ok(s)
    }

    /// Checks the invariants; used after deserializing.
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 || self.betas.len() != self.steps || self.alpha_bars.len() != self.steps + 1 {
            return Err(DamError::Format("inconsistent schedule lengths".into()));
        }
        if self.alpha_bars[0] != 1.0 {
            return Err(DamError::Format("schedule must start at alpha_bar = 1".into()));
        }
        if !self.betas.iter().all(|&b| b > 0.0 && b < 1.0) {
            return Err(DamError::Format("betas must lie in (0, 1)".into()));
        }
        if !self.alpha_bars.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0) {
            return Err(DamError::Format("alpha_bar must decrease strictly and stay positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of step `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product at level `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Time code fed to time-conditioned networks for step `t` in `1..=T`.
    pub fn time_code(&self, t: usize) -> Result<TimeCode> {
        if t == 0 || t > self.steps {
            return Err(invalid(format!("step {t} out of range [1, {}]", self.steps)));
        }
        encode_time_binary(t - 1, self.steps)
    }

    pub fn time_code_len(&self) -> usize {
        time_code_width(self.steps)
    }
}

fn check_noise<T: Scalar>(x: &Array2<T>, noise: &Array2<T>) -> Result<()> {
    if noise.dim() != x.dim() {
        return Err(shape(format!("noise shape {:?} != state shape {:?}", noise.dim(), x.dim())));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) noise`, for levels `0..=T`.
pub fn forward_marginal<T: Scalar>(x0: &PointCloud<T>, t: usize, schedule: &NoiseSchedule, noise: &Array2<T>) -> Result<PointCloud<T>> {
    PointCloud::new(forward_marginal_array(x0.points(), t, schedule, noise)?)
}

/// [`forward_marginal`] on a bare array of any width.
pub fn forward_marginal_array<T: Scalar>(x0: &Array2<T>, t: usize, schedule: &NoiseSchedule, noise: &Array2<T>) -> Result<Array2<T>> {
    if t > schedule.steps() {
        return Err(invalid(format!("noise level {t} out of range [0, {}]", schedule.steps())));
    }
    check_noise(x0, noise)?;
    let ab = schedule.alpha_bar(t);
    Ok(affine(x0, noise, ab.sqrt(), (1.0 - ab).sqrt()))
}

/// One forward kernel `q(x_t | x_{t-1})`, for steps `1..=T`.
pub fn forward_step<T: Scalar>(x_prev: &PointCloud<T>, t: usize, schedule: &NoiseSchedule, noise: &Array2<T>) -> Result<PointCloud<T>> {
    PointCloud::new(forward_step_array(x_prev.points(), t, schedule, noise)?)
}

/// [`forward_step`] on a bare array of any width.
pub fn forward_step_array<T: Scalar>(x_prev: &Array2<T>, t: usize, schedule: &NoiseSchedule, noise: &Array2<T>) -> Result<Array2<T>> {
    if t == 0 || t > schedule.steps() {
        return Err(invalid(format!("step {t} out of range [1, {}]", schedule.steps())));
    }
    check_noise(x_prev, noise)?;
    let beta = schedule.beta(t);
    Ok(affine(x_prev, noise, (1.0 - beta).sqrt(), beta.sqrt()))
}

fn affine<T: Scalar>(x: &Array2<T>, noise: &Array2<T>, a: f64, b: f64) -> Array2<T> {
    let (a, b) = (T::lit(a), T::lit(b));
    let mut out = x.mapv(|v| a * v);
    out.zip_mut_with(noise, |o, &e| *o += b * e);
    out
}

/// Diagonal Gaussian posterior over the shape code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub mean: Array1<T>,
    pub logvar: Array1<T>,
}

impl<T: Scalar> LatentCode<T> {
    /// `z = mean + exp(logvar / 2) * eps`
    pub fn reparameterize(&self, eps: &Array1<T>) -> Result<Array1<T>> {
        if eps.len() != self.mean.len() {
            return Err(shape("reparameterization noise has the wrong width"));
        }
        let half = T::lit(0.5);
        Ok(Array1::from_shape_fn(self.mean.len(), |i| self.mean[i] + (half * self.logvar[i]).exp() * eps[i]))
    }

    /// Closed-form `KL(N(mean, exp(logvar)) || N(0, I))`.
    pub fn kl_to_standard(&self) -> f64 {
        kl_standard_normal(&self.mean, &self.logvar)
    }
}

pub fn kl_standard_normal<T: Scalar>(mean: &Array1<T>, logvar: &Array1<T>) -> f64 {
    mean.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum()
}

/// PointNet-style encoder producing mean and log-variance of the shape code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEncoderNet {
    per_point: Vec<Linear>,
    mean: Linear,
    logvar: Linear,
    input_dim: usize,
}

impl LatentEncoderNet {
    pub fn new<T: Scalar>(params: &mut Params<T>, input_dim: usize, widths: &[usize], latent_dim: usize, rng: &mut impl Rng) -> Self {
        let mut per_point = Vec::new();
        let mut fan = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            per_point.push(Linear::new(params, &format!("enc{i}"), fan, w, rng));
            fan = w;
        }
        let mean = Linear::new(params, "enc.mean", fan, latent_dim, rng);
        let logvar = Linear::zeros(params, "enc.logvar", fan, latent_dim);
        Self { per_point, mean, logvar, input_dim }
    }

    /// Returns `1 x D_z` mean and log-variance nodes.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, b: &Bound, x: Var) -> (Var, Var) {
        let mut h = x;
        for l in &self.per_point {
            h = l.forward(g, b, h);
            h = g.relu(h);
        }
        let pooled = g.max_rows(h);
        (self.mean.forward(g, b, pooled), self.logvar.forward(g, b, pooled))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub point_dim: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub pdt: PdtConfig,
    pub lambda_kl: f64,
    pub lr: LrSchedule,
    pub iterations: usize,
    pub batch_size: usize,
}

impl DiffusionConfig {
    /// Full-width model: PDT widths 64/128/256, three heads, 128-wide code.
    pub fn standard(n_classes: usize) -> Self {
        let steps = 250;
        let latent_dim = 128;
        Self {
            schedule: ScheduleKind::Cosine { offset: 0.008 },
            steps,
            point_dim: 3,
            n_classes,
            latent_dim,
            encoder_widths: vec![64, 128, 256],
            pdt: PdtConfig::new(3, latent_dim, n_classes, time_code_width(steps)),
            lambda_kl: 1e-3,
            lr: LrSchedule { start: 1e-3, end: 1e-4 },
            iterations: 20_000,
            batch_size: 16,
        }
    }

    /// Narrow model that trains in minutes on one core.
    pub fn toy(n_classes: usize) -> Self {
        let base = Self::standard(n_classes);
        let latent_dim = 16;
        Self {
            latent_dim,
            encoder_widths: vec![32, 64],
            pdt: PdtConfig { widths: vec![24, 48, 48], ..PdtConfig::new(3, latent_dim, n_classes, base.pdt.time_code_len) },
            lr: LrSchedule { start: 2e-3, end: 2e-4 },
            iterations: 1500,
            batch_size: 8,
            ..base
        }
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        match self.schedule {
            ScheduleKind::Cosine { offset } => NoiseSchedule::cosine(self.steps, offset),
            ScheduleKind::Linear { start, end } => NoiseSchedule::linear(self.steps, start, end),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pdt.point_dim != self.point_dim
            || self.pdt.latent_dim != self.latent_dim
            || self.pdt.n_classes != self.n_classes
            || self.pdt.time_code_len != time_code_width(self.steps)
        {
            return Err(invalid("PDT widths disagree with the diffusion configuration"));
        }
        if self.lambda_kl < 0.0 || self.batch_size == 0 || self.latent_dim == 0 {
            return Err(invalid("lambda_kl must be >= 0, batch_size and latent_dim positive"));
        }
        self.pdt.validate()
    }
}

/// Posterior mean and fixed variance of one reverse step.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseStepParams<T> {
    pub mu: Array2<T>,
    /// Standard deviation `sqrt(beta_t)`.
    pub sigma: f64,
    /// Variance `beta_t`.
    pub variance: f64,
}

/// `mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)`
pub fn posterior_mean<T: Scalar>(x_t: &Array2<T>, eps_hat: &Array2<T>, t: usize, schedule: &NoiseSchedule) -> Result<ReverseStepParams<T>> {
    if t == 0 || t > schedule.steps() {
        return Err(invalid(format!("reverse step {t} out of range [1, {}]", schedule.steps())));
    }
    if x_t.dim() != eps_hat.dim() {
        return Err(shape("noise prediction shape differs from x_t"));
    }
    let beta = schedule.beta(t);
    let c = T::lit(beta / (1.0 - schedule.alpha_bar(t)).sqrt());
    let inv = T::lit(1.0 / (1.0 - beta).sqrt());
    let mut mu = x_t.clone();
    mu.zip_mut_with(eps_hat, |m, &e| *m = (*m - c * e) * inv);
    Ok(ReverseStepParams { mu, sigma: beta.sqrt(), variance: beta })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// `mse(eps_hat, eps) + lambda_kl * KL`, from already-computed pieces.
pub fn loss_terms<T: Scalar>(eps_hat: &Array2<T>, eps: &Array2<T>, code: &LatentCode<T>, lambda_kl: f64) -> Result<LossTerms> {
    if eps_hat.dim() != eps.dim() {
        return Err(shape("noise prediction shape differs from the noise"));
    }
    let mse = eps_hat.iter().zip(eps).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>() / eps.len() as f64;
    let kl = code.kl_to_standard();
    Ok(LossTerms { total: mse + lambda_kl * kl, mse, kl })
}

/// Trained (or initialized) encoder and denoiser with their schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel<T> {
    config: DiffusionConfig,
    schedule: NoiseSchedule,
    params: Params<T>,
    encoder: LatentEncoderNet,
    pdt: PdtNet,
}

/// Random draws behind one training example.
struct LossDraw<T> {
    t: usize,
    eps: Array2<T>,
    eps_z: Array1<T>,
}

impl<T: Scalar> DiffusionModel<T> {
    pub fn new(config: DiffusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.build_schedule()?;
        let mut rng = seeded(seed);
        let mut params = Params::default();
        let encoder = LatentEncoderNet::new(&mut params, config.point_dim, &config.encoder_widths, config.latent_dim, &mut rng);
        let pdt = PdtNet::new(&mut params, config.pdt.clone(), &mut rng)?;
        Ok(Self { config, schedule, params, encoder, pdt })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_cloud(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.config.point_dim {
            return Err(shape(format!("model expects D={}, got D={}", self.config.point_dim, x.ncols())));
        }
        Ok(())
    }

    pub fn encode_latent(&self, x0: &PointCloud<T>) -> Result<LatentCode<T>> {
        self.check_cloud(x0.points())?;
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g);
        let x = g.constant(x0.points().clone());
        let (m, lv) = self.encoder.forward(&mut g, &b, x);
        Ok(LatentCode { mean: g.value(m).row(0).to_owned(), logvar: g.value(lv).row(0).to_owned() })
    }

    fn condition_rows(&self, g: &mut Graph<'_, T>, n: usize, z: Var, label: usize, t: usize) -> Result<Var> {
        let code = self.schedule.time_code(t)?;
        let mut fixed = Array2::zeros((1, self.config.n_classes + code.len()));
        fixed[[0, label]] = T::one();
        for (j, &bit) in code.bits.iter().enumerate() {
            fixed[[0, self.config.n_classes + j]] = T::lit(bit as f64);
        }
        let fixed = g.constant(fixed);
        let cond = g.concat_cols(&[z, fixed]);
        Ok(g.repeat_rows(cond, n))
    }

    /// Predicted noise at step `t` in `1..=T`.
    pub fn predict_noise(&self, x_t: &Array2<T>, t: usize, z: &Array1<T>, label: usize) -> Result<Array2<T>> {
        self.check_cloud(x_t)?;
        if z.len() != self.config.latent_dim {
            return Err(shape("latent code has the wrong width"));
        }
        if label >= self.config.n_classes {
            return Err(invalid(format!("label {label} out of range")));
        }
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g);
        let x = g.constant(x_t.clone());
        let zv = g.constant(z.clone().insert_axis(ndarray::Axis(0)));
        let cond = self.condition_rows(&mut g, x_t.nrows(), zv, label, t)?;
        let xs = g.concat_cols(&[x, cond]);
        let out = self.pdt.forward(&mut g, &b, xs).output;
        Ok(g.value(out).clone())
    }

    pub fn reverse_step_params(&self, x_t: &Array2<T>, t: usize, z: &Array1<T>, label: usize) -> Result<ReverseStepParams<T>> {
        if t == 0 || t > self.schedule.steps() {
            return Err(invalid(format!("reverse step {t} out of range [1, {}]", self.schedule.steps())));
        }
        let eps_hat = self.predict_noise(x_t, t, z, label)?;
        posterior_mean(x_t, &eps_hat, t, &self.schedule)
    }

    fn draw(&self, n: usize, seed: u64) -> LossDraw<T> {
        let mut rng = seeded(seed);
        let t = rng.gen_range(1..=self.schedule.steps());
        let eps = standard_normal(&mut rng, n, self.config.point_dim);
        let eps_z = standard_normal(&mut rng, 1, self.config.latent_dim).row(0).to_owned();
        LossDraw { t, eps, eps_z }
    }

    fn loss_graph(&self, x0: &PointCloud<T>, label: usize, draw: &LossDraw<T>, track: bool) -> Result<(LossTerms, Vec<Array2<T>>)> {
        self.check_cloud(x0.points())?;
        if label >= self.config.n_classes {
            return Err(invalid(format!("label {label} out of range")));
        }
        let n = x0.n_points();
        let x_t = forward_marginal(x0, draw.t, &self.schedule, &draw.eps)?;
        let mut g = Graph::new(track);
        let b = self.params.bind(&mut g);
        let x0v = g.constant(x0.points().clone());
        let (m, lv) = self.encoder.forward(&mut g, &b, x0v);
        let half_lv = g.scale(lv, T::lit(0.5));
        let sd = g.exp(half_lv);
        let ez = g.constant(draw.eps_z.clone().insert_axis(ndarray::Axis(0)));
        let noise_z = g.mul(sd, ez);
        let z = g.add(m, noise_z);
        let cond = self.condition_rows(&mut g, n, z, label, draw.t)?;
        let xt = g.constant(x_t.into_points());
        let xs = g.concat_cols(&[xt, cond]);
        let eps_hat = self.pdt.forward(&mut g, &b, xs).output;
        let eps = g.constant(draw.eps.clone());
        let diff = g.sub(eps_hat, eps);
        let sq = g.mul(diff, diff);
        let mse = g.mean_all(sq);
        // 0.5 * sum(m^2 + exp(lv) - 1 - lv)
        let m2 = g.mul(m, m);
        let elv = g.exp(lv);
        let s1 = g.add(m2, elv);
        let s2 = g.sub(s1, lv);
        let ones = g.constant(Array2::from_elem((1, self.config.latent_dim), T::one()));
        let s3 = g.sub(s2, ones);
        let ksum = g.sum_all(s3);
        let kl = g.scale(ksum, T::lit(0.5));
        let wkl = g.scale(kl, T::lit(self.config.lambda_kl));
        let total = g.add(mse, wkl);
        let terms = LossTerms { total: g.scalar(total).as_f64(), mse: g.scalar(mse).as_f64(), kl: g.scalar(kl).as_f64() };
        if !track {
            return Ok((terms, Vec::new()));
        }
        let mut grads = g.backward(total);
        Ok((terms, self.params.collect_grads(&b, &mut grads)))
    }

    /// Training objective for one example with all randomness drawn from `seed`.
    pub fn diffusion_training_loss(&self, x0: &PointCloud<T>, label: usize, seed: u64) -> Result<LossTerms> {
        let draw = self.draw(x0.n_points(), seed);
        let (terms, _) = self.loss_graph(x0, label, &draw, false)?;
        if !terms.total.is_finite() {
            return Err(DamError::Numeric(format!("training loss became {}", terms.total)));
        }
        Ok(terms)
    }

    pub fn checkpoint(&self, losses: Vec<f64>) -> DiffusionCheckpoint {
        DiffusionCheckpoint {
            version: DIFFUSION_CHECKPOINT_VERSION.to_string(),
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            weights: self.params.snapshot(),
            losses,
        }
    }

    pub fn from_checkpoint(ck: &DiffusionCheckpoint) -> Result<Self> {
        if ck.version != DIFFUSION_CHECKPOINT_VERSION {
            return Err(DamError::Format(format!("unsupported diffusion checkpoint version {:?}", ck.version)));
        }
        ck.schedule.validate()?;
        let mut m = Self::new(ck.config.clone(), 0)?;
        m.schedule = ck.schedule.clone();
        m.params.load(&ck.weights)?;
        Ok(m)
    }
}

/// Encoder and denoiser weights plus the exact schedule arrays used in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionCheckpoint {
    pub version: String,
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub weights: ParamsSnapshot,
    /// Mean training loss per logged interval.
    pub losses: Vec<f64>,
}

/// Resumable DDPM training loop.
pub struct DiffusionTrainer<T> {
    pub model: DiffusionModel<T>,
    opt: Adam<T>,
    seed: u64,
    pub iteration: usize,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionTrainerState {
    pub checkpoint: DiffusionCheckpoint,
    pub optimizer: AdamState,
    pub seed: u64,
    pub iteration: usize,
}

impl<T: Scalar> DiffusionTrainer<T> {
    pub fn new(model: DiffusionModel<T>, seed: u64) -> Self {
        let opt = Adam::new(model.params(), Some(1.0));
        Self { model, opt, seed, iteration: 0, losses: Vec::new() }
    }

    pub fn state(&self) -> DiffusionTrainerState {
        DiffusionTrainerState {
            checkpoint: self.model.checkpoint(self.losses.clone()),
            optimizer: self.opt.state(),
            seed: self.seed,
            iteration: self.iteration,
        }
    }

    pub fn restore(state: &DiffusionTrainerState) -> Result<Self> {
        let model = DiffusionModel::from_checkpoint(&state.checkpoint)?;
        let mut opt = Adam::new(model.params(), Some(1.0));
        opt.restore(&state.optimizer)?;
        Ok(Self { model, opt, seed: state.seed, iteration: state.iteration, losses: state.checkpoint.losses.clone() })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.model.config.iterations
    }

    /// One optimizer step on a seed-determined minibatch; returns its mean loss.
    pub fn step(&mut self, data: &LabeledDataset<T>) -> Result<f64> {
        if data.is_empty() {
            return Err(invalid("cannot train on an empty dataset"));
        }
        let cfg = self.model.config.clone();
        let it_seed = derive_seed(self.seed, self.iteration as u64);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut seeded(it_seed));
        idx.truncate(cfg.batch_size.min(data.len()));
        let jobs: Vec<(usize, u64)> = idx.iter().enumerate().map(|(k, &i)| (i, derive_seed(it_seed, k as u64 + 1))).collect();
        let model = &self.model;
        let (loss, grads) = batch_gradients(model.params(), &jobs, |&(i, s)| {
            let x0 = &data.clouds()[i];
            let draw = model.draw(x0.n_points(), s);
            let (terms, g) = model.loss_graph(x0, data.labels()[i], &draw, true)?;
            Ok((terms.total, g))
        })
        .map_err(|e| match e {
            DamError::Numeric(m) => DamError::Numeric(format!("diffusion training diverged at iteration {}: {m}", self.iteration)),
            other => other,
        })?;
        let lr = cfg.lr.at(self.iteration, cfg.iterations);
        self.opt.update(&mut self.model.params, &grads, lr)?;
        self.iteration += 1;
        self.losses.push(loss);
        Ok(loss)
    }
}

pub fn train_diffusion<T: Scalar>(data: &LabeledDataset<T>, config: &DiffusionConfig, seed: u64) -> Result<DiffusionModel<T>> {
    if data.n_classes() != config.n_classes {
        return Err(invalid(format!("dataset has {} classes, config {}", data.n_classes(), config.n_classes)));
    }
    let model = DiffusionModel::new(config.clone(), derive_seed(seed, 2))?;
    let mut trainer = DiffusionTrainer::new(model, seed);
    while !trainer.is_done() {
        trainer.step(data)?;
    }
    Ok(trainer.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::random_permutation;
    use crate::rng::normal_scalar;

    #[test]
    fn cosine_matches_closed_form() {
        let s = NoiseSchedule::cosine(250, 0.008).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        let f = |t: f64| (((t / 250.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        assert!((s.alpha_bar(125) - f(125.0) / f(0.0)).abs() < 1e-15);
        assert!(s.alpha_bar(249) < 0.05);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= MAX_BETA));
    }

    #[test]
    fn linear_endpoints_and_product() {
        let s2 = NoiseSchedule::linear(2, 1e-4, 2e-2).unwrap();
        assert_eq!(s2.betas(), &[1e-4, 2e-2]);
        let s = NoiseSchedule::linear(250, 1e-4, 2e-2).unwrap();
        let mut prod = 1.0;
        for k in 0..249 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * k as f64 / 249.0);
        }
        assert!((s.alpha_bar(249) - prod).abs() < 1e-12);
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::cosine(1, 0.008).is_err());
    }

    #[test]
    fn marginal_identity_at_level_zero() {
        let s = NoiseSchedule::default_cosine();
        let x = PointCloud::new(standard_normal::<f64>(&mut seeded(0), 5, 3)).unwrap();
        let noise = standard_normal(&mut seeded(1), 5, 3);
        assert_eq!(forward_marginal(&x, 0, &s, &noise).unwrap(), x);
        assert!(forward_marginal(&x, 251, &s, &noise).is_err());
        assert!(forward_step(&x, 0, &s, &noise).is_err());
    }

    #[test]
    fn single_step_adds_beta_variance() {
        let s = NoiseSchedule::linear(250, 1e-4, 2e-2).unwrap();
        let t = 200;
        let x = PointCloud::new(Array2::<f64>::zeros((10_000, 2))).unwrap();
        let noise = standard_normal(&mut seeded(5), 10_000, 2);
        let y = forward_step(&x, t, &s, &noise).unwrap();
        let var = y.points().iter().map(|v| v * v).sum::<f64>() / 20_000.0;
        assert!((var - s.beta(t)).abs() < 0.02);
        let y2 = forward_step(&x, t, &s, &standard_normal(&mut seeded(6), 10_000, 2)).unwrap();
        assert_ne!(y, y2);
    }

    #[test]
    fn late_marginal_is_standard_normal() {
        let s = NoiseSchedule::default_cosine();
        let x = PointCloud::new(Array2::<f64>::from_elem((5000, 3), 0.7)).unwrap();
        let y = forward_marginal(&x, 249, &s, &standard_normal(&mut seeded(3), 5000, 3)).unwrap();
        let n = 15_000.0;
        let mean = y.points().sum() / n;
        let var = y.points().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05);
    }

    #[test]
    fn reparameterize_and_kl() {
        let code = LatentCode { mean: Array1::from_vec(vec![0.3, -0.5]), logvar: Array1::from_vec(vec![-0.4, 0.2]) };
        assert_eq!(code.reparameterize(&Array1::zeros(2)).unwrap(), code.mean);
        let zero = LatentCode { mean: Array1::<f64>::zeros(3), logvar: Array1::zeros(3) };
        assert_eq!(zero.kl_to_standard(), 0.0);
        // Monte-Carlo oracle: E_q[log q(z) - log p(z)]
        let mut rng = seeded(11);
        let m = 100_000;
        let mut acc = 0.0;
        for _ in 0..m {
            let eps = Array1::from_shape_fn(2, |_| normal_scalar(&mut rng));
            let z = code.reparameterize(&eps).unwrap();
            for i in 0..2 {
                let lv = code.logvar[i];
                let log_q = -0.5 * (lv + eps[i] * eps[i]);
                let log_p = -0.5 * z[i] * z[i];
                acc += log_q - log_p;
            }
        }
        let mc = acc / m as f64;
        assert!((mc - code.kl_to_standard()).abs() / code.kl_to_standard() < 0.05, "{mc}");
    }

    #[test]
    fn posterior_mean_with_zero_noise_prediction() {
        let s = NoiseSchedule::default_cosine();
        let x = standard_normal::<f64>(&mut seeded(2), 4, 3);
        let p = posterior_mean(&x, &Array2::zeros((4, 3)), 100, &s).unwrap();
        let want = x.mapv(|v| v / s.alpha(100).sqrt());
        assert!((&p.mu - &want).iter().all(|d| d.abs() < 1e-14));
        assert_eq!(p.sigma, s.beta(100).sqrt());
        assert!(posterior_mean(&x, &x, 0, &s).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_mse() {
        let eps = standard_normal::<f64>(&mut seeded(0), 6, 3);
        let code = LatentCode { mean: Array1::zeros(4), logvar: Array1::zeros(4) };
        let t = loss_terms(&eps, &eps, &code, 0.0).unwrap();
        assert_eq!((t.mse, t.kl, t.total), (0.0, 0.0, 0.0));
    }

    fn tiny_config() -> DiffusionConfig {
        let mut c = DiffusionConfig::toy(2);
        c.steps = 20;
        c.pdt = PdtConfig { widths: vec![9, 9], time_code_len: time_code_width(20), ..c.pdt };
        c.latent_dim = 4;
        c.pdt.latent_dim = 4;
        c.encoder_widths = vec![8];
        c
    }

    #[test]
    fn graph_loss_matches_numeric_terms_and_is_invariant() {
        let m = DiffusionModel::<f64>::new(ConfigExt::unzeroed(tiny_config()), 1).unwrap();
        let x0 = PointCloud::new(standard_normal(&mut seeded(9), 12, 3)).unwrap();
        let draw = m.draw(12, 4);
        let (terms, _) = m.loss_graph(&x0, 1, &draw, false).unwrap();
        let code = m.encode_latent(&x0).unwrap();
        let z = code.reparameterize(&draw.eps_z).unwrap();
        let xt = forward_marginal(&x0, draw.t, m.schedule(), &draw.eps).unwrap();
        let eps_hat = m.predict_noise(xt.points(), draw.t, &z, 1).unwrap();
        let want = loss_terms(&eps_hat, &draw.eps, &code, m.config().lambda_kl).unwrap();
        assert!((terms.total - want.total).abs() < 1e-10);
        let perm = random_permutation(12, &mut seeded(3));
        let xp = x0.permute(&perm).unwrap();
        let permuted = LossDraw { t: draw.t, eps: Array2::from_shape_fn((12, 3), |(i, j)| draw.eps[[perm[i], j]]), eps_z: draw.eps_z.clone() };
        let (tp, _) = m.loss_graph(&xp, 1, &permuted, false).unwrap();
        assert!((tp.total - terms.total).abs() < 1e-10);
    }

    #[test]
    fn training_reduces_loss() {
        use crate::pointcloud::{generate_synthetic_dataset, ShapeSpec, Split};
        let ds = generate_synthetic_dataset::<f64>(&ShapeSpec::toy_set(2, 32), 8, 3, Split::Train).unwrap();
        let mut cfg = tiny_config();
        cfg.iterations = 300;
        let mut tr = DiffusionTrainer::new(DiffusionModel::<f64>::new(cfg, 0).unwrap(), 5);
        while !tr.is_done() {
            tr.step(&ds).unwrap();
        }
        let head: f64 = tr.losses[..30].iter().sum::<f64>() / 30.0;
        let tail: f64 = tr.losses[270..].iter().sum::<f64>() / 30.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        use crate::pointcloud::{generate_synthetic_dataset, ShapeSpec, Split};
        let ds = generate_synthetic_dataset::<f64>(&ShapeSpec::toy_set(2, 16), 4, 3, Split::Train).unwrap();
        let mut cfg = tiny_config();
        cfg.iterations = 6;
        let mut a = DiffusionTrainer::new(DiffusionModel::<f64>::new(cfg.clone(), 0).unwrap(), 5);
        for _ in 0..3 {
            a.step(&ds).unwrap();
        }
        let json = serde_json::to_string(&a.state()).unwrap();
        let mut b = DiffusionTrainer::<f64>::restore(&serde_json::from_str(&json).unwrap()).unwrap();
        while !a.is_done() {
            a.step(&ds).unwrap();
            b.step(&ds).unwrap();
        }
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
    }

    trait ConfigExt {
        fn unzeroed(self) -> Self;
    }

    impl ConfigExt for DiffusionConfig {
        fn unzeroed(mut self) -> Self {
            self.pdt.zero_output = false;
            self
        }
    }
}
