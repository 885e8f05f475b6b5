//! Guided reverse diffusion that produces global explanations, with the
//! trajectory and per-step classifier gradients recorded for attribution.

use std::io::{Read, Write};
use std::time::Instant;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ActivationMode, Classifier, NeuronSelector, NoisedDataset};
use crate::diffusion::DiffusionModel;
use crate::error::{invalid, shape, DamError, Result};
use crate::pointcloud::{LabeledDataset, PointCloud, Split};
use crate::rng::{derive_seed, seeded, standard_normal};
use crate::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightShape {
    /// `W_F = 1 - t/T`
    #[default]
    Linear,
    /// `W_F = cos^2(pi t / 2T)`
    Cosine,
    /// `W_F = 1` for `t <= T/2`, else 0.
    Step,
}

impl std::str::FromStr for WeightShape {
    type Err = DamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(WeightShape::Linear),
            "cosine" => Ok(WeightShape::Cosine),
            "step" => Ok(WeightShape::Step),
            other => Err(invalid(format!("unknown weight shape {other:?}"))),
        }
    }
}

/// Blend weights `(W_F, W_F')` of the explained and the noised classifier at level `t`.
pub fn weight_schedule(t: usize, steps: usize, shape: WeightShape) -> (f64, f64) {
    let r = (t.min(steps) as f64) / steps as f64;
    let w = match shape {
        WeightShape::Linear => 1.0 - r,
        WeightShape::Cosine => (r * std::f64::consts::FRAC_PI_2).cos().powi(2),
        WeightShape::Step => {
            if 2 * t <= steps {
                1.0
            } else {
                0.0
            }
        }
    };
    (w, 1.0 - w)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Draw the shape code directly from the prior.
    RandomZ,
    /// Encode a random cloud and reparameterize.
    #[default]
    RandomXThenEncode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance scale `s`; 0 disables guidance.
    pub scale: f64,
    pub weight_shape: WeightShape,
    pub mode: ActivationMode,
    pub use_dual: bool,
    pub target: NeuronSelector,
    pub init: InitMode,
    pub n_points: usize,
    pub seed: u64,
}

impl GuidanceConfig {
    pub fn for_class(class: usize, n_points: usize, seed: u64) -> Self {
        Self {
            scale: 1e-4,
            weight_shape: WeightShape::Linear,
            mode: ActivationMode::LogSoftmax,
            use_dual: true,
            target: NeuronSelector::Class { class },
            init: InitMode::RandomXThenEncode,
            n_points,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(invalid("guidance scale must be finite and >= 0"));
        }
        if self.n_points == 0 {
            return Err(invalid("n_points must be positive"));
        }
        Ok(())
    }
}

/// Draws the shape code; returns it with the random cloud used, if any.
pub fn initialize_sampling<T: Scalar>(
    mode: InitMode,
    model: Option<&DiffusionModel<T>>,
    latent_dim: usize,
    n_points: usize,
    seed: u64,
) -> Result<(Array1<T>, Option<PointCloud<T>>)> {
    let mut rng = seeded(seed);
    match mode {
        InitMode::RandomZ => Ok((standard_normal(&mut rng, 1, latent_dim).row(0).to_owned(), None)),
        InitMode::RandomXThenEncode => {
            let model = model.ok_or_else(|| invalid("encode-initialized sampling needs the latent encoder"))?;
            let d = model.config().point_dim;
            let x_r = PointCloud::new(standard_normal(&mut rng, n_points, d))?;
            let eps = standard_normal(&mut rng, 1, model.latent_dim()).row(0).to_owned();
            let z = model.encode_latent(&x_r)?.reparameterize(&eps)?;
            Ok((z, Some(x_r)))
        }
    }
}

/// States `x_T ... x_0` (possibly thinned) and full-resolution gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrajectory<T> {
    pub steps: usize,
    pub label: usize,
    /// Noise level of each stored state, from `T` down to 0.
    pub levels: Vec<usize>,
    pub states: Vec<Array2<T>>,
    /// `grads[k]` is the explained model's target gradient at level `T - k`.
    pub grads: Vec<Array2<T>>,
    /// Target activation of the explained model at level `T - k`.
    pub activations: Vec<f64>,
}

impl<T: Scalar> DiffusionTrajectory<T> {
    pub fn is_full(&self) -> bool {
        self.states.len() == self.steps + 1
    }

    pub fn state_at_level(&self, t: usize) -> Option<&Array2<T>> {
        if self.is_full() {
            return t.checked_sub(0).filter(|&t| t <= self.steps).map(|t| &self.states[self.steps - t]);
        }
        self.levels.iter().position(|&l| l == t).map(|i| &self.states[i])
    }

    /// Gradient recorded at level `t` in `1..=T`.
    pub fn grad_at_level(&self, t: usize) -> Option<&Array2<T>> {
        (1..=self.steps).contains(&t).then(|| &self.grads[self.steps - t])
    }

    pub fn final_state(&self) -> &Array2<T> {
        self.states.last().expect("trajectory has states")
    }

    pub fn initial_state(&self) -> &Array2<T> {
        &self.states[0]
    }

    /// Keeps every `stride`-th state counted from `x_T`, plus `x_0`.
    pub fn thinned(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        let mut levels = Vec::new();
        let mut states = Vec::new();
        for (l, s) in self.levels.iter().zip(&self.states) {
            if (self.steps - l).is_multiple_of(stride) || *l == 0 {
                levels.push(*l);
                states.push(s.clone());
            }
        }
        Ok(Self { levels, states, ..self.clone() })
    }
}

const TRAJECTORY_MAGIC: &[u8; 4] = b"DAMT";
const TRAJECTORY_VERSION: u32 = 1;

/// Gzip-compressed little-endian archive; values are stored as `f64`.
pub fn encode_trajectory<T: Scalar>(traj: &DiffusionTrajectory<T>, stride: usize) -> Result<Vec<u8>> {
    let t = traj.thinned(stride)?;
    let (n, d) = t.states[0].dim();
    let mut raw = Vec::new();
    raw.extend_from_slice(TRAJECTORY_MAGIC);
    for v in [TRAJECTORY_VERSION, t.steps as u32, n as u32, d as u32, stride as u32, t.label as u32, t.levels.len() as u32] {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &t.levels {
        raw.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for a in t.states.iter().chain(&t.grads) {
        for v in a.iter() {
            raw.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    for a in &t.activations {
        raw.extend_from_slice(&a.to_le_bytes());
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&raw)?;
    Ok(enc.finish()?)
}

pub fn decode_trajectory<T: Scalar>(bytes: &[u8]) -> Result<DiffusionTrajectory<T>> {
    let mut raw = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut raw)?;
    let bad = |m: &str| DamError::Format(format!("trajectory archive: {m}"));
    if raw.len() < 32 || &raw[..4] != TRAJECTORY_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 4;
    let mut u32_at = |raw: &[u8]| -> Result<usize> {
        let b = raw.get(pos..pos + 4).ok_or_else(|| bad("truncated header"))?;
        pos += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    let version = u32_at(&raw)?;
    if version != TRAJECTORY_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (steps, n, d, _stride, label, n_states) = (u32_at(&raw)?, u32_at(&raw)?, u32_at(&raw)?, u32_at(&raw)?, u32_at(&raw)?, u32_at(&raw)?);
    let mut levels = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        levels.push(u32_at(&raw)?);
    }
    let need = (n_states + steps) * n * d * 8 + steps * 8;
    if raw.len() != pos + need {
        return Err(bad("payload length mismatch"));
    }
    let mut floats = raw[pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |k: usize| -> Vec<Array2<T>> {
        (0..k).map(|_| Array2::from_shape_simple_fn((n, d), || T::lit(floats.next().expect("length checked")))).collect()
    };
    let states = take(n_states);
    let grads = take(steps);
    let activations: Vec<f64> = floats.collect();
    Ok(DiffusionTrajectory { steps, label, levels, states, grads, activations })
}

/// Explained model, optional noised twin, and the generator.
pub struct Models<'a, T> {
    pub diffusion: &'a DiffusionModel<T>,
    pub classifier: &'a Classifier<T>,
    pub noised: Option<&'a Classifier<T>>,
}

impl<T: Scalar> Models<'_, T> {
    fn check(&self, cfg: &GuidanceConfig) -> Result<()> {
        let nc = self.diffusion.n_classes();
        if nc < 2 {
            return Err(invalid("guidance needs at least two classes"));
        }
        if self.classifier.n_classes() != nc {
            return Err(invalid("classifier and diffusion model disagree on the class count"));
        }
        if self.classifier.config().input_dim != self.diffusion.config().point_dim {
            return Err(invalid("classifier and diffusion model disagree on the point dimension"));
        }
        if self.classifier.config().is_noised_twin() {
            return Err(invalid("the explained classifier must not take a time code"));
        }
        if cfg.use_dual {
            let fp = self.noised.ok_or_else(|| invalid("dual guidance needs the noised classifier"))?;
            if fp.n_classes() != nc || fp.config().time_code_len != self.diffusion.schedule().time_code_len() {
                return Err(invalid("noised classifier does not match the diffusion schedule"));
            }
        }
        Ok(())
    }
}

/// Sampling output with per-step timing.
pub struct Sample<T> {
    pub x0: PointCloud<T>,
    pub trajectory: DiffusionTrajectory<T>,
    pub step_seconds: Vec<f64>,
}

/// Shared reverse loop; `plan(t)` gives the conditioning label and target at level `t`.
fn run_chain<T: Scalar>(
    models: &Models<'_, T>,
    cfg: &GuidanceConfig,
    guided: bool,
    plan: impl Fn(usize) -> (usize, NeuronSelector),
) -> Result<Sample<T>> {
    cfg.validate()?;
    let dm = models.diffusion;
    let schedule = dm.schedule();
    let steps = schedule.steps();
    let d = dm.config().point_dim;
    let (z, _) = initialize_sampling(cfg.init, Some(dm), dm.latent_dim(), cfg.n_points, derive_seed(cfg.seed, 0))?;
    let mut x = standard_normal::<T>(&mut seeded(derive_seed(cfg.seed, 1)), cfg.n_points, d);
    let mut noise_rng = seeded(derive_seed(cfg.seed, 2));
    let mut states = Vec::with_capacity(steps + 1);
    let mut grads = Vec::with_capacity(steps);
    let mut activations = Vec::with_capacity(steps);
    let mut step_seconds = Vec::with_capacity(steps);
    states.push(x.clone());
    for t in (1..=steps).rev() {
        let started = Instant::now();
        let (label, target) = plan(t);
        let rp = dm.reverse_step_params(&x, t, &z, label)?;
        let (act, g_f) = models.classifier.activation_gradient(&x, None, &target, cfg.mode)?;
        let mut mean = rp.mu;
        if guided && cfg.scale > 0.0 {
            let blended = match (cfg.use_dual, models.noised) {
                (true, Some(fp)) => {
                    let (w_f, w_fp) = weight_schedule(t, steps, cfg.weight_shape);
                    let code = schedule.time_code(t)?;
                    let (_, g_fp) = fp.activation_gradient(&x, Some(&code), &target, cfg.mode)?;
                    let (a, b) = (T::lit(w_f), T::lit(w_fp));
                    let mut g = g_f.mapv(|v| a * v);
                    g.zip_mut_with(&g_fp, |o, &v| *o += b * v);
                    g
                }
                _ => g_f.clone(),
            };
            let k = T::lit(cfg.scale * rp.variance);
            mean.zip_mut_with(&blended, |m, &g| *m += k * g);
        }
        let sigma = T::lit(rp.sigma);
        let noise = standard_normal::<T>(&mut noise_rng, cfg.n_points, d);
        mean.zip_mut_with(&noise, |m, &e| *m += sigma * e);
        if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
            return Err(DamError::NonFinite(format!("state became non-finite at step t={t} (coordinate {i})")));
        }
        x = mean;
        states.push(x.clone());
        grads.push(g_f);
        activations.push(act.as_f64());
        step_seconds.push(started.elapsed().as_secs_f64());
    }
    let label = plan(0).0;
    let trajectory = DiffusionTrajectory { steps, label, levels: (0..=steps).rev().collect(), states, grads, activations };
    Ok(Sample { x0: PointCloud::new(x)?, trajectory, step_seconds })
}

fn conditioning_label(target: &NeuronSelector, label: usize, n_classes: usize) -> Result<usize> {
    if label >= n_classes {
        return Err(invalid(format!("label {label} out of range for {n_classes} classes")));
    }
    if let Some(c) = target.class() {
        if c != label {
            return Err(invalid("class target and conditioning label differ"));
        }
    }
    Ok(label)
}

/// Guided sampling toward `cfg.target`, conditioned on `label`.
pub fn dam_sample<T: Scalar>(models: &Models<'_, T>, label: usize, cfg: &GuidanceConfig) -> Result<Sample<T>> {
    models.check(cfg)?;
    let label = conditioning_label(&cfg.target, label, models.diffusion.n_classes())?;
    let target = cfg.target;
    run_chain(models, cfg, true, |_| (label, target))
}

/// Plain label-conditioned reverse sampling; same random streams as [`dam_sample`].
pub fn sample_conditional<T: Scalar>(models: &Models<'_, T>, label: usize, cfg: &GuidanceConfig) -> Result<Sample<T>> {
    let cfg = GuidanceConfig { use_dual: false, ..cfg.clone() };
    models.check(&cfg)?;
    let label = conditioning_label(&cfg.target, label, models.diffusion.n_classes())?;
    let target = cfg.target;
    run_chain(models, &cfg, false, |_| (label, target))
}

/// Alternates two class targets: `l1` at even levels, `l2` at odd ones.
pub fn multi_neuron_sample<T: Scalar>(models: &Models<'_, T>, labels: (usize, usize), cfg: &GuidanceConfig) -> Result<Sample<T>> {
    models.check(cfg)?;
    let nc = models.diffusion.n_classes();
    let (l1, l2) = labels;
    if l1 >= nc || l2 >= nc {
        return Err(invalid("label out of range"));
    }
    run_chain(models, cfg, true, |t| {
        let l = if t % 2 == 0 { l1 } else { l2 };
        (l, NeuronSelector::Class { class: l })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class: usize,
    pub index: usize,
    pub seed: u64,
    /// `None` on success, otherwise the failure message.
    pub error: Option<String>,
    pub step_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Everything needed to replay a batch: base guidance settings and the per-sample seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub guidance: GuidanceConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: &str = "dam-manifest-v1";

pub struct Explanation<T> {
    pub entry: ManifestEntry,
    pub sample: Option<Sample<T>>,
}

pub fn sample_seed(base: u64, class: usize, index: usize) -> u64 {
    derive_seed(base, ((class as u64) << 32) | index as u64)
}

fn explain_one<T: Scalar>(models: &Models<'_, T>, base: &GuidanceConfig, class: usize, index: usize, seed: u64) -> Explanation<T> {
    let cfg = GuidanceConfig {
        seed,
        target: match base.target {
            NeuronSelector::Class { .. } => NeuronSelector::Class { class },
            other => other,
        },
        ..base.clone()
    };
    let started = Instant::now();
    match dam_sample(models, class, &cfg) {
        Ok(s) => Explanation {
            entry: ManifestEntry { class, index, seed, error: None, step_seconds: s.step_seconds.clone(), total_seconds: started.elapsed().as_secs_f64() },
            sample: Some(s),
        },
        Err(e) => Explanation {
            entry: ManifestEntry { class, index, seed, error: Some(e.to_string()), step_seconds: Vec::new(), total_seconds: started.elapsed().as_secs_f64() },
            sample: None,
        },
    }
}

/// `per_class` explanations for every class; failures are recorded and the batch continues.
pub fn batch_explain<T: Scalar>(
    models: &Models<'_, T>,
    classes: &[usize],
    per_class: usize,
    base: &GuidanceConfig,
    config_hash: &str,
    jobs: usize,
) -> Result<(Manifest, Vec<Explanation<T>>)> {
    let work: Vec<(usize, usize, u64)> = classes
        .iter()
        .flat_map(|&c| (0..per_class).map(move |i| (c, i, sample_seed(base.seed, c, i))))
        .collect();
    let results = run_jobs(jobs, || work.par_iter().map(|&(c, i, s)| explain_one(models, base, c, i, s)).collect::<Vec<_>>())?;
    let manifest = Manifest {
        version: MANIFEST_VERSION.to_string(),
        config_hash: config_hash.to_string(),
        guidance: base.clone(),
        entries: results.iter().map(|e| e.entry.clone()).collect(),
    };
    Ok((manifest, results))
}

/// Regenerates every successful entry of a manifest.
pub fn replay_manifest<T: Scalar>(models: &Models<'_, T>, manifest: &Manifest, jobs: usize) -> Result<Vec<Explanation<T>>> {
    if manifest.version != MANIFEST_VERSION {
        return Err(DamError::Format(format!("unsupported manifest version {:?}", manifest.version)));
    }
    run_jobs(jobs, || {
        manifest.entries.par_iter().map(|e| explain_one(models, &manifest.guidance, e.class, e.index, e.seed)).collect()
    })
}

/// Runs `f` on a pool of at most `jobs` threads (0 means the global pool).
pub fn run_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| invalid(e.to_string()))?;
    Ok(pool.install(f))
}

/// Noised training data drawn from unguided reverse chains of the generator
/// instead of the closed-form forward marginal.
pub fn noised_dataset_from_model<T: Scalar>(
    diffusion: &DiffusionModel<T>,
    classifier: &Classifier<T>,
    per_class: usize,
    n_points: usize,
    class_names: Vec<String>,
    seed: u64,
) -> Result<NoisedDataset<T>> {
    let models = Models { diffusion, classifier, noised: None };
    let steps = diffusion.schedule().steps();
    let mut clouds = Vec::new();
    let mut labels = Vec::new();
    let mut levels = Vec::new();
    let mut codes = Vec::new();
    for c in 0..diffusion.n_classes() {
        for i in 0..per_class {
            let s = sample_seed(seed, c, i);
            let cfg = GuidanceConfig { scale: 0.0, use_dual: false, ..GuidanceConfig::for_class(c, n_points, s) };
            let sample = sample_conditional(&models, c, &cfg)?;
            let k = seeded(derive_seed(s, 9)).gen_range(0..steps);
            let state = sample.trajectory.state_at_level(k + 1).expect("full trajectory").clone();
            clouds.push(PointCloud::new(state)?);
            labels.push(c);
            levels.push(k);
            codes.push(diffusion.schedule().time_code(k + 1)?);
        }
    }
    let dataset = LabeledDataset::new(clouds, labels, class_names, Split::Train)?;
    Ok(NoisedDataset { dataset, steps: levels, codes })
}

/// Fraction of clouds whose predicted class equals `class`.
pub fn success_rate<T: Scalar>(classifier: &Classifier<T>, clouds: &[PointCloud<T>], class: usize) -> Result<f64> {
    if clouds.is_empty() {
        return Err(shape("no clouds to score"));
    }
    let mut hits = 0;
    for c in clouds {
        if classifier.classify(c, None)?.predicted() == class {
            hits += 1;
        }
    }
    Ok(hits as f64 / clouds.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::diffusion::DiffusionConfig;
    use crate::pdt::PdtConfig;
    use proptest::prelude::*;

    #[test]
    fn weight_boundaries() {
        assert_eq!(weight_schedule(0, 250, WeightShape::Linear), (1.0, 0.0));
        assert_eq!(weight_schedule(250, 250, WeightShape::Linear), (0.0, 1.0));
        assert_eq!(weight_schedule(125, 250, WeightShape::Linear), (0.5, 0.5));
        for s in [WeightShape::Cosine, WeightShape::Step] {
            assert_eq!(weight_schedule(0, 250, s).0, 1.0);
            assert!(weight_schedule(250, 250, s).1 >= 0.99);
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_decrease(t in 0usize..500, steps in 2usize..500) {
            let t = t.min(steps);
            for s in [WeightShape::Linear, WeightShape::Cosine, WeightShape::Step] {
                let (a, b) = weight_schedule(t, steps, s);
                prop_assert_eq!(a + b, 1.0);
                if t < steps {
                    prop_assert!(weight_schedule(t + 1, steps, s).0 <= a);
                }
            }
        }
    }

    pub(crate) fn tiny_models(seed: u64) -> (DiffusionModel<f64>, Classifier<f64>, Classifier<f64>) {
        let mut dc = DiffusionConfig::toy(3);
        dc.steps = 16;
        dc.latent_dim = 4;
        dc.encoder_widths = vec![8];
        dc.pdt = PdtConfig { widths: vec![6, 6], zero_output: false, ..PdtConfig::new(3, 4, 3, 4) };
        let dm = DiffusionModel::new(dc, seed).unwrap();
        let cc = ClassifierConfig { per_point_widths: vec![8, 16], head_widths: vec![8], ..ClassifierConfig::toy(3) };
        let f = Classifier::new(cc, seed + 1).unwrap();
        let fp = f.to_noised_twin(4).unwrap();
        (dm, f, fp)
    }

    #[test]
    fn init_modes() {
        let (dm, _, _) = tiny_models(0);
        let (a, _) = initialize_sampling::<f64>(InitMode::RandomZ, None, 4, 10, 3).unwrap();
        let (b, _) = initialize_sampling::<f64>(InitMode::RandomZ, None, 4, 10, 3).unwrap();
        assert_eq!(a, b);
        assert!(initialize_sampling::<f64>(InitMode::RandomXThenEncode, None, 4, 10, 3).is_err());
        let (_, xr) = initialize_sampling(InitMode::RandomXThenEncode, Some(&dm), 4, 10, 3).unwrap();
        let code = dm.encode_latent(&xr.unwrap()).unwrap();
        assert_eq!(code.reparameterize(&Array1::zeros(4)).unwrap(), code.mean);
    }

    #[test]
    fn trajectory_bookkeeping_and_gradients() {
        let (dm, f, fp) = tiny_models(1);
        let models = Models { diffusion: &dm, classifier: &f, noised: Some(&fp) };
        let cfg = GuidanceConfig { scale: 0.5, ..GuidanceConfig::for_class(1, 12, 5) };
        let s = dam_sample(&models, 1, &cfg).unwrap();
        let tr = &s.trajectory;
        assert_eq!(tr.states.len(), 17);
        assert_eq!(tr.grads.len(), 16);
        assert_eq!(tr.final_state(), s.x0.points());
        for k in [0, 3, 7, 11, 15] {
            let (_, g) = f.activation_gradient(&tr.states[k], None, &cfg.target, cfg.mode).unwrap();
            assert!((&g - &tr.grads[k]).iter().all(|d| d.abs() <= 1e-6));
        }
        let again = dam_sample(&models, 1, &cfg).unwrap();
        assert_eq!(again.trajectory, s.trajectory);
    }

    #[test]
    fn zero_scale_equals_conditional_sampling() {
        let (dm, f, fp) = tiny_models(2);
        let models = Models { diffusion: &dm, classifier: &f, noised: Some(&fp) };
        let cfg = GuidanceConfig { scale: 0.0, ..GuidanceConfig::for_class(2, 9, 8) };
        let a = dam_sample(&models, 2, &cfg).unwrap();
        let b = sample_conditional(&models, 2, &cfg).unwrap();
        assert_eq!(a.x0, b.x0);
    }

    #[test]
    fn multi_neuron_degenerate_case() {
        let (dm, f, fp) = tiny_models(3);
        let models = Models { diffusion: &dm, classifier: &f, noised: Some(&fp) };
        let cfg = GuidanceConfig { scale: 0.5, ..GuidanceConfig::for_class(0, 9, 8) };
        let a = dam_sample(&models, 0, &cfg).unwrap();
        let b = multi_neuron_sample(&models, (0, 0), &cfg).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        let c = multi_neuron_sample(&models, (0, 1), &cfg).unwrap();
        assert_eq!(c.trajectory.grads.len(), 16);
    }

    #[test]
    fn batch_counts_and_replay() {
        let (dm, f, fp) = tiny_models(4);
        let models = Models { diffusion: &dm, classifier: &f, noised: Some(&fp) };
        let base = GuidanceConfig::for_class(0, 8, 77);
        let (manifest, out) = batch_explain(&models, &[0, 2], 3, &base, "h", 1).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|e| e.sample.is_some()));
        let again = replay_manifest(&models, &manifest, 1).unwrap();
        for (a, b) in out.iter().zip(&again) {
            assert_eq!(a.sample.as_ref().unwrap().x0, b.sample.as_ref().unwrap().x0);
        }
    }

    #[test]
    fn dual_without_twin_rejected() {
        let (dm, f, _) = tiny_models(5);
        let models = Models { diffusion: &dm, classifier: &f, noised: None };
        assert!(dam_sample(&models, 0, &GuidanceConfig::for_class(0, 8, 1)).is_err());
        let cfg = GuidanceConfig { use_dual: false, ..GuidanceConfig::for_class(0, 8, 1) };
        assert!(dam_sample(&models, 0, &cfg).is_ok());
    }

    #[test]
    fn archive_round_trip_with_stride() {
        let (dm, f, fp) = tiny_models(6);
        let models = Models { diffusion: &dm, classifier: &f, noised: Some(&fp) };
        let s = dam_sample(&models, 1, &GuidanceConfig::for_class(1, 7, 2)).unwrap();
        let full = decode_trajectory::<f64>(&encode_trajectory(&s.trajectory, 1).unwrap()).unwrap();
        assert_eq!(full, s.trajectory);
        let thin = decode_trajectory::<f64>(&encode_trajectory(&s.trajectory, 5).unwrap()).unwrap();
        assert_eq!(thin.levels, vec![16, 11, 6, 1, 0]);
        assert_eq!(thin.grads, s.trajectory.grads);
        assert_eq!(thin.state_at_level(6), s.trajectory.state_at_level(6));
        assert!(thin.state_at_level(5).is_none());
    }
}
