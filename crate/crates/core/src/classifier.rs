//! The point-cloud classifier being explained (shared per-point MLP, max
//! pooling, dense head), its time-conditioned noised twin, target
//! activations for activation maximization, and training.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, shape, DamError, Result};
use crate::nn::{batch_gradients, Adam, AdamState, Bound, Linear, LrSchedule, Params, ParamsSnapshot};
use crate::pointcloud::{LabeledDataset, PointCloud};
use crate::rng::{derive_seed, seeded, standard_normal};
use crate::Scalar;

pub const CLASSIFIER_CHECKPOINT_VERSION: &str = "dam-clf-v1";

/// Fixed-width, most-significant-bit-first binary code of a step index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeCode {
    pub bits: Vec<u8>,
}

/// `ceil(log2(T))`, the code width for `T` steps.
pub fn time_code_width(steps: usize) -> usize {
    if steps <= 1 {
        0
    } else {
        (usize::BITS - (steps - 1).leading_zeros()) as usize
    }
}

pub fn encode_time_binary(t: usize, steps: usize) -> Result<TimeCode> {
    if steps < 2 {
        return Err(invalid("time codes need at least two steps"));
    }
    if t >= steps {
        return Err(invalid(format!("time index {t} out of range [0, {steps})")));
    }
    let w = time_code_width(steps);
    Ok(TimeCode { bits: (0..w).rev().map(|k| ((t >> k) & 1) as u8).collect() })
}

impl TimeCode {
    pub fn decode(&self) -> usize {
        self.bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_row<T: Scalar>(&self) -> Array2<T> {
        Array2::from_shape_fn((1, self.bits.len()), |(_, j)| T::lit(self.bits[j] as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub per_point_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub n_classes: usize,
    /// 0 for the explained model, `ceil(log2 T)` for the noised twin.
    pub time_code_len: usize,
    /// Learned input/feature alignment transforms.
    pub t_net: bool,
    pub lr: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl ClassifierConfig {
    pub fn toy(n_classes: usize) -> Self {
        Self {
            input_dim: 3,
            per_point_widths: vec![32, 64, 128],
            head_widths: vec![64],
            n_classes,
            time_code_len: 0,
            t_net: false,
            lr: LrSchedule { start: 2e-3, end: 2e-4 },
            epochs: 12,
            batch_size: 16,
            weight_decay: 0.0,
        }
    }

    /// PointNet-sized widths for ModelNet-scale inputs.
    pub fn pointnet(n_classes: usize) -> Self {
        Self {
            per_point_widths: vec![64, 64, 64, 128, 1024],
            head_widths: vec![512, 256],
            t_net: true,
            epochs: 100,
            batch_size: 32,
            lr: LrSchedule { start: 1e-3, end: 1e-5 },
            ..Self::toy(n_classes)
        }
    }

    pub fn is_noised_twin(&self) -> bool {
        self.time_code_len > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(invalid("classifier input_dim must be >= 2"));
        }
        if self.n_classes < 2 {
            return Err(invalid("classifier needs at least two classes"));
        }
        if self.per_point_widths.is_empty() || self.per_point_widths.contains(&0) || self.head_widths.contains(&0) {
            return Err(invalid("layer widths must be positive and per-point stack non-empty"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Which unit is maximized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NeuronSelector {
    /// Output unit for a class; the [`ActivationMode`] applies.
    Class { class: usize },
    /// Hidden unit of a per-point layer, averaged over points.
    PerPoint { layer: usize, unit: usize },
    /// Unit of the max-pooled global feature.
    Pooled { unit: usize },
    /// Hidden unit of a dense head layer.
    Head { layer: usize, unit: usize },
}

impl NeuronSelector {
    pub fn class(&self) -> Option<usize> {
        match *self {
            NeuronSelector::Class { class } => Some(class),
            _ => None,
        }
    }

    /// Parses `logits`, `pool`, `point.K` or `head.K`; `unit` is the class index for `logits`.
    pub fn from_layer_name(layer: &str, unit: usize) -> Result<Self> {
        if layer == "logits" || layer == "output" {
            return Ok(NeuronSelector::Class { class: unit });
        }
        if layer == "pool" || layer == "pooled" {
            return Ok(NeuronSelector::Pooled { unit });
        }
        let parse = |rest: &str| rest.parse::<usize>().map_err(|_| invalid(format!("bad layer name {layer:?}")));
        if let Some(rest) = layer.strip_prefix("point.") {
            return Ok(NeuronSelector::PerPoint { layer: parse(rest)?, unit });
        }
        if let Some(rest) = layer.strip_prefix("head.") {
            return Ok(NeuronSelector::Head { layer: parse(rest)?, unit });
        }
        Err(invalid(format!("unknown layer {layer:?}; expected logits, pool, point.K or head.K")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    Logits,
    Softmax,
    #[default]
    LogSoftmax,
}

impl std::str::FromStr for ActivationMode {
    type Err = DamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(ActivationMode::Logits),
            "softmax" => Ok(ActivationMode::Softmax),
            "log_softmax" | "log-softmax" => Ok(ActivationMode::LogSoftmax),
            other => Err(invalid(format!("unknown activation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput<T> {
    pub logits: Array1<T>,
    pub probabilities: Array1<T>,
    /// Global feature right after max pooling.
    pub latent: Array1<T>,
}

impl<T: Scalar> ClassifierOutput<T> {
    pub fn predicted(&self) -> usize {
        argmax(self.logits.iter().copied())
    }
}

pub(crate) fn argmax<T: PartialOrd>(it: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v: Option<T> = None;
    for (i, v) in it.enumerate() {
        if best_v.as_ref().is_none_or(|b| v > *b) {
            best = i;
            best_v = Some(v);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TNet {
    mlp: Vec<Linear>,
    head: Vec<Linear>,
    out: Linear,
    k: usize,
}

impl TNet {
    fn new<T: Scalar>(params: &mut Params<T>, name: &str, k: usize, rng: &mut impl Rng) -> Self {
        let widths = [64, 128, 256];
        let mut mlp = Vec::new();
        let mut fan = k;
        for (i, &w) in widths.iter().enumerate() {
            mlp.push(Linear::new(params, &format!("{name}.mlp{i}"), fan, w, rng));
            fan = w;
        }
        let mut head = Vec::new();
        for (i, &w) in [128, 64].iter().enumerate() {
            head.push(Linear::new(params, &format!("{name}.fc{i}"), fan, w, rng));
            fan = w;
        }
        // starts as the identity transform
        let out = Linear::zeros(params, &format!("{name}.out"), fan, k * k);
        Self { mlp, head, out, k }
    }

    /// `x (I + M(x))`
    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, b: &Bound, x: Var) -> Var {
        let mut h = x;
        for l in &self.mlp {
            h = l.forward(g, b, h);
            h = g.relu(h);
        }
        h = g.max_rows(h);
        for l in &self.head {
            h = l.forward(g, b, h);
            h = g.relu(h);
        }
        let m = self.out.forward(g, b, h);
        let m = g.reshape(m, self.k, self.k);
        let eye = g.constant(Array2::eye(self.k));
        let m = g.add(m, eye);
        g.matmul(x, m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    input_tnet: Option<TNet>,
    feature_tnet: Option<TNet>,
    per_point: Vec<Linear>,
    head: Vec<Linear>,
    out: Linear,
}

/// Graph handles of one classifier evaluation.
pub struct ForwardVars {
    pub per_point: Vec<Var>,
    pub pooled: Var,
    pub head: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    config: ClassifierConfig,
    params: Params<T>,
    layout: Layout,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = Params::default();
        let d = config.input_dim;
        let input_tnet = config.t_net.then(|| TNet::new(&mut params, "tnet_in", d, &mut rng));
        let mut per_point = Vec::new();
        let mut fan = d + config.time_code_len;
        for (i, &w) in config.per_point_widths.iter().enumerate() {
            per_point.push(Linear::new(&mut params, &format!("point{i}"), fan, w, &mut rng));
            fan = w;
        }
        let feature_tnet = (config.t_net && config.per_point_widths.len() > 1)
            .then(|| TNet::new(&mut params, "tnet_feat", config.per_point_widths[0], &mut rng));
        let mut head = Vec::new();
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(Linear::new(&mut params, &format!("head{i}"), fan, w, &mut rng));
            fan = w;
        }
        let out = Linear::new(&mut params, "logits", fan, config.n_classes, &mut rng);
        Ok(Self { config, params, layout: Layout { input_tnet, feature_tnet, per_point, head, out } })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Changes the training length used by [`ClassifierTrainer`].
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn check_input(&self, cloud: &PointCloud<T>, time: Option<&TimeCode>) -> Result<()> {
        if cloud.dim() != self.config.input_dim {
            return Err(shape(format!("classifier expects D={}, got D={}", self.config.input_dim, cloud.dim())));
        }
        match (self.config.time_code_len, time) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(invalid("time code given to a classifier without time input")),
            (_, None) => Err(invalid("noised classifier requires a time code")),
            (w, Some(c)) if c.len() != w => Err(shape(format!("time code width {} != {w}", c.len()))),
            _ => Ok(()),
        }
    }

    /// Records the forward pass; `x` is an `N x D` node.
    pub fn forward_graph<'p>(&'p self, g: &mut Graph<'p, T>, b: &Bound, x: Var, time: Option<&TimeCode>) -> ForwardVars {
        let n = g.value(x).nrows();
        let mut h = match &self.layout.input_tnet {
            Some(t) => t.apply(g, b, x),
            None => x,
        };
        if let Some(code) = time {
            let row = g.constant(code.as_row());
            let rep = g.repeat_rows(row, n);
            h = g.concat_cols(&[h, rep]);
        }
        let mut per_point = Vec::with_capacity(self.layout.per_point.len());
        for (i, l) in self.layout.per_point.iter().enumerate() {
            h = l.forward(g, b, h);
            h = g.relu(h);
            if i == 0 {
                if let Some(t) = &self.layout.feature_tnet {
                    h = t.apply(g, b, h);
                }
            }
            per_point.push(h);
        }
        let pooled = g.max_rows(h);
        let mut hh = pooled;
        let mut head = Vec::with_capacity(self.layout.head.len());
        for l in &self.layout.head {
            hh = l.forward(g, b, hh);
            hh = g.relu(hh);
            head.push(hh);
        }
        let logits = self.layout.out.forward(g, b, hh);
        ForwardVars { per_point, pooled, head, logits }
    }

    pub fn classify(&self, cloud: &PointCloud<T>, time: Option<&TimeCode>) -> Result<ClassifierOutput<T>> {
        self.check_input(cloud, time)?;
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g);
        let x = g.constant(cloud.points().clone());
        let fv = self.forward_graph(&mut g, &b, x, time);
        let logits = g.value(fv.logits).row(0).to_owned();
        let probabilities = softmax_rows(g.value(fv.logits)).row(0).to_owned();
        let latent = g.value(fv.pooled).row(0).to_owned();
        Ok(ClassifierOutput { logits, probabilities, latent })
    }

    fn check_selector(&self, target: &NeuronSelector) -> Result<()> {
        let ok = match *target {
            NeuronSelector::Class { class } => class < self.config.n_classes,
            NeuronSelector::PerPoint { layer, unit } => {
                self.config.per_point_widths.get(layer).is_some_and(|&w| unit < w)
            }
            NeuronSelector::Pooled { unit } => unit < *self.config.per_point_widths.last().expect("non-empty"),
            NeuronSelector::Head { layer, unit } => self.config.head_widths.get(layer).is_some_and(|&w| unit < w),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("selector {target:?} is not valid for this classifier")))
        }
    }

    fn target_node(&self, g: &mut Graph<'_, T>, fv: &ForwardVars, target: &NeuronSelector, mode: ActivationMode) -> Var {
        match *target {
            NeuronSelector::Class { class } => {
                let act = match mode {
                    ActivationMode::Logits => fv.logits,
                    ActivationMode::Softmax => g.softmax_rows(fv.logits),
                    ActivationMode::LogSoftmax => g.log_softmax_rows(fv.logits),
                };
                g.select(act, 0, class)
            }
            NeuronSelector::PerPoint { layer, unit } => {
                let m = g.mean_rows(fv.per_point[layer]);
                g.select(m, 0, unit)
            }
            NeuronSelector::Pooled { unit } => g.select(fv.pooled, 0, unit),
            NeuronSelector::Head { layer, unit } => g.select(fv.head[layer], 0, unit),
        }
    }

    pub fn target_activation(
        &self,
        cloud: &PointCloud<T>,
        time: Option<&TimeCode>,
        target: &NeuronSelector,
        mode: ActivationMode,
    ) -> Result<T> {
        self.check_input(cloud, time)?;
        self.check_selector(target)?;
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g);
        let x = g.constant(cloud.points().clone());
        let fv = self.forward_graph(&mut g, &b, x, time);
        let r = self.target_node(&mut g, &fv, target, mode);
        Ok(g.scalar(r))
    }

    /// Target activation and its `N x D` gradient with respect to the points.
    pub fn activation_gradient(
        &self,
        points: &Array2<T>,
        time: Option<&TimeCode>,
        target: &NeuronSelector,
        mode: ActivationMode,
    ) -> Result<(T, Array2<T>)> {
        if points.ncols() != self.config.input_dim {
            return Err(shape(format!("classifier expects D={}, got D={}", self.config.input_dim, points.ncols())));
        }
        self.check_selector(target)?;
        if (self.config.time_code_len > 0) != time.is_some() {
            return Err(invalid("time code presence does not match the classifier"));
        }
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g);
        let x = g.input(points.clone(), true);
        let fv = self.forward_graph(&mut g, &b, x, time);
        let r = self.target_node(&mut g, &fv, target, mode);
        let value = g.scalar(r);
        let mut grads = g.backward(r);
        Ok((value, grads.take_or_zeros(x, points.dim())))
    }

    fn loss_and_grads(&self, cloud: &PointCloud<T>, label: usize, time: Option<&TimeCode>) -> Result<(f64, Vec<Array2<T>>)> {
        let mut g = Graph::new(true);
        let b = self.params.bind(&mut g);
        let x = g.constant(cloud.points().clone());
        let fv = self.forward_graph(&mut g, &b, x, time);
        let ls = g.log_softmax_rows(fv.logits);
        let picked = g.select(ls, 0, label);
        let loss = g.scale(picked, -T::one());
        let value = g.scalar(loss).as_f64();
        let mut grads = g.backward(loss);
        Ok((value, self.params.collect_grads(&b, &mut grads)))
    }

    /// Widens the first per-point layer with zero columns for a time code,
    /// giving the starting point of the noised twin.
    pub fn to_noised_twin(&self, time_code_len: usize) -> Result<Self> {
        if self.config.is_noised_twin() {
            return Err(invalid("classifier already takes a time code"));
        }
        if time_code_len == 0 {
            return Err(invalid("time_code_len must be positive"));
        }
        let config = ClassifierConfig { time_code_len, ..self.config.clone() };
        let mut twin = Classifier::<T>::new(config, 0)?;
        for (k, t) in twin.params.tensors().to_vec().into_iter().enumerate() {
            let src = &self.params.tensors()[k];
            let id_dst = twin.params.get_mut(crate::nn::ParamId::from_index(k));
            if src.dim() == t.dim() {
                id_dst.assign(src);
            } else {
                // first per-point weight: original rows, then zero rows for the code
                id_dst.fill(T::zero());
                id_dst.slice_mut(ndarray::s![..src.nrows(), ..]).assign(src);
            }
        }
        Ok(twin)
    }

    pub fn checkpoint(&self, metrics: TrainMetrics) -> ClassifierCheckpoint {
        ClassifierCheckpoint {
            version: CLASSIFIER_CHECKPOINT_VERSION.to_string(),
            config: self.config.clone(),
            weights: self.params.snapshot(),
            metrics,
        }
    }

    pub fn from_checkpoint(ck: &ClassifierCheckpoint) -> Result<Self> {
        if ck.version != CLASSIFIER_CHECKPOINT_VERSION {
            return Err(DamError::Format(format!("unsupported classifier checkpoint version {:?}", ck.version)));
        }
        let mut m = Classifier::new(ck.config.clone(), 0)?;
        m.params.load(&ck.weights)?;
        Ok(m)
    }
}

/// Self-describing classifier archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub version: String,
    pub config: ClassifierConfig,
    pub weights: ParamsSnapshot,
    pub metrics: TrainMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Samples with optional per-sample time codes.
pub struct Batchable<'a, T> {
    pub dataset: &'a LabeledDataset<T>,
    pub codes: Option<&'a [TimeCode]>,
}

impl<'a, T: Scalar> Batchable<'a, T> {
    pub fn clean(dataset: &'a LabeledDataset<T>) -> Self {
        Self { dataset, codes: None }
    }

    pub fn noised(n: &'a NoisedDataset<T>) -> Self {
        Self { dataset: &n.dataset, codes: Some(&n.codes) }
    }

    fn code(&self, i: usize) -> Option<&TimeCode> {
        self.codes.map(|c| &c[i])
    }
}

pub fn accuracy<T: Scalar>(model: &Classifier<T>, data: &Batchable<'_, T>) -> Result<f64> {
    if data.dataset.is_empty() {
        return Err(invalid("cannot score an empty dataset"));
    }
    let mut correct = 0usize;
    for (i, (c, l)) in data.dataset.iter().enumerate() {
        if model.classify(c, data.code(i))?.predicted() == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.dataset.len() as f64)
}

/// Resumable classifier training: model, optimizer, and finished epochs.
pub struct ClassifierTrainer<T> {
    pub model: Classifier<T>,
    opt: Adam<T>,
    seed: u64,
    pub epoch: usize,
    pub metrics: TrainMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierTrainerState {
    pub checkpoint: ClassifierCheckpoint,
    pub optimizer: AdamState,
    pub seed: u64,
    pub epoch: usize,
}

impl<T: Scalar> ClassifierTrainer<T> {
    pub fn new(model: Classifier<T>, seed: u64) -> Self {
        let opt = Adam::new(model.params(), Some(5.0));
        Self { model, opt, seed, epoch: 0, metrics: TrainMetrics::default() }
    }

    pub fn state(&self) -> ClassifierTrainerState {
        ClassifierTrainerState {
            checkpoint: self.model.checkpoint(self.metrics.clone()),
            optimizer: self.opt.state(),
            seed: self.seed,
            epoch: self.epoch,
        }
    }

    pub fn restore(state: &ClassifierTrainerState) -> Result<Self> {
        let model = Classifier::from_checkpoint(&state.checkpoint)?;
        let mut opt = Adam::new(model.params(), Some(5.0));
        opt.restore(&state.optimizer)?;
        Ok(Self { model, opt, seed: state.seed, epoch: state.epoch, metrics: state.checkpoint.metrics.clone() })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.model.config.epochs
    }

    /// One pass over `data` in a seed-determined order; returns the mean loss.
    pub fn run_epoch(&mut self, data: &Batchable<'_, T>) -> Result<f64> {
        let cfg = self.model.config.clone();
        let n = data.dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(derive_seed(self.seed, self.epoch as u64)));
        let batches_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = batches_per_epoch * cfg.epochs;
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let model = &self.model;
            let (loss, grads) = batch_gradients(model.params(), chunk, |&i| {
                model.loss_and_grads(&data.dataset.clouds()[i], data.dataset.labels()[i], data.code(i))
            })
            .map_err(|e| match e {
                DamError::Numeric(m) => DamError::Numeric(format!("classifier diverged at epoch {}: {m}", self.epoch)),
                other => other,
            })?;
            let lr = cfg.lr.at(self.epoch * batches_per_epoch + bi, total_steps);
            let mut grads = grads;
            if cfg.weight_decay > 0.0 {
                let wd = T::lit(cfg.weight_decay);
                for (gk, pk) in grads.iter_mut().zip(self.model.params.tensors()) {
                    gk.zip_mut_with(pk, |g, &p| *g += wd * p);
                }
            }
            self.opt.update(&mut self.model.params, &grads, lr)?;
            epoch_loss += loss * chunk.len() as f64;
        }
        let mean = epoch_loss / n as f64;
        self.metrics.epoch_losses.push(mean);
        self.epoch += 1;
        Ok(mean)
    }
}

fn check_trainable<T: Scalar>(ds: &LabeledDataset<T>, config: &ClassifierConfig) -> Result<()> {
    let counts = ds.class_counts();
    if counts.iter().filter(|&&c| c > 0).count() < 2 || ds.n_classes() < 2 {
        return Err(invalid("training needs at least two classes"));
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(invalid("every class needs at least two samples"));
    }
    if ds.n_classes() != config.n_classes {
        return Err(invalid(format!("dataset has {} classes, config {}", ds.n_classes(), config.n_classes)));
    }
    Ok(())
}

/// Trains the explained classifier from scratch.
pub fn train_classifier<T: Scalar>(
    train: &LabeledDataset<T>,
    test: Option<&LabeledDataset<T>>,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier<T>, TrainMetrics)> {
    check_trainable(train, config)?;
    if config.is_noised_twin() {
        return Err(invalid("use train_noised_classifier for time-conditioned models"));
    }
    let model = Classifier::new(config.clone(), derive_seed(seed, 1))?;
    let mut trainer = ClassifierTrainer::new(model, seed);
    let data = Batchable::clean(train);
    while !trainer.is_done() {
        trainer.run_epoch(&data)?;
    }
    trainer.metrics.train_accuracy = Some(accuracy(&trainer.model, &data)?);
    if let Some(t) = test {
        trainer.metrics.test_accuracy = Some(accuracy(&trainer.model, &Batchable::clean(t))?);
    }
    Ok((trainer.model, trainer.metrics))
}

/// Noised copies `q(x_{k+1} | x_0)` with a uniformly drawn step index `k` per sample.
#[derive(Clone, Debug)]
pub struct NoisedDataset<T> {
    pub dataset: LabeledDataset<T>,
    /// step index `k` in `[0, T)`; the cloud sits at noise level `k + 1`
    pub steps: Vec<usize>,
    pub codes: Vec<TimeCode>,
}

/// How step indices are drawn for [`make_noised_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSampler {
    Uniform,
    Fixed(usize),
}

pub fn make_noised_dataset<T: Scalar>(
    ds: &LabeledDataset<T>,
    schedule: &NoiseSchedule,
    sampler: StepSampler,
    seed: u64,
) -> Result<NoisedDataset<T>> {
    let steps_total = schedule.steps();
    let mut rng = seeded(seed);
    let mut clouds = Vec::with_capacity(ds.len());
    let mut steps = Vec::with_capacity(ds.len());
    let mut codes = Vec::with_capacity(ds.len());
    for c in ds.clouds() {
        let k = match sampler {
            StepSampler::Uniform => rng.gen_range(0..steps_total),
            StepSampler::Fixed(k) if k < steps_total => k,
            StepSampler::Fixed(k) => return Err(invalid(format!("step index {k} out of range"))),
        };
        let noise = standard_normal::<T>(&mut rng, c.n_points(), c.dim());
        clouds.push(crate::diffusion::forward_marginal(c, k + 1, schedule, &noise)?);
        steps.push(k);
        codes.push(encode_time_binary(k, steps_total)?);
    }
    let dataset = LabeledDataset::new(clouds, ds.labels().to_vec(), ds.class_names().to_vec(), ds.split())?;
    Ok(NoisedDataset { dataset, steps, codes })
}

/// Continues training a time-conditioned copy of `base` on noised data.
pub fn train_noised_classifier<T: Scalar>(
    base: &Classifier<T>,
    train: &NoisedDataset<T>,
    test: Option<&NoisedDataset<T>>,
    epochs: usize,
    seed: u64,
) -> Result<(Classifier<T>, TrainMetrics)> {
    check_trainable(&train.dataset, base.config())?;
    let width = train.codes.first().map(TimeCode::len).ok_or_else(|| invalid("empty noised dataset"))?;
    let mut twin = base.to_noised_twin(width)?;
    twin.config.epochs = epochs;
    let mut trainer = ClassifierTrainer::new(twin, seed);
    let data = Batchable::noised(train);
    while !trainer.is_done() {
        trainer.run_epoch(&data)?;
    }
    trainer.metrics.train_accuracy = Some(accuracy(&trainer.model, &data)?);
    if let Some(t) = test {
        trainer.metrics.test_accuracy = Some(accuracy(&trainer.model, &Batchable::noised(t))?);
    }
    Ok((trainer.model, trainer.metrics))
}

/// Like [`train_noised_classifier`], but every epoch draws fresh noise levels
/// and noise for the clean set, so each cloud is seen at many levels.
/// The test accuracy is measured on one noised copy of `test`.
pub fn train_noised_classifier_redrawn<T: Scalar>(
    base: &Classifier<T>,
    train: &LabeledDataset<T>,
    test: Option<&LabeledDataset<T>>,
    schedule: &NoiseSchedule,
    epochs: usize,
    seed: u64,
) -> Result<(Classifier<T>, TrainMetrics)> {
    check_trainable(train, base.config())?;
    let mut twin = base.to_noised_twin(schedule.time_code_len())?;
    twin.config.epochs = epochs;
    let mut trainer = ClassifierTrainer::new(twin, derive_seed(seed, 3));
    while !trainer.is_done() {
        let noised = make_noised_dataset(train, schedule, StepSampler::Uniform, derive_seed(seed, 100 + trainer.epoch as u64))?;
        trainer.run_epoch(&Batchable::noised(&noised))?;
    }
    if let Some(t) = test {
        let noised = make_noised_dataset(t, schedule, StepSampler::Uniform, derive_seed(seed, 99))?;
        trainer.metrics.test_accuracy = Some(accuracy(&trainer.model, &Batchable::noised(&noised))?);
    }
    Ok((trainer.model, trainer.metrics))
}

/// Mean of the per-class maximum probability; near `1 / N_C` for an uninformative model.
pub fn mean_max_probability<T: Scalar>(model: &Classifier<T>, clouds: &[PointCloud<T>]) -> Result<f64> {
    let mut total = 0.0;
    for c in clouds {
        let p = model.classify(c, None)?.probabilities;
        total += p.iter().copied().fold(T::zero(), T::max).as_f64();
    }
    Ok(total / clouds.len().max(1) as f64)
}

impl<T: Scalar> ClassifierOutput<T> {
    pub fn probability_sum(&self) -> T {
        self.probabilities.sum_axis(Axis(0)).into_scalar()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_synthetic_dataset, random_permutation, ShapeSpec, Split};

    #[test]
    fn time_code_contract() {
        assert_eq!(time_code_width(250), 8);
        assert_eq!(encode_time_binary(0, 250).unwrap().bits, vec![0; 8]);
        assert_eq!(encode_time_binary(5, 250).unwrap().bits, vec![0, 0, 0, 0, 0, 1, 0, 1]);
        for t in 0..250 {
            assert_eq!(encode_time_binary(t, 250).unwrap().decode(), t);
        }
        assert!(encode_time_binary(250, 250).is_err());
        assert_eq!(time_code_width(256), 8);
        assert_eq!(time_code_width(257), 9);
    }

    fn small_model(time: usize) -> Classifier<f64> {
        let cfg = ClassifierConfig { time_code_len: time, ..ClassifierConfig::toy(4) };
        Classifier::new(cfg, 3).unwrap()
    }

    fn cloud(seed: u64, n: usize) -> PointCloud<f64> {
        PointCloud::new(standard_normal(&mut seeded(seed), n, 3)).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one_and_agree_with_logits() {
        let m = small_model(0);
        for s in 0..5 {
            let out = m.classify(&cloud(s, 40), None).unwrap();
            assert!((out.probability_sum() - 1.0).abs() <= 1e-12);
            assert_eq!(out.predicted(), argmax(out.probabilities.iter().copied()));
        }
    }

    #[test]
    fn permutation_invariant_logits() {
        let m = small_model(0);
        let x = cloud(1, 64);
        let perm = random_permutation(64, &mut seeded(2));
        let a = m.classify(&x, None).unwrap();
        let b = m.classify(&x.permute(&perm).unwrap(), None).unwrap();
        assert!((&a.logits - &b.logits).iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn mode_relations() {
        let m = small_model(0);
        let x = cloud(4, 32);
        let out = m.classify(&x, None).unwrap();
        for c in 0..4 {
            let sel = NeuronSelector::Class { class: c };
            let s = m.target_activation(&x, None, &sel, ActivationMode::Softmax).unwrap();
            let ls = m.target_activation(&x, None, &sel, ActivationMode::LogSoftmax).unwrap();
            assert!((ls - s.ln()).abs() <= 1e-7);
            assert!((s - out.probabilities[c]).abs() <= 1e-12);
        }
        let best = |mode| {
            argmax((0..4).map(|c| m.target_activation(&x, None, &NeuronSelector::Class { class: c }, mode).unwrap()))
        };
        assert_eq!(best(ActivationMode::Logits), best(ActivationMode::Softmax));
        assert_eq!(best(ActivationMode::Softmax), best(ActivationMode::LogSoftmax));
    }

    #[test]
    fn uniform_logits_give_inverse_class_count() {
        let mut m = small_model(0);
        let out_w = m.layout.out.weight;
        m.params_mut().get_mut(out_w).fill(0.0);
        let sel = NeuronSelector::Class { class: 2 };
        let p = m.target_activation(&cloud(0, 8), None, &sel, ActivationMode::Softmax).unwrap();
        assert!((p - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn selectors_validated() {
        let m = small_model(0);
        let x = cloud(0, 8);
        let bad = [
            NeuronSelector::Class { class: 4 },
            NeuronSelector::PerPoint { layer: 3, unit: 0 },
            NeuronSelector::PerPoint { layer: 0, unit: 32 },
            NeuronSelector::Pooled { unit: 128 },
            NeuronSelector::Head { layer: 0, unit: 64 },
        ];
        for s in bad {
            assert!(m.target_activation(&x, None, &s, ActivationMode::Logits).is_err(), "{s:?}");
        }
        for s in [NeuronSelector::PerPoint { layer: 1, unit: 5 }, NeuronSelector::Pooled { unit: 3 }, NeuronSelector::Head { layer: 0, unit: 1 }] {
            assert!(m.target_activation(&x, None, &s, ActivationMode::Logits).is_ok());
        }
        assert_eq!(NeuronSelector::from_layer_name("head.0", 3).unwrap(), NeuronSelector::Head { layer: 0, unit: 3 });
        assert!(NeuronSelector::from_layer_name("conv9", 0).is_err());
    }

    #[test]
    fn dimension_and_time_code_checks() {
        let m = small_model(0);
        let x2 = PointCloud::new(Array2::<f64>::zeros((4, 2))).unwrap();
        assert!(m.classify(&x2, None).is_err());
        let code = encode_time_binary(3, 250).unwrap();
        assert!(m.classify(&cloud(0, 4), Some(&code)).is_err());
        let twin = small_model(8);
        assert!(twin.classify(&cloud(0, 4), None).is_err());
        assert!(twin.classify(&cloud(0, 4), Some(&code)).is_ok());
    }

    #[test]
    fn noised_twin_starts_equal_to_base() {
        let base = small_model(0);
        let twin = base.to_noised_twin(8).unwrap();
        let x = cloud(9, 30);
        let code = encode_time_binary(77, 250).unwrap();
        let a = base.classify(&x, None).unwrap();
        let b = twin.classify(&x, Some(&code)).unwrap();
        assert!((&a.logits - &b.logits).iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn t_net_variant_runs_and_is_invariant() {
        let cfg = ClassifierConfig { per_point_widths: vec![16, 32], head_widths: vec![16], t_net: true, ..ClassifierConfig::toy(3) };
        let m = Classifier::<f64>::new(cfg, 1).unwrap();
        let x = cloud(5, 20);
        let perm = random_permutation(20, &mut seeded(6));
        let a = m.classify(&x, None).unwrap();
        let b = m.classify(&x.permute(&perm).unwrap(), None).unwrap();
        assert!((&a.logits - &b.logits).iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn rejects_single_class_training() {
        let ds = generate_synthetic_dataset::<f64>(&ShapeSpec::toy_set(1, 16), 4, 0, Split::Train).unwrap();
        let cfg = ClassifierConfig::toy(2);
        assert!(train_classifier(&ds, None, &cfg, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small_model(8);
        let ck = m.checkpoint(TrainMetrics::default());
        let json = serde_json::to_string(&ck).unwrap();
        let back = Classifier::<f64>::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut bad = ck.clone();
        bad.version = "other".into();
        assert!(Classifier::<f64>::from_checkpoint(&bad).is_err());
    }
}
