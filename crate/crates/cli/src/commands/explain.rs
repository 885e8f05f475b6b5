use std::fs;

use dam_core::classifier::{Classifier, NeuronSelector};
use dam_core::diffusion::DiffusionModel;
use dam_core::pointcloud::io::encode_ply;
use dam_core::sampler::{
    batch_explain, encode_trajectory, multi_neuron_sample, replay_manifest, sample_seed, Explanation, GuidanceConfig, Manifest, ManifestEntry,
    Models, MANIFEST_VERSION,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::rundir::{read_json, sha256_bytes, write_atomic, write_json, RunDir};
use crate::{Context, ExplainArgs};

pub const RUN_MANIFEST_VERSION: &str = "dam-run-manifest-v1";

/// Every `explain` invocation appends one batch.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub batches: Vec<Batch>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Batch {
    pub id: usize,
    pub manifest: Manifest,
    pub second_class: Option<usize>,
    pub state_stride: usize,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub class: usize,
    pub index: usize,
    pub seed: u64,
    pub stem: String,
    pub ply: Option<String>,
    pub trajectory: Option<String>,
    pub ply_sha256: Option<String>,
    pub trajectory_sha256: Option<String>,
    pub predicted: Option<usize>,
    pub target_probability: Option<f64>,
}

impl Batch {
    /// Target explained by an entry's chain.
    pub fn target_for(&self, class: usize) -> NeuronSelector {
        match self.manifest.guidance.target {
            NeuronSelector::Class { .. } => NeuronSelector::Class { class },
            other => other,
        }
    }
}

pub fn load_run_manifest(run: &RunDir) -> Result<RunManifest, CliError> {
    let m: RunManifest = read_json(&run.manifest_path(), "dam explain")?;
    if m.version != RUN_MANIFEST_VERSION {
        return Err(CliError::other(format!("unsupported run manifest version {:?}", m.version)));
    }
    Ok(m)
}

pub struct LoadedModels {
    pub diffusion: DiffusionModel<f64>,
    pub classifier: Classifier<f64>,
    pub noised: Option<Classifier<f64>>,
}

impl LoadedModels {
    pub fn models(&self) -> Models<'_, f64> {
        Models { diffusion: &self.diffusion, classifier: &self.classifier, noised: self.noised.as_ref() }
    }
}

/// Loads the checkpoints and rejects combinations that do not belong together.
pub fn load_models(ctx: &Context, dual: bool) -> Result<LoadedModels, CliError> {
    let diffusion = ctx.run.diffusion()?;
    let classifier = ctx.run.classifier(false)?;
    let noised = if dual { Some(ctx.run.classifier(true)?) } else { None };
    if diffusion.n_classes() != classifier.n_classes() {
        return Err(CliError::usage(format!(
            "classifier has {} classes but the diffusion model {}",
            classifier.n_classes(),
            diffusion.n_classes()
        )));
    }
    let steps: usize = ctx.config.get("schedule.steps")?;
    if ctx.config.schedule_kind()? != diffusion.config().schedule || steps != diffusion.schedule().steps() {
        return Err(CliError::usage(format!(
            "diffusion checkpoint uses {:?} with T={}, but the run config asks for {:?} with T={steps}",
            diffusion.config().schedule,
            diffusion.schedule().steps(),
            ctx.config.schedule_kind()?
        )));
    }
    if let Some(fp) = &noised {
        if fp.config().time_code_len != diffusion.schedule().time_code_len() || fp.n_classes() != classifier.n_classes() {
            return Err(CliError::usage("noised classifier does not match the diffusion schedule; retrain it with `dam train noised-classifier`"));
        }
    }
    Ok(LoadedModels { diffusion, classifier, noised })
}

fn guidance(ctx: &Context, args: &ExplainArgs, class: usize) -> Result<GuidanceConfig, CliError> {
    let c = &ctx.config;
    let dual = c.get::<bool>("guidance.dual")? && !args.no_dual;
    let mode = match &args.activation {
        Some(a) => a.parse()?,
        None => c.activation()?,
    };
    let init = match args.init.as_deref() {
        Some("z") => dam_core::sampler::InitMode::RandomZ,
        Some(_) => dam_core::sampler::InitMode::RandomXThenEncode,
        None => c.init_mode()?,
    };
    let layer = args.target_layer.clone().unwrap_or_else(|| c.raw("guidance.target_layer").to_string());
    let target = NeuronSelector::from_layer_name(&layer, args.unit.unwrap_or(class))?;
    let cfg = GuidanceConfig {
        scale: args.scale.map_or_else(|| c.get("guidance.scale"), Ok)?,
        weight_shape: c.weight_shape()?,
        mode,
        use_dual: dual,
        target,
        init,
        n_points: args.n_points.map_or_else(|| c.get("explain.n_points"), Ok)?,
        seed: args.seed.map_or_else(|| c.get("explain.seed"), Ok)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn multi_explain(models: &Models<'_, f64>, base: &GuidanceConfig, pair: (usize, usize), count: usize) -> Vec<Explanation<f64>> {
    (0..count)
        .map(|index| {
            let seed = sample_seed(base.seed, pair.0, index);
            let cfg = GuidanceConfig { seed, target: NeuronSelector::Class { class: pair.0 }, ..base.clone() };
            let started = std::time::Instant::now();
            let (sample, error, step_seconds) = match multi_neuron_sample(models, pair, &cfg) {
                Ok(s) => {
                    let t = s.step_seconds.clone();
                    (Some(s), None, t)
                }
                Err(e) => (None, Some(e.to_string()), Vec::new()),
            };
            let entry = ManifestEntry { class: pair.0, index, seed, error, step_seconds, total_seconds: started.elapsed().as_secs_f64() };
            Explanation { entry, sample }
        })
        .collect()
}

/// PLY and trajectory bytes of one explanation.
fn encode(ex: &Explanation<f64>, stride: usize) -> Result<Option<(String, Vec<u8>)>, CliError> {
    match &ex.sample {
        Some(s) => Ok(Some((encode_ply(&s.x0, None)?, encode_trajectory(&s.trajectory, stride)?))),
        None => Ok(None),
    }
}

fn run_batch(
    models: &Models<'_, f64>,
    manifest: &Manifest,
    second_class: Option<usize>,
    jobs: usize,
) -> Result<Vec<Explanation<f64>>, CliError> {
    match second_class {
        None => Ok(replay_manifest(models, manifest, jobs)?),
        Some(c2) => {
            let first = manifest.entries.first().map_or(0, |e| e.class);
            Ok(multi_explain(models, &manifest.guidance, (first, c2), manifest.entries.len()))
        }
    }
}

pub fn explain(ctx: &Context, args: &ExplainArgs) -> Result<(), CliError> {
    if args.replay {
        return replay(ctx, args);
    }
    let dual = ctx.config.get::<bool>("guidance.dual")? && !args.no_dual;
    let loaded = load_models(ctx, dual)?;
    let models = loaded.models();
    let nc = loaded.diffusion.n_classes();
    let classes: Vec<usize> = match args.class {
        Some(c) if c >= nc => return Err(CliError::usage(format!("--class {c} out of range for {nc} classes"))),
        Some(c) => vec![c],
        None => (0..nc).collect(),
    };
    if let Some(c2) = args.second_class {
        if c2 >= nc || args.class.is_none() {
            return Err(CliError::usage("--second-class needs --class and must be a valid class index"));
        }
    }
    let count = args.count.map_or_else(|| ctx.config.get("explain.count"), Ok)?;
    if count == 0 {
        return Err(CliError::usage("--count must be positive"));
    }
    let jobs = args.jobs.map_or_else(|| ctx.config.get("explain.jobs"), Ok)?;
    let stride: usize = ctx.config.get("explain.state_stride")?;
    let base = guidance(ctx, args, classes[0])?;
    let hash = ctx.config.hash();
    let (manifest, results) = match args.second_class {
        None => batch_explain(&models, &classes, count, &base, &hash, jobs)?,
        Some(c2) => {
            let results = multi_explain(&models, &base, (classes[0], c2), count);
            let manifest = Manifest {
                version: MANIFEST_VERSION.to_string(),
                config_hash: hash.clone(),
                guidance: base.clone(),
                entries: results.iter().map(|e| e.entry.clone()).collect(),
            };
            (manifest, results)
        }
    };

    let mut run_manifest = if ctx.run.manifest_path().exists() {
        load_run_manifest(&ctx.run)?
    } else {
        RunManifest { version: RUN_MANIFEST_VERSION.into(), batches: Vec::new() }
    };
    let id = run_manifest.batches.len();
    ctx.run.ensure(&ctx.run.explanations())?;
    ctx.run.ensure(&ctx.run.trajectories())?;
    let mut artifacts = Vec::new();
    let mut failures = 0;
    for ex in &results {
        let e = &ex.entry;
        let stem = format!("b{id:02}_c{}_{:03}", e.class, e.index);
        let mut art = Artifact {
            class: e.class,
            index: e.index,
            seed: e.seed,
            stem: stem.clone(),
            ply: None,
            trajectory: None,
            ply_sha256: None,
            trajectory_sha256: None,
            predicted: None,
            target_probability: None,
        };
        match (encode(ex, stride)?, &ex.sample) {
            (Some((ply, traj)), Some(s)) => {
                let ply_rel = format!("explanations/{stem}.ply");
                let traj_rel = format!("trajectories/{stem}.traj.gz");
                write_atomic(&ctx.run.root.join(&ply_rel), ply.as_bytes())?;
                write_atomic(&ctx.run.root.join(&traj_rel), &traj)?;
                let out = loaded.classifier.classify(&s.x0, None)?;
                let class_of_interest = base_class(&base, e.class);
                art.predicted = Some(out.predicted());
                art.target_probability = class_of_interest.map(|c| out.probabilities[c]);
                art.ply_sha256 = Some(sha256_bytes(ply.as_bytes()));
                art.trajectory_sha256 = Some(sha256_bytes(&traj));
                art.ply = Some(ply_rel);
                art.trajectory = Some(traj_rel);
                println!(
                    "class {} #{} seed {}: predicted {} p={:.3} ({:.1}s)",
                    e.class,
                    e.index,
                    e.seed,
                    out.predicted(),
                    art.target_probability.unwrap_or(f64::NAN),
                    e.total_seconds
                );
            }
            _ => {
                failures += 1;
                eprintln!("class {} #{} seed {} failed: {}", e.class, e.index, e.seed, e.error.as_deref().unwrap_or("unknown"));
            }
        }
        artifacts.push(art);
    }
    run_manifest.batches.push(Batch { id, manifest, second_class: args.second_class, state_stride: stride, artifacts });
    write_json(&ctx.run.manifest_path(), &run_manifest)?;
    println!("batch {id}: {} explanations, {failures} failed", results.len());
    if failures == results.len() {
        return Err(CliError::numeric("every explanation in the batch failed"));
    }
    Ok(())
}

fn base_class(cfg: &GuidanceConfig, class: usize) -> Option<usize> {
    match cfg.target {
        NeuronSelector::Class { .. } => Some(class),
        _ => None,
    }
}

fn replay(ctx: &Context, args: &ExplainArgs) -> Result<(), CliError> {
    let run_manifest = load_run_manifest(&ctx.run)?;
    let jobs = args.jobs.map_or_else(|| ctx.config.get("explain.jobs"), Ok)?;
    let mut same = 0;
    let mut differ = Vec::new();
    for batch in &run_manifest.batches {
        let loaded = load_models(ctx, batch.manifest.guidance.use_dual)?;
        let results = run_batch(&loaded.models(), &batch.manifest, batch.second_class, jobs)?;
        for (ex, art) in results.iter().zip(&batch.artifacts) {
            let Some((ply, traj)) = encode(ex, batch.state_stride)? else {
                if art.ply.is_some() {
                    differ.push(art.stem.clone());
                }
                continue;
            };
            let stored_ply = art.ply.as_ref().map(|p| fs::read(ctx.run.root.join(p))).transpose()?;
            let stored_traj = art.trajectory.as_ref().map(|p| fs::read(ctx.run.root.join(p))).transpose()?;
            if stored_ply.as_deref() == Some(ply.as_bytes()) && stored_traj.as_deref() == Some(traj.as_slice()) {
                same += 1;
            } else {
                differ.push(art.stem.clone());
            }
        }
    }
    if differ.is_empty() {
        println!("replay: {same} explanations bitwise identical");
        Ok(())
    } else {
        Err(CliError::other(format!("replay: {same} identical, {} differ: {}", differ.len(), differ.join(", "))))
    }
}
