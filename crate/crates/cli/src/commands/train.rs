use std::path::Path;
use std::time::Instant;

use dam_core::classifier::{
    accuracy, make_noised_dataset, Batchable, Classifier, ClassifierTrainer, ClassifierTrainerState, NoisedDataset, StepSampler,
};
use dam_core::diffusion::{DiffusionModel, DiffusionTrainer, DiffusionTrainerState, NoiseSchedule};
use dam_core::pointcloud::{LabeledDataset, Split};
use dam_core::rng::derive_seed;
use dam_core::sampler::noised_dataset_from_model;

use crate::error::CliError;
use crate::rundir::{read_json, write_atomic, write_json};
use crate::{Context, TrainArgs, TrainTarget};

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    ctx.run.ensure(&ctx.run.checkpoints())?;
    ctx.run.ensure(&ctx.run.reports())?;
    match args.target {
        TrainTarget::Classifier => train_clean(ctx, args),
        TrainTarget::NoisedClassifier => train_noised(ctx, args),
        TrainTarget::Diffusion => train_ddpm(ctx, args),
    }
}

fn load_state<S: serde::de::DeserializeOwned>(path: &Path, resume: bool) -> Result<Option<S>, CliError> {
    if !resume {
        return Ok(None);
    }
    if !path.exists() {
        eprintln!("no saved state at {}; starting fresh", path.display());
        return Ok(None);
    }
    read_json(path, "dam train").map(Some)
}

fn write_curve(path: &Path, header: &str, values: &[f64]) -> Result<(), CliError> {
    let mut s = format!("{header},loss\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{},{v}\n", i + 1));
    }
    write_atomic(path, s.as_bytes())
}

/// Runs epochs until done or `stop_after` is reached; returns true when training finished.
fn run_epochs<'a>(
    trainer: &mut ClassifierTrainer<f64>,
    state_path: &Path,
    curve_path: &Path,
    stop_after: Option<usize>,
    mut data_for_epoch: impl FnMut(usize) -> Result<NoisedOrClean<'a>, CliError>,
) -> Result<bool, CliError> {
    let mut ran = 0;
    while !trainer.is_done() {
        if stop_after.is_some_and(|k| ran >= k) {
            return Ok(false);
        }
        let started = Instant::now();
        let data = data_for_epoch(trainer.epoch)?;
        let loss = match data {
            NoisedOrClean::Clean(d) => trainer.run_epoch(&Batchable::clean(d))?,
            NoisedOrClean::Noised(d) => trainer.run_epoch(&Batchable::noised(&d))?,
        };
        println!("epoch {} loss {loss:.5} ({:.1}s)", trainer.epoch, started.elapsed().as_secs_f64());
        write_json(state_path, &trainer.state())?;
        write_curve(curve_path, "epoch", &trainer.metrics.epoch_losses)?;
        ran += 1;
    }
    Ok(true)
}

enum NoisedOrClean<'a> {
    Clean(&'a LabeledDataset<f64>),
    Noised(NoisedDataset<f64>),
}

fn train_clean(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    let train = ctx.run.dataset(Split::Train)?;
    let test = ctx.run.dataset(Split::Test)?;
    let seed = ctx.config.seed()?;
    let state_path = ctx.run.checkpoints().join("classifier.state.json");
    let curve = ctx.run.reports().join("classifier_curve.csv");
    let mut trainer = match load_state::<ClassifierTrainerState>(&state_path, args.resume)? {
        Some(s) => ClassifierTrainer::restore(&s)?,
        None => {
            let cfg = ctx.config.classifier_config(train.n_classes())?;
            ClassifierTrainer::new(Classifier::new(cfg, derive_seed(seed, 1))?, seed)
        }
    };
    if !run_epochs(&mut trainer, &state_path, &curve, args.stop_after, |_| Ok(NoisedOrClean::Clean(&train)))? {
        println!("stopped after epoch {}; continue with `dam train classifier --resume`", trainer.epoch);
        return Ok(());
    }
    let mut metrics = trainer.metrics.clone();
    metrics.train_accuracy = Some(accuracy(&trainer.model, &Batchable::clean(&train))?);
    metrics.test_accuracy = Some(accuracy(&trainer.model, &Batchable::clean(&test))?);
    write_json(&ctx.run.classifier_path(false), &trainer.model.checkpoint(metrics.clone()))?;
    println!(
        "classifier: train accuracy {:.4}, test accuracy {:.4}",
        metrics.train_accuracy.unwrap_or(0.0),
        metrics.test_accuracy.unwrap_or(0.0)
    );
    Ok(())
}

fn schedule_for(ctx: &Context, n_classes: usize) -> Result<NoiseSchedule, CliError> {
    Ok(ctx.config.diffusion_config(n_classes)?.build_schedule()?)
}

fn train_noised(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    let base = ctx.run.classifier(false)?;
    let train = ctx.run.dataset(Split::Train)?;
    let test = ctx.run.dataset(Split::Test)?;
    let seed = ctx.config.seed()?;
    let schedule = schedule_for(ctx, train.n_classes())?;
    let from_model = match ctx.config.raw("noised.source") {
        "marginal" => None,
        "model" => {
            let dm = ctx.run.diffusion()?;
            let per: usize = ctx.config.get("noised.per_class")?;
            let n = train.cloud_shape().map_or(256, |s| s.0);
            Some(noised_dataset_from_model(&dm, &base, per, n, train.class_names().to_vec(), derive_seed(seed, 12))?)
        }
        other => return Err(CliError::usage(format!("noised.source must be marginal or model, got {other:?}"))),
    };
    let state_path = ctx.run.checkpoints().join("noised_classifier.state.json");
    let curve = ctx.run.reports().join("noised_classifier_curve.csv");
    let mut trainer = match load_state::<ClassifierTrainerState>(&state_path, args.resume)? {
        Some(s) => ClassifierTrainer::restore(&s)?,
        None => {
            let mut twin = base.to_noised_twin(schedule.time_code_len())?;
            twin.set_epochs(ctx.config.get("noised.epochs")?);
            ClassifierTrainer::new(twin, derive_seed(seed, 3))
        }
    };
    // marginal draws are refreshed every epoch so each cloud is seen at many noise levels
    let finished = run_epochs(&mut trainer, &state_path, &curve, args.stop_after, |epoch| match &from_model {
        Some(d) => Ok(NoisedOrClean::Noised(d.clone())),
        None => Ok(NoisedOrClean::Noised(make_noised_dataset(&train, &schedule, StepSampler::Uniform, derive_seed(seed, 100 + epoch as u64))?)),
    })?;
    if !finished {
        println!("stopped after epoch {}; continue with `dam train noised-classifier --resume`", trainer.epoch);
        return Ok(());
    }
    let noised_test = make_noised_dataset(&test, &schedule, StepSampler::Uniform, derive_seed(seed, 99))?;
    let mut metrics = trainer.metrics.clone();
    metrics.test_accuracy = Some(accuracy(&trainer.model, &Batchable::noised(&noised_test))?);
    write_json(&ctx.run.classifier_path(true), &trainer.model.checkpoint(metrics.clone()))?;
    println!("noised classifier: test accuracy on noised data {:.4}", metrics.test_accuracy.unwrap_or(0.0));
    Ok(())
}

fn train_ddpm(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    let mut train = ctx.run.dataset(Split::Train)?;
    let seed = ctx.config.seed()?;
    let train_points: usize = ctx.config.get("diffusion.train_points")?;
    if train_points > 0 && train.cloud_shape().is_some_and(|s| s.0 != train_points) {
        let clouds = train
            .clouds()
            .iter()
            .enumerate()
            .map(|(i, c)| c.resample_fixed(train_points, derive_seed(seed, 1000 + i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        train = LabeledDataset::new(clouds, train.labels().to_vec(), train.class_names().to_vec(), Split::Train)?;
    }
    let save_every: usize = ctx.config.get::<usize>("diffusion.save_every")?.max(1);
    let state_path = ctx.run.checkpoints().join("diffusion.state.json");
    let curve = ctx.run.reports().join("diffusion_curve.csv");
    let mut trainer = match load_state::<DiffusionTrainerState>(&state_path, args.resume)? {
        Some(s) => DiffusionTrainer::restore(&s)?,
        None => {
            let cfg = ctx.config.diffusion_config(train.n_classes())?;
            DiffusionTrainer::new(DiffusionModel::new(cfg, derive_seed(seed, 2))?, seed)
        }
    };
    let started = Instant::now();
    let mut ran = 0;
    while !trainer.is_done() {
        if args.stop_after.is_some_and(|k| ran >= k) {
            write_json(&state_path, &trainer.state())?;
            write_curve(&curve, "iteration", &trainer.losses)?;
            println!("stopped at iteration {}; continue with `dam train diffusion --resume`", trainer.iteration);
            return Ok(());
        }
        trainer.step(&train)?;
        ran += 1;
        if trainer.iteration % save_every == 0 {
            let recent = &trainer.losses[trainer.losses.len().saturating_sub(save_every)..];
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            println!("iteration {} loss {mean:.5} ({:.0}s)", trainer.iteration, started.elapsed().as_secs_f64());
            write_json(&state_path, &trainer.state())?;
            write_curve(&curve, "iteration", &trainer.losses)?;
        }
    }
    write_curve(&curve, "iteration", &trainer.losses)?;
    write_json(&ctx.run.diffusion_path(), &trainer.model.checkpoint(trainer.losses.clone()))?;
    write_json(&state_path, &trainer.state())?;
    println!("diffusion model: {} iterations, final loss {:.5}", trainer.iteration, trainer.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}
