use std::fs;
use std::path::PathBuf;

use dam_core::classifier::Classifier;
use dam_core::igd::{igd_attribution, linear_ig_over_trajectory, random_sequence, Reduction, SaliencyMethod, SaliencySequence};
use dam_core::metrics::{
    attribution_row, attribution_table_csv, evaluate_generation, generation_table_csv, GenerationInputs, Provenance,
};
use dam_core::pointcloud::io::{read_ply, read_ply_with_scalars, write_csv_with_scalars, write_ply_with_scalars};
use dam_core::pointcloud::{PointCloud, Split};
use dam_core::rng::{derive_seed, seeded};
use dam_core::sampler::decode_trajectory;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::explain::{load_run_manifest, Artifact, Batch};
use crate::error::CliError;
use crate::render::scatter_svg;
use crate::rundir::{list_files, read_json, sha256_file, write_atomic, write_json};
use crate::{Context, EvalArgs, PlotArgs, SaliencyArgs};

const METHODS: [&str; 3] = ["igd", "ig", "random"];

/// One trajectory's saliency sequence, as stored under `saliency/<method>/`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub stem: String,
    pub class: usize,
    pub explanation: String,
    pub sequence: SaliencySequence,
}

fn explained(batches: &[Batch]) -> impl Iterator<Item = (&Batch, &Artifact)> {
    batches.iter().flat_map(|b| b.artifacts.iter().filter(|a| a.ply.is_some() && a.trajectory.is_some()).map(move |a| (b, a)))
}

pub fn saliency(ctx: &Context, args: &SaliencyArgs) -> Result<(), CliError> {
    let c = &ctx.config;
    let method_name = args.method.clone().unwrap_or_else(|| "igd".to_string());
    let method: SaliencyMethod = method_name.parse()?;
    let stride = args.stride.map_or_else(|| c.get("saliency.stride"), Ok)?;
    let steps = args.steps.map_or_else(|| c.get("saliency.steps"), Ok)?;
    let seed = args.seed.map_or_else(|| c.get("saliency.seed"), Ok)?;
    let reduction = match &args.reduction {
        Some(r) => match r.as_str() {
            "abs_sum" => Reduction::AbsSum,
            "norm" => Reduction::Norm,
            _ => Reduction::Sum,
        },
        None => c.reduction()?,
    };
    let manifest = load_run_manifest(&ctx.run)?;
    let classifier: Option<Classifier<f64>> = if method == SaliencyMethod::Ig { Some(ctx.run.classifier(false)?) } else { None };
    let out_dir = ctx.run.saliency().join(&method_name);
    ctx.run.ensure(&out_dir)?;
    let mut written = 0;
    for (batch, art) in explained(&manifest.batches) {
        let traj_path = ctx.run.root.join(art.trajectory.as_ref().expect("filtered"));
        let traj = decode_trajectory::<f64>(&fs::read(&traj_path)?)?;
        if stride % batch.state_stride != 0 && method != SaliencyMethod::Random {
            return Err(CliError::usage(format!(
                "saliency stride {stride} must be a multiple of the stored state stride {}",
                batch.state_stride
            )));
        }
        let target = batch.target_for(traj.label);
        let seq = match method {
            SaliencyMethod::Igd => igd_attribution(&traj, stride, reduction)?,
            SaliencyMethod::Ig => {
                let clf = classifier.as_ref().expect("loaded for ig");
                let mode = batch.manifest.guidance.mode;
                let seq = linear_ig_over_trajectory(clf, &traj, stride, steps, &target, mode, reduction)?;
                if reduction == Reduction::Sum {
                    let last = seq.last().expect("at least one map");
                    let total: f64 = last.psi.iter().sum();
                    let delta = clf.activation_gradient(traj.final_state(), None, &target, mode)?.0
                        - clf.activation_gradient(traj.initial_state(), None, &target, mode)?.0;
                    let rel = (total - delta).abs() / delta.abs().max(1e-12);
                    println!("{}: ig completeness sum {total:.6} vs target change {delta:.6} (relative error {rel:.2e})", art.stem);
                }
                seq
            }
            SaliencyMethod::Random => random_sequence(traj.final_state().nrows(), traj.steps, stride, derive_seed(seed, art.seed))?,
        };
        for m in &seq.maps {
            let state = traj.state_at_level(m.t_emitted).ok_or_else(|| CliError::usage(format!("trajectory lacks the state at t={}", m.t_emitted)))?;
            let cloud = PointCloud::new(state.clone())?;
            write_ply_with_scalars(&cloud, &m.psi, out_dir.join(format!("{}_t{:03}.ply", art.stem, m.t_emitted)))?;
            write_csv_with_scalars(&cloud, &m.psi, out_dir.join(format!("{}_t{:03}.csv", art.stem, m.t_emitted)))?;
        }
        let record = SaliencyRecord { stem: art.stem.clone(), class: art.class, explanation: art.ply.clone().expect("filtered"), sequence: seq };
        write_json(&out_dir.join(format!("{}.json", art.stem)), &record)?;
        written += 1;
    }
    if written == 0 {
        return Err(CliError::missing("the manifest has no successful explanations; run `dam explain` first"));
    }
    println!("{method_name}: wrote saliency sequences for {written} trajectories to {}", out_dir.display());
    Ok(())
}

fn records(dir: &std::path::Path) -> Result<Vec<SaliencyRecord>, CliError> {
    list_files(dir, ".json")?.iter().map(|p| read_json(p, "dam saliency")).collect()
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<(), CliError> {
    let c = &ctx.config;
    let manifest = load_run_manifest(&ctx.run)?;
    let clf = ctx.run.classifier(false)?;
    let test = ctx.run.dataset(Split::Test)?;
    let n_refs = args.references.map_or_else(|| c.get("eval.references"), Ok)?;
    let seed: u64 = args.seed.map_or_else(|| c.get("eval.seed"), Ok)?;
    if n_refs == 0 {
        return Err(CliError::usage("--references must be positive"));
    }
    let references: Vec<Vec<PointCloud<f64>>> = (0..test.n_classes())
        .map(|k| {
            let mut idx = test.indices_of(k);
            idx.shuffle(&mut seeded(derive_seed(seed, k as u64)));
            idx.into_iter().take(n_refs).map(|i| test.clouds()[i].clone()).collect()
        })
        .collect();
    let mut generated = Vec::new();
    let mut seeds = Vec::new();
    for (_, art) in explained(&manifest.batches) {
        let (cloud, _) = read_ply::<f64>(ctx.run.root.join(art.ply.as_ref().expect("filtered")))?;
        generated.push((art.class, cloud));
        seeds.push(art.seed);
    }
    if generated.len() < 2 {
        return Err(CliError::usage(format!(
            "evaluation needs at least two explanations for FID, found {}; run `dam explain` with a larger --count",
            generated.len()
        )));
    }
    let summary = ctx.run.summary()?;
    let provenance = Provenance {
        dataset_hash: summary.train_hash,
        classifier_hash: sha256_file(&ctx.run.classifier_path(false))?,
        diffusion_hash: sha256_file(&ctx.run.diffusion_path())?,
        config_hash: c.hash(),
        seeds,
    };
    let inputs = GenerationInputs { covariance: c.covariance()?, symmetric_cd: c.get("eval.symmetric_cd")? };
    let mut report = evaluate_generation(&clf, &generated, &references, inputs, provenance)?;
    if args.faithfulness {
        let j: f64 = args.j.map_or_else(|| c.get("eval.j"), Ok)?;
        let mut js = vec![0.5, j];
        js.sort_by(f64::total_cmp);
        js.dedup();
        let step: f64 = c.get("eval.step")?;
        let ablation = c.ablation()?;
        for m in METHODS {
            let recs = records(&ctx.run.saliency().join(m))?;
            if recs.is_empty() {
                continue;
            }
            let items = recs
                .into_iter()
                .map(|r| Ok((read_ply::<f64>(ctx.run.root.join(&r.explanation))?.0, r.sequence)))
                .collect::<Result<Vec<_>, CliError>>()?;
            report.attribution.push(attribution_row(&clf, m, &items, &js, step, ablation)?);
        }
        if report.attribution.is_empty() {
            return Err(CliError::missing(format!(
                "no saliency maps under {}; run `dam saliency` first",
                ctx.run.saliency().display()
            )));
        }
    }
    let dir = ctx.run.reports();
    ctx.run.ensure(&dir)?;
    write_json(&dir.join("metrics.json"), &report)?;
    write_atomic(&dir.join("generation.csv"), generation_table_csv(&[("dam", &report)]).as_bytes())?;
    if !report.attribution.is_empty() {
        write_atomic(&dir.join("attribution.csv"), attribution_table_csv(&report.attribution).as_bytes())?;
    }
    println!(
        "m-IS {:.4}  FID {:.4}  CD {:.4}  EMD {:.4}  PCAMS {:.4}  mSR {:.3}",
        report.m_is, report.fid, report.cd, report.emd, report.pcams, report.msr
    );
    for r in &report.attribution {
        let faith: Vec<String> = r.faithfulness.iter().map(|(j, a)| format!("S^{j:.1} {a:.4}")).collect();
        println!("{:>6}: {}  L_var {:.3e}  L_D {:.3e}  L_W {:.3e}", r.method, faith.join("  "), r.l_var, r.l_d, r.l_w);
    }
    Ok(())
}

pub fn plot(ctx: &Context, args: &PlotArgs) -> Result<(), CliError> {
    let out_root = ctx.run.reports().join("plots");
    let mut written = 0;
    if args.saliency {
        let methods: Vec<&str> = match &args.method {
            Some(m) => vec![m.as_str()],
            None => METHODS.to_vec(),
        };
        let dirs: Vec<PathBuf> = methods.iter().map(|m| ctx.run.saliency().join(m)).collect();
        for (m, dir) in methods.iter().zip(&dirs) {
            let files = list_files(dir, ".ply")?;
            if files.is_empty() {
                continue;
            }
            let out = out_root.join("saliency").join(m);
            ctx.run.ensure(&out)?;
            for f in files {
                let (cloud, psi) = read_ply_with_scalars::<f64>(&f)?;
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("map").to_string();
                write_atomic(&out.join(format!("{stem}.svg")), scatter_svg(cloud.points(), Some(&psi), &format!("{m} {stem}")).as_bytes())?;
                written += 1;
            }
        }
        if written == 0 {
            let expected: Vec<String> = dirs.iter().map(|d| d.join("<stem>_tNNN.ply").display().to_string()).collect();
            return Err(CliError::missing(format!(
                "no saliency maps found; expected files like {}; run `dam saliency` first",
                expected.join(" or ")
            )));
        }
    } else {
        let manifest = load_run_manifest(&ctx.run)?;
        ctx.run.ensure(&out_root)?;
        for (_, art) in explained(&manifest.batches) {
            let (cloud, _) = read_ply::<f64>(ctx.run.root.join(art.ply.as_ref().expect("filtered")))?;
            let title = format!("{} class {} seed {}", art.stem, art.class, art.seed);
            write_atomic(&out_root.join(format!("{}.svg", art.stem)), scatter_svg(cloud.points(), None, &title).as_bytes())?;
            written += 1;
        }
        if written == 0 {
            return Err(CliError::missing("the manifest has no successful explanations; run `dam explain` first"));
        }
    }
    println!("wrote {written} figures under {}", out_root.display());
    Ok(())
}
