use std::fs;
use std::path::{Path, PathBuf};

use dam_core::pointcloud::io::{read_off_mesh, sample_mesh_surface, write_dataset_archive};
use dam_core::pointcloud::{generate_synthetic_dataset, LabeledDataset, PointCloud, ShapeFamily, ShapeSpec, Split};
use dam_core::rng::derive_seed;

use crate::error::CliError;
use crate::rundir::{sha256_file, write_json, DataSummary};
use crate::{Context, GenDataArgs};

pub fn gen_data(ctx: &Context, _args: &GenDataArgs) -> Result<(), CliError> {
    let c = &ctx.config;
    let n: usize = c.get("data.n_points")?;
    let classes: usize = c.get("data.classes")?;
    let per_class: usize = c.get("data.per_class")?;
    let test_per_class: usize = c.get("data.test_per_class")?;
    let seed: u64 = c.get("data.seed")?;
    if n == 0 || per_class == 0 || test_per_class == 0 {
        return Err(CliError::usage("--n, --per-class and --test-per-class must be positive"));
    }
    let off_dir = c.raw("data.off_dir");
    let (train, test, source) = if off_dir.is_empty() {
        if !(2..=ShapeFamily::ALL.len()).contains(&classes) {
            return Err(CliError::usage(format!("--classes must be in 2..={} for synthetic data", ShapeFamily::ALL.len())));
        }
        let specs = ShapeSpec::toy_set(classes, n);
        let train = generate_synthetic_dataset::<f64>(&specs, per_class, derive_seed(seed, 0), Split::Train)?;
        let test = generate_synthetic_dataset::<f64>(&specs, test_per_class, derive_seed(seed, 1), Split::Test)?;
        (train, test, "synthetic".to_string())
    } else {
        let (train, test) = ingest_off(Path::new(off_dir), n, per_class, test_per_class, seed)?;
        (train, test, format!("off:{off_dir}"))
    };
    let dir = ctx.run.data();
    ctx.run.ensure(&dir)?;
    let train_path = dir.join("train.dam");
    let test_path = dir.join("test.dam");
    write_dataset_archive(&train, &train_path)?;
    write_dataset_archive(&test, &test_path)?;
    let summary = DataSummary {
        source,
        class_names: train.class_names().to_vec(),
        n_points: n,
        train_counts: train.class_counts(),
        test_counts: test.class_counts(),
        train_hash: sha256_file(&train_path)?,
        test_hash: sha256_file(&test_path)?,
        seed,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("wrote {} train and {} test clouds ({} classes, N={n})", train.len(), test.len(), train.n_classes());
    println!("train archive sha256 {}", summary.train_hash);
    Ok(())
}

fn off_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::missing(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("off")))
        .collect();
    v.sort();
    Ok(v)
}

/// One sub-directory per class. A class either has `train/` and `test/`
/// sub-folders or a flat list of meshes whose last fifth becomes the test split.
fn ingest_off(
    root: &Path,
    n: usize,
    per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset<f64>, LabeledDataset<f64>), CliError> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::missing(format!("cannot read OFF directory {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(CliError::usage(format!("{} needs at least two class sub-directories", root.display())));
    }
    let mut names = Vec::new();
    let mut splits: [(Vec<PointCloud<f64>>, Vec<usize>); 2] = Default::default();
    for (label, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().and_then(|s| s.to_str()).unwrap_or("class").to_string());
        let (train_files, test_files) = if dir.join("train").is_dir() && dir.join("test").is_dir() {
            (off_files(&dir.join("train"))?, off_files(&dir.join("test"))?)
        } else {
            let all = off_files(dir)?;
            let cut = all.len() - all.len() / 5;
            (all[..cut].to_vec(), all[cut..].to_vec())
        };
        for (s, (files, cap)) in [(train_files, per_class), (test_files, test_per_class)].into_iter().enumerate() {
            for (i, f) in files.iter().take(cap).enumerate() {
                let mesh = read_off_mesh(f).map_err(|e| CliError::other(format!("{}: {e}", f.display())))?;
                let stream = ((s as u64) << 48) | ((label as u64) << 24) | i as u64;
                let cloud = sample_mesh_surface::<f64>(&mesh, n, derive_seed(seed, stream))?.normalize_unit_sphere()?;
                splits[s].0.push(cloud);
                splits[s].1.push(label);
            }
        }
    }
    let [(tr_c, tr_l), (te_c, te_l)] = splits;
    if tr_c.is_empty() || te_c.is_empty() {
        return Err(CliError::usage(format!("{} has no usable .off meshes for one of the splits", root.display())));
    }
    let train = LabeledDataset::new(tr_c, tr_l, names.clone(), Split::Train)?;
    let test = LabeledDataset::new(te_c, te_l, names, Split::Test)?;
    Ok((train, test))
}
