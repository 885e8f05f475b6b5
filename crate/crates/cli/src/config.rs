//! Flat `section.key = value` run configuration.
//!
//! Resolution order is defaults, then the run directory's `config.resolved`,
//! then any `--config` file, then `--set` pairs and command flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use dam_core::classifier::{ActivationMode, ClassifierConfig};
use dam_core::diffusion::{DiffusionConfig, ScheduleKind};
use dam_core::igd::Reduction;
use dam_core::metrics::{Ablation, Covariance};
use dam_core::nn::LrSchedule;
use dam_core::pdt::{AttentionInputMode, PdtConfig};
use dam_core::sampler::{InitMode, WeightShape};
use sha2::{Digest, Sha256};

use crate::error::CliError;

const COMMON: &[(&str, &str)] = &[
    ("run.profile", "standard"),
    ("run.seed", "7"),
    ("data.toy", "true"),
    ("data.classes", "4"),
    ("data.per_class", "200"),
    ("data.test_per_class", "50"),
    ("data.n_points", "256"),
    ("data.off_dir", ""),
    ("data.seed", "7"),
    ("schedule.kind", "cosine"),
    ("schedule.steps", "250"),
    ("schedule.offset", "0.008"),
    ("schedule.beta_start", "1e-4"),
    ("schedule.beta_end", "2e-2"),
    ("classifier.weight_decay", "0"),
    ("noised.source", "marginal"),
    ("noised.per_class", "32"),
    ("diffusion.lambda_kl", "1e-3"),
    ("diffusion.save_every", "100"),
    ("pdt.heads", "3"),
    ("pdt.attention", "pdt"),
    ("guidance.scale", "1e-4"),
    ("guidance.weights", "linear"),
    ("guidance.activation", "log_softmax"),
    ("guidance.dual", "true"),
    ("guidance.init", "x"),
    ("guidance.target_layer", "logits"),
    ("explain.n_points", "256"),
    ("explain.count", "10"),
    ("explain.seed", "1"),
    ("explain.state_stride", "10"),
    ("explain.jobs", "0"),
    ("saliency.stride", "50"),
    ("saliency.steps", "256"),
    ("saliency.reduction", "sum"),
    ("saliency.seed", "0"),
    ("eval.references", "5"),
    ("eval.covariance", "diagonal"),
    ("eval.symmetric_cd", "false"),
    ("eval.j", "1.0"),
    ("eval.step", "0.05"),
    ("eval.ablation", "centroid"),
    ("eval.seed", "0"),
];

const STANDARD: &[(&str, &str)] = &[
    ("classifier.per_point_widths", "64,64,64,128,1024"),
    ("classifier.head_widths", "512,256"),
    ("classifier.t_net", "true"),
    ("classifier.epochs", "100"),
    ("classifier.batch_size", "32"),
    ("classifier.lr_start", "1e-3"),
    ("classifier.lr_end", "1e-5"),
    ("noised.epochs", "100"),
    ("diffusion.latent_dim", "128"),
    ("diffusion.encoder_widths", "64,128,256"),
    ("diffusion.iterations", "20000"),
    ("diffusion.batch_size", "16"),
    ("diffusion.lr_start", "1e-2"),
    ("diffusion.lr_end", "1e-4"),
    ("diffusion.train_points", "0"),
    ("pdt.widths", "64,128,256"),
];

const TOY: &[(&str, &str)] = &[
    ("classifier.per_point_widths", "32,64,128"),
    ("classifier.head_widths", "64"),
    ("classifier.t_net", "false"),
    ("classifier.epochs", "6"),
    ("classifier.batch_size", "16"),
    ("classifier.lr_start", "2e-3"),
    ("classifier.lr_end", "2e-4"),
    ("noised.epochs", "6"),
    ("diffusion.latent_dim", "16"),
    ("diffusion.encoder_widths", "32,64"),
    ("diffusion.iterations", "1500"),
    ("diffusion.batch_size", "8"),
    ("diffusion.lr_start", "2e-3"),
    ("diffusion.lr_end", "2e-4"),
    ("diffusion.train_points", "64"),
    ("pdt.widths", "24,48,48"),
];

/// Resolved key-value configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Parses the text grammar: one `section.key = value` per line, `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected `section.key = value`", i + 1)))?;
        let k = k.trim();
        if !k.contains('.') || k.split('.').any(str::is_empty) {
            return Err(CliError::usage(format!("config line {}: key {k:?} must look like section.key", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn parse_set(pair: &str) -> Result<(String, String), CliError> {
    let (k, v) = pair.split_once('=').ok_or_else(|| CliError::usage(format!("--set expects key=value, got {pair:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn profile_table(name: &str) -> Result<&'static [(&'static str, &'static str)], CliError> {
    match name {
        "standard" => Ok(STANDARD),
        "toy" => Ok(TOY),
        other => Err(CliError::usage(format!("unknown profile {other:?}; expected standard or toy"))),
    }
}

impl RunConfig {
    /// Layers `layers` (lowest precedence first) over the defaults of the selected profile.
    pub fn resolve(layers: &[BTreeMap<String, String>]) -> Result<Self, CliError> {
        let mut profile = "standard".to_string();
        for l in layers {
            if let Some(p) = l.get("run.profile") {
                profile = p.clone();
            }
        }
        let mut values: BTreeMap<String, String> = COMMON.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in profile_table(&profile)? {
            values.insert(k.to_string(), v.to_string());
        }
        for l in layers {
            for (k, v) in l {
                if !values.contains_key(k) {
                    return Err(CliError::usage(format!("unknown config key {k:?}")));
                }
                values.insert(k.clone(), v.clone());
            }
        }
        values.insert("run.profile".into(), profile);
        Ok(Self { values })
    }

    pub fn load_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(format!("cannot read config {}: {e}", path.display())))?;
        parse_pairs(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V, CliError>
    where
        V::Err: Display,
    {
        self.raw(key).parse::<V>().map_err(|e| CliError::usage(format!("config {key} = {:?}: {e}", self.raw(key))))
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|e| CliError::usage(format!("config {key}: {e}"))))
            .collect()
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the sorted rendering, so key order in the source files does not matter.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes()))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("run.seed")
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind, CliError> {
        match self.raw("schedule.kind") {
            "cosine" => Ok(ScheduleKind::Cosine { offset: self.get("schedule.offset")? }),
            "linear" => Ok(ScheduleKind::Linear { start: self.get("schedule.beta_start")?, end: self.get("schedule.beta_end")? }),
            other => Err(CliError::usage(format!("schedule.kind must be cosine or linear, got {other:?}"))),
        }
    }

    pub fn classifier_config(&self, n_classes: usize) -> Result<ClassifierConfig, CliError> {
        let c = ClassifierConfig {
            per_point_widths: self.list("classifier.per_point_widths")?,
            head_widths: self.list("classifier.head_widths")?,
            t_net: self.get("classifier.t_net")?,
            epochs: self.get("classifier.epochs")?,
            batch_size: self.get("classifier.batch_size")?,
            lr: LrSchedule { start: self.get("classifier.lr_start")?, end: self.get("classifier.lr_end")? },
            weight_decay: self.get("classifier.weight_decay")?,
            ..ClassifierConfig::toy(n_classes)
        };
        c.validate()?;
        Ok(c)
    }

    pub fn diffusion_config(&self, n_classes: usize) -> Result<DiffusionConfig, CliError> {
        let steps: usize = self.get("schedule.steps")?;
        let latent_dim: usize = self.get("diffusion.latent_dim")?;
        let attention = AttentionInputMode::from_name(self.raw("pdt.attention"))?;
        let mut pdt = PdtConfig::new(3, latent_dim, n_classes, dam_core::classifier::time_code_width(steps));
        pdt.widths = self.list("pdt.widths")?;
        pdt.n_heads = self.get("pdt.heads")?;
        pdt.attention = attention;
        let c = DiffusionConfig {
            schedule: self.schedule_kind()?,
            steps,
            point_dim: 3,
            n_classes,
            latent_dim,
            encoder_widths: self.list("diffusion.encoder_widths")?,
            pdt,
            lambda_kl: self.get("diffusion.lambda_kl")?,
            lr: LrSchedule { start: self.get("diffusion.lr_start")?, end: self.get("diffusion.lr_end")? },
            iterations: self.get("diffusion.iterations")?,
            batch_size: self.get("diffusion.batch_size")?,
        };
        c.validate()?;
        c.build_schedule()?;
        Ok(c)
    }

    pub fn activation(&self) -> Result<ActivationMode, CliError> {
        Ok(self.raw("guidance.activation").parse::<ActivationMode>()?)
    }

    pub fn weight_shape(&self) -> Result<WeightShape, CliError> {
        Ok(self.raw("guidance.weights").parse::<WeightShape>()?)
    }

    pub fn init_mode(&self) -> Result<InitMode, CliError> {
        match self.raw("guidance.init") {
            "x" => Ok(InitMode::RandomXThenEncode),
            "z" => Ok(InitMode::RandomZ),
            other => Err(CliError::usage(format!("guidance.init must be x or z, got {other:?}"))),
        }
    }

    pub fn reduction(&self) -> Result<Reduction, CliError> {
        match self.raw("saliency.reduction") {
            "sum" => Ok(Reduction::Sum),
            "abs_sum" => Ok(Reduction::AbsSum),
            "norm" => Ok(Reduction::Norm),
            other => Err(CliError::usage(format!("saliency.reduction must be sum, abs_sum or norm, got {other:?}"))),
        }
    }

    pub fn covariance(&self) -> Result<Covariance, CliError> {
        match self.raw("eval.covariance") {
            "diagonal" => Ok(Covariance::Diagonal),
            "full" => Ok(Covariance::Full),
            other => Err(CliError::usage(format!("eval.covariance must be diagonal or full, got {other:?}"))),
        }
    }

    pub fn ablation(&self) -> Result<Ablation, CliError> {
        match self.raw("eval.ablation") {
            "centroid" => Ok(Ablation::Centroid),
            "delete" => Ok(Ablation::Delete),
            other => Err(CliError::usage(format!("eval.ablation must be centroid or delete, got {other:?}"))),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let m = parse_pairs("# header\n\nrun.seed = 3 # trailing\n data.classes=5\n").unwrap();
        assert_eq!(m["run.seed"], "3");
        assert_eq!(m["data.classes"], "5");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_pairs("seed 3").is_err());
        assert!(parse_pairs("seed = 3").is_err());
    }

    #[test]
    fn hash_ignores_source_order() {
        let a = RunConfig::resolve(&[parse_pairs("run.seed = 1\ndata.classes = 3\n").unwrap()]).unwrap();
        let b = RunConfig::resolve(&[parse_pairs("data.classes = 3\nrun.seed = 1\n").unwrap()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::resolve(&[parse_pairs("data.classes = 3\nrun.seed = 2\n").unwrap()]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn later_layers_win() {
        let file = parse_pairs("run.seed = 1").unwrap();
        let flags = parse_pairs("run.seed = 9").unwrap();
        let c = RunConfig::resolve(&[file, flags]).unwrap();
        assert_eq!(c.seed().unwrap(), 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(&[parse_pairs("run.nope = 1").unwrap()]).is_err());
    }

    #[test]
    fn profiles_resolve_to_valid_models() {
        for p in ["standard", "toy"] {
            let c = RunConfig::resolve(&[parse_pairs(&format!("run.profile = {p}")).unwrap()]).unwrap();
            c.classifier_config(4).unwrap();
            let d = c.diffusion_config(4).unwrap();
            assert_eq!(d.steps, 250);
            assert_eq!(d.pdt.n_heads, 3);
        }
        let std = RunConfig::resolve(&[]).unwrap();
        assert_eq!(std.diffusion_config(4).unwrap().pdt.widths, vec![64, 128, 256]);
    }
}
