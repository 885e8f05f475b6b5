//! `dam`: dataset generation, training, explanation, saliency, evaluation and plotting.

mod commands;
mod config;
mod error;
mod render;
mod rundir;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{parse_set, RunConfig};
use crate::error::CliError;
use crate::rundir::{write_atomic, RunDir};

#[derive(Parser, Debug)]
#[command(name = "dam", version, about = "Global explanations for point-cloud classifiers via guided diffusion")]
struct Cli {
    /// Output root; every artifact lives below it.
    #[arg(long, global = true, env = "DAM_RUN_DIR", default_value = "dam-run")]
    run_dir: PathBuf,

    /// Flat `section.key = value` config file layered over the run's resolved config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Shortcut for `--set run.profile=NAME` (standard or toy).
    #[arg(long, global = true)]
    profile: Option<String>,

    /// Extra `section.key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the train/test dataset archives.
    GenData(GenDataArgs),
    /// Train the classifier, its noised twin, or the diffusion model.
    Train(TrainArgs),
    /// Generate guided explanations and their trajectories.
    Explain(ExplainArgs),
    /// Attribute explanation trajectories to their points.
    Saliency(SaliencyArgs),
    /// Score explanations and saliency maps.
    Eval(EvalArgs),
    /// Render explanations and saliency maps as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Synthetic primitive shapes (the default when no --off-dir is given).
    #[arg(long)]
    pub toy: bool,
    /// Directory with one sub-directory of `.off` meshes per class.
    #[arg(long, conflicts_with = "toy")]
    pub off_dir: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Points per cloud.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainTarget {
    Classifier,
    NoisedClassifier,
    Diffusion,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub target: TrainTarget,
    /// Continue from the last saved trainer state.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many epochs or iterations in this invocation (the saved state allows `--resume`).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Class to explain; every class when omitted.
    #[arg(long)]
    pub class: Option<usize>,
    /// Explanations per class.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Guide with the clean classifier only.
    #[arg(long)]
    pub no_dual: bool,
    #[arg(long, value_parser = ["logits", "softmax", "log_softmax"])]
    pub activation: Option<String>,
    /// Shape-code initialization: encode a random cloud (`x`) or draw from the prior (`z`).
    #[arg(long, value_parser = ["x", "z"])]
    pub init: Option<String>,
    /// Second class for two-neuron explanations; the target alternates between --class and this class at every step.
    #[arg(long)]
    pub second_class: Option<usize>,
    /// `logits`, `pool`, `point.K` or `head.K`.
    #[arg(long)]
    pub target_layer: Option<String>,
    /// Unit inside --target-layer; defaults to the class.
    #[arg(long)]
    pub unit: Option<usize>,
    /// Guidance scale.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Worker threads (0 uses all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Regenerate every manifest entry and compare with the stored files.
    #[arg(long)]
    pub replay: bool,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[arg(long, value_parser = ["igd", "ig", "random"])]
    pub method: Option<String>,
    /// Emission stride in diffusion steps.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Integration steps for linear IG.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["sum", "abs_sum", "norm"])]
    pub reduction: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Also score saliency maps found under saliency/.
    #[arg(long)]
    pub faithfulness: bool,
    /// Largest ablation fraction; 0.5 is always reported too.
    #[arg(long)]
    pub j: Option<f64>,
    /// Real reference clouds per class.
    #[arg(long)]
    pub references: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Render saliency maps instead of plain explanations.
    #[arg(long)]
    pub saliency: bool,
    #[arg(long, value_parser = ["igd", "ig", "random"])]
    pub method: Option<String>,
}

/// Shared per-invocation state.
pub struct Context {
    pub run: RunDir,
    pub config: RunConfig,
}

fn persistent_layers(cli: &Cli, run: &RunDir) -> Result<Vec<BTreeMap<String, String>>, CliError> {
    let mut layers = Vec::new();
    if run.config_path().exists() {
        layers.push(RunConfig::load_file(&run.config_path())?);
    }
    if let Some(p) = &cli.config {
        layers.push(RunConfig::load_file(p)?);
    }
    let mut top = BTreeMap::new();
    if let Some(p) = &cli.profile {
        top.insert("run.profile".to_string(), p.clone());
    }
    for s in &cli.set {
        let (k, v) = parse_set(s)?;
        top.insert(k, v);
    }
    layers.push(top);
    Ok(layers)
}

/// Command flags that change the stored configuration of the run.
fn command_layer(cmd: &Command) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    };
    match cmd {
        Command::GenData(a) => {
            if a.toy {
                put("data.toy", Some("true".into()));
                put("data.off_dir", Some(String::new()));
            }
            if let Some(d) = &a.off_dir {
                put("data.toy", Some("false".into()));
                put("data.off_dir", Some(d.display().to_string()));
            }
            put("data.classes", a.classes.map(|v| v.to_string()));
            put("data.per_class", a.per_class.map(|v| v.to_string()));
            put("data.test_per_class", a.test_per_class.map(|v| v.to_string()));
            put("data.n_points", a.n.map(|v| v.to_string()));
            put("data.seed", a.seed.map(|v| v.to_string()));
        }
        Command::Train(a) => {
            let key = if a.target == TrainTarget::NoisedClassifier { "noised.epochs" } else { "classifier.epochs" };
            put(key, a.epochs.map(|v| v.to_string()));
            put("diffusion.iterations", a.iterations.map(|v| v.to_string()));
            put("run.seed", a.seed.map(|v| v.to_string()));
        }
        Command::Explain(_) | Command::Saliency(_) | Command::Eval(_) | Command::Plot(_) => {}
    }
    m
}

fn run(cli: Cli) -> Result<(), CliError> {
    let run = RunDir::new(cli.run_dir.clone());
    let mut layers = persistent_layers(&cli, &run)?;
    layers.push(command_layer(&cli.command));
    let config = RunConfig::resolve(&layers)?;
    run.ensure(&run.root)?;
    let ctx = Context { run, config };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Explain(a) => commands::explain(&ctx, a),
        Command::Saliency(a) => commands::saliency(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Plot(a) => commands::plot(&ctx, a),
    };
    // only successful commands update the stored config, so a rejected flag never sticks
    if result.is_ok() {
        write_atomic(&ctx.run.config_path(), ctx.config.render().as_bytes())?;
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
