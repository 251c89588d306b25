//! Command-line front end. Every subcommand reads files, calls into the
//! library and writes files or JSON; no numerics live here.
//!
//! Exit codes: 0 success, 1 bad input (flags, files, formats, validation),
//! 2 infeasible count constraints.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ColorChoice, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adapt::{adapt_with, evaluate_model, pretrain, source_centroids, AdaptConfig, Method};
use crate::error::Error;
use crate::io;
use crate::model::{Architecture, Classifier};
use crate::solver::{build_cost_matrix, solve_assignment};
use crate::synth::{
    canonical_architecture, canonical_config, generate_scenario, noise_sweep, ShiftScenario,
    SweepPlan,
};
use crate::types::{
    proportions_to_counts, Centroids, FeatureMatrix, LabeledDataset, UnlabeledDataset,
};

#[derive(Debug, Parser)]
#[command(name = "pcpl", version, color = ColorChoice::Never)]
#[command(about = "Domain adaptation with proportion-constrained pseudo-labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    NearestCentroid,
    ProportionLoss,
}

#[derive(Debug, clap::Args)]
pub struct NetworkArgs {
    /// Comma-separated hidden widths of a freshly built network.
    #[arg(long, value_delimiter = ',', conflicts_with = "identity_extractor")]
    pub hidden: Option<Vec<usize>>,
    /// Use the input features directly; only the linear head is trained.
    #[arg(long)]
    pub identity_extractor: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on labeled source data.
    Pretrain {
        #[arg(long)]
        source_features: PathBuf,
        #[arg(long)]
        source_labels: PathBuf,
        #[arg(long)]
        val_features: PathBuf,
        #[arg(long)]
        val_labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        #[command(flatten)]
        network: NetworkArgs,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt a pre-trained network to unlabeled target data.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source_features: PathBuf,
        #[arg(long)]
        source_labels: PathBuf,
        #[arg(long)]
        target_features: PathBuf,
        #[arg(long)]
        proportions: PathBuf,
        #[arg(long)]
        val_features: PathBuf,
        #[arg(long)]
        val_labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
        /// Run a comparison method instead of constrained pseudo-labeling.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Labeled target data evaluated with the final network.
        #[arg(long, requires = "test_labels")]
        test_features: Option<PathBuf>,
        #[arg(long, requires = "test_features")]
        test_labels: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve one constrained assignment without training.
    Assign {
        #[arg(long)]
        features: PathBuf,
        /// Network whose extractor embeds both target and source features.
        #[arg(long, alias = "centroids-from", requires = "source_features")]
        model: Option<PathBuf>,
        /// Source data whose class means become centroids.
        #[arg(long, requires = "source_labels", conflicts_with = "centroid_file")]
        source_features: Option<PathBuf>,
        #[arg(long, requires = "source_features")]
        source_labels: Option<PathBuf>,
        /// Feature file with one centroid per class.
        #[arg(long, required_unless_present = "source_features")]
        centroid_file: Option<PathBuf>,
        #[arg(long)]
        proportions: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Print metrics of a network on labeled data as JSON.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Write a synthetic shifted-domain dataset.
    Synth {
        #[arg(long)]
        scenario_config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the seed in the scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt under perturbed target proportions and tabulate test metrics.
    NoiseSweep {
        #[arg(long)]
        scenario_config: PathBuf,
        /// Training settings; the canonical ones when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1")]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Dirichlet concentration of the perturbation direction.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out_csv: PathBuf,
        #[command(flatten)]
        network: NetworkArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// A failure with its exit code and a one-line message.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_infeasible() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Attributes a read or write error to the flag that named the file.
fn flagged<T>(flag: &str, path: &Path, r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("--{flag} {}: {}", path.display(), f.message);
        f
    })
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let rendered = e.to_string();
                    let line = rendered.lines().next().unwrap_or("invalid arguments");
                    let _ = writeln!(err, "{line}");
                    1
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>, fallback: AdaptConfig) -> CliResult<AdaptConfig> {
    let mut cfg = match path {
        Some(p) => flagged("config", p, io::read_config(p))?,
        None => fallback,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_labeled(
    (ff, fp): (&str, &Path),
    (lf, lp): (&str, &Path),
    num_classes: usize,
) -> CliResult<LabeledDataset> {
    let x = flagged(ff, fp, io::read_features(fp))?;
    let y = flagged(lf, lp, io::read_labels(lp))?;
    flagged(lf, lp, LabeledDataset::new(x, y, num_classes))
}

/// Class count implied by a label file: one past the largest label.
fn infer_classes(flag: &str, path: &Path) -> CliResult<usize> {
    let y = flagged(flag, path, io::read_labels(path))?;
    Ok(y.iter().max().map_or(0, |m| m + 1))
}

fn write_json(flag: &str, path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    flagged(flag, path, std::fs::write(path, text).map_err(Error::from))
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string(value).expect("report types serialize");
    writeln!(out, "{text}").map_err(|e| Failure::from(Error::from(e)))
}

fn architecture(net: &NetworkArgs, fallback: Architecture) -> Architecture {
    if net.identity_extractor {
        Architecture {
            hidden: Vec::new(),
            ..fallback
        }
    } else if let Some(h) = &net.hidden {
        Architecture {
            hidden: h.clone(),
            ..fallback
        }
    } else {
        fallback
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Pretrain {
            source_features,
            source_labels,
            val_features,
            val_labels,
            config,
            out_model,
            network,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed, AdaptConfig::default())?;
            let k = infer_classes("source-labels", &source_labels)?;
            let source = load_labeled(
                ("source-features", &source_features),
                ("source-labels", &source_labels),
                k,
            )?;
            let val = load_labeled(("val-features", &val_features), ("val-labels", &val_labels), k)?;
            let arch = architecture(&network, Architecture::default());
            let init = arch.build(source.features().d(), k, cfg.seed)?;
            let (model, history) = pretrain(&init, &source, &val, &cfg)?;
            flagged("out-model", &out_model, io::write_checkpoint(&model, &out_model))?;
            let best = history
                .epochs
                .iter()
                .find(|e| e.epoch == history.best_epoch)
                .map_or(history.initial_val, |e| e.val);
            print_json(
                out,
                &serde_json::json!({ "best_epoch": history.best_epoch, "val": best }),
            )
        }
        Command::Adapt {
            model,
            source_features,
            source_labels,
            target_features,
            proportions,
            val_features,
            val_labels,
            config,
            out_model,
            out_report,
            baseline,
            test_features,
            test_labels,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed, AdaptConfig::default())?;
            let net = flagged("model", &model, io::read_checkpoint(&model))?;
            let p = flagged("proportions", &proportions, io::read_proportions(&proportions))?;
            let k = p.num_classes();
            let source = load_labeled(
                ("source-features", &source_features),
                ("source-labels", &source_labels),
                k,
            )?;
            let target = UnlabeledDataset::new(
                flagged("target-features", &target_features, io::read_features(&target_features))?,
                k,
            )?;
            let val = load_labeled(("val-features", &val_features), ("val-labels", &val_labels), k)?;
            let method = match baseline {
                None => Method::ProportionConstrained,
                Some(Baseline::NearestCentroid) => Method::NearestCentroid,
                Some(Baseline::ProportionLoss) => Method::ProportionLoss,
            };
            let (adapted, mut report) = adapt_with(method, &net, &source, &target, &val, &p, &cfg)?;
            if let (Some(tf), Some(tl)) = (test_features, test_labels) {
                let test = load_labeled(("test-features", &tf), ("test-labels", &tl), k)?;
                report.test_metrics = Some(evaluate_model(&adapted, &test)?);
            }
            flagged("out-model", &out_model, io::write_checkpoint(&adapted, &out_model))?;
            write_json("out-report", &out_report, &report)
        }
        Command::Assign {
            features,
            model,
            source_features,
            source_labels,
            centroid_file,
            proportions,
            out_labels,
        } => {
            let p = flagged("proportions", &proportions, io::read_proportions(&proportions))?;
            let k = p.num_classes();
            let raw = flagged("features", &features, io::read_features(&features))?;
            let net: Option<Classifier> = match &model {
                Some(m) => Some(flagged("model", m, io::read_checkpoint(m))?),
                None => None,
            };
            let target: FeatureMatrix = match &net {
                Some(n) => n.extract(&raw)?,
                None => raw,
            };
            let centroids = match (centroid_file, source_features, source_labels) {
                (Some(cf), _, _) => {
                    let m = flagged("centroid-file", &cf, io::read_features(&cf))?;
                    if m.n() != k {
                        return Err(Failure {
                            code: 1,
                            message: format!(
                                "--centroid-file {}: {} centroids for {k} classes",
                                cf.display(),
                                m.n()
                            ),
                        });
                    }
                    Centroids::from_matrix(&m)
                }
                (None, Some(sf), Some(sl)) => {
                    let source = load_labeled(("source-features", &sf), ("source-labels", &sl), k)?;
                    match &net {
                        Some(n) => source_centroids(n, &source)?,
                        None => crate::types::compute_centroids(&source),
                    }
                }
                _ => unreachable!("clap enforces a centroid source"),
            };
            let costs = build_cost_matrix(&target, &centroids)?;
            let counts = proportions_to_counts(&p, target.n());
            let assignment = solve_assignment(&costs, &counts)?;
            flagged("out-labels", &out_labels, io::write_labels(&assignment.class_of, &out_labels))?;
            print_json(
                out,
                &serde_json::json!({
                    "total_cost": assignment.total_cost,
                    "counts": assignment.counts,
                }),
            )
        }
        Command::Eval {
            features,
            labels,
            model,
        } => {
            let net = flagged("model", &model, io::read_checkpoint(&model))?;
            let ds = load_labeled(("features", &features), ("labels", &labels), net.num_classes())?;
            print_json(out, &evaluate_model(&net, &ds)?)
        }
        Command::Synth {
            scenario_config,
            out_dir,
            seed,
        } => {
            let scenario = load_scenario(&scenario_config, seed)?;
            let data = generate_scenario(&scenario)?;
            flagged("out-dir", &out_dir, std::fs::create_dir_all(&out_dir).map_err(Error::from))?;
            let splits: [(&str, &FeatureMatrix, &[usize]); 4] = [
                ("source", data.source.features(), data.source.labels()),
                ("target_train", data.target_train.features(), &data.target_train_labels),
                ("target_val", data.target_val.features(), data.target_val.labels()),
                ("target_test", data.target_test.features(), data.target_test.labels()),
            ];
            for (name, x, y) in splits {
                let fp = out_dir.join(format!("{name}.pcpl"));
                let lp = out_dir.join(format!("{name}.labels"));
                flagged("out-dir", &fp, io::write_features(x, &fp))?;
                flagged("out-dir", &lp, io::write_labels(y, &lp))?;
            }
            let pp = out_dir.join("target_proportions.json");
            flagged("out-dir", &pp, io::write_proportions(&scenario.target_proportions, &pp))
        }
        Command::NoiseSweep {
            scenario_config,
            config,
            deltas,
            repeats,
            alpha,
            out_csv,
            network,
            seed,
        } => {
            let scenario = load_scenario(&scenario_config, None)?;
            let cfg = load_config(config.as_deref(), seed, canonical_config(seed.unwrap_or(0)))?;
            let arch = architecture(&network, canonical_architecture());
            let plan = SweepPlan {
                deltas,
                repeats,
                alpha,
            };
            let table = noise_sweep(&scenario, &arch, &cfg, &plan)?;
            flagged(
                "out-csv",
                &out_csv,
                std::fs::write(&out_csv, table.to_csv()).map_err(Error::from),
            )?;
            print_json(out, &table.summary())
        }
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> CliResult<ShiftScenario> {
    let text = flagged(
        "scenario-config",
        path,
        std::fs::read_to_string(path).map_err(Error::from),
    )?;
    let mut s: ShiftScenario = serde_json::from_str(&text).map_err(|e| Failure {
        code: 1,
        message: format!("--scenario-config {}: {e}", path.display()),
    })?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}
