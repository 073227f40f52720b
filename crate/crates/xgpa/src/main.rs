use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xgpa::bench::{benchmark_scaling, Component};
use xgpa::checkpoint::Checkpoint;
use xgpa::csvio::load_csv;
use xgpa::data::split;
use xgpa::run::{
    cmd_evaluate, cmd_explain, cmd_forecast, cmd_generate, cmd_train, read_spec, write_forecast, write_json,
    write_text, DataSource, RunConfig, CHECKPOINT_FILE,
};
use xgpa::{Case, Result, SplitKind, XgpaError};

#[derive(Parser, Debug)]
#[command(name = "xgpa", version, about = "Pyramid autocorrelation and graph attention traffic forecaster")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset as speeds and graph CSVs.
    Generate {
        /// SyntheticSpec JSON; defaults apply to absent fields.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint and report.
    Train,
    /// Forecast every node for the horizon after `--at`.
    Forecast {
        #[command(flatten)]
        input: ModelInput,
        /// Last observed timestamp; defaults to the end of the data.
        #[arg(long)]
        at: Option<String>,
    },
    /// Export the attention explanation of one prediction.
    Explain {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        node: String,
        #[arg(long)]
        at: Option<String>,
        /// 1-based horizon step.
        #[arg(long, default_value_t = 1)]
        step: usize,
    },
    /// Horizon-wise MAE of the model and of HA on one split.
    Evaluate {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, default_value = "test")]
        split: SplitKind,
        #[arg(long)]
        case: Option<Case>,
        /// Evenly spaced windows to score; all if unset.
        #[arg(long)]
        windows: Option<usize>,
    },
    /// Time forward passes over input lengths.
    Bench {
        /// Ascending input lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096, 8192])]
        ls: Vec<usize>,
        /// pyramid, naive or both.
        #[arg(long, default_value = "both")]
        component: String,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

#[derive(Args, Debug)]
struct ModelInput {
    /// Checkpoint; defaults to model.xgpa in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Speeds CSV; with `--graph` replaces the config's data source.
    #[arg(long, requires = "graph")]
    speeds: Option<PathBuf>,
    #[arg(long, requires = "speeds")]
    graph: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(Some(cfg))
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.map(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn model_data(
    cli: &Cli,
    input: &ModelInput,
) -> Result<(Checkpoint, xgpa::core::TrafficGraph, xgpa::TrafficDataset, Option<RunConfig>, PathBuf)> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, cfg.as_ref());
    let ck_path = input.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&ck_path)?;
    let (graph, ds) = match (&input.speeds, &input.graph, &cfg) {
        (Some(s), Some(g), _) => load_csv(s, g)?,
        (_, _, Some(c)) => {
            c.validate()?;
            c.load_data()?
        }
        _ => {
            return Err(XgpaError::invalid(
                "data",
                "pass --speeds and --graph, or --config with a data source",
            ))
        }
    };
    Ok((ckpt, graph, ds, cfg, out))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Generate { spec } => {
            let cfg = load_config(cli)?;
            let spec = match (spec, cfg.as_ref().map(|c| &c.data)) {
                (Some(p), _) => read_spec(p)?,
                (None, Some(DataSource::SyntheticFile(p))) => read_spec(p)?,
                (None, Some(DataSource::Synthetic(s))) => {
                    s.validate()?;
                    s.clone()
                }
                _ => Default::default(),
            };
            let out = out_dir(cli, cfg.as_ref());
            let prov = cmd_generate(&spec, &out)?;
            println!("wrote {} (speeds sha256 {})", out.display(), prov.speeds_sha256);
        }
        Cmd::Train => {
            let cfg = load_config(cli)?.ok_or_else(|| XgpaError::invalid("config", "train needs --config"))?;
            let (_, out) = cmd_train(&cfg)?;
            let r = &out.report;
            println!(
                "best epoch {} val MAE {:.4} mph; wrote {}",
                r.best_epoch,
                r.best_val_mae,
                cfg.out_dir.display()
            );
            if let (Some(m), Some(h)) = (&r.test, &out.ha_test) {
                println!("test MAE {:.4} mph (HA {:.4} mph)", m.overall(), h.overall());
            }
        }
        Cmd::Forecast { input, at } => {
            let (ckpt, graph, ds, _, out) = model_data(cli, input)?;
            let rows = cmd_forecast(&ckpt, &ds, &graph, at.as_deref())?;
            std::fs::create_dir_all(&out).map_err(|e| XgpaError::Io { path: out.clone(), source: e })?;
            let path = out.join("forecast.csv");
            write_forecast(&rows, &path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Cmd::Explain { input, node, at, step } => {
            let (ckpt, graph, ds, _, out) = model_data(cli, input)?;
            let (doc, svg) = cmd_explain(&ckpt, &ds, &graph, node, at.as_deref(), *step)?;
            write_json(&doc, &out.join("explanation.json"))?;
            write_text(&svg, &out.join("explanation.svg"))?;
            println!("wrote explanation for {node} to {}", out.display());
        }
        Cmd::Evaluate {
            input,
            split: kind,
            case,
            windows,
        } => {
            let (ckpt, graph, ds, cfg, out) = model_data(cli, input)?;
            let fractions = cfg.as_ref().map_or((0.7, 0.1, 0.2), |c| c.split);
            let max = windows.or(cfg.as_ref().and_then(|c| c.eval_windows));
            let sp = split(&ds, fractions)?;
            let doc = cmd_evaluate(&ckpt, &ds, &graph, &sp, *kind, *case, max)?;
            let path = out.join("evaluation.json");
            write_json(&doc, &path)?;
            println!(
                "model MAE {:.4} mph, HA {:.4} mph; wrote {}",
                doc.model.overall(),
                doc.ha.overall(),
                path.display()
            );
        }
        Cmd::Bench { ls, component, runs } => {
            let comps = match component.as_str() {
                "both" => vec![Component::PyramidAttention, Component::NaiveQuadraticAttention],
                c => vec![c.parse()?],
            };
            let mut csv = String::from("component,L,seconds\n");
            for c in comps {
                let t = benchmark_scaling(c, ls, *runs)?;
                println!("{c}: log-log slope {:.3}", t.slope);
                csv.push_str(t.to_csv().split_once('\n').map_or("", |x| x.1));
            }
            let path = out_dir(cli, None).join("bench.csv");
            write_text(&csv, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
