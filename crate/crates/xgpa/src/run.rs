//! Run configuration and the file-producing pipeline behind each CLI
//! subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xgpa_core::{TrafficGraph, XgpaConfig, XgpaModel};

use crate::checkpoint::Checkpoint;
use crate::csvio::{format_time, load_csv, parse_time, write_graph, write_speeds};
use crate::data::{split, Case, Split, SplitKind, TrafficDataset, WindowSpec};
use crate::error::{Result, XgpaError};
use crate::eval::{predict, predict_input, HorizonMAE};
use crate::export::{explanation_doc, render_svg, ExplanationDoc};
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::train::{evaluate_ha, evaluate_split, train, TrainHyper, TrainReport};

pub const CHECKPOINT_FILE: &str = "model.xgpa";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPEEDS_FILE: &str = "speeds.csv";
pub const GRAPH_FILE: &str = "graph.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";
/// Per-epoch wall time; the one output that differs between repeated runs.
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Path to a SyntheticSpec JSON file.
    SyntheticFile(PathBuf),
    Synthetic(SyntheticSpec),
    Csv { speeds: PathBuf, graph: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    /// Window layout; when set it fixes the model's `L` and `Q`.
    #[serde(default)]
    pub case: Option<Case>,
    #[serde(default)]
    pub model: XgpaConfig,
    #[serde(default)]
    pub train: TrainHyper,
    /// Train/val/test fractions, rounded to whole days.
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Overrides `model.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Evenly spaced windows scored by evaluation; all if unset.
    #[serde(default)]
    pub eval_windows: Option<usize>,
}

fn default_split() -> (f64, f64, f64) {
    (0.7, 0.1, 0.2)
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(data: DataSource) -> Self {
        RunConfig {
            data,
            case: None,
            model: XgpaConfig::default(),
            train: TrainHyper::default(),
            split: default_split(),
            out_dir: default_out(),
            seed: None,
            eval_windows: None,
        }
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| XgpaError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| XgpaError::invalid("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.data {
            DataSource::SyntheticFile(p) => fix(p),
            DataSource::Csv { speeds, graph } => {
                fix(speeds);
                fix(graph);
            }
            DataSource::Synthetic(_) => {}
        }
        fix(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let must_exist = |p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(XgpaError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
            }
        };
        match &self.data {
            DataSource::SyntheticFile(p) => must_exist(p)?,
            DataSource::Synthetic(s) => {
                s.validate()?;
            }
            DataSource::Csv { speeds, graph } => {
                must_exist(speeds)?;
                must_exist(graph)?;
            }
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 {
            return Err(XgpaError::invalid("split", "fractions must be in [0, 1], sum to 1, with a non-empty train part"));
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<(TrafficGraph, TrafficDataset)> {
        match &self.data {
            DataSource::SyntheticFile(p) => generate_synthetic(&read_spec(p)?),
            DataSource::Synthetic(s) => generate_synthetic(s),
            DataSource::Csv { speeds, graph } => load_csv(speeds, graph),
        }
    }

    /// Model config and window layout with the case and seed applied.
    pub fn resolve(&self, ds: &TrafficDataset) -> Result<(XgpaConfig, WindowSpec)> {
        let mut model = self.model.clone();
        if let Some(seed) = self.seed {
            model.seed = seed;
        }
        let spec = match self.case {
            Some(case) => WindowSpec::for_case(case, ds.resolution_min())?,
            None => WindowSpec::contiguous(model.input_len, model.horizon),
        };
        model.input_len = spec.input_len;
        model.horizon = spec.horizon;
        model.validate()?;
        Ok((model, spec))
    }
}

pub fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path).map_err(|e| XgpaError::io(path, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| XgpaError::invalid("spec", format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| XgpaError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| XgpaError::io(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub speeds_sha256: String,
    pub graph_sha256: String,
}

/// Writes the speeds CSV, graph CSV and provenance JSON into `out_dir`.
pub fn cmd_generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<Provenance> {
    let (graph, ds) = generate_synthetic(spec)?;
    let mut speeds = Vec::new();
    write_speeds(&ds, &mut speeds)?;
    let mut edges = Vec::new();
    write_graph(&graph, &mut edges)?;
    let prov = Provenance {
        spec: spec.clone(),
        seed: spec.seed,
        speeds_sha256: sha256_hex(&speeds),
        graph_sha256: sha256_hex(&edges),
    };
    create_dir(out_dir)?;
    write(&out_dir.join(SPEEDS_FILE), &speeds)?;
    write(&out_dir.join(GRAPH_FILE), &edges)?;
    write(&out_dir.join(PROVENANCE_FILE), &to_json(&prov)?)?;
    Ok(prov)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: XgpaConfig,
    pub window: WindowSpec,
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub report_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub report: TrainReport,
    /// HA on the same test windows, when the test split holds any.
    pub ha_test: Option<HorizonMAE>,
    pub config: XgpaConfig,
    pub window: WindowSpec,
    pub seed: u64,
}

/// Trains per `cfg` and writes checkpoint, report, resolved config and
/// manifest into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<(Checkpoint, TrainOutput)> {
    cfg.validate()?;
    let (graph, ds) = cfg.load_data()?;
    let (config, window) = cfg.resolve(&ds)?;
    let sp = split(&ds, cfg.split)?;
    let mut model = XgpaModel::new(config.clone())?;
    let (mut report, normalizer) = train(&mut model, &ds, &graph, &sp, &window, &cfg.train)?;
    let ckpt = Checkpoint {
        model,
        normalizer,
        node_ids: ds.ids().to_vec(),
        window: window.clone(),
    };
    let has_test = !sp.test.is_empty()
        && !crate::data::make_windows(&ds, &window, sp.range(SplitKind::Test)).is_empty();
    let mut ha_test = None;
    if has_test {
        report.test = Some(evaluate_split(&ckpt, &ds, &graph, &sp, SplitKind::Test, &window, cfg.eval_windows)?);
        ha_test = Some(evaluate_ha(&ds, &sp, SplitKind::Test, &window, cfg.eval_windows)?);
    }
    let out = TrainOutput {
        report,
        ha_test,
        seed: config.seed,
        config,
        window,
    };
    create_dir(&cfg.out_dir)?;
    let ck_bytes = ckpt.to_bytes()?;
    let report_bytes = to_json(&out)?;
    write(&cfg.out_dir.join(CHECKPOINT_FILE), &ck_bytes)?;
    write(&cfg.out_dir.join(REPORT_FILE), &report_bytes)?;
    let mut resolved = cfg.clone();
    resolved.model = out.config.clone();
    resolved.seed = Some(out.seed);
    write(&cfg.out_dir.join(CONFIG_FILE), &to_json(&resolved)?)?;
    let mut timing = String::from("epoch,wall_s\n");
    for e in &out.report.epochs {
        timing.push_str(&format!("{},{}\n", e.epoch, e.wall_s));
    }
    write(&cfg.out_dir.join(TIMING_FILE), timing.as_bytes())?;
    let manifest = Manifest {
        config: out.config.clone(),
        window: out.window.clone(),
        seed: out.seed,
        checkpoint_sha256: sha256_hex(&ck_bytes),
        report_sha256: sha256_hex(&report_bytes),
    };
    write(&cfg.out_dir.join(MANIFEST_FILE), &to_json(&manifest)?)?;
    Ok((ckpt, out))
}

/// Forecast origin for `--at`, the last observed timestamp; the end of the
/// data when absent.
pub fn origin_for(ds: &TrafficDataset, at: Option<&str>) -> Result<usize> {
    match at {
        None => Ok(ds.len()),
        Some(s) => {
            let t = parse_time(s)?;
            let step = ds
                .step_of(t)
                .ok_or_else(|| XgpaError::invalid("at", format!("{s} is not a timestamp of the data")))?;
            Ok(step + 1)
        }
    }
}

fn history_check(ckpt: &Checkpoint, ds: &TrafficDataset, origin: usize) -> Result<()> {
    let need = ckpt.window.history();
    if origin < need {
        return Err(XgpaError::invalid(
            "at",
            format!(
                "needs {need} steps of history but only {origin} are available before {}",
                format_time(ds.timestamp(origin))
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub node_id: String,
    pub horizon_step: usize,
    pub timestamp: String,
    pub predicted_mph: f64,
}

pub fn cmd_forecast(ckpt: &Checkpoint, ds: &TrafficDataset, graph: &TrafficGraph, at: Option<&str>) -> Result<Vec<ForecastRow>> {
    let origin = origin_for(ds, at)?;
    history_check(ckpt, ds, origin)?;
    let pred = predict(ckpt, ds, graph, origin)?;
    let q = ckpt.window.horizon;
    let mut rows = Vec::with_capacity(ds.n() * q);
    for (node, id) in ds.ids().iter().enumerate() {
        for h in 0..q {
            rows.push(ForecastRow {
                node_id: id.clone(),
                horizon_step: h + 1,
                timestamp: format_time(ds.timestamp(origin + h)),
                predicted_mph: pred.data()[node * q + h],
            });
        }
    }
    Ok(rows)
}

pub fn write_forecast(rows: &[ForecastRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => XgpaError::io(path, io),
        other => XgpaError::Format(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| XgpaError::io(path, e))
}

/// Explanation of node `node_id` at 1-based horizon `step`.
pub fn cmd_explain(
    ckpt: &Checkpoint,
    ds: &TrafficDataset,
    graph: &TrafficGraph,
    node_id: &str,
    at: Option<&str>,
    step: usize,
) -> Result<(ExplanationDoc, String)> {
    ckpt.check_dataset(ds)?;
    let node = ds
        .index_of(node_id)
        .ok_or_else(|| XgpaError::invalid("node", format!("unknown node id {node_id:?}")))?;
    let q = ckpt.window.horizon;
    if step == 0 || step > q {
        return Err(XgpaError::invalid("step", format!("must be in 1..={q}, got {step}")));
    }
    let origin = origin_for(ds, at)?;
    history_check(ckpt, ds, origin)?;
    let x = crate::data::input_at(ds, &ckpt.window, origin)?;
    let (_, out) = predict_input(ckpt, graph, &x, true)?;
    let ex = ckpt.model.explain(&out, node, step - 1)?;
    let doc = explanation_doc(&ex, ds, &ckpt.model.config, &ckpt.window, origin);
    let svg = render_svg(&doc);
    Ok((doc, svg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationDoc {
    pub split: SplitKind,
    pub case: Option<Case>,
    pub seed: u64,
    pub config: XgpaConfig,
    pub window: WindowSpec,
    pub model: HorizonMAE,
    pub ha: HorizonMAE,
}

pub fn cmd_evaluate(
    ckpt: &Checkpoint,
    ds: &TrafficDataset,
    graph: &TrafficGraph,
    sp: &Split,
    kind: SplitKind,
    case: Option<Case>,
    max_windows: Option<usize>,
) -> Result<EvaluationDoc> {
    if let Some(c) = case {
        if ckpt.window.case != Some(c) {
            return Err(XgpaError::invalid(
                "case",
                format!("checkpoint was trained for {:?}, not {c}", ckpt.window.case),
            ));
        }
    }
    let model = evaluate_split(ckpt, ds, graph, sp, kind, &ckpt.window, max_windows)?;
    let ha = evaluate_ha(ds, sp, kind, &ckpt.window, max_windows)?;
    Ok(EvaluationDoc {
        split: kind,
        case: ckpt.window.case,
        seed: ckpt.model.config.seed,
        config: ckpt.model.config.clone(),
        window: ckpt.window.clone(),
        model,
        ha,
    })
}

pub fn write_json<T: Serialize>(v: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(path, &to_json(v)?)
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(path, text.as_bytes())
}
