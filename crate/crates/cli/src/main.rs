//! Command-line front end: prepare, inject, train, evaluate, compare.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use gcnm::bundle::{sha256_file, Bundle};
use gcnm::checkpoint::{restore_params, Checkpoint};
use gcnm::config::RunConfig;
use gcnm::data::{write_graph, write_series};
use gcnm::eval::{compare, read_reports, score_matrix, write_cd_diagram, write_reports, MetricReport};
use gcnm::experiment::{build_datasets, reports, AnyModel};
use gcnm::masking::{MissingScenario, ScenarioKind};
use gcnm::model::ModelConfig;
use gcnm::synthetic::{generate, SyntheticConfig};
use gcnm::train::{write_history, Control, StopReason, TrainState};
use gcnm::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.gcnm";
const HISTORY_FILE: &str = "history.csv";
const CONFIG_FILE: &str = "config.json";
const METRICS_FILE: &str = "metrics.json";
const COMPARISON_FILE: &str = "comparison.json";
const CD_FILE: &str = "cd_diagram.svg";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "gcnm", version, about = "Traffic forecasting with missing values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a series CSV and a road-graph edge list into a normalized bundle.
    Prepare {
        /// Dense CSV: a timestamp column, then one column per sensor; empty cells are missing.
        #[arg(long)]
        series: PathBuf,
        /// Edge list with columns from,to,distance.
        #[arg(long)]
        graph: PathBuf,
        /// Bundle directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove values from every split of a bundle following a scenario.
    Inject {
        /// Bundle directory written by prepare or inject.
        #[arg(long)]
        bundle: PathBuf,
        /// short, long or mix
        #[arg(long)]
        scenario: String,
        /// Target missing fraction, strictly between 0 and 1.
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bundle directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; resumes when --out already holds a checkpoint.
    Train {
        /// Bundle directory to train on.
        #[arg(long)]
        bundle: PathBuf,
        /// JSON run configuration (see docs/run_config.schema.json).
        #[arg(long)]
        config: PathBuf,
        /// Run directory; an existing checkpoint there is resumed.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split of a bundle.
    Evaluate {
        /// checkpoint.gcnm written by train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bundle whose test split is scored.
        #[arg(long)]
        bundle: PathBuf,
        /// Directory for metrics.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank models across metric reports and draw a rank diagram.
    Compare {
        /// Metric report files, or directories holding metrics.json.
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Directory for comparison.json and cd_diagram.svg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic daily-periodic series and ring graph as raw CSVs.
    Synthesize {
        /// Number of sensors on the ring.
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        /// Number of timestamps.
        #[arg(long, default_value_t = 600)]
        len: usize,
        #[arg(long, default_value_t = 24)]
        steps_per_day: usize,
        /// Standard deviation of the additive noise.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for series.csv and graph.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json values serialize") + "\n"
}

/// Index of the files a command wrote.
fn write_manifest(dir: &Path, command: &str, inputs: serde_json::Value, files: &[&str]) -> Result<()> {
    let mut outputs = serde_json::Map::new();
    for f in files {
        outputs.insert(f.to_string(), json!(sha256_file(&dir.join(f))?));
    }
    let manifest = json!({ "command": command, "inputs": inputs, "outputs": outputs });
    write_text(&dir.join(MANIFEST_FILE), &pretty(&manifest))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn prepare(series: &Path, graph: &Path, out: &Path) -> Result<()> {
    let bundle = Bundle::prepare(series, graph)?;
    let manifest = bundle.write(out)?;
    println!(
        "bundle {}: {} nodes, {} steps, scale factor {}",
        out.display(),
        manifest.nodes,
        manifest.timestamps,
        manifest.scale_factor
    );
    Ok(())
}

fn inject(bundle: &Path, scenario: &str, rate: f64, seed: u64, out: &Path) -> Result<()> {
    let kind: ScenarioKind = scenario.parse()?;
    let sc = MissingScenario::new(kind, rate, seed)?;
    let b = Bundle::read(bundle)?;
    let injected = b.inject(&sc, ModelConfig::default().tau)?;
    let manifest = injected.write(out)?;
    println!(
        "injected {} at rate {rate}: realized missing fraction {:.4}",
        kind,
        manifest.missing_fraction
    );
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Settings that must agree between a checkpoint and a resumed run.
fn same_architecture(a: &RunConfig, b: &RunConfig) -> bool {
    a.method == b.method && a.model == b.model && a.graph == b.graph && a.gru_hidden == b.gru_hidden && a.seed == b.seed
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn train(bundle: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let b = Bundle::read(bundle)?;
    create_dir(out)?;
    let sets = build_datasets(&cfg, &b.series, &b.targets)?;
    let mut model = AnyModel::build(&cfg, &b.graph, b.series.num_features())?;
    let kind = cfg.method.name();
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut state = TrainState::new(model.params(), &cfg.train);
    if ck_path.is_file() {
        let ck = Checkpoint::load(&ck_path)?;
        let previous: RunConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))?;
        if ck.kind != kind || !same_architecture(&previous, &cfg) {
            return Err(Error::Config(format!(
                "{} was trained with a different model configuration; use a fresh --out",
                ck_path.display()
            )));
        }
        if let Some((mut st, last)) = ck.train_state(&cfg.train) {
            restore_params(model.params_mut(), &last)?;
            if st.stop == Some(StopReason::MaxEpochs) {
                st.stop = None;
            }
            println!("resuming after epoch {}", st.epoch);
            state = st;
        }
    }
    let value = config_value(&cfg);
    let mut last_params = None;
    let report = model.fit(&sets, &cfg, &mut state, |params, st| {
        let last = st.history.last().expect("called after an epoch");
        println!(
            "epoch {:>4}  train MAE {:.5}  val MAE {}",
            last.epoch,
            last.train_mae,
            last.val_mae.map_or("n/a".to_string(), |v| format!("{v:.5}"))
        );
        save_atomic(&Checkpoint::from_state(kind, value.clone(), params, st), &ck_path)?;
        last_params = Some(params.clone());
        Ok(Control::Continue)
    })?;
    // record the stop reason alongside the last epoch's parameters
    if let Some(last) = &last_params {
        save_atomic(&Checkpoint::from_state(kind, value.clone(), last, &state), &ck_path)?;
    }
    write_history(&report.history, &out.join(HISTORY_FILE))?;
    write_text(&out.join(CONFIG_FILE), &pretty(&value))?;
    write_manifest(
        out,
        "train",
        json!({ "bundle": path_str(bundle), "config": path_str(config) }),
        &[CHECKPOINT_FILE, HISTORY_FILE, CONFIG_FILE],
    )?;
    println!(
        "stopped ({:?}) after {} epochs; best validation MAE {:.5} at epoch {}",
        report.stop,
        state.epoch,
        report.best_val,
        report.best_epoch
    );
    if let StopReason::Diverged { stage } = &report.stop {
        return Err(Error::NonFinite { stage: stage.clone() });
    }
    Ok(())
}

fn evaluate(checkpoint: &Path, bundle: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg: RunConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))?;
    let b = Bundle::read(bundle)?;
    let sets = build_datasets(&cfg, &b.series, &b.targets)?;
    let mut model = AnyModel::build(&cfg, &b.graph, b.series.num_features())?;
    restore_params(model.params_mut(), &ck.params)?;
    let scores = model.score(&sets.test)?;
    let (scenario, rate) = b.condition();
    let rows: Vec<MetricReport> = reports(&cfg.label(), &scenario, rate, &scores);
    create_dir(out)?;
    write_reports(&rows, &out.join(METRICS_FILE))?;
    write_manifest(
        out,
        "evaluate",
        json!({ "checkpoint": path_str(checkpoint), "bundle": path_str(bundle) }),
        &[METRICS_FILE],
    )?;
    for r in &rows {
        let f = |v: Option<f64>| v.map_or("null".to_string(), |v| format!("{v:.4}"));
        println!(
            "horizon {:>3}  MAE {}  RMSE {}  MAPE {}  n {}",
            r.horizon.to_string(),
            f(r.mae),
            f(r.rmse),
            f(r.mape),
            r.n
        );
    }
    Ok(())
}

fn compare_cmd(paths: &[PathBuf], out: &Path) -> Result<()> {
    let mut all = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join(METRICS_FILE) } else { p.clone() };
        all.extend(read_reports(&file)?);
    }
    let (models, cells, scores) = score_matrix(&all)?;
    let result = compare(&models, &scores, 0.05)?;
    create_dir(out)?;
    write_text(
        &out.join(COMPARISON_FILE),
        &pretty(&serde_json::to_value(&result).expect("result serializes")),
    )?;
    write_cd_diagram(&result, &out.join(CD_FILE))?;
    let inputs: Vec<String> = paths.iter().map(|p| path_str(p)).collect();
    write_manifest(out, "compare", json!({ "reports": inputs }), &[COMPARISON_FILE, CD_FILE])?;
    println!(
        "{} models over {} cells: Friedman statistic {:.4}, p = {:.4}",
        models.len(),
        cells.len(),
        result.friedman_statistic,
        result.friedman_p
    );
    for (m, r) in &result.average_ranks {
        println!("  {m:<20} mean rank {r:.3}");
    }
    Ok(())
}

fn synthesize(cfg: SyntheticConfig, out: &Path) -> Result<()> {
    let (series, graph) = generate(&cfg)?;
    create_dir(out)?;
    write_series(&series, &out.join("series.csv"))?;
    write_graph(&graph, &series.node_ids, &out.join("graph.csv"))?;
    write_manifest(
        out,
        "synthesize",
        serde_json::to_value(&cfg).expect("config serializes"),
        &["series.csv", "graph.csv"],
    )?;
    println!("wrote {} nodes × {} steps to {}", cfg.nodes, cfg.len, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { series, graph, out } => prepare(&series, &graph, &out),
        Command::Inject {
            bundle,
            scenario,
            rate,
            seed,
            out,
        } => inject(&bundle, &scenario, rate, seed, &out),
        Command::Train { bundle, config, out } => train(&bundle, &config, &out),
        Command::Evaluate {
            checkpoint,
            bundle,
            out,
        } => evaluate(&checkpoint, &bundle, &out),
        Command::Compare { reports, out } => compare_cmd(&reports, &out),
        Command::Synthesize {
            nodes,
            len,
            steps_per_day,
            noise,
            seed,
            out,
        } => synthesize(
            SyntheticConfig {
                nodes,
                len,
                steps_per_day,
                noise,
                seed,
                ..SyntheticConfig::default()
            },
            &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
