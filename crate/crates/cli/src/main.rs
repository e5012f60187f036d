//! `dcnpd` command-line harness.
//!
//! Exit status: 0 on success, 2 when the configuration fails validation,
//! 1 for any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use dcnpd::data::{save_csv, Standardizer};
use dcnpd::experiment::{
    emit_report, fit_model, ite_mse, load_realization, report_stem, run_benchmark, stream_rng, synthetic_realization,
    write_predictions, ExperimentConfig, ExperimentReport, ModelBundle, ModelKind, Stream,
};
use dcnpd::persist::{read_json, write_json};
use dcnpd::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dcnpd", version, about = "Treatment-effect estimation with propensity-dropout counterfactual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic realizations as CSV plus a JSON sidecar each.
    Generate(GenerateArgs),
    /// Train one model on a dataset and save it.
    Train(TrainArgs),
    /// Score a saved model on a dataset.
    Evaluate(EvaluateArgs),
    /// Run the repeated-realization benchmark for one or more models.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON experiment config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; required except by `evaluate`, where it defaults to 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Number of realizations to write.
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    bias_strength: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// `linear_offset` or `exp_surface`.
    #[arg(long)]
    surface: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Model: dcn-pd, dcn-fixed:<p>, nn4 or knn:<k>.
    #[arg(long)]
    model: Option<String>,
    /// Training CSV; defaults to the config's first realization.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where to write the model bundle.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Model bundle written by `train`.
    #[arg(long)]
    bundle: PathBuf,
    /// Evaluation CSV; defaults to the config's first realization.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for predictions.csv and evaluation.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// One or more models, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    model: Vec<String>,
    #[arg(long)]
    reps: Option<usize>,
    /// Report directory; one subdirectory per model when several are given.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn default_source() -> Value {
    json!({"synthetic": {
        "n": 750, "d": 25, "bias_strength": 3.0, "noise_std": 1.0, "surface": "exp_surface"
    }})
}

fn read_config(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Applies command-line overrides on top of a config document and fills the
/// defaults that only make sense on the command line.
fn finish_config(mut map: Map<String, Value>, seed: Option<u64>, overrides: Vec<(&str, Value)>) -> Result<ExperimentConfig> {
    if let Some(seed) = seed {
        map.insert("seed".into(), json!(seed));
    }
    for (k, v) in overrides {
        map.insert(k.into(), v);
    }
    map.entry("source").or_insert_with(default_source);
    map.entry("model").or_insert_with(|| json!("dcn-pd"));
    ExperimentConfig::from_value(Value::Object(map))
}

fn build_config(base: &ConfigArgs, overrides: Vec<(&str, Value)>) -> Result<ExperimentConfig> {
    finish_config(read_config(base.config.as_deref())?, base.seed, overrides)
}

fn csv_source(path: &Path) -> Value {
    json!({"csv": {"paths": [path]}})
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut map = read_config(a.base.config.as_deref())?;
    let mut synthetic = match map.get("source") {
        None => default_source()["synthetic"].clone(),
        Some(Value::Object(s)) if s.contains_key("synthetic") => s["synthetic"].clone(),
        Some(_) => return Err(Error::Config("generate needs a synthetic source".into())),
    };
    let fields = [
        ("n", a.n.map(|v| json!(v))),
        ("d", a.d.map(|v| json!(v))),
        ("bias_strength", a.bias_strength.map(|v| json!(v))),
        ("noise_std", a.noise_std.map(|v| json!(v))),
        ("surface", a.surface.map(|v| json!(v))),
    ];
    for (k, v) in fields {
        if let Some(v) = v {
            synthetic[k] = v;
        }
    }
    map.insert("source".into(), json!({ "synthetic": synthetic }));
    match a.reps {
        Some(r) => {
            map.insert("reps".into(), json!(r));
        }
        None => {
            map.entry("reps").or_insert(json!(1));
        }
    }
    let config = finish_config(map, a.base.seed, Vec::new())?;

    std::fs::create_dir_all(&a.out)?;
    for r in 0..config.reps {
        let s = synthetic_realization(&config, r)?.expect("synthetic source");
        save_csv(&s.dataset, a.out.join(format!("realization_{r:03}.csv")))?;
        let sidecar = json!({"seed": config.seed, "repetition": r, "realization": s.realization});
        write_json(a.out.join(format!("realization_{r:03}.json")), &sidecar)?;
    }
    println!("wrote {} realization(s) to {}", config.reps, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(m) = &a.model {
        overrides.push(("model", json!(m)));
    }
    if let Some(d) = &a.data {
        overrides.push(("source", csv_source(d)));
    }
    let config = build_config(&a.base, overrides)?;
    let full = load_realization(&config, 0)?;
    let scaler = Standardizer::fit(full.features())?;
    let train = full.with_features(scaler.apply(full.features())?)?;
    let fitted = fit_model(&config, &train, &mut stream_rng(config.seed, 0, Stream::Model))?;
    write_json(&a.out, &ModelBundle::new(config.model, scaler, &fitted))?;
    println!("trained {} on {} rows; saved to {}", config.model, train.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let bundle: ModelBundle = read_json(&a.bundle)?;
    let model = bundle.model;
    let scaler = bundle.standardization.clone();
    let fitted = bundle.into_fitted()?;

    let mut overrides = vec![("model", json!(model))];
    if let Some(d) = &a.data {
        overrides.push(("source", csv_source(d)));
    }
    // Only the Monte Carlo draws depend on the seed here.
    let mut map = read_config(a.base.config.as_deref())?;
    map.entry("seed").or_insert(json!(0));
    let config = finish_config(map, a.base.seed, overrides)?;
    let data = load_realization(&config, 0)?;
    let x = scaler.apply(data.features())?;
    let predicted = fitted.predict_ite(&x, &mut stream_rng(config.seed, 0, Stream::MonteCarlo))?;
    let truth = data.true_ite();
    let mse = truth.as_deref().map(|t| ite_mse(&predicted, t)).transpose()?;

    let summary = json!({
        "schema_version": dcnpd::persist::SCHEMA_VERSION,
        "model": model,
        "n": predicted.len(),
        "ite_mse": mse,
        "mean_ite": predicted.iter().sum::<f64>() / predicted.len() as f64,
    });
    if let Some(dir) = &a.out {
        write_predictions(dir.join("predictions.csv"), &predicted, truth.as_deref())?;
        write_json(dir.join("evaluation.json"), &summary)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let models = a.model.iter().map(|m| m.parse()).collect::<Result<Vec<ModelKind>>>()?;
    let mut overrides = Vec::new();
    if let Some(first) = models.first() {
        overrides.push(("model", json!(first)));
    }
    if let Some(r) = a.reps {
        overrides.push(("reps", json!(r)));
    }
    if let Some(o) = &a.out {
        overrides.push(("out", json!(o)));
    }
    let config = build_config(&a.base, overrides)?;
    let models = if models.is_empty() { vec![config.model] } else { models };

    let reports = run_benchmark(&config, &models)?;
    if let Some(out) = &config.out {
        write_reports(&reports, out)?;
    }
    for r in &reports {
        println!(
            "{:<16} mean ITE MSE {:.4} +/- {:.4} over {} repetitions ({:.1}s)",
            r.model.to_string(),
            r.mean,
            r.std_err,
            r.per_rep_mse.len(),
            r.duration_secs
        );
    }
    Ok(())
}

fn write_reports(reports: &[ExperimentReport], out: &Path) -> Result<()> {
    if let [single] = reports {
        return emit_report(single, out);
    }
    for r in reports {
        emit_report(r, out.join(report_stem(r.model)))?;
    }
    Ok(())
}
