use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use abin_core::embed::EmbedMethod;
use abin_core::mlkit::ModelKind;
use abin_core::netbuild::NetworkMode;
use abin_runhub::config::LabelRule;
use abin_runhub::{ExplainMethod, GnnKind, Hub, HubError, RunConfig, Stage};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "abin", version, about = "Anomaly detection workbench for expression data")]
struct Cli {
    /// Workspace holding persisted runs.
    #[arg(long, global = true, env = "ABIN_DATA_DIR", default_value = "abin-data")]
    data_dir: PathBuf,
    /// Run to operate on; defaults to the one created by the last `ingest`.
    #[arg(long, global = true)]
    run: Option<String>,
    /// Global seed for a new run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fix every seed (0 unless --seed is given) and omit timestamps, so
    /// repeated runs write identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a series matrix and labels into a new run.
    Ingest(IngestArgs),
    /// 2-D embeddings of the samples.
    Embed {
        #[arg(long, value_delimiter = ',', default_values = ["pca", "tsne"])]
        method: Vec<EmbedArg>,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Patient similarity network or patient-specific networks.
    Net {
        #[arg(long, default_value = "cdn")]
        mode: ModeArg,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        interactome: Option<PathBuf>,
        /// Genes kept for patient-specific networks without an interactome.
        #[arg(long)]
        top_genes: Option<usize>,
    },
    /// Train and evaluate the classical classifiers.
    Ml {
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[arg(long)]
        cv: Option<usize>,
        #[arg(long)]
        split: Option<f64>,
    },
    /// Train a graph model on the network.
    Gnn {
        #[arg(long)]
        model: Option<GnnKind>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        contamination: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Attribute predictions to genes.
    Explain {
        #[arg(long)]
        method: Option<ExplainMethod>,
        /// Sample id; every sample when omitted.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Classifier explained by Shapley values.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        permutations: Option<usize>,
        /// Path steps for integrated gradients.
        #[arg(long)]
        ig_steps: Option<usize>,
    },
    /// Run every stage from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the run record.
    Status,
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Cancel jobs and forget in-memory state; --purge deletes all runs.
    Reset {
        #[arg(long)]
        purge: bool,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    series_matrix: PathBuf,
    /// CSV of `sample,label` with 1 for anomalous.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    annotation: Option<PathBuf>,
    /// Derive labels from a metadata line instead, e.g. `Sample_source_name_ch1`.
    #[arg(long, requires_all = ["anomalous", "normal"], conflicts_with = "labels")]
    label_key: Option<String>,
    #[arg(long)]
    anomalous: Option<String>,
    #[arg(long)]
    normal: Option<String>,
    /// Display names for class 0 and class 1.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    class_names: Option<Vec<String>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedArg {
    Pca,
    Tsne,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cdn,
    Isn,
}

fn absolute(p: &Path) -> Result<String, HubError> {
    let abs = fs::canonicalize(p).map_err(|e| HubError::BadRequest(format!("{}: {e}", p.display())))?;
    Ok(abs.to_string_lossy().to_string())
}

fn pointer(data_dir: &Path) -> PathBuf {
    data_dir.join("current")
}

fn current_run(cli: &Cli) -> Result<String, HubError> {
    if let Some(r) = &cli.run {
        return Ok(r.clone());
    }
    fs::read_to_string(pointer(&cli.data_dir))
        .map(|s| s.trim().to_string())
        .map_err(|_| HubError::NotFound("no current run; run `abin ingest` first or pass --run".into()))
}

fn run_seed(cli: &Cli) -> Option<u64> {
    if cli.deterministic {
        Some(cli.seed.unwrap_or(0))
    } else {
        cli.seed
    }
}

/// Run one stage to completion and list what it wrote.
fn execute(hub: &Hub, id: &str, stage: Stage, patch: Value) -> Result<(), HubError> {
    hub.update_config(id, stage, &patch)?;
    let job = hub.execute_stage(id, stage)?;
    job.wait()?;
    let rec = hub.get_run(id)?;
    let dir = hub.root().join("runs").join(id).join("artifacts");
    eprintln!("{stage}: done ({})", rec.config_hash());
    for name in rec.artifacts.get(&stage).into_iter().flatten() {
        println!("{}", dir.join(name).display());
    }
    for table in ["ml_results.csv", "gnn_results.csv"] {
        if rec.artifacts.get(&stage).is_some_and(|a| a.iter().any(|n| n == table)) {
            if let Ok(text) = fs::read_to_string(dir.join(table)) {
                eprint!("{text}");
            }
        }
    }
    Ok(())
}

fn put(patch: &mut Value, key: &str, v: Option<Value>) {
    if let Some(v) = v {
        patch[key] = v;
    }
}

fn main_inner(cli: Cli) -> Result<(), HubError> {
    let hub = Hub::open(&cli.data_dir)?;
    match &cli.cmd {
        Cmd::Ingest(a) => {
            let mut cfg = RunConfig::default();
            let d = &mut cfg.dataset;
            d.series_matrix = Some(absolute(&a.series_matrix)?);
            d.labels = a.labels.as_deref().map(absolute).transpose()?;
            d.annotation = a.annotation.as_deref().map(absolute).transpose()?;
            if let Some(key) = &a.label_key {
                d.label_rule = Some(LabelRule {
                    key: key.clone(),
                    anomalous: a.anomalous.clone().unwrap_or_default(),
                    normal: a.normal.clone().unwrap_or_default(),
                });
            }
            if let Some(n) = &a.class_names {
                d.class_names = Some([n[0].clone(), n[1].clone()]);
            }
            let rec = hub.create_run(cfg, run_seed(&cli))?;
            fs::write(pointer(&cli.data_dir), &rec.run_id)?;
            eprintln!("run {}", rec.run_id);
            execute(&hub, &rec.run_id, Stage::Ingest, Value::Null)
        }
        Cmd::Embed {
            method,
            perplexity,
            iters,
        } => {
            let methods: Vec<EmbedMethod> = method
                .iter()
                .map(|m| match m {
                    EmbedArg::Pca => EmbedMethod::Pca,
                    EmbedArg::Tsne => EmbedMethod::Tsne,
                })
                .collect();
            let mut p = json!({ "methods": methods });
            put(&mut p, "perplexity", perplexity.map(Value::from));
            put(&mut p, "iters", iters.map(Value::from));
            execute(&hub, &current_run(&cli)?, Stage::Embed, p)
        }
        Cmd::Net {
            mode,
            threshold,
            interactome,
            top_genes,
        } => {
            let mode = match mode {
                ModeArg::Cdn => NetworkMode::ConvergenceDivergence,
                ModeArg::Isn => NetworkMode::Isn,
            };
            let mut p = json!({ "mode": mode });
            put(&mut p, "threshold", threshold.map(Value::from));
            put(&mut p, "interactome", interactome.as_deref().map(absolute).transpose()?.map(Value::from));
            put(&mut p, "isn_top_genes", top_genes.map(Value::from));
            execute(&hub, &current_run(&cli)?, Stage::Network, p)
        }
        Cmd::Ml { models, cv, split } => {
            let mut p = json!({});
            if let Some(list) = models {
                let kinds = list
                    .iter()
                    .map(|m| ModelKind::from_short(m).ok_or_else(|| HubError::BadRequest(format!("unknown model {m:?}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                p["models"] = json!(kinds);
            }
            put(&mut p, "cv_folds", cv.map(Value::from));
            put(&mut p, "split", split.map(Value::from));
            execute(&hub, &current_run(&cli)?, Stage::Ml, p)
        }
        Cmd::Gnn {
            model,
            alpha,
            contamination,
            epochs,
            lr,
        } => {
            let mut p = json!({});
            put(&mut p, "model", model.map(|m| json!(m)));
            put(&mut p, "alpha", alpha.map(Value::from));
            put(&mut p, "contamination", contamination.map(Value::from));
            put(&mut p, "epochs", epochs.map(Value::from));
            put(&mut p, "learning_rate", lr.map(Value::from));
            execute(&hub, &current_run(&cli)?, Stage::Gnn, p)
        }
        Cmd::Explain {
            method,
            target,
            top_k,
            model,
            permutations,
            ig_steps,
        } => {
            let mut p = json!({});
            put(&mut p, "method", method.map(|m| json!(m)));
            put(&mut p, "target", target.clone().map(Value::from));
            put(&mut p, "top_k", top_k.map(Value::from));
            if let Some(m) = model {
                let k = ModelKind::from_short(m).ok_or_else(|| HubError::BadRequest(format!("unknown model {m:?}")))?;
                p["model"] = json!(k);
            }
            put(&mut p, "permutations", permutations.map(Value::from));
            put(&mut p, "ig_steps", ig_steps.map(Value::from));
            execute(&hub, &current_run(&cli)?, Stage::Explain, p)
        }
        Cmd::Run { config } => {
            let text = fs::read_to_string(config)?;
            let cfg: RunConfig =
                serde_json::from_str(&text).map_err(|e| HubError::InvalidConfig(format!("{}: {e}", config.display())))?;
            let rec = hub.create_run(cfg, run_seed(&cli))?;
            fs::write(pointer(&cli.data_dir), &rec.run_id)?;
            eprintln!("run {}", rec.run_id);
            for stage in Stage::ALL {
                execute(&hub, &rec.run_id, stage, Value::Null)?;
            }
            Ok(())
        }
        Cmd::Status => {
            let rec = hub.get_run(&current_run(&cli)?)?;
            println!("{}", serde_json::to_string_pretty(&json!({ "run": rec, "config_hash": rec.config_hash() })).unwrap());
            Ok(())
        }
        Cmd::Serve { port } => {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| HubError::StorageUnavailable(e.to_string()))?;
            rt.block_on(abin_runhub::api::serve(Arc::new(hub), *port))
                .map_err(|e| HubError::StorageUnavailable(e.to_string()))
        }
        Cmd::Reset { purge } => {
            hub.reset(*purge)?;
            if *purge {
                let _ = fs::remove_file(pointer(&cli.data_dir));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
