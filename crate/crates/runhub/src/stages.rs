//! Stage bodies. Each reads its inputs from the run directory and returns
//! the artifact bytes; the hub decides where and when they are committed.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use abin_core::embed::{pca_embed, tsne_embed, EmbedMethod, Embedding2D, TsneParams};
use abin_core::ingest::{
    assign_labels, dedupe_features, impute_missing, labels_from_metadata, map_gene_symbols, normalize,
    parse_labels_csv, parse_series_matrix, read_canonical, split_indices, write_canonical, NormParams,
};
use abin_core::mlkit::{
    compute_metrics, cross_validate, fit, metrics_table_csv, roc_curve, ClassifierSpec, MetricsReport, Model,
    ModelKind,
};
use abin_core::netbuild::{build_convergence_divergence, build_isns, parse_interactome, NetworkConfig, NetworkMode};
use abin_core::seed::derive_seed;
use abin_core::{AttributedGraph, ExpressionDataset, SplitSpec};
use abin_explain::{
    aggregate_attributions, edge_mask_explain, force_plot_data, integrated_gradients, integrated_gradients_edges,
    linear_shapley_exact, saliency, saliency_edges, shapley_sampling, target_seed, Attribution, Baseline,
    EdgeAttribution, EdgeMaskParams, GraphTarget, Level, ReduceAxis, Target,
};
use abin_gnn::{
    contamination, detect, detect_isn_graphs, train_gaan_with, train_gae_with, train_gcn_classifier_with,
    train_isn_gaan_with, Checkpoint, GnnError, GnnHyperparams, GraphData, GraphModel, SavedModel,
};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExplainMethod, GnnKind, Stage};
use crate::hub::{JobState, RunRecord};

pub(crate) struct StageCtx<'a> {
    pub dir: &'a Path,
    pub record: &'a RunRecord,
    pub seed: u64,
    pub job: &'a JobState,
}

#[derive(Default)]
pub(crate) struct StageOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub warnings: Vec<String>,
}

impl StageOutput {
    fn text(&mut self, name: &str, body: String) {
        self.files.push((name.to_string(), body.into_bytes()));
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) {
        let body = serde_json::to_string_pretty(value).expect("artifact serializes");
        self.text(name, body);
    }
}

#[derive(Debug)]
pub(crate) enum StageError {
    Cancelled,
    Failed(String),
}

type StageResult<T> = Result<T, StageError>;

fn fail(msg: impl std::fmt::Display) -> StageError {
    StageError::Failed(msg.to_string())
}

impl From<GnnError> for StageError {
    fn from(e: GnnError) -> Self {
        match e {
            GnnError::Cancelled(_) => StageError::Cancelled,
            e => fail(e),
        }
    }
}

impl StageCtx<'_> {
    fn checkpoint(&self, done: f64) -> StageResult<()> {
        if self.job.cancelled() {
            return Err(StageError::Cancelled);
        }
        self.job.set_progress(done);
        Ok(())
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.dir.join(path)
        }
    }

    fn read_input(&self, p: &str) -> StageResult<String> {
        fs::read_to_string(self.resolve(p)).map_err(|e| fail(format!("reading {p}: {e}")))
    }

    fn artifact_path(&self, name: &str) -> PathBuf {
        self.dir.join("artifacts").join(name)
    }

    fn read_artifact(&self, name: &str) -> StageResult<String> {
        fs::read_to_string(self.artifact_path(name)).map_err(|e| fail(format!("missing artifact {name}: {e}")))
    }

    fn load_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> StageResult<T> {
        serde_json::from_str(&self.read_artifact(name)?).map_err(|e| fail(format!("{name}: {e}")))
    }

    fn dataset(&self) -> StageResult<ExpressionDataset> {
        let f = fs::File::open(self.artifact_path("dataset.abin")).map_err(|e| fail(format!("dataset.abin: {e}")))?;
        read_canonical(BufReader::new(f)).map_err(fail)
    }

    fn normalized(&self) -> StageResult<ExpressionDataset> {
        normalize(&self.dataset()?, self.record.config.dataset.normalize).map_err(fail)
    }
}

pub(crate) fn run(stage: Stage, ctx: &StageCtx) -> StageResult<StageOutput> {
    match stage {
        Stage::Ingest => ingest(ctx),
        Stage::Embed => embed(ctx),
        Stage::Network => network(ctx),
        Stage::Ml => ml(ctx),
        Stage::Gnn => gnn(ctx),
        Stage::Explain => explain(ctx),
    }
}

fn ingest(ctx: &StageCtx) -> StageResult<StageOutput> {
    let cfg = &ctx.record.config.dataset;
    let path = cfg
        .series_matrix
        .as_deref()
        .ok_or_else(|| fail("no series matrix configured; upload one first"))?;
    let file = fs::File::open(ctx.resolve(path)).map_err(|e| fail(format!("reading {path}: {e}")))?;
    let source = Path::new(path).file_name().map(|f| f.to_string_lossy().to_string()).unwrap_or_default();
    let mut ds = parse_series_matrix(BufReader::new(file), &source).map_err(fail)?;
    if !ctx.record.deterministic() {
        ds.provenance.parsed_at = Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    }
    ctx.checkpoint(0.3)?;

    let mut ds = dedupe_features(ds);
    if let Some(a) = &cfg.annotation {
        ds = map_gene_symbols(ds, &ctx.read_input(a)?).map_err(fail)?;
    }
    let labels = match (&cfg.labels, &cfg.label_rule) {
        (Some(l), _) => parse_labels_csv(&ctx.read_input(l)?).map_err(fail)?,
        (None, Some(r)) => labels_from_metadata(&ds, &r.key, &r.anomalous, &r.normal).map_err(fail)?,
        (None, None) => return Err(fail("no labels: upload a label file or set dataset.label_rule")),
    };
    let names = cfg
        .class_names
        .as_ref()
        .map(|[n0, n1]| BTreeMap::from([(0u8, n0.clone()), (1u8, n1.clone())]));
    let ds = assign_labels(ds, &labels, names).map_err(fail)?;
    let ds = impute_missing(ds).map_err(fail)?;
    ctx.checkpoint(0.8)?;

    let summary = ds.summary().map_err(fail)?;
    let mut out = StageOutput::default();
    out.text("dataset.abin", write_canonical(&ds));
    out.json(
        "dataset_summary.json",
        &json!({
            "source": ds.provenance.source,
            "parsed_at": ds.provenance.parsed_at,
            "summary": summary,
            "class_names": ds.class_names,
            "annotated": ds.gene_symbols.is_some(),
            "warnings": ds.warnings,
        }),
    );
    out.warnings = ds.warnings.clone();
    Ok(out)
}

fn embed(ctx: &StageCtx) -> StageResult<StageOutput> {
    let cfg = &ctx.record.config.embed;
    let ds = ctx.normalized()?;
    let mut out = StageOutput::default();
    let total = cfg.methods.len() as f64;
    for (k, method) in cfg.methods.iter().enumerate() {
        let e = match method {
            EmbedMethod::Pca => pca_embed(ds.values.view(), 2),
            EmbedMethod::Tsne => tsne_embed(
                ds.values.view(),
                &TsneParams {
                    perplexity: cfg.perplexity,
                    iters: cfg.iters,
                    seed: derive_seed(ctx.seed, "tsne", 0),
                    learning_rate: None,
                },
            ),
        }
        .map_err(fail)?;
        let e: Embedding2D = e.with_samples(ds.sample_ids.clone(), ds.labels.clone(), ds.class_names.clone());
        let tag = match method {
            EmbedMethod::Pca => "pca",
            EmbedMethod::Tsne => "tsne",
        };
        out.json(&format!("embedding_{tag}.json"), &e);
        out.text(&format!("embedding_{tag}.csv"), e.to_csv());
        out.text(&format!("embedding_{tag}.svg"), e.to_svg());
        out.warnings.extend(e.warnings.iter().cloned());
        ctx.checkpoint((k + 1) as f64 / total)?;
    }
    Ok(out)
}

/// Feature columns kept for patient-specific networks: the genes named by
/// the interactome when one is given, otherwise the highest-variance ones.
fn isn_genes(ds: &ExpressionDataset, interactome: Option<&[(String, String)]>, top: usize) -> Vec<usize> {
    if let Some(pairs) = interactome {
        let named: std::collections::BTreeSet<&str> =
            pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
        return (0..ds.n_features())
            .filter(|&j| named.contains(ds.display_symbol(j)) || named.contains(ds.feature_ids[j].as_str()))
            .collect();
    }
    let var: Vec<f64> = ds.values.var_axis(Axis(0), 0.0).to_vec();
    let mut order: Vec<usize> = (0..var.len()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(top);
    order.sort_unstable();
    order
}

fn network(ctx: &StageCtx) -> StageResult<StageOutput> {
    let cfg = &ctx.record.config.network;
    let mut out = StageOutput::default();
    match cfg.mode {
        NetworkMode::ConvergenceDivergence => {
            let ds = ctx.normalized()?;
            let g = build_convergence_divergence(&ds, &NetworkConfig::convergence_divergence(cfg.threshold))
                .map_err(fail)?;
            ctx.checkpoint(0.8)?;
            let degrees = g.degrees();
            out.json(
                "network_summary.json",
                &json!({
                    "mode": cfg.mode,
                    "similarity": "pearson",
                    "threshold": cfg.threshold,
                    "n_nodes": g.n_nodes(),
                    "n_edges": g.n_edges(),
                    "isolated_nodes": degrees.iter().filter(|&&d| d == 0).count(),
                    "max_degree": degrees.iter().max(),
                }),
            );
            out.json("network.json", &g);
            out.text("network_edges.csv", g.to_edge_csv());
        }
        NetworkMode::Isn => {
            let raw = ctx.dataset()?;
            let interactome = match &cfg.interactome {
                Some(p) => Some(parse_interactome(&ctx.read_input(p)?).map_err(fail)?),
                None => None,
            };
            let genes = isn_genes(&raw, interactome.as_deref(), cfg.isn_top_genes);
            if genes.len() < 2 {
                return Err(fail("fewer than two genes selected for patient networks"));
            }
            let ds = normalize(&raw.subset_features(&genes), ctx.record.config.dataset.normalize).map_err(fail)?;
            ctx.checkpoint(0.2)?;
            let graphs = build_isns(&ds, &NetworkConfig::isn(cfg.threshold, interactome)).map_err(fail)?;
            ctx.checkpoint(0.8)?;
            let edges: Vec<usize> = graphs.iter().map(|g| g.n_edges()).collect();
            out.json(
                "network_summary.json",
                &json!({
                    "mode": cfg.mode,
                    "threshold": cfg.threshold,
                    "n_graphs": graphs.len(),
                    "n_genes": ds.n_features(),
                    "genes": ds.display_symbols(),
                    "edges_per_graph": edges,
                }),
            );
            out.json("isns.json", &graphs);
        }
    }
    Ok(out)
}

/// Held-out split and train-fitted scaling shared by the ml and explain
/// stages.
#[derive(Serialize, Deserialize)]
struct MlBundle {
    train: Vec<usize>,
    test: Vec<usize>,
    normalization: NormParams,
    models: Vec<Model>,
}

struct Prepared {
    ds: ExpressionDataset,
    x: Array2<f64>,
    y: Vec<u8>,
}

fn prepare(ds: ExpressionDataset, norm: &NormParams) -> StageResult<Prepared> {
    let scaled = norm.apply(&ds).map_err(fail)?;
    let y = scaled.labels().map_err(fail)?.to_vec();
    Ok(Prepared {
        x: scaled.values.clone(),
        ds: scaled,
        y,
    })
}

fn ml(ctx: &StageCtx) -> StageResult<StageOutput> {
    let cfg = &ctx.record.config.ml;
    let ds = ctx.dataset()?;
    let labels = ds.labels().map_err(fail)?;
    let (train, test) =
        split_indices(labels, &SplitSpec::new(cfg.split, ctx.record.split_seed())).map_err(fail)?;
    let train_ds = ds.subset_samples(&train);
    let norm = NormParams::fit(&train_ds, ctx.record.config.dataset.normalize);
    let tr = prepare(train_ds, &norm)?;
    let te = prepare(ds.subset_samples(&test), &norm)?;

    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut cvs = Vec::new();
    let mut rocs = BTreeMap::new();
    let mut models = Vec::new();
    let mut out = StageOutput::default();
    for (k, &kind) in cfg.models.iter().enumerate() {
        let spec = ClassifierSpec::new(kind, derive_seed(ctx.seed, kind.short_name(), 0));
        let cv = cross_validate(&spec, tr.x.view(), &tr.y, cfg.cv_folds, derive_seed(ctx.seed, "cv", 0))
            .map_err(fail)?;
        out.warnings.extend(cv.warnings.iter().map(|w| format!("{} cv: {w}", kind.short_name())));
        cvs.push(cv);
        let model = fit(&spec, tr.x.view(), &tr.y).map_err(fail)?;
        let scores = model.predict_scores(te.x.view());
        let preds = model.predict_labels(te.x.view());
        let mut m = compute_metrics(&te.y, &preds, &scores).map_err(fail)?;
        m.model_name = kind.short_name().to_string();
        if let Ok(r) = roc_curve(&te.y, &scores) {
            rocs.insert(kind.short_name().to_string(), r);
        }
        reports.push(m);
        models.push(model);
        ctx.checkpoint((k + 1) as f64 / cfg.models.len() as f64)?;
    }
    out.json("ml_metrics.json", &reports);
    out.text("ml_results.csv", metrics_table_csv(&reports));
    out.json("ml_cv.json", &cvs);
    out.json("ml_roc.json", &rocs);
    out.json(
        "ml_models.json",
        &MlBundle {
            train,
            test,
            normalization: norm,
            models,
        },
    );
    Ok(out)
}

fn hyperparams(ctx: &StageCtx, n0: usize, n1: usize) -> StageResult<GnnHyperparams> {
    let cfg = &ctx.record.config.gnn;
    let mut hp = match cfg.model {
        GnnKind::Gcn => GnnHyperparams::gcn(),
        GnnKind::Gae => GnnHyperparams::gae(),
        GnnKind::Gaan => GnnHyperparams::gaan(),
    }
    .with_seed(ctx.seed);
    if let Some(e) = cfg.epochs {
        hp.epochs = e;
    }
    if let Some(lr) = cfg.learning_rate {
        hp.learning_rate = lr;
    }
    if let Some(a) = cfg.alpha {
        hp.alpha = a;
    }
    if cfg.model != GnnKind::Gcn {
        hp.contamination = Some(match cfg.contamination {
            Some(c) => c,
            None => contamination(n0, n1)?,
        });
    }
    Ok(hp)
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    (labels.len() - n1, n1)
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn unit_table(ids: &[String], labels: &[u8], scores: &[f64], preds: &[u8], train: &[usize]) -> String {
    let mut out = String::from("unit_id,split,label,score,prediction\n");
    for i in 0..ids.len() {
        let split = if train.contains(&i) { "train" } else { "test" };
        out.push_str(&format!("{},{split},{},{:?},{}\n", ids[i], labels[i], scores[i], preds[i]));
    }
    out
}

fn gnn(ctx: &StageCtx) -> StageResult<StageOutput> {
    let cfg = &ctx.record.config.gnn;
    let mode = ctx.record.config.network.mode;
    let job = ctx.job;
    let mut monitor = |e: usize, total: usize| {
        job.set_progress(0.95 * e as f64 / total.max(1) as f64);
        !job.cancelled()
    };
    let mut out = StageOutput::default();

    let (ids, labels, train, test, scores, preds, saved, unit, detail) = match mode {
        NetworkMode::ConvergenceDivergence => {
            let graph: AttributedGraph = ctx.load_json("network.json")?;
            let g = GraphData::from_graph(&graph)?;
            let labels = g.labels.clone().ok_or_else(|| fail("network nodes carry no labels"))?;
            let (train, test) =
                split_indices(&labels, &SplitSpec::new(cfg.split, ctx.record.split_seed())).map_err(fail)?;
            let (n0, n1) = class_counts(&labels);
            let hp = hyperparams(ctx, n0, n1)?;
            let all: Vec<usize> = (0..g.n()).collect();
            let (scores, preds, saved, detail) = match cfg.model {
                GnnKind::Gcn => {
                    let m = train_gcn_classifier_with(&g, &train, &hp, &mut monitor)?;
                    let (p, y) = (m.predict_proba(&g), m.predict(&g));
                    let d = json!({ "train_accuracy": m.accuracy(&g, &train), "test_accuracy": m.accuracy(&g, &test) });
                    (p, y, SavedModel::Gcn(m), d)
                }
                GnnKind::Gae => {
                    let (m, _) = train_gae_with(&g, &train, &hp, &mut monitor)?;
                    let s = detect(&m, &g, &all)?;
                    let d = json!({ "threshold": s.threshold, "q": s.q, "contamination": s.contamination });
                    (s.scores.clone(), s.flags.iter().map(|&f| u8::from(f)).collect(), SavedModel::Gae(m), d)
                }
                GnnKind::Gaan => {
                    let (m, _) = train_gaan_with(&g, &train, &hp, &mut monitor)?;
                    let s = detect(&m, &g, &all)?;
                    let d = json!({
                        "threshold": s.threshold, "q": s.q, "contamination": s.contamination, "alpha": s.alpha,
                    });
                    (s.scores.clone(), s.flags.iter().map(|&f| u8::from(f)).collect(), SavedModel::Gaan(m), d)
                }
            };
            (g.node_ids.clone(), labels, train, test, scores, preds, saved, "node", detail)
        }
        NetworkMode::Isn => {
            if cfg.model != GnnKind::Gaan {
                return Err(fail("patient-specific networks are scored with the gaan model only"));
            }
            let graphs: Vec<AttributedGraph> = ctx.load_json("isns.json")?;
            let data = graphs.iter().map(GraphData::from_graph).collect::<Result<Vec<_>, _>>()?;
            let labels: Vec<u8> = graphs
                .iter()
                .map(|g| g.graph_label.ok_or_else(|| fail("patient network without a label")))
                .collect::<StageResult<_>>()?;
            let (train, test) =
                split_indices(&labels, &SplitSpec::new(cfg.split, ctx.record.split_seed())).map_err(fail)?;
            let (n0, n1) = class_counts(&labels);
            let hp = hyperparams(ctx, n0, n1)?;
            let train_graphs: Vec<GraphData> = train.iter().map(|&i| data[i].clone()).collect();
            let (m, _) = train_isn_gaan_with(&train_graphs, &hp, &mut monitor)?;
            let s = detect_isn_graphs(&m, &data)?;
            let d = json!({ "threshold": s.threshold, "q": s.q, "contamination": s.contamination, "alpha": s.alpha });
            let preds = s.flags.iter().map(|&f| u8::from(f)).collect();
            (s.unit_ids.clone(), labels, train, test, s.scores.clone(), preds, SavedModel::Gaan(m), "graph", d)
        }
    };
    ctx.checkpoint(0.96)?;

    let name = match (cfg.model, unit) {
        (GnnKind::Gcn, _) => "GCN (node)",
        (GnnKind::Gae, _) => "GAE (node)",
        (GnnKind::Gaan, "node") => "GAAN (node)",
        (GnnKind::Gaan, _) => "GAAN (ISN)",
    };
    let y_test = pick(&labels, &test);
    let mut metrics = compute_metrics(&y_test, &pick(&preds, &test), &pick(&scores, &test)).map_err(fail)?;
    metrics.model_name = name.to_string();
    out.warnings.extend(metrics.warnings.iter().cloned());

    let loss = match &saved {
        SavedModel::Gcn(m) => json!({ "loss": m.loss_trace }),
        SavedModel::Gae(m) => json!({ "loss": m.loss_trace }),
        SavedModel::Gaan(m) => json!({ "generator": m.trace_g, "discriminator": m.trace_d }),
    };
    out.text("gnn_checkpoint.json", Checkpoint::new(saved).to_json());
    out.text("gnn_scores.csv", unit_table(&ids, &labels, &scores, &preds, &train));
    out.json(
        "gnn_scores.json",
        &json!({ "unit": unit, "unit_ids": ids, "labels": labels, "scores": scores, "predictions": preds,
                 "train": train, "test": test }),
    );
    out.json("gnn_metrics.json", &json!({ "model": cfg.model, "unit": unit, "metrics": metrics, "detail": detail }));
    out.text("gnn_results.csv", metrics_table_csv(std::slice::from_ref(&metrics)));
    out.json("gnn_loss.json", &loss);
    Ok(out)
}

fn graph_model(saved: &SavedModel) -> &dyn GraphModel {
    match saved {
        SavedModel::Gcn(m) => m,
        SavedModel::Gae(m) => m,
        SavedModel::Gaan(m) => m,
    }
}

/// Sample indices to explain: the configured target or everyone.
fn explain_units(ids: &[String], target: Option<&str>) -> StageResult<Vec<usize>> {
    match target {
        None => Ok((0..ids.len()).collect()),
        Some(t) => ids
            .iter()
            .position(|i| i == t)
            .map(|i| vec![i])
            .ok_or_else(|| fail(format!("unknown target sample {t:?}"))),
    }
}

fn shapley_attributions(ctx: &StageCtx) -> StageResult<Vec<Attribution>> {
    let cfg = &ctx.record.config.explain;
    let bundle: MlBundle = ctx.load_json("ml_models.json")?;
    let model = bundle
        .models
        .iter()
        .find(|m| m.kind() == cfg.model)
        .ok_or_else(|| fail(format!("model {} was not trained by the ml stage", cfg.model.short_name())))?;
    let all = prepare(ctx.dataset()?, &bundle.normalization)?;
    let symbols = all.ds.display_symbols();
    let background_rows: Vec<usize> = bundle.train.iter().copied().filter(|&i| all.y[i] == 0).collect();
    if background_rows.is_empty() {
        return Err(fail("no class-0 training samples for the Shapley background"));
    }
    let background = all.x.select(Axis(0), &background_rows);
    let mean: Array1<f64> = background.mean_axis(Axis(0)).expect("nonempty background");
    let units = explain_units(&all.ds.sample_ids, cfg.target.as_deref())?;

    let mut attrs = Vec::new();
    for (k, &i) in units.iter().enumerate() {
        let id = all.ds.sample_ids[i].clone();
        let target = Target::Patient(id);
        let x = all.x.row(i);
        let mut a = match (model.linear_weights(), cfg.model) {
            (Some(lin), ModelKind::Logreg | ModelKind::LinearSvm) => {
                let mut a = linear_shapley_exact(
                    &lin.weights,
                    x.as_slice().expect("contiguous row"),
                    mean.as_slice().expect("contiguous mean"),
                )
                .map_err(fail)?;
                a.base_value += lin.bias;
                a.output += lin.bias;
                a.metadata.insert("space".into(), json!("margin"));
                a
            }
            _ => {
                let f = |v: ndarray::ArrayView1<f64>| model.predict_score(v);
                shapley_sampling(&f, x, background.view(), cfg.permutations, target_seed(ctx.seed, &target))
                    .map_err(fail)?
            }
        };
        a.target = target;
        a.label = Some(all.y[i]);
        a.feature_ids = symbols.clone();
        a.metadata.insert("model".into(), json!(cfg.model.short_name()));
        attrs.push(a);
        ctx.checkpoint(0.9 * (k + 1) as f64 / units.len() as f64)?;
    }
    Ok(attrs)
}

fn graph_attributions(ctx: &StageCtx, out: &mut StageOutput) -> StageResult<Vec<Attribution>> {
    let cfg = &ctx.record.config.explain;
    let ckpt = Checkpoint::from_json(&ctx.read_artifact("gnn_checkpoint.json")?)?;
    let model = graph_model(&ckpt.model);
    let mut attrs = Vec::new();
    let mut edge_attrs: Vec<EdgeAttribution> = Vec::new();
    let mask_params = |target: &Target| EdgeMaskParams {
        seed: target_seed(ctx.seed, target),
        ..EdgeMaskParams::default()
    };

    match ctx.record.config.network.mode {
        NetworkMode::ConvergenceDivergence => {
            let graph: AttributedGraph = ctx.load_json("network.json")?;
            let g = GraphData::from_graph(&graph)?;
            let symbols = ctx.normalized()?.display_symbols();
            let labels = g.labels.clone().unwrap_or_default();
            let units = explain_units(&g.node_ids, cfg.target.as_deref())?;
            for (k, &i) in units.iter().enumerate() {
                let target = Target::Patient(g.node_ids[i].clone());
                let node = GraphTarget::Node(i);
                let (mut a, e) = match cfg.method {
                    ExplainMethod::Ig => (
                        integrated_gradients(model, &g, node, &Baseline::Zeros, cfg.ig_steps, ReduceAxis::Features)
                            .map_err(fail)?,
                        integrated_gradients_edges(model, &g, node, cfg.ig_steps).map_err(fail)?,
                    ),
                    ExplainMethod::Saliency => (
                        saliency(model, &g, node, ReduceAxis::Features).map_err(fail)?,
                        saliency_edges(model, &g, node).map_err(fail)?,
                    ),
                    ExplainMethod::Edgemask => {
                        let r = edge_mask_explain(model, &g, node, &mask_params(&target)).map_err(fail)?;
                        (r.features, r.edges)
                    }
                    ExplainMethod::Shapley => unreachable!("handled by the ml branch"),
                };
                a.target = target.clone();
                a.label = labels.get(i).copied();
                a.feature_ids = symbols.clone();
                let mut e = e;
                e.target = target;
                attrs.push(a);
                edge_attrs.push(e);
                ctx.checkpoint(0.9 * (k + 1) as f64 / units.len() as f64)?;
            }
        }
        NetworkMode::Isn => {
            let graphs: Vec<AttributedGraph> = ctx.load_json("isns.json")?;
            let names: Vec<String> = graphs.iter().map(|g| g.name.clone()).collect();
            let units = explain_units(&names, cfg.target.as_deref())?;
            for (k, &i) in units.iter().enumerate() {
                let g = GraphData::from_graph(&graphs[i])?;
                let target = Target::Patient(names[i].clone());
                let whole = GraphTarget::Graph;
                let (mut a, mut e) = match cfg.method {
                    ExplainMethod::Ig => (
                        integrated_gradients(model, &g, whole, &Baseline::Zeros, cfg.ig_steps, ReduceAxis::Nodes)
                            .map_err(fail)?,
                        integrated_gradients_edges(model, &g, whole, cfg.ig_steps).map_err(fail)?,
                    ),
                    ExplainMethod::Saliency => (
                        saliency(model, &g, whole, ReduceAxis::Nodes).map_err(fail)?,
                        saliency_edges(model, &g, whole).map_err(fail)?,
                    ),
                    ExplainMethod::Edgemask => {
                        let r = edge_mask_explain(model, &g, whole, &mask_params(&target)).map_err(fail)?;
                        // genes have a single feature each, so a gene is as
                        // important as its strongest retained edge
                        let mut per_gene = vec![0.0f64; g.n()];
                        for (&(s, t), &v) in r.edges.edges.iter().zip(&r.edges.mask_values) {
                            per_gene[s] = per_gene[s].max(v);
                            per_gene[t] = per_gene[t].max(v);
                        }
                        let mut a = r.features;
                        a.values = per_gene;
                        a.feature_values = Some(g.x.column(0).to_vec());
                        (a, r.edges)
                    }
                    ExplainMethod::Shapley => unreachable!("handled by the ml branch"),
                };
                a.target = target.clone();
                a.label = graphs[i].graph_label;
                a.feature_ids = g.node_ids.clone();
                e.target = target;
                attrs.push(a);
                edge_attrs.push(e);
                ctx.checkpoint(0.9 * (k + 1) as f64 / units.len() as f64)?;
            }
        }
    }
    out.json("explain_edges.json", &edge_attrs);
    Ok(attrs)
}

fn explain(ctx: &StageCtx) -> StageResult<StageOutput> {
    let cfg = &ctx.record.config.explain;
    let mut out = StageOutput::default();
    let attrs = match cfg.method {
        ExplainMethod::Shapley => shapley_attributions(ctx)?,
        _ => graph_attributions(ctx, &mut out)?,
    };
    let k = cfg.top_k;

    let mut levels = vec![Level::Dataset, Level::Class(0), Level::Class(1)];
    levels.extend(attrs.iter().map(|a| Level::Patient(a.target.label())));
    let mut ranked = Vec::new();
    let mut csv = String::from("level,id,rank,feature,score\n");
    for level in levels {
        let Ok(top) = aggregate_attributions(&attrs, &level, k) else {
            continue;
        };
        let (name, id) = match &level {
            Level::Dataset => ("dataset", String::new()),
            Level::Class(c) => ("class", c.to_string()),
            Level::Patient(p) => ("patient", p.clone()),
        };
        for (r, f) in top.iter().enumerate() {
            csv.push_str(&format!("{name},{id},{},{},{:?}\n", r + 1, f.feature_id, f.score));
        }
        ranked.push(json!({ "level": level, "features": top }));
    }
    let plots: Vec<_> = attrs.iter().map(|a| force_plot_data(a, a.output, k)).collect();

    out.json("explain_attributions.json", &attrs);
    out.json("explain_top_features.json", &ranked);
    out.text("explain_top_features.csv", csv);
    out.json("explain_force_plots.json", &plots);
    Ok(out)
}
