mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use abin_core::seed::sha256_hex;
use abin_runhub::{GnnKind, Hub, HubError, RunConfig, Stage, StageStatus};
use serde_json::json;

fn cohort_config(dir: &std::path::Path) -> RunConfig {
    let (sm, labels) = common::write_cohort(dir, 11);
    let mut cfg = RunConfig::default();
    cfg.dataset.series_matrix = Some(sm);
    cfg.dataset.labels = Some(labels);
    cfg.network.threshold = 0.9;
    cfg
}

fn run_stage(hub: &Hub, id: &str, stage: Stage) {
    hub.execute_stage(id, stage).unwrap().wait().unwrap();
}

fn artifact_hashes(hub: &Hub, id: &str) -> BTreeMap<String, String> {
    let rec = hub.get_run(id).unwrap();
    rec.artifacts
        .values()
        .flatten()
        .map(|n| {
            let (path, _) = hub.artifact(id, n).unwrap();
            (n.clone(), sha256_hex(&fs::read(path).unwrap()))
        })
        .collect()
}

#[test]
fn minimal_config_starts_all_pending() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset.series_matrix = Some("x.txt".into());
    let rec = hub.create_run(cfg, None).unwrap();
    assert_eq!(rec.status.len(), Stage::ALL.len());
    assert!(rec.status.values().all(|s| *s == StageStatus::Pending));
    assert!(tmp.path().join("runs").join(&rec.run_id).join("record.json").exists());
    assert!(rec.global_seed.is_none());
}

#[test]
fn out_of_range_contamination_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.gnn.contamination = Some(0.7);
    assert!(matches!(hub.create_run(cfg, None), Err(HubError::InvalidConfig(_))));
}

#[test]
fn unwritable_root_is_storage_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain-file");
    fs::write(&file, "x").unwrap();
    assert!(matches!(Hub::open(file.join("sub")), Err(HubError::StorageUnavailable(_))));
}

#[test]
fn embed_before_ingest_is_dependency_not_met() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path()).unwrap();
    let rec = hub.create_run(RunConfig::default(), None).unwrap();
    match hub.execute_stage(&rec.run_id, Stage::Embed) {
        Err(HubError::DependencyNotMet { stage, missing }) => {
            assert_eq!(stage, Stage::Embed);
            assert_eq!(missing, vec![Stage::Ingest]);
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("embed started without ingest"),
    }
}

#[test]
fn failing_stage_captures_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset.series_matrix = Some(tmp.path().join("absent.txt").to_string_lossy().into());
    let rec = hub.create_run(cfg, None).unwrap();
    let err = hub.execute_stage(&rec.run_id, Stage::Ingest).unwrap().wait().unwrap_err();
    let HubError::StageFailed { stage, diagnostic } = err else {
        panic!("expected StageFailed");
    };
    assert_eq!(stage, Stage::Ingest);
    assert!(diagnostic.contains("absent.txt"), "{diagnostic}");
    let rec = hub.get_run(&rec.run_id).unwrap();
    assert!(matches!(rec.status_of(Stage::Ingest), StageStatus::Failed { .. }));
    assert!(rec.artifacts.get(&Stage::Ingest).is_none());
}

#[test]
fn ml_stage_emits_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path().join("ws")).unwrap();
    let rec = hub.create_run(cohort_config(tmp.path()), Some(3)).unwrap();
    run_stage(&hub, &rec.run_id, Stage::Ingest);
    run_stage(&hub, &rec.run_id, Stage::Ml);

    let read = |name: &str| -> serde_json::Value {
        let (path, hash) = hub.artifact(&rec.run_id, name).unwrap();
        assert_eq!(hash.len(), 16);
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
    };
    let metrics = read("ml_metrics.json");
    let names: Vec<&str> = metrics.as_array().unwrap().iter().map(|m| m["model_name"].as_str().unwrap()).collect();
    assert_eq!(names, ["LR", "SVM", "RF", "DT", "KNN"]);
    assert_eq!(read("ml_cv.json").as_array().unwrap().len(), 5);
    let roc = read("ml_roc.json");
    for m in &names {
        assert!(roc[m]["fpr"].is_array(), "no ROC for {m}");
    }
    let (csv, _) = hub.artifact(&rec.run_id, "ml_results.csv").unwrap();
    let header = fs::read_to_string(csv).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "model,Acc,f1,Sens,Spec,AUC,Prec");
}

#[test]
fn cancel_mid_training_removes_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path().join("ws")).unwrap();
    let mut cfg = cohort_config(tmp.path());
    cfg.gnn.model = GnnKind::Gcn;
    cfg.gnn.epochs = Some(1_000_000);
    let rec = hub.create_run(cfg, Some(5)).unwrap();
    let id = rec.run_id;
    run_stage(&hub, &id, Stage::Ingest);
    run_stage(&hub, &id, Stage::Network);

    let job = hub.execute_stage(&id, Stage::Gnn).unwrap();
    let start = Instant::now();
    let mut last = 0.0;
    while job.progress() <= 0.0 {
        assert!(start.elapsed() < Duration::from_secs(60), "training never reported progress");
        std::thread::sleep(Duration::from_millis(5));
    }
    for _ in 0..20 {
        let p = job.progress();
        assert!(p >= last, "progress went from {last} to {p}");
        last = p;
        std::thread::sleep(Duration::from_millis(2));
    }
    hub.cancel(&id, Stage::Gnn).unwrap();
    let err = job.wait().unwrap_err();
    assert!(matches!(err, HubError::StageFailed { ref diagnostic, .. } if diagnostic == "cancelled"));

    let rec = hub.get_run(&id).unwrap();
    assert_eq!(rec.status_of(Stage::Gnn), &StageStatus::Failed { reason: "cancelled".into() });
    assert!(rec.artifacts.get(&Stage::Gnn).is_none());
    let run_dir = tmp.path().join("ws/runs").join(&id);
    let leftovers: Vec<String> = fs::read_dir(run_dir.join("artifacts"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("gnn_"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
    assert!(!run_dir.join(".tmp-gnn").exists());
    // terminal state is final
    assert!(job.is_finished());
    assert!(hub.cancel(&id, Stage::Gnn).is_err());
}

#[test]
fn same_stage_cannot_be_queued_twice() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path().join("ws")).unwrap();
    let mut cfg = cohort_config(tmp.path());
    cfg.gnn.model = GnnKind::Gcn;
    cfg.gnn.epochs = Some(1_000_000);
    let id = hub.create_run(cfg, Some(5)).unwrap().run_id;
    run_stage(&hub, &id, Stage::Ingest);
    run_stage(&hub, &id, Stage::Network);
    let job = hub.execute_stage(&id, Stage::Gnn).unwrap();
    assert!(matches!(hub.execute_stage(&id, Stage::Gnn), Err(HubError::StageBusy(_))));
    // a second stage queues behind the running one
    let queued = hub.execute_stage(&id, Stage::Embed).unwrap();
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(queued.progress(), 0.0);
    assert_eq!(hub.get_run(&id).unwrap().status_of(Stage::Embed), &StageStatus::Pending);
    job.cancel();
    let _ = job.wait();
    queued.wait().unwrap();
}

#[test]
fn reset_keeps_persisted_runs_unless_purged() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path()).unwrap();
    let a = hub.create_run(RunConfig::default(), None).unwrap();
    let b = hub.create_run(RunConfig::default(), Some(1)).unwrap();
    hub.reset(false).unwrap();
    let ids: Vec<String> = hub.list_runs().unwrap().into_iter().map(|r| r.run_id).collect();
    assert!(ids.contains(&a.run_id) && ids.contains(&b.run_id));
    assert_eq!(hub.get_run(&b.run_id).unwrap(), b);

    hub.reset(true).unwrap();
    assert!(hub.list_runs().unwrap().is_empty());
    assert_eq!(fs::read_dir(tmp.path().join("runs")).unwrap().count(), 0);
    assert!(matches!(hub.get_run(&a.run_id), Err(HubError::NotFound(_))));
}

#[test]
fn reset_cancels_running_job_first() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path().join("ws")).unwrap();
    let mut cfg = cohort_config(tmp.path());
    cfg.gnn.model = GnnKind::Gcn;
    cfg.gnn.epochs = Some(1_000_000);
    let id = hub.create_run(cfg, Some(2)).unwrap().run_id;
    run_stage(&hub, &id, Stage::Ingest);
    run_stage(&hub, &id, Stage::Network);
    let job = hub.execute_stage(&id, Stage::Gnn).unwrap();
    while job.progress() <= 0.0 {
        std::thread::sleep(Duration::from_millis(5));
    }
    hub.reset(false).unwrap();
    // reset returned only after the job reached a terminal state
    assert!(job.is_finished());
    assert!(job.wait().is_err());
    let rec = hub.get_run(&id).unwrap();
    assert_eq!(rec.status_of(Stage::Gnn), &StageStatus::Failed { reason: "cancelled".into() });
    assert_eq!(rec.status_of(Stage::Network), &StageStatus::Done);
}

#[test]
fn interrupted_stage_is_failed_on_reload() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ws");
    let id = {
        let hub = Hub::open(&root).unwrap();
        let id = hub.create_run(cohort_config(tmp.path()), Some(4)).unwrap().run_id;
        run_stage(&hub, &id, Stage::Ingest);
        id
    };
    // simulate a process that died while embedding
    let path = root.join("runs").join(&id).join("record.json");
    let mut rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    rec["status"]["embed"] = json!({ "state": "running" });
    fs::write(&path, rec.to_string()).unwrap();

    let hub = Hub::open(&root).unwrap();
    let rec = hub.get_run(&id).unwrap();
    assert_eq!(rec.status_of(Stage::Embed), &StageStatus::Failed { reason: "interrupted".into() });
    for (stage, status) in &rec.status {
        if *status == StageStatus::Done {
            let names = &rec.artifacts[stage];
            assert!(!names.is_empty());
            for n in names {
                assert!(hub.artifact(&id, n).unwrap().0.exists(), "{n} missing");
            }
        }
    }
    // the run stays usable
    run_stage(&hub, &id, Stage::Embed);
}

#[test]
fn rerunning_a_stage_invalidates_downstream() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path().join("ws")).unwrap();
    let mut cfg = cohort_config(tmp.path());
    cfg.gnn.model = GnnKind::Gae;
    cfg.gnn.epochs = Some(5);
    let id = hub.create_run(cfg, Some(9)).unwrap().run_id;
    for s in [Stage::Ingest, Stage::Network, Stage::Gnn] {
        run_stage(&hub, &id, s);
    }
    hub.update_config(&id, Stage::Network, &json!({ "threshold": 0.95 })).unwrap();
    run_stage(&hub, &id, Stage::Network);
    let rec = hub.get_run(&id).unwrap();
    assert_eq!(rec.status_of(Stage::Gnn), &StageStatus::Pending);
    assert!(rec.artifacts.get(&Stage::Gnn).is_none());
    assert_eq!(rec.status_of(Stage::Ingest), &StageStatus::Done);
}

#[test]
fn recreated_deterministic_run_has_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path().join("ws")).unwrap();
    let mut cfg = cohort_config(tmp.path());
    cfg.gnn.epochs = Some(20);
    cfg.embed.iters = 300;
    cfg.explain.method = abin_runhub::ExplainMethod::Ig;
    cfg.explain.target = Some("GSM2".into());
    let first = hub.create_run(cfg, Some(7)).unwrap();
    let stages = [Stage::Ingest, Stage::Embed, Stage::Network, Stage::Ml, Stage::Gnn, Stage::Explain];
    for s in stages {
        run_stage(&hub, &first.run_id, s);
    }
    // re-create from the persisted record alone
    let stored = hub.get_run(&first.run_id).unwrap();
    let second = hub.create_run(stored.config.clone(), stored.global_seed).unwrap();
    for s in stages {
        run_stage(&hub, &second.run_id, s);
    }
    let a = artifact_hashes(&hub, &first.run_id);
    let b = artifact_hashes(&hub, &second.run_id);
    assert!(a.len() > 20);
    assert_eq!(a, b);
    assert_eq!(stored.config_hash(), hub.get_run(&second.run_id).unwrap().config_hash());
}

#[test]
fn stage_seeds_are_distinct_and_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let hub = Hub::open(tmp.path()).unwrap();
    let a = hub.create_run(RunConfig::default(), Some(7)).unwrap();
    let b = hub.create_run(RunConfig::default(), Some(7)).unwrap();
    let seeds: Vec<u64> = Stage::ALL.iter().map(|&s| a.stage_seed(s)).collect();
    let mut uniq = seeds.clone();
    uniq.sort_unstable();
    uniq.dedup();
    assert_eq!(uniq.len(), seeds.len());
    assert_eq!(seeds, Stage::ALL.iter().map(|&s| b.stage_seed(s)).collect::<Vec<_>>());
    assert_ne!(a.run_id, b.run_id);
}
