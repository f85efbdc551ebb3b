use std::path::Path;

use palmscan_core::config::{AoiSpec, BackendSpec, ProviderSpec, SurveyConfig};
use palmscan_core::linker::write_catalog;
use palmscan_core::pipeline::{Stage, Survey};
use palmscan_core::planner::street_geojson;
use palmscan_core::provider::read_ledger;
use palmscan_core::sim::{generate_world, score_run, NoiseModel, SyntheticWorld, WorldParams};
use palmscan_core::Error;

fn setup(dir: &Path, seed: u64, palms: usize, noise: NoiseModel) -> (SyntheticWorld, SurveyConfig) {
    let w = generate_world(
        seed,
        &WorldParams {
            palm_count: Some(palms),
            ..WorldParams::default()
        },
    )
    .unwrap();
    let path = dir.join("world.json");
    w.save(&path).unwrap();
    let cfg = SurveyConfig::simulated(&path, dir, noise).unwrap();
    (w, cfg)
}

fn run(cfg: SurveyConfig) -> Survey {
    let s = Survey::open(cfg).unwrap();
    s.plan(false).unwrap();
    for r in s.run_all(false).unwrap() {
        assert!(r.failures.is_empty(), "{r:?}");
    }
    s
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn zero_noise_run_finds_every_palm() {
    let dir = tempfile::tempdir().unwrap();
    let (w, cfg) = setup(dir.path(), 21, 40, NoiseModel::zero());
    let s = run(cfg);
    let score = score_run(&w, &s.trees().unwrap());
    assert_eq!(score.recall, 1.0);
    assert_eq!(score.precision, Some(1.0));
    assert!(score.mean_coord_error_m.unwrap() <= 1.0);
    assert_eq!(score.timeline_accuracy, Some(1.0));
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), 2, 5, NoiseModel::zero());
    let s = Survey::open(cfg.clone()).unwrap();
    let e = s.run_stage(Stage::DetectAerial, false).unwrap_err();
    assert!(matches!(e, Error::StageOrder { .. }));
    assert_eq!(e.exit_code(), 2);
    s.plan(false).unwrap();
    let e = s.run_stage(Stage::Classify, false).unwrap_err();
    assert!(e.to_string().contains("detect-street"), "{e}");

    // a plan made under another config does not count
    let mut changed = cfg;
    changed.zoom = 19;
    let e = Survey::open(changed)
        .unwrap()
        .run_stage(Stage::DetectAerial, false)
        .unwrap_err();
    assert!(e.to_string().contains("plan"), "{e}");
}

#[test]
fn rerunning_any_stage_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), 4, 30, NoiseModel::zero());
    let s = run(cfg.clone());
    s.report().unwrap();
    let registry = std::fs::read(s.output().registry()).unwrap();
    let report = read_dir_bytes(&s.output().report_dir());
    let ledger = read_ledger(s.cache()).unwrap();

    let again = Survey::open(cfg).unwrap();
    for stage in Stage::ALL {
        let r = again.run_stage(stage, false).unwrap();
        assert_eq!(r.writes, 0, "{stage}");
    }
    // the last stage is unchanged since it ran, so it is skipped outright
    assert!(again.run_stage(Stage::History, false).unwrap().skipped);
    again.report().unwrap();
    assert_eq!(std::fs::read(again.output().registry()).unwrap(), registry);
    assert_eq!(read_dir_bytes(&again.output().report_dir()), report);
    assert_eq!(read_ledger(again.cache()).unwrap(), ledger);
}

#[test]
fn ledger_charges_each_distinct_street_image_once() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), 6, 25, NoiseModel::zero());
    let s = run(cfg);
    let views: usize = walk_files(&s.cache().root.join("street")).len();
    let ledger = read_ledger(s.cache()).unwrap();
    assert!(views > 25);
    assert_eq!(ledger.street_images as usize, views);
    assert_eq!(ledger.micro_usd, 7_000 * views as u64);
}

fn walk_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk_files(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), 8, 10, NoiseModel::zero());
    let s = Survey::open(cfg).unwrap();
    let planned = s.plan(true).unwrap();
    assert!(planned.tiles > 0 && planned.street_samples > 0);
    assert!(!s.output().root.exists());
    s.plan(false).unwrap();
    let r = s.run_stage(Stage::DetectAerial, true).unwrap();
    assert_eq!(r.requested, planned.tiles);
    assert!(!s.output().registry().exists());
    assert!(!s.cache().root.exists());
}

#[test]
fn empty_registry_reports_zero_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), 9, 0, NoiseModel::zero());
    let s = Survey::open(cfg).unwrap();
    let r = s.report().unwrap();
    assert_eq!(r.summary.trees, 0);
    assert_eq!(r.cost.combined_street_images, 0);
    let summary: serde_json::Value = serde_json::from_slice(
        &std::fs::read(s.output().report_dir().join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["trees"], 0);
}

#[test]
fn report_counts_match_registry() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(dir.path(), 10, 30, NoiseModel::zero());
    let s = run(cfg);
    let r = s.report().unwrap();
    let trees = s.trees().unwrap();
    assert_eq!(r.summary.trees as usize, trees.len());
    let gj: serde_json::Value = serde_json::from_slice(
        &std::fs::read(s.output().report_dir().join("trees.geojson")).unwrap(),
    )
    .unwrap();
    assert_eq!(gj["features"].as_array().unwrap().len(), trees.len());
    let linked = trees
        .iter()
        .filter(|t| t.link_observation().is_some())
        .count() as u64;
    assert_eq!(r.cost.combined_street_images, linked);
}

#[test]
fn missing_backend_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut cfg) = setup(dir.path(), 11, 5, NoiseModel::zero());
    cfg.backend = BackendSpec::Stdio {
        command: vec![dir.path().join("no-such-detector").display().to_string()],
        timeout_s: 5.0,
    };
    let s = Survey::open(cfg).unwrap();
    s.plan(false).unwrap();
    let e = s.run_stage(Stage::DetectAerial, false).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");
}

#[test]
fn directory_provider_replays_a_simulated_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (w, cfg) = setup(dir.path(), 12, 30, NoiseModel::zero());
    let first = run(cfg.clone());

    // the first run's cache becomes the imagery directory of the second
    let current: Vec<_> = w.current_panoramas().into_iter().cloned().collect();
    write_catalog(&dir.path().join("current.jsonl"), &current).unwrap();
    write_catalog(&dir.path().join("all.jsonl"), &w.panoramas).unwrap();
    let mut replay = cfg;
    replay.provider = ProviderSpec::Directory {
        root: first.cache().root.clone(),
        catalog: dir.path().join("current.jsonl"),
        history_catalog: Some(dir.path().join("all.jsonl")),
    };
    let b = w.aoi().unwrap().bbox();
    replay.aoi = Some(AoiSpec::Box {
        name: None,
        south: b.south,
        west: b.west,
        north: b.north,
        east: b.east,
    });
    let streets = dir.path().join("streets.geojson");
    std::fs::write(&streets, street_geojson(&w.streets).to_string()).unwrap();
    replay.streets = Some(streets);
    replay.output_dir = dir.path().join("out2");
    replay.cache_dir = dir.path().join("cache2");
    let second = run(replay);
    assert_eq!(
        std::fs::read(first.output().registry()).unwrap(),
        std::fs::read(second.output().registry()).unwrap()
    );
}
