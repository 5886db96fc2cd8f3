use std::path::Path;

use mvpa_mets::config::RunConfig;
use mvpa_mets::pipeline::{files, Manifest, Stage, StageStatus, Workspace};
use mvpa_mets::Error;

/// Tiny cohort and short chains; R̂ is not checked here.
fn config(dir: &Path, seed: u64) -> RunConfig {
    let text = format!(
        r#"
seed = {seed}
[paths]
days = "data/days.csv"
participants = "data/participants.csv"
panels = "data/panels.csv"
output_dir = "out"
[simulate]
n = 150
rfm_n = 90
survey_weight_log_sd = 0.3
[mem]
chains = 2
iterations = 300
burn_in = 150
t_pool = 40
rhat_threshold = 100.0
[rfm]
chains = 2
iterations = 400
burn_in = 200
thin = 2
components = 2
rhat_threshold = 100.0
[select_h]
components = [1, 2]
[predict]
grid_max = 20
grid_step = 10
samples = 50
max_draws = 30
"#
    );
    RunConfig::from_toml(&text, dir).unwrap()
}

fn full_run(dir: &Path, seed: u64) -> Workspace {
    let ws = Workspace::new(config(dir, seed)).unwrap();
    ws.simulate().unwrap();
    ws.run_all().unwrap();
    ws
}

#[test]
fn every_stage_writes_hashed_outputs_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ws = full_run(dir.path(), 1);
    for stage in Stage::PIPELINE {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(ws.manifest_path(stage)).unwrap()).unwrap();
        assert_eq!(m.stage, stage.name());
        assert_eq!(m.config_hash, ws.hash);
        assert_eq!(m.status, StageStatus::Ok);
        assert!(!m.outputs.is_empty());
        for out in &m.outputs {
            let text = std::fs::read_to_string(ws.out().join(&out.file)).unwrap();
            assert!(text.contains(&ws.hash), "{} does not name the config hash", out.file);
        }
    }
    let dic = std::fs::read_to_string(ws.out().join(files::DIC)).unwrap();
    assert_eq!(dic.lines().filter(|l| l.ends_with(",true")).count(), 1);
    let prob_r = std::fs::read_to_string(ws.out().join(files::PROB_R)).unwrap();
    // Six R values on a three-point grid, plus header and hash lines.
    assert_eq!(prob_r.lines().count(), 2 + 6 * 3);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let wa = full_run(a.path(), 3);
    let wb = full_run(b.path(), 3);
    for stage in Stage::PIPELINE {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(wa.manifest_path(stage)).unwrap()).unwrap();
        for out in &m.outputs {
            let x = std::fs::read(wa.out().join(&out.file)).unwrap();
            let y = std::fs::read(wb.out().join(&out.file)).unwrap();
            assert!(x == y, "{} differs between identical runs", out.file);
        }
    }
}

#[test]
fn missing_predecessor_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(config(dir.path(), 1)).unwrap();
    match ws.run(Stage::FitMem) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "preprocess"),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
    assert_eq!(ws.run(Stage::Report).unwrap_err().exit_code(), 3);
}

#[test]
fn stale_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ws = full_run(dir.path(), 1);

    let other = Workspace::new(config(dir.path(), 2)).unwrap();
    assert!(matches!(other.run(Stage::Predict), Err(Error::StaleInput { .. })));

    let rf = ws.out().join(files::RISK_FACTORS);
    let mut text = std::fs::read_to_string(&rf).unwrap();
    text.push_str("\n");
    std::fs::write(&rf, text).unwrap();
    match ws.run(Stage::FitRfm) {
        Err(Error::StaleInput { path, .. }) => assert_eq!(path, rf),
        other => panic!("expected a stale input, got {other:?}"),
    }
}

#[test]
fn failed_diagnostics_exit_four_and_block_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    cfg.mem.rhat_threshold = 1.0;
    let ws = Workspace::new(cfg).unwrap();
    ws.simulate().unwrap();
    ws.run(Stage::Ingest).unwrap();
    ws.run(Stage::Preprocess).unwrap();
    let err = ws.run(Stage::FitMem).unwrap_err();
    assert!(matches!(err, Error::Convergence { .. }));
    assert_eq!(err.exit_code(), 4);
    assert!(ws.out().join(files::MEM_POSTERIOR).exists());
    assert!(matches!(ws.run(Stage::EstimateUsual), Err(Error::StaleInput { .. })));
}

#[test]
fn minute_level_input_is_ingested() {
    use mvpa_mets::ingest::{write_minutes, MinuteRecord};
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    let ws = Workspace::new(cfg.clone()).unwrap();
    ws.simulate().unwrap();
    // Two participants with hand-made minute data replace the day file.
    let mut minutes = Vec::new();
    let days: Vec<mvpa_mets::ingest::DayActivity> = mvpa_mets::io::read_csv(&cfg.paths.days).unwrap();
    for d in days.iter().filter(|d| d.participant_id == "P00001" || d.participant_id == "P00002") {
        for m in 0..1440u16 {
            let counts = if u32::from(m) < d.mvpa_minutes.round() as u32 { 3000 } else { 100 };
            minutes.push(MinuteRecord {
                participant_id: d.participant_id.clone(),
                day_index: d.day_index,
                day_of_week: d.day_of_week,
                minute_of_day: m,
                counts,
            });
        }
    }
    let path = dir.path().join("data/minutes.csv");
    write_minutes(&path, &minutes).unwrap();
    cfg.paths.minutes = Some(path);
    let ws = Workspace::new(cfg).unwrap();
    ws.run(Stage::Ingest).unwrap();
    let out: Vec<mvpa_mets::ingest::DayActivity> = mvpa_mets::io::read_csv(&ws.out().join(files::DAYS)).unwrap();
    assert_eq!(out.len(), 14);
    for d in &out {
        let src = days
            .iter()
            .find(|s| s.participant_id == d.participant_id && s.day_index == d.day_index)
            .unwrap();
        assert_eq!(d.mvpa_minutes, src.mvpa_minutes.round());
        assert_eq!(d.wear_minutes, 1440);
    }
}

#[test]
fn config_errors_exit_two() {
    let err = RunConfig::from_toml("[mem]\nburn_in = 5000\n", Path::new(".")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
