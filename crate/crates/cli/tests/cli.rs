//! End-to-end command-line behavior: exit codes, file outputs, integrity
//! checks, and byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn holoshot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_holoshot"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    holoshot()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn holoshot")
}

fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL_CONFIG: &str = "\
seed = 5
synth.n_classes = 3
synth.per_class = 30
synth.train_fraction = 0.3
synth.test_fraction = 0.3
pretrain.epochs = 3
ssl.epochs = 2
ssl.batch_n = 8
eval.ks = 1,2
eval.repeats = 3
";

fn setup(dir: &Path) -> PathBuf {
    let cfg = dir.join("exp.cfg");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());

    let out = run(dir.path(), &["frobnicate", "--config", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    let out = run(dir.path(), &["eval", "--config", "nope.cfg"]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(dir.path().join("bad.cfg"), "seed = 1\nwho.knows = 2\n").unwrap();
    let out = run(dir.path(), &["eval", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("who.knows"));
}

#[test]
fn missing_seed_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), "eval.repeats = 2\n").unwrap();
    let out = run(dir.path(), &["synth", "--config", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn synth_is_reproducible_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);
    let manifest = read(&dir.path().join("data/manifest.csv"));
    // 3 classes x 30 images, doubled by the shifted copies, plus header.
    let lines = manifest.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
    assert_eq!(lines, 1 + 180);
    let image = read(&dir.path().join("data/p5/img00000.pgm"));

    // Same seed, same bytes.
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);
    assert_eq!(manifest, read(&dir.path().join("data/manifest.csv")));
    assert_eq!(image, read(&dir.path().join("data/p5/img00000.pgm")));
}

#[test]
fn invalid_synth_spec_exits_nonzero_with_stderr() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.cfg"),
        "seed = 5\nsynth.n_classes = 1\n",
    )
    .unwrap();
    let out = run(dir.path(), &["synth", "--config", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn ssl_requires_generic_checkpoint_or_from_random() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);

    let out = run(dir.path(), &["ssl", "--config", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--from-random"));

    run_ok(dir.path(), &["ssl", "--config", "exp.cfg", "--from-random"]);
    assert!(dir.path().join("checkpoints/ssl_refined.ckpt").exists());
}

#[test]
fn zero_epoch_ssl_checkpoint_is_byte_identical_to_input() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);
    run_ok(dir.path(), &["pretrain", "--config", "exp.cfg"]);
    run_ok(dir.path(), &["ssl", "--config", "exp.cfg", "--epochs", "0"]);
    let generic = read(&dir.path().join("checkpoints/generic.ckpt"));
    let refined = read(&dir.path().join("checkpoints/ssl_refined.ckpt"));
    assert_eq!(generic, refined);
}

#[test]
fn training_log_row_count_equals_epochs() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);
    run_ok(dir.path(), &["pretrain", "--config", "exp.cfg", "--epochs", "4"]);
    let log = String::from_utf8(read(&dir.path().join("checkpoints/pretrain_log.csv"))).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch,mean_loss,wall_seconds");
    assert_eq!(rows.len(), 1 + 4);
}

fn full_pipeline(dir: &Path) {
    run_ok(dir, &["synth", "--config", "exp.cfg"]);
    run_ok(dir, &["pretrain", "--config", "exp.cfg"]);
    run_ok(dir, &["ssl", "--config", "exp.cfg"]);
    run_ok(dir, &["embed", "--config", "exp.cfg", "--source", "generic"]);
    run_ok(dir, &["embed", "--config", "exp.cfg", "--source", "ssl_refined"]);
    run_ok(dir, &["eval", "--config", "exp.cfg"]);
}

#[test]
fn full_pipeline_is_byte_deterministic() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    setup(dir_a.path());
    setup(dir_b.path());
    full_pipeline(dir_a.path());
    full_pipeline(dir_b.path());

    for file in [
        "report/fig2.csv",
        "report/fig2_shift.csv",
        "report/table1.csv",
        "report/report.json",
        "checkpoints/generic.ckpt",
        "checkpoints/ssl_refined.ckpt",
        "cache/generic_P5.bcache",
        "cache/ssl_refined_P4.bcache",
    ] {
        assert_eq!(
            read(&dir_a.path().join(file)),
            read(&dir_b.path().join(file)),
            "{file} differs between identical runs"
        );
    }
}

#[test]
fn eval_names_missing_cache_pair() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);
    run_ok(dir.path(), &["pretrain", "--config", "exp.cfg"]);
    run_ok(dir.path(), &["ssl", "--config", "exp.cfg"]);
    run_ok(dir.path(), &["embed", "--config", "exp.cfg", "--source", "generic"]);

    let out = run(dir.path(), &["eval", "--config", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ssl_refined"), "{stderr}");
    assert!(stderr.contains("instrument"), "{stderr}");
}

#[test]
fn eval_refuses_stale_cache_digest() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    full_pipeline(dir.path());

    // Re-train generic with a different seed: caches become stale.
    run_ok(dir.path(), &["pretrain", "--config", "exp.cfg", "--seed", "99"]);
    let out = run(dir.path(), &["eval", "--config", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("digest"), "{stderr}");
}

#[test]
fn report_regenerates_tables_from_json() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    full_pipeline(dir.path());
    let fig2 = read(&dir.path().join("report/fig2.csv"));
    std::fs::remove_file(dir.path().join("report/fig2.csv")).unwrap();
    std::fs::remove_file(dir.path().join("report/table1.csv")).unwrap();
    run_ok(dir.path(), &["report", "--config", "exp.cfg"]);
    assert_eq!(fig2, read(&dir.path().join("report/fig2.csv")));
    assert!(dir.path().join("report/table1.csv").exists());
}

#[test]
fn fig2_has_one_row_per_source_head_k() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    full_pipeline(dir.path());
    let text = String::from_utf8(read(&dir.path().join("report/fig2.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "feature_source,head,k,mean,stdev,lo,hi");
    let body: Vec<&str> = lines.collect();
    // 2 sources x 2 heads x 2 ks.
    assert_eq!(body.len(), 8);
    let mut keys: Vec<String> = body
        .iter()
        .map(|l| l.splitn(4, ',').take(3).collect::<Vec<_>>().join(","))
        .collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 8, "duplicate (source, head, k) rows");
}

#[test]
fn import_path_builds_cache_with_given_dimension() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);

    // Two records from the manifest, feature dim 4.
    let manifest = String::from_utf8(read(&dir.path().join("data/manifest.csv"))).unwrap();
    let ids: Vec<&str> = manifest
        .lines()
        .skip(1)
        .take(2)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let import = format!(
        "id,f0,f1,f2,f3\n{},0.5,0.25,-1.0,2.0\n{},1.0,0.0,0.0,3.5\n",
        ids[0], ids[1]
    );
    std::fs::write(dir.path().join("vectors.csv"), import).unwrap();
    run_ok(
        dir.path(),
        &["embed", "--config", "exp.cfg", "--import", "vectors.csv"],
    );

    let cache =
        holoshot_core::cache::read_cache(&dir.path().join("cache/imported_P5.bcache")).unwrap();
    assert_eq!(cache.feature_dim, 4);
    assert_eq!(cache.records.len(), 2);
    assert_eq!(cache.checkpoint_digest, holoshot_core::cache::IMPORTED_DIGEST);
    assert_eq!(cache.records[0].vector, vec![0.5, 0.25, -1.0, 2.0]);
}

#[test]
fn import_dimension_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);
    let manifest = String::from_utf8(read(&dir.path().join("data/manifest.csv"))).unwrap();
    let ids: Vec<&str> = manifest
        .lines()
        .skip(1)
        .take(2)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let import = format!("{},0.5,0.25\n{},1.0\n", ids[0], ids[1]);
    std::fs::write(dir.path().join("vectors.csv"), import).unwrap();
    let out = run(
        dir.path(),
        &["embed", "--config", "exp.cfg", "--import", "vectors.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn cache_roundtrip_through_cli_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run_ok(dir.path(), &["synth", "--config", "exp.cfg"]);
    run_ok(dir.path(), &["pretrain", "--config", "exp.cfg"]);
    run_ok(dir.path(), &["embed", "--config", "exp.cfg", "--source", "generic"]);
    let path = dir.path().join("cache/generic_P5.bcache");
    let bytes = read(&path);
    let cache = holoshot_core::cache::read_cache(&path).unwrap();
    holoshot_core::cache::write_cache(&path, &cache).unwrap();
    assert_eq!(bytes, read(&path));
}
