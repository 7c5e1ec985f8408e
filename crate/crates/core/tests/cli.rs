use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rkhs_ensemble::config::RunConfig;
use rkhs_ensemble::ensemble::EnsembleRole;
use rkhs_ensemble::io::{read_fields, Manifest, Table};
use rkhs_ensemble::pipeline::{cmd_ensemble, cmd_spinup, load_ensemble, save_ensemble};

const BIN: &str = env!("CARGO_BIN_EXE_rkhs-ens");

fn tiny_config(out: &Path, p: usize) -> String {
    format!(
        "# small grid\n\
         model.nx = 16\n\
         model.ny = 32\n\
         ensemble.p = {p}\n\
         ensemble.p_test = 4\n\
         ensemble.n_pod = 8\n\
         ensemble.base_time = 0.1\n\
         ensemble.base_snapshots = 20\n\
         ensemble.horizon = 0.12\n\
         io.output_dir = {}\n",
        out.display()
    )
}

fn write_config(dir: &Path, p: usize) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, tiny_config(&dir.join("out"), p)).unwrap();
    path
}

fn rkhs(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_on_a_small_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 10);
    let cfg = cfg.to_str().unwrap();
    let start = Instant::now();
    for stage in ["spinup", "ensemble", "koopman", "lyapunov", "reconstruct", "assimilate"] {
        let o = rkhs(&[stage, "--config", cfg]);
        assert!(o.status.success(), "{stage} failed: {}", stderr(&o));
    }
    assert!(start.elapsed().as_secs() < 60, "pipeline took {:?}", start.elapsed());

    let out = tmp.path().join("out");
    for f in [
        "spinup/base.wlnd",
        "ensemble/pod_eigenvalues.csv",
        "ensemble/training/member_0009.wlnd",
        "koopman/spectrum_empirical.csv",
        "koopman/psi0_gaussian.wlnd",
        "lyapunov/modal_gaussian.csv",
        "lyapunov/global_empirical.csv",
        "reconstruct/errors_empirical.csv",
        "assimilate/da_errors.csv",
        "assimilate/observations_test0.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let t = Table::read(&out.join("reconstruct/errors_gaussian.csv"), "reconstruct").unwrap();
    assert_eq!(t.header[0], "time");
    assert_eq!(t.rows.len(), 13);
    assert_eq!(t.config_hash.len(), 16);
    let plain = t.float_column("mean_err_plain", Path::new("x")).unwrap();
    let proj = t.float_column("err_projection", Path::new("x")).unwrap();
    for (a, b) in plain.iter().zip(&proj) {
        assert!(b <= &(a * (1.0 + 1e-9)));
    }
    let (times, states) = read_fields(&out.join("ensemble/test/member_0000.wlnd"), 1.0, "ensemble").unwrap();
    assert_eq!(times.len(), 13);
    assert_eq!((states[0].grid.nx, states[0].grid.ny), (16, 32));
}

#[test]
fn stage_without_prerequisite_names_the_missing_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 4);
    let o = rkhs(&["koopman", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("run `ensemble` first"), "{}", stderr(&o));
}

#[test]
fn changed_upstream_config_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 4);
    let cfg = cfg.to_str().unwrap();
    assert!(rkhs(&["spinup", "--config", cfg]).status.success());
    let o = rkhs(&["ensemble", "--config", cfg, "--override", "model.rossby=0.004"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("rerun `spinup`"), "{}", stderr(&o));
    // downstream-only keys do not invalidate the spin-up
    let o = rkhs(&["ensemble", "--config", cfg, "--override", "ensemble.seed_test=99"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn config_errors_carry_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.cfg");
    std::fs::write(&path, "model.nx = 16\n\nmodel.bogus = 3\n").unwrap();
    let o = rkhs(&["show-config", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    std::fs::write(&path, "model.nx = 16\nmodel.nx = 32\n").unwrap();
    let o = rkhs(&["show-config", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = rkhs(&["show-config", "--override", "kernel.ell_g=-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn show_config_round_trips_and_prints_hashes() {
    let o = rkhs(&["show-config", "--fast", "--override", "kernel.ell_g=0.5"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.ensemble.p, 40);
    assert_eq!(cfg.kernel.ell_g, 0.5);
    assert_eq!(text.lines().filter(|l| l.starts_with("# hash ")).count(), 6);
}

#[test]
fn ensemble_round_trips_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(&tiny_config(&tmp.path().join("out"), 4)).unwrap();
    cfg.ensemble.horizon = 0.03;
    cmd_spinup(&cfg).unwrap();
    cmd_ensemble(&cfg).unwrap();
    let a = load_ensemble(&cfg, EnsembleRole::Training).unwrap();
    assert_eq!(a.p(), 4);
    assert_eq!(a.times(), &[0.0, 0.01, 0.02, 0.03]);

    let copy = tmp.path().join("copy");
    save_ensemble(&copy, &a, &Manifest::read(&tmp.path().join("out/ensemble/training/manifest.txt"), "ensemble").unwrap().get("config_hash").unwrap().to_string()).unwrap();
    for f in std::fs::read_dir(&copy).unwrap() {
        let f = f.unwrap();
        let original = tmp.path().join("out/ensemble/training").join(f.file_name());
        assert_eq!(std::fs::read(f.path()).unwrap(), std::fs::read(original).unwrap(), "{:?}", f.file_name());
    }
    for (m, n) in a.members.iter().zip(&load_ensemble(&cfg, EnsembleRole::Training).unwrap().members) {
        assert_eq!(m, n);
    }
}
