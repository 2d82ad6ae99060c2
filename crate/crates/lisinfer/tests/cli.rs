//! Exit-code contract and artifact-format checks for the `lisinfer` binary,
//! driven through small linear-test configurations in temporary directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn write_config(dir: &Path, out_dir: &Path, overrides: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!(
            "[problem]\nkind = \"linear-test\"\n\n[problem.linear]\ndim = 20\nobs = 6\n\n\
             [lis]\ntau_local = 0.01\ntau_global = 0.01\nsubchain_len = 50\n\
             max_iters = 20\ndist_tol = 1e-9\n\n[mcmc]\nsteps = 300\nburn_in = 50\n\
             chains = 1\n\n[output]\ndir = \"{}\"\n\n[seeds]\nmaster = 77\n{overrides}",
            out_dir.display()
        ),
    )
    .unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lisinfer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code present")
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out, "");
    let cfg = cfg.to_str().unwrap();

    let missing_config = run(&["build-lis", "--config", "/no/such/config.toml"]);
    assert_eq!(code(&missing_config), 2);

    let unknown_subcommand = run(&["frobnicate", "--config", cfg]);
    assert_eq!(code(&unknown_subcommand), 2);

    let missing_chain = run(&[
        "diagnose",
        "--config",
        cfg,
        "--chain",
        "/no/such/chain.chn",
    ]);
    assert_eq!(code(&missing_chain), 2);
    let stderr = String::from_utf8_lossy(&missing_chain.stderr);
    assert!(
        stderr.contains("chain.chn"),
        "stderr should name the unreadable file: {stderr}"
    );
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out, "\n[mcmc.extra]\nbogus = 1\n");
    let result = run(&["build-lis", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&result), 2);
}

#[test]
fn empty_chain_estimate_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out, "");
    let cfg = cfg.to_str().unwrap();

    let zero_cfg_path = tmp.path().join("zero.toml");
    std::fs::write(
        &zero_cfg_path,
        std::fs::read_to_string(tmp.path().join("run.toml"))
            .unwrap()
            .replace("steps = 300", "steps = 0"),
    )
    .unwrap();
    let sampled = run(&["sample", "--config", zero_cfg_path.to_str().unwrap()]);
    assert_eq!(code(&sampled), 0, "sampling zero steps is a valid no-op");

    let chain = out.join("chain_000.chn");
    assert!(chain.exists());
    let estimated = run(&[
        "estimate",
        "--config",
        cfg,
        "--chain",
        chain.to_str().unwrap(),
    ]);
    assert_eq!(code(&estimated), 3, "no states to estimate from");
}

#[test]
fn tampered_chain_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out, "");
    let cfg = cfg.to_str().unwrap();

    assert_eq!(code(&run(&["sample", "--config", cfg])), 0);
    let chain = out.join("chain_000.chn");

    let clean = run(&["verify", "--config", cfg, "--chain", chain.to_str().unwrap()]);
    assert_eq!(code(&clean), 0);
    assert!(String::from_utf8_lossy(&clean.stdout).contains("PASS"));

    let mut bytes = std::fs::read(&chain).unwrap();
    bytes[26] ^= 0x40;
    std::fs::write(&chain, &bytes).unwrap();

    let tampered = run(&["verify", "--config", cfg, "--chain", chain.to_str().unwrap()]);
    assert_eq!(code(&tampered), 3);
    assert!(String::from_utf8_lossy(&tampered.stdout).contains("FAIL"));
}

#[test]
fn infinite_distance_tolerance_stops_after_one_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out, "");
    let relaxed = tmp.path().join("relaxed.toml");
    std::fs::write(
        &relaxed,
        std::fs::read_to_string(tmp.path().join("run.toml"))
            .unwrap()
            .replace("dist_tol = 1e-9", "dist_tol = inf"),
    )
    .unwrap();
    drop(cfg);

    assert_eq!(code(&run(&["build-lis", "--config", relaxed.to_str().unwrap()])), 0);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "iter,r,distance,hessian_evals,wall_time");
    assert_eq!(lines.len(), 2, "one header plus one converged iteration");
}

#[test]
fn resolved_config_echo_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out, "");
    assert_eq!(code(&run(&["build-lis", "--config", cfg.to_str().unwrap()])), 0);

    let echo = out.join("config.resolved.toml");
    let text = std::fs::read_to_string(&echo).unwrap();
    assert!(text.contains("kind = \"linear-test\""));

    let rerun = run(&["build-lis", "--config", echo.to_str().unwrap()]);
    assert_eq!(code(&rerun), 0, "the echoed config is itself runnable");
}

#[test]
fn estimate_artifacts_have_grid_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out, "");
    let cfg = cfg.to_str().unwrap();

    assert_eq!(code(&run(&["build-lis", "--config", cfg])), 0);
    let lis = out.join("lis.bin");
    assert_eq!(
        code(&run(&["sample", "--config", cfg, "--lis", lis.to_str().unwrap()])),
        0
    );
    let chain = out.join("chain_000.chn");
    assert_eq!(
        code(&run(&[
            "estimate",
            "--config",
            cfg,
            "--lis",
            lis.to_str().unwrap(),
            "--chain",
            chain.to_str().unwrap(),
        ])),
        0
    );

    let mean = lisinfer::io::read_matrix(out.join("mean.mat")).unwrap();
    assert_eq!((mean.nrows(), mean.ncols()), (1, 20));
    let variance = lisinfer::io::read_matrix(out.join("variance.mat")).unwrap();
    assert_eq!((variance.nrows(), variance.ncols()), (1, 20));
    assert!(variance.iter().all(|v| *v > 0.0));

    let summary = std::fs::read_to_string(out.join("estimate.json")).unwrap();
    assert!(summary.contains("rao-blackwell"));
}

#[test]
fn seed_override_changes_chains() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out, "");
    let cfg = cfg.to_str().unwrap();

    assert_eq!(code(&run(&["sample", "--config", cfg])), 0);
    let baseline = std::fs::read(out.join("chain_000.chn")).unwrap();

    assert_eq!(code(&run(&["sample", "--config", cfg, "--seed", "999"])), 0);
    let reseeded = std::fs::read(out.join("chain_000.chn")).unwrap();
    assert_ne!(baseline, reseeded, "a different master seed must change the chain");

    let alt = tmp.path().join("alt");
    assert_eq!(
        code(&run(&["sample", "--config", cfg, "--out", alt.to_str().unwrap()])),
        0
    );
    assert!(alt.join("chain_000.chn").exists());
    let moved = std::fs::read(alt.join("chain_000.chn")).unwrap();
    assert_eq!(baseline, moved, "--out must relocate, not reseed");
}
