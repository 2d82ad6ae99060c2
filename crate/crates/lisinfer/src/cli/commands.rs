//! The five subcommands. Each one loads the config, applies command-line
//! overrides, writes the resolved config echo into the output directory,
//! and then produces its artifacts there. All outputs are deterministic
//! given the config and seed; wall-clock fields are zeroed unless
//! `output.record_timing` is set.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{rb_mean, rb_variances, sample_cov, sample_mean};
use crate::io::{
    self, derive_seed, read_chain, read_lis, read_vector, write_chain, write_lis, write_matrix,
    write_vector,
};
use crate::linalg::max_principal_angle;
use crate::lis::{adapt_lis, AdaptOutcome, GlobalLis, ReducedPosterior};
use crate::mcmc::{
    autocorrelation, ess, integrated_autocorr_time, map_point, run_mala, ChainOutcome,
    FullPosterior, MalaConfig, MapResult, Precond,
};
use crate::model::{optimal_linear_projector, ForwardProblem};

use super::{CliError, CmdArgs};
use super::config::{build_experiment, load_config, PrecondKind, ProblemKind, RunConfig};

fn prepare(args: &CmdArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds.master = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.display().to_string();
    }
    let out = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Config(format!("cannot create output dir {}: {e}", out.display())))?;
    let echo = toml::to_string_pretty(&cfg)
        .map_err(|e| CliError::Config(format!("cannot serialize resolved config: {e}")))?;
    fs::write(out.join("config.resolved.toml"), echo)
        .map_err(|e| CliError::Config(format!("cannot write resolved config: {e}")))?;
    Ok((cfg, out))
}

fn read_file_err<'a>(path: &'a Path, what: &str) -> impl FnOnce(io::IoError) -> CliError + 'a {
    let what = what.to_owned();
    move |e| match e {
        io::IoError::Subspace(inner) => CliError::Numerical(inner.to_string()),
        other => CliError::Config(format!("{what} {}: {other}", path.display())),
    }
}

fn load_lis(path: &Path, problem: &ForwardProblem) -> Result<GlobalLis, CliError> {
    read_lis(path, &problem.prior).map_err(read_file_err(path, "cannot read subspace file"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Debug, Serialize, Deserialize)]
struct SubchainStat {
    iter: usize,
    accept: f64,
    lag1_autocorr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdaptStats {
    outcome: String,
    iterations: usize,
    final_r: usize,
    hessian_evals: usize,
    map_log_post: f64,
    map_grad_norm: f64,
    map_iterations: usize,
    map_converged: bool,
    wall_time_s: f64,
    subchains: Vec<SubchainStat>,
}

pub fn cmd_build_lis(args: &CmdArgs) -> Result<u8, CliError> {
    let (cfg, out) = prepare(args)?;
    let exp = build_experiment(&cfg)?;
    let adapt_cfg = cfg.lis.to_adapt_config();
    let seed = derive_seed(cfg.seeds.master, "adapt", 0);
    let result = adapt_lis(&exp.problem, &adapt_cfg, seed)?;

    write_lis(out.join("lis.bin"), &result.lis, &exp.problem.prior)
        .map_err(|e| CliError::Config(format!("cannot write lis.bin: {e}")))?;

    let timing = cfg.output.record_timing;
    let mut trace = String::from("iter,r,distance,hessian_evals,wall_time\n");
    for row in &result.trace {
        let wall = if timing { row.wall_time } else { 0.0 };
        writeln!(
            trace,
            "{},{},{},{},{}",
            row.iter, row.r, row.distance, row.hessian_evals, wall
        )
        .expect("writing to a string cannot fail");
    }
    write_text(&out.join("trace.csv"), &trace)?;

    let mut spectrum = String::from("index,gamma\n");
    for (i, g) in result.lis.gamma().iter().enumerate() {
        writeln!(spectrum, "{},{}", i + 1, g).expect("writing to a string cannot fail");
    }
    write_text(&out.join("eigenvalues.csv"), &spectrum)?;

    let last_wall = result.trace.last().map(|r| r.wall_time).unwrap_or(0.0);
    let stats = AdaptStats {
        outcome: match result.outcome {
            AdaptOutcome::Converged => "converged".into(),
            AdaptOutcome::MaxIters => "max-iterations".into(),
            AdaptOutcome::BudgetExhausted => "budget-exhausted".into(),
        },
        iterations: result.trace.len(),
        final_r: result.lis.dim(),
        hessian_evals: result.hessian_evals,
        map_log_post: result.map.log_post,
        map_grad_norm: result.map.grad_norm,
        map_iterations: result.map.iterations,
        map_converged: result.map.converged,
        wall_time_s: if timing { last_wall } else { 0.0 },
        subchains: result
            .trace
            .iter()
            .map(|r| SubchainStat {
                iter: r.iter,
                accept: r.subchain_accept,
                lag1_autocorr: r.subchain_lag1_autocorr,
            })
            .collect(),
    };
    write_json(&out.join("adapt_stats.json"), &stats)?;

    println!(
        "built LIS of dimension {} in {} iterations ({}), {} Hessian evaluations",
        result.lis.dim(),
        result.trace.len(),
        stats.outcome,
        result.hessian_evals
    );
    Ok(0)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChainSidecar {
    pub space: String,
    pub dim: usize,
    pub requested_steps: usize,
    pub burn_in: usize,
    pub kept_steps: usize,
    pub acceptance_rate: f64,
    pub final_step_size: f64,
    pub seed: u64,
    pub log_post_mean: f64,
    pub log_post_min: f64,
    pub log_post_max: f64,
    pub wall_time_s: f64,
}

fn loglik_stats(series: &DVector<f64>) -> (f64, f64, f64) {
    if series.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    (series.mean(), series.min(), series.max())
}

fn laplace_precision(problem: &ForwardProblem, map: &MapResult) -> Result<DMatrix<f64>, CliError> {
    let jac = problem.assemble_jacobian(&map.x)?;
    let vars = problem.obs_cov.variances(problem.model.dim_obs());
    let mut weighted = jac.clone();
    for r in 0..weighted.nrows() {
        for c in 0..weighted.ncols() {
            weighted[(r, c)] /= vars[r];
        }
    }
    let h = jac.transpose() * weighted;
    let n = problem.dim();
    let prior_prec = problem.prior.factor().solve(&DMatrix::identity(n, n));
    let a = h + prior_prec;
    Ok((&a + a.transpose()) * 0.5)
}

pub fn cmd_sample(args: &CmdArgs) -> Result<u8, CliError> {
    let (cfg, out) = prepare(args)?;
    let exp = build_experiment(&cfg)?;
    let lis = match &args.lis {
        Some(path) => {
            let lis = load_lis(path, &exp.problem)?;
            if lis.dim() == 0 {
                return Err(CliError::Config(
                    "the supplied LIS is empty; there is no subspace to sample".into(),
                ));
            }
            Some(lis)
        }
        None => None,
    };

    let map = map_point(&exp.problem, exp.problem.prior.mean(), 1e-8, 200)?;
    let precond = match (cfg.mcmc.precond, &lis) {
        (PrecondKind::Identity, _) => Precond::Identity,
        (PrecondKind::Empirical, _) => Precond::Empirical {
            warmup: cfg.mcmc.empirical_warmup,
            refresh_every: cfg.mcmc.empirical_refresh.max(1),
        },
        (PrecondKind::Auto, Some(lis)) => Precond::FixedDiag(DVector::from_fn(
            lis.dim(),
            |i, _| 1.0 / (1.0 + lis.gamma()[i]),
        )),
        (PrecondKind::Auto, None) => Precond::FixedInvCov(laplace_precision(&exp.problem, &map)?),
    };
    let mala = MalaConfig {
        step_size: cfg.mcmc.step_size,
        adapt: cfg.mcmc.adapt_steps,
        target_accept: cfg.mcmc.target_accept,
        precond,
        ..MalaConfig::default()
    };
    let init = match &lis {
        Some(lis) => lis.lis_coords(&map.x),
        None => map.x.clone(),
    };

    let total = cfg.mcmc.burn_in + cfg.mcmc.steps;
    let n_chains = cfg.mcmc.chains.max(1);
    let timing = cfg.output.record_timing;
    let lines = (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let seed = derive_seed(cfg.seeds.master, "chain", c as u64);
            let chain = match &lis {
                Some(lis) => {
                    let target = ReducedPosterior {
                        problem: &exp.problem,
                        lis,
                    };
                    run_mala(&target, &init, total, &mala, seed)
                }
                None => {
                    let target = FullPosterior {
                        problem: &exp.problem,
                    };
                    run_mala(&target, &init, total, &mala, seed)
                }
            }
            .map_err(|e| CliError::Numerical(format!("chain {c}: {e}")))?;
            if let ChainOutcome::Aborted { step, reason } = &chain.outcome {
                return Err(CliError::Numerical(format!(
                    "chain {c} aborted at step {step}: {reason}"
                )));
            }

            let kept = chain.steps().saturating_sub(cfg.mcmc.burn_in);
            let states = chain.states.columns(cfg.mcmc.burn_in, kept).into_owned();
            let log_post = chain.log_post.rows(cfg.mcmc.burn_in, kept).into_owned();
            let chain_path = out.join(format!("chain_{c:03}.chn"));
            write_chain(&chain_path, &states)
                .map_err(|e| CliError::Config(format!("cannot write chain: {e}")))?;
            write_vector(chain_path.with_extension("loglik.mat"), &log_post)
                .map_err(|e| CliError::Config(format!("cannot write loglik: {e}")))?;

            let (lp_mean, lp_min, lp_max) = loglik_stats(&log_post);
            let side = ChainSidecar {
                space: if lis.is_some() { "subspace" } else { "full" }.into(),
                dim: init.len(),
                requested_steps: cfg.mcmc.steps,
                burn_in: cfg.mcmc.burn_in,
                kept_steps: kept,
                acceptance_rate: chain.acceptance_rate(),
                final_step_size: if chain.steps() > 0 {
                    chain.step_sizes[chain.steps() - 1]
                } else {
                    cfg.mcmc.step_size
                },
                seed,
                log_post_mean: lp_mean,
                log_post_min: lp_min,
                log_post_max: lp_max,
                wall_time_s: if timing && chain.steps() > 0 {
                    chain.wall_times[chain.steps() - 1]
                } else {
                    0.0
                },
            };
            write_json(&chain_path.with_extension("json"), &side)?;
            Ok(format!(
                "chain {c}: {} states in {}, acceptance {:.3}",
                kept,
                chain_path.display(),
                side.acceptance_rate
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    for line in lines {
        println!("{line}");
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
struct EstimateSummary {
    problem: String,
    estimator: String,
    grid_rows: usize,
    grid_cols: usize,
    dim: usize,
    states: usize,
    lis_dim: Option<usize>,
    chains: Vec<String>,
    mean_file: String,
    variance_file: String,
}

/// Reshape a flat field into its natural grid for plotting; parameters are
/// stored row-major with respect to `(rows, cols)`.
fn field_matrix(shape: (usize, usize), v: &DVector<f64>) -> DMatrix<f64> {
    let (rows, cols) = shape;
    assert_eq!(rows * cols, v.len(), "field does not match the grid");
    DMatrix::from_fn(rows, cols, |r, c| v[r * cols + c])
}

fn read_chains(paths: &[PathBuf]) -> Result<DMatrix<f64>, CliError> {
    let mut all: Option<DMatrix<f64>> = None;
    for path in paths {
        let states = read_chain(path).map_err(read_file_err(path, "cannot read chain file"))?;
        all = Some(match all {
            None => states,
            Some(prev) => {
                if prev.nrows() != states.nrows() {
                    return Err(CliError::Config(format!(
                        "chain {} has dimension {}, expected {}",
                        path.display(),
                        states.nrows(),
                        prev.nrows()
                    )));
                }
                let mut merged = DMatrix::zeros(prev.nrows(), prev.ncols() + states.ncols());
                merged.columns_mut(0, prev.ncols()).copy_from(&prev);
                merged
                    .columns_mut(prev.ncols(), states.ncols())
                    .copy_from(&states);
                merged
            }
        });
    }
    all.ok_or_else(|| CliError::Config("estimate needs at least one --chain file".into()))
}

pub fn cmd_estimate(args: &CmdArgs) -> Result<u8, CliError> {
    let (cfg, out) = prepare(args)?;
    if args.chain.is_empty() {
        return Err(CliError::Config(
            "estimate needs at least one --chain file".into(),
        ));
    }
    let exp = build_experiment(&cfg)?;
    let states = read_chains(&args.chain)?;
    if states.ncols() == 0 {
        return Err(CliError::Numerical(
            "cannot estimate from an empty chain".into(),
        ));
    }

    let (estimator, lis_dim, mean, variance) = match &args.lis {
        Some(path) => {
            let lis = load_lis(path, &exp.problem)?;
            if states.nrows() != lis.dim() {
                return Err(CliError::Config(format!(
                    "chain dimension {} does not match the LIS dimension {}; \
                     pass a subspace chain with --lis or drop --lis for a full chain",
                    states.nrows(),
                    lis.dim()
                )));
            }
            let reduced_mean = sample_mean(&states);
            let reduced_cov = sample_cov(&states);
            let mean = rb_mean(&lis, &reduced_mean)?;
            let variance = rb_variances(&exp.problem.prior, &lis, &reduced_cov)?;
            ("rao-blackwell", Some(lis.dim()), mean, variance)
        }
        None => {
            if states.nrows() != exp.problem.dim() {
                return Err(CliError::Config(format!(
                    "chain dimension {} does not match the problem dimension {}",
                    states.nrows(),
                    exp.problem.dim()
                )));
            }
            let mean = sample_mean(&states);
            let variance = sample_cov(&states).diagonal();
            ("standard", None, mean, variance)
        }
    };

    let mean_path = out.join("mean.mat");
    let variance_path = out.join("variance.mat");
    write_matrix(&mean_path, &field_matrix(exp.shape, &mean))
        .map_err(|e| CliError::Config(format!("cannot write mean field: {e}")))?;
    write_matrix(&variance_path, &field_matrix(exp.shape, &variance))
        .map_err(|e| CliError::Config(format!("cannot write variance field: {e}")))?;

    let summary = EstimateSummary {
        problem: exp.kind.as_str().into(),
        estimator: estimator.into(),
        grid_rows: exp.shape.0,
        grid_cols: exp.shape.1,
        dim: exp.problem.dim(),
        states: states.ncols(),
        lis_dim,
        chains: args.chain.iter().map(|p| p.display().to_string()).collect(),
        mean_file: "mean.mat".into(),
        variance_file: "variance.mat".into(),
    };
    write_json(&out.join("estimate.json"), &summary)?;
    println!(
        "{} estimate from {} states written to {}",
        estimator,
        states.ncols(),
        out.display()
    );
    Ok(0)
}

struct DiagnosisSeries {
    name: String,
    values: DVector<f64>,
    wall_time_s: f64,
}

fn chain_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn cmd_diagnose(args: &CmdArgs) -> Result<u8, CliError> {
    let (cfg, out) = prepare(args)?;
    if args.chain.is_empty() {
        return Err(CliError::Config(
            "diagnose needs at least one --chain file".into(),
        ));
    }
    let lis = match &args.lis {
        Some(path) => {
            let exp = build_experiment(&cfg)?;
            Some(load_lis(path, &exp.problem)?)
        }
        None => None,
    };

    let mut series = Vec::new();
    for path in &args.chain {
        let states = read_chain(path).map_err(read_file_err(path, "cannot read chain file"))?;
        let loglik_path = path.with_extension("loglik.mat");
        let loglik =
            read_vector(&loglik_path).map_err(read_file_err(&loglik_path, "cannot read log-posterior file"))?;
        let sidecar_path = path.with_extension("json");
        let sidecar_text = fs::read_to_string(&sidecar_path).map_err(|e| {
            CliError::Config(format!("cannot read sidecar {}: {e}", sidecar_path.display()))
        })?;
        let sidecar: ChainSidecar = serde_json::from_str(&sidecar_text).map_err(|e| {
            CliError::Config(format!("invalid sidecar {}: {e}", sidecar_path.display()))
        })?;
        if loglik.len() != states.ncols() {
            return Err(CliError::Config(format!(
                "{}: {} states but {} log-posterior values",
                path.display(),
                states.ncols(),
                loglik.len()
            )));
        }

        let stem = chain_stem(path);
        series.push(DiagnosisSeries {
            name: format!("{stem}.loglik"),
            values: loglik,
            wall_time_s: sidecar.wall_time_s,
        });
        if let Some(lis) = &lis {
            for idx in [0usize, 2, 4] {
                if idx >= lis.dim() {
                    continue;
                }
                let values = if states.nrows() == lis.dim() {
                    states.row(idx).transpose()
                } else if states.nrows() == lis.ambient_dim() {
                    let xi = lis.xi().column(idx);
                    DVector::from_fn(states.ncols(), |t, _| xi.dot(&states.column(t)))
                } else {
                    return Err(CliError::Config(format!(
                        "{}: dimension {} matches neither the subspace ({}) nor the \
                         ambient space ({})",
                        path.display(),
                        states.nrows(),
                        lis.dim(),
                        lis.ambient_dim()
                    )));
                };
                series.push(DiagnosisSeries {
                    name: format!("{stem}.lis{}", idx + 1),
                    values,
                    wall_time_s: sidecar.wall_time_s,
                });
            }
        }
    }

    let shortest = series.iter().map(|s| s.values.len()).min().unwrap_or(0);
    let max_lag = shortest.saturating_sub(1).min(200);
    let mut curves = Vec::with_capacity(series.len());
    for s in &series {
        let rho = autocorrelation(&s.values, max_lag)
            .map_err(|e| CliError::Numerical(format!("{}: {e}", s.name)))?;
        curves.push(rho);
    }

    let mut autocorr = String::from("lag");
    for s in &series {
        write!(autocorr, ",{}", s.name).expect("writing to a string cannot fail");
    }
    autocorr.push('\n');
    for lag in 0..=max_lag {
        write!(autocorr, "{lag}").expect("writing to a string cannot fail");
        for rho in &curves {
            write!(autocorr, ",{}", rho[lag]).expect("writing to a string cannot fail");
        }
        autocorr.push('\n');
    }
    write_text(&out.join("autocorr.csv"), &autocorr)?;

    let mut table = String::from("series,steps,iact,ess,ess_per_step,ess_per_cpu_s\n");
    for s in &series {
        let n = s.values.len();
        let tau = integrated_autocorr_time(&s.values);
        let effective = ess(&s.values);
        let per_step = if n > 0 { effective / n as f64 } else { 0.0 };
        let per_second = if s.wall_time_s > 0.0 {
            effective / s.wall_time_s
        } else {
            0.0
        };
        writeln!(
            table,
            "{},{},{},{},{},{}",
            s.name, n, tau, effective, per_step, per_second
        )
        .expect("writing to a string cannot fail");
    }
    write_text(&out.join("ess.csv"), &table)?;

    println!(
        "diagnostics for {} series written to {}",
        series.len(),
        out.display()
    );
    Ok(0)
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    all_pass: bool,
    checks: Vec<Check>,
}

fn push_check(checks: &mut Vec<Check>, name: &str, pass: bool, detail: String) {
    checks.push(Check {
        name: name.into(),
        pass,
        detail,
    });
}

fn bytes_roundtrip(original: &Path, rewritten: &Path) -> Result<bool, CliError> {
    let a = fs::read(original)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", original.display())))?;
    let b = fs::read(rewritten)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", rewritten.display())))?;
    Ok(a == b)
}

pub fn cmd_verify(args: &CmdArgs) -> Result<u8, CliError> {
    let (cfg, out) = prepare(args)?;
    let exp = build_experiment(&cfg)?;
    let mut checks = Vec::new();

    let echo_path = out.join("config.resolved.toml");
    let reparsed = fs::read_to_string(&echo_path)
        .ok()
        .and_then(|t| toml::from_str::<RunConfig>(&t).ok())
        .is_some();
    push_check(
        &mut checks,
        "config-echo-reparses",
        reparsed,
        format!("{}", echo_path.display()),
    );

    let mut lis = None;
    if let Some(path) = &args.lis {
        match load_lis(path, &exp.problem) {
            Ok(loaded) => {
                let tmp = out.join(".verify_lis_roundtrip.bin");
                write_lis(&tmp, &loaded, &exp.problem.prior)
                    .map_err(|e| CliError::Config(format!("cannot rewrite subspace: {e}")))?;
                let same = bytes_roundtrip(path, &tmp)?;
                fs::remove_file(&tmp).ok();
                push_check(
                    &mut checks,
                    "lis-file-roundtrip",
                    same,
                    "read - write reproduces the file byte for byte".into(),
                );

                let r = loaded.dim();
                let biorth = (loaded.xi().tr_mul(loaded.phi()) - DMatrix::identity(r, r)).amax();
                push_check(
                    &mut checks,
                    "basis-biorthogonality",
                    biorth <= 1e-10,
                    format!("max |XiᵀPhi - I| = {biorth:.3e}"),
                );

                let pi = loaded.projector();
                let idem = (&pi * &pi - &pi).amax();
                push_check(
                    &mut checks,
                    "projector-idempotent",
                    idem <= 1e-8,
                    format!("max |Pi² - Pi| = {idem:.3e}"),
                );

                let weighted = exp.problem.prior.factor().solve(&pi);
                let asym = (&weighted - weighted.transpose()).amax();
                let scale = weighted.amax().max(1.0);
                push_check(
                    &mut checks,
                    "projector-self-adjoint",
                    asym <= 1e-8 * scale,
                    format!("max asymmetry of prior-precision-weighted Pi = {asym:.3e}"),
                );

                let descending = loaded
                    .gamma()
                    .as_slice()
                    .windows(2)
                    .all(|w| w[0] >= w[1]);
                push_check(
                    &mut checks,
                    "spectrum-descending",
                    descending,
                    format!("{} eigenvalues", r),
                );

                if exp.kind == ProblemKind::LinearTest {
                    let forward = exp.linear_forward.as_ref().expect("linear problem");
                    if r == 0 {
                        push_check(
                            &mut checks,
                            "optimal-subspace-span",
                            false,
                            "stored subspace is empty".into(),
                        );
                    } else {
                        let opt = optimal_linear_projector(
                            forward,
                            &exp.problem.prior,
                            &exp.problem.obs_cov,
                            r,
                        )?;
                        let angle = max_principal_angle(
                            &loaded.phi().clone().qr().q(),
                            &opt.u.clone().qr().q(),
                        );
                        push_check(
                            &mut checks,
                            "optimal-subspace-span",
                            angle <= 1e-6,
                            format!("max principal angle vs the exact optimum = {angle:.3e}"),
                        );
                    }
                }
                lis = Some(loaded);
            }
            Err(e) => push_check(&mut checks, "lis-file-readable", false, e.to_string()),
        }
    }

    for path in &args.chain {
        let stem = chain_stem(path);
        let states = read_chain(path).map_err(read_file_err(path, "cannot read chain file"))?;
        let tmp = out.join(".verify_chain_roundtrip.bin");
        write_chain(&tmp, &states)
            .map_err(|e| CliError::Config(format!("cannot rewrite chain: {e}")))?;
        let same = bytes_roundtrip(path, &tmp)?;
        fs::remove_file(&tmp).ok();
        push_check(
            &mut checks,
            &format!("{stem}.chain-roundtrip"),
            same,
            "read - write reproduces the file byte for byte".into(),
        );

        let loglik_path = path.with_extension("loglik.mat");
        let loglik = read_vector(&loglik_path)
            .map_err(read_file_err(&loglik_path, "cannot read log-posterior file"))?;
        let sidecar_path = path.with_extension("json");
        let sidecar_text = fs::read_to_string(&sidecar_path).map_err(|e| {
            CliError::Config(format!("cannot read sidecar {}: {e}", sidecar_path.display()))
        })?;
        let sidecar: ChainSidecar = serde_json::from_str(&sidecar_text).map_err(|e| {
            CliError::Config(format!("invalid sidecar {}: {e}", sidecar_path.display()))
        })?;

        let shape_ok = states.ncols() == sidecar.kept_steps
            && states.nrows() == sidecar.dim
            && loglik.len() == states.ncols();
        push_check(
            &mut checks,
            &format!("{stem}.sidecar-shape"),
            shape_ok,
            format!(
                "{} states of dimension {}, sidecar says {} of {}",
                states.ncols(),
                states.nrows(),
                sidecar.kept_steps,
                sidecar.dim
            ),
        );

        let (mean, min, max) = loglik_stats(&loglik);
        let stats_err = (mean - sidecar.log_post_mean)
            .abs()
            .max((min - sidecar.log_post_min).abs())
            .max((max - sidecar.log_post_max).abs());
        push_check(
            &mut checks,
            &format!("{stem}.sidecar-stats"),
            stats_err <= 1e-12,
            format!("recomputed log-posterior stats differ by {stats_err:.3e}"),
        );

        let recompute: Box<dyn Fn(&DVector<f64>) -> Result<f64, CliError> + '_> =
            if sidecar.space == "subspace" {
                match &lis {
                    Some(lis) => {
                        let problem = &exp.problem;
                        Box::new(move |x: &DVector<f64>| {
                            ReducedPosterior { problem, lis }
                                .eval(x)
                                .map_err(|e| CliError::Numerical(e.to_string()))
                        })
                    }
                    None => {
                        push_check(
                            &mut checks,
                            &format!("{stem}.log-posterior-recompute"),
                            false,
                            "subspace chain given without --lis".into(),
                        );
                        continue;
                    }
                }
            } else {
                let problem = &exp.problem;
                Box::new(move |x: &DVector<f64>| {
                    use crate::mcmc::LogDensity;
                    FullPosterior { problem }
                        .eval_grad(x)
                        .map(|(v, _)| v)
                        .map_err(|e| CliError::Numerical(e.to_string()))
                })
            };
        let kept = states.ncols();
        if kept > 0 {
            let stride = (kept / 16).max(1);
            let mut worst = 0.0_f64;
            let mut t = 0;
            while t < kept {
                let x = DVector::from(states.column(t));
                let fresh = recompute(&x)?;
                let stored = loglik[t];
                worst = worst.max((fresh - stored).abs() / (1.0 + stored.abs()));
                t += stride;
            }
            push_check(
                &mut checks,
                &format!("{stem}.log-posterior-recompute"),
                worst <= 1e-8,
                format!("max relative drift over sampled states = {worst:.3e}"),
            );
        }
    }

    let all_pass = checks.iter().all(|c| c.pass);
    let report = VerifyReport {
        all_pass,
        checks,
    };
    write_json(&out.join("verify.json"), &report)?;
    for check in &report.checks {
        println!(
            "{} {} - {}",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    if all_pass {
        println!("all {} checks passed", report.checks.len());
        Ok(0)
    } else {
        eprintln!("verification failed");
        Ok(3)
    }
}
