//! Run configuration: one TOML file describes the problem, the subspace
//! construction, the sampler, seeds, and the output directory. Unknown keys
//! are rejected, every omitted value falls back to a documented default,
//! and each run writes the fully resolved configuration back into its
//! output directory so results are reproducible from the directory alone.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::io::derive_seed;
use crate::model::ForwardProblem;
use crate::models::elliptic;
use crate::models::gomos::GomosSpec;
use crate::models::linear::LinearProblem;
use crate::models::SynthData;

use super::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub lis: LisSection,
    pub mcmc: McmcSection,
    pub output: OutputSection,
    pub seeds: SeedSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Elliptic,
    Gomos,
    LinearTest,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Elliptic => "elliptic",
            ProblemKind::Gomos => "gomos",
            ProblemKind::LinearTest => "linear-test",
        }
    }
}

/// Which benchmark to build, plus the parameters of each; only the table
/// matching `kind` is consulted, but all three are echoed with their
/// defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub elliptic: EllipticSection,
    pub gomos: GomosSpec,
    pub linear: LinearSection,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            kind: ProblemKind::LinearTest,
            elliptic: EllipticSection::default(),
            gomos: GomosSpec::default(),
            linear: LinearSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EllipticSection {
    pub nx: usize,
    pub ny: usize,
    pub snr: f64,
}

impl Default for EllipticSection {
    fn default() -> Self {
        EllipticSection {
            nx: 24,
            ny: 8,
            snr: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSection {
    pub dim: usize,
    pub obs: usize,
}

impl Default for LinearSection {
    fn default() -> Self {
        LinearSection { dim: 20, obs: 6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LisSection {
    pub tau_local: f64,
    pub tau_global: f64,
    /// Subchain length between subspace rebuilds.
    pub subchain_len: usize,
    pub max_iters: usize,
    pub dist_tol: f64,
    /// Hessian evaluation budget; 0 means unlimited.
    pub max_hessians: usize,
    pub oversample: usize,
    /// Cap on the local eigenpacket rank; 0 means no cap.
    pub local_max_rank: usize,
    pub subchain_step: f64,
}

impl Default for LisSection {
    fn default() -> Self {
        LisSection {
            tau_local: 0.1,
            tau_global: 0.1,
            subchain_len: 200,
            max_iters: 200,
            dist_tol: 1e-3,
            max_hessians: 0,
            oversample: 10,
            local_max_rank: 0,
            subchain_step: 0.8,
        }
    }
}

impl LisSection {
    pub fn to_adapt_config(&self) -> crate::lis::AdaptConfig {
        let mut cfg = crate::lis::AdaptConfig::default();
        cfg.tau_local = self.tau_local;
        cfg.tau_global = self.tau_global;
        cfg.subchain_len = self.subchain_len;
        cfg.max_iters = self.max_iters;
        cfg.dist_tol = self.dist_tol;
        cfg.max_hessians = if self.max_hessians == 0 {
            usize::MAX
        } else {
            self.max_hessians
        };
        cfg.oversample = self.oversample;
        cfg.local_max_rank = self.local_max_rank;
        cfg.subchain_step = self.subchain_step;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecondKind {
    /// Subspace chains: diagonal `1/(1+γ_i)`. Full-space chains: the dense
    /// Gauss-Newton log-posterior Hessian at the MAP point.
    Auto,
    Identity,
    Empirical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub steps: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub step_size: f64,
    pub adapt_steps: bool,
    pub target_accept: f64,
    pub precond: PrecondKind,
    pub empirical_warmup: usize,
    pub empirical_refresh: usize,
}

impl Default for McmcSection {
    fn default() -> Self {
        McmcSection {
            steps: 10_000,
            burn_in: 1_000,
            chains: 1,
            step_size: 0.5,
            adapt_steps: true,
            target_accept: 0.574,
            precond: PrecondKind::Auto,
            empirical_warmup: 200,
            empirical_refresh: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    /// When false, all wall-clock fields in outputs are written as zero so
    /// reruns are byte-identical.
    pub record_timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/out".into(),
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub master: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        SeedSection { master: 1234 }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// A fully built benchmark problem plus the bookkeeping the CLI needs:
/// the grid shape used to lay out field outputs, and for the linear
/// problem its forward matrix, which the `verify` subcommand checks
/// against.
pub struct Experiment {
    pub problem: ForwardProblem,
    pub synth: Option<SynthData>,
    pub kind: ProblemKind,
    /// Rows and columns of field-shaped outputs.
    pub shape: (usize, usize),
    pub linear_forward: Option<DMatrix<f64>>,
}

pub fn build_experiment(cfg: &RunConfig) -> Result<Experiment, CliError> {
    let seed = derive_seed(cfg.seeds.master, "problem", 0);
    match cfg.problem.kind {
        ProblemKind::Elliptic => {
            let e = &cfg.problem.elliptic;
            let (problem, synth) = elliptic::build_problem(e.nx, e.ny, e.snr, seed)?;
            Ok(Experiment {
                problem,
                synth: Some(synth),
                kind: ProblemKind::Elliptic,
                shape: (e.nx, e.ny),
                linear_forward: None,
            })
        }
        ProblemKind::Gomos => {
            let spec = &cfg.problem.gomos;
            let (problem, synth) = spec.build_problem(seed)?;
            Ok(Experiment {
                problem,
                synth: Some(synth),
                kind: ProblemKind::Gomos,
                shape: (spec.n_gas, spec.n_alts),
                linear_forward: None,
            })
        }
        ProblemKind::LinearTest => {
            let l = &cfg.problem.linear;
            let lp = LinearProblem::seeded(l.dim, l.obs, seed);
            let forward = lp.model.matrix().clone();
            Ok(Experiment {
                problem: lp.into_problem(),
                synth: None,
                kind: ProblemKind::LinearTest,
                shape: (1, l.dim),
                linear_forward: Some(forward),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_an_empty_config() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.problem.kind, ProblemKind::LinearTest);
        assert_eq!(cfg.lis.subchain_len, 200);
        assert_eq!(cfg.mcmc.target_accept, 0.574);
        assert!(!cfg.output.record_timing);
        assert_eq!(cfg.seeds.master, 1234);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(toml::from_str::<RunConfig>("[problen]\nkind = 'elliptic'").is_err());
        assert!(toml::from_str::<RunConfig>("[lis]\ntau = 0.1").is_err());
        assert!(toml::from_str::<RunConfig>("[problem.elliptic]\nnz = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[problem.gomos]\nngas = 4").is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.problem.kind = ProblemKind::Elliptic;
        cfg.lis.dist_tol = f64::INFINITY;
        cfg.seeds.master = 99;
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.problem.kind, ProblemKind::Elliptic);
        assert_eq!(back.lis.dist_tol, f64::INFINITY);
        assert_eq!(back.seeds.master, 99);
        let text2 = toml::to_string_pretty(&back).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn problem_kinds_build_with_matching_shapes() {
        let mut cfg = RunConfig::default();
        cfg.problem.linear = LinearSection { dim: 12, obs: 4 };
        let exp = build_experiment(&cfg).unwrap();
        assert_eq!(exp.shape, (1, 12));
        assert_eq!(exp.problem.dim(), 12);
        assert!(exp.linear_forward.is_some());

        cfg.problem.kind = ProblemKind::Elliptic;
        cfg.problem.elliptic = EllipticSection {
            nx: 6,
            ny: 4,
            snr: 10.0,
        };
        let exp = build_experiment(&cfg).unwrap();
        assert_eq!(exp.shape, (6, 4));
        assert_eq!(exp.problem.dim(), 24);

        cfg.problem.kind = ProblemKind::Gomos;
        let exp = build_experiment(&cfg).unwrap();
        assert_eq!(exp.shape, (4, 12));
        assert_eq!(exp.problem.dim(), 48);
    }
}
