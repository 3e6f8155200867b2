//! Run configuration: a flat key-value document (TOML, or JSON by file
//! extension), strictly validated, with command-line overrides.

use std::path::{Path, PathBuf};

use rbo_core::driver::{AcceptanceMode, Method, TrParams};
use rbo_core::sf::SfParams;
use rbo_core::streams::SamplePolicy;
use rbo_core::subproblem::SolverOptions;
use rbo_core::RboError;
use serde::{Deserialize, Serialize};

pub const OUTPUT_DIR_ENV: &str = "RBO_OUTPUT_DIR";

/// Every key is optional in the file; `Config::effective` fills the rest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: Option<String>,
    pub method: Option<Method>,
    pub sigma: Option<f64>,
    pub n_mc: Option<usize>,
    pub seed: Option<u64>,
    pub x0: Option<Vec<f64>>,
    pub output_dir: Option<PathBuf>,

    pub rho_0: Option<f64>,
    pub rho_min: Option<f64>,
    pub eps_star: Option<f64>,
    pub omega_plus: Option<f64>,
    pub omega_minus: Option<f64>,
    pub delta: Option<f64>,
    pub m: Option<usize>,
    pub max_outer: Option<usize>,
    pub acceptance_mode: Option<AcceptanceMode>,
    pub recycle_center: Option<bool>,
    pub sample_policy: Option<SamplePolicy>,
    pub inner_point_tol: Option<f64>,
    pub kkt_tol: Option<f64>,
    pub n_starts: Option<usize>,
    pub max_sqp_iters: Option<usize>,

    pub sf_max_iters: Option<usize>,
    pub sf_kkt_tol: Option<f64>,
    pub sf_step_tol: Option<f64>,
    pub sf_f_tol: Option<f64>,
    pub sf_initial_penalty: Option<f64>,
    pub sf_sample_policy: Option<SamplePolicy>,

    pub methods: Option<Vec<Method>>,
    pub sigmas: Option<Vec<f64>>,
    pub n_values: Option<Vec<usize>>,
    pub repetitions: Option<usize>,
    pub seed_base: Option<u64>,
}

/// Fully materialized configuration. Serializing it and reading it back
/// yields the same value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: String,
    pub method: Method,
    pub sigma: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub output_dir: PathBuf,

    pub rho_0: f64,
    pub rho_min: f64,
    pub eps_star: f64,
    pub omega_plus: f64,
    pub omega_minus: f64,
    pub delta: f64,
    pub m: usize,
    pub max_outer: usize,
    pub acceptance_mode: AcceptanceMode,
    pub recycle_center: bool,
    pub sample_policy: SamplePolicy,
    pub inner_point_tol: f64,
    pub kkt_tol: f64,
    pub n_starts: usize,
    pub max_sqp_iters: usize,

    pub sf_max_iters: usize,
    pub sf_kkt_tol: f64,
    pub sf_step_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sf_f_tol: Option<f64>,
    pub sf_initial_penalty: f64,
    pub sf_sample_policy: SamplePolicy,

    pub methods: Vec<Method>,
    pub sigmas: Vec<f64>,
    pub n_values: Vec<usize>,
    pub repetitions: usize,
    pub seed_base: u64,
}

fn config_error(msg: impl Into<String>) -> RboError {
    RboError::Configuration(msg.into())
}

/// Parse a config document. JSON when `path` ends in `.json`, TOML otherwise.
pub fn parse_file(path: &Path) -> Result<ConfigFile, RboError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }
}

/// Apply `key=value` overrides. Values use TOML syntax, so strings may be
/// bare words and lists are written `[a, b]`.
pub fn apply_overrides(file: ConfigFile, sets: &[String]) -> Result<ConfigFile, RboError> {
    if sets.is_empty() {
        return Ok(file);
    }
    let mut table = toml::Table::try_from(&file).map_err(|e| config_error(e.to_string()))?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| config_error(format!("override '{set}' is not of the form key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.to_string(), value);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_error(e.message().to_string()))
}

impl Config {
    /// Fill unset keys with defaults. The output directory comes from the
    /// file, then the environment, then `rbo-output`.
    pub fn effective(file: ConfigFile) -> Result<Self, RboError> {
        let method = file.method.unwrap_or(Method::DftrR);
        let n_mc = file.n_mc.unwrap_or(10_000);
        let sigma = file.sigma.unwrap_or(0.1);
        let theta = 0.1;
        let tr = TrParams::for_method(method, theta, n_mc);
        let sf = SfParams::defaults(n_mc);
        let output_dir = file
            .output_dir
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("rbo-output"));
        let cfg = Config {
            problem: file.problem.unwrap_or_else(|| "cantilever".into()),
            method,
            sigma,
            n_mc,
            seed: file.seed.unwrap_or(0),
            x0: file.x0.unwrap_or_else(|| rbo_core::benchmark::CANTILEVER_X0.to_vec()),
            output_dir,
            rho_0: file.rho_0.unwrap_or(tr.rho_0),
            rho_min: file.rho_min.unwrap_or(tr.rho_min),
            eps_star: file.eps_star.unwrap_or(tr.eps_star),
            omega_plus: file.omega_plus.unwrap_or(tr.omega_plus),
            omega_minus: file.omega_minus.unwrap_or(tr.omega_minus),
            delta: file.delta.unwrap_or(tr.delta),
            m: file.m.unwrap_or(tr.m),
            max_outer: file.max_outer.unwrap_or(tr.max_outer),
            acceptance_mode: file.acceptance_mode.unwrap_or(tr.acceptance_mode),
            recycle_center: file.recycle_center.unwrap_or(tr.recycle_center),
            sample_policy: file.sample_policy.unwrap_or(tr.sample_policy),
            inner_point_tol: file.inner_point_tol.unwrap_or(tr.inner_point_tol),
            kkt_tol: file.kkt_tol.unwrap_or(tr.solver.kkt_tol),
            n_starts: file.n_starts.unwrap_or(tr.solver.n_starts),
            max_sqp_iters: file.max_sqp_iters.unwrap_or(tr.solver.max_sqp_iters),
            sf_max_iters: file.sf_max_iters.unwrap_or(sf.max_iters),
            sf_kkt_tol: file.sf_kkt_tol.unwrap_or(sf.kkt_tol),
            sf_step_tol: file.sf_step_tol.unwrap_or(sf.step_tol),
            sf_f_tol: file.sf_f_tol.or(sf.f_tol),
            sf_initial_penalty: file.sf_initial_penalty.unwrap_or(sf.initial_penalty),
            sf_sample_policy: file.sf_sample_policy.unwrap_or(sf.sample_policy),
            methods: file.methods.unwrap_or_else(|| vec![method]),
            sigmas: file.sigmas.unwrap_or_else(|| vec![sigma]),
            n_values: file.n_values.unwrap_or_else(|| vec![n_mc]),
            repetitions: file.repetitions.unwrap_or(20),
            seed_base: file.seed_base.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tr_params(&self, n_mc: usize) -> TrParams {
        self.tr_params_for(self.sample_policy, n_mc)
    }

    fn tr_params_for(&self, sample_policy: SamplePolicy, n_mc: usize) -> TrParams {
        TrParams {
            rho_0: self.rho_0,
            rho_min: self.rho_min,
            eps_star: self.eps_star,
            omega_plus: self.omega_plus,
            omega_minus: self.omega_minus,
            delta: self.delta,
            m: self.m,
            n_mc,
            max_outer: self.max_outer,
            acceptance_mode: self.acceptance_mode,
            recycle_center: self.recycle_center,
            sample_policy,
            inner_point_tol: self.inner_point_tol,
            solver: SolverOptions {
                kkt_tol: self.kkt_tol,
                n_starts: self.n_starts,
                max_sqp_iters: self.max_sqp_iters,
            },
        }
    }

    /// Trust-region parameters for one cell of an experiment matrix. The
    /// configured sample policy applies to `self.method`; other methods use
    /// their own default policy.
    pub fn tr_params_for_method(&self, method: Method, n_mc: usize) -> TrParams {
        let policy = if method == self.method {
            self.sample_policy
        } else {
            TrParams::for_method(method, 0.1, n_mc).sample_policy
        };
        self.tr_params_for(policy, n_mc)
    }

    pub fn sf_params(&self, n_mc: usize) -> SfParams {
        SfParams {
            n_mc,
            max_iters: self.sf_max_iters,
            kkt_tol: self.sf_kkt_tol,
            step_tol: self.sf_step_tol,
            f_tol: self.sf_f_tol,
            initial_penalty: self.sf_initial_penalty,
            sample_policy: self.sf_sample_policy,
        }
    }

    /// Check every value, naming the offending key.
    pub fn validate(&self) -> Result<(), RboError> {
        let key = |k: &str, msg: String| Err(config_error(format!("{k}: {msg}")));
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return key("sigma", format!("{} must be positive", self.sigma));
        }
        if self.n_mc == 0 {
            return key("n_mc", "must be at least 1".into());
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return key("sigmas", format!("{s} must be positive"));
        }
        if self.n_values.contains(&0) {
            return key("n_values", "every sample size must be at least 1".into());
        }
        if self.methods.is_empty() || self.sigmas.is_empty() || self.n_values.is_empty() {
            return key("methods/sigmas/n_values", "experiment lists must not be empty".into());
        }
        if self.repetitions == 0 {
            return key("repetitions", "must be at least 1".into());
        }
        if !(self.omega_minus > 0.0 && self.omega_minus < 1.0) {
            return key(
                "omega_minus",
                format!("{} violates the invariant 0 < omega_minus < 1", self.omega_minus),
            );
        }
        if !(self.omega_plus > 1.0 && self.omega_plus.is_finite()) {
            return key("omega_plus", format!("{} violates the invariant omega_plus > 1", self.omega_plus));
        }
        if !(self.rho_0.is_finite() && self.rho_0 > 0.0) {
            return key("rho_0", format!("{} must be positive", self.rho_0));
        }
        if !(self.rho_min > 0.0 && self.rho_min < self.rho_0) {
            return key(
                "rho_min",
                format!("{} violates the invariant 0 < rho_min < rho_0 = {}", self.rho_min, self.rho_0),
            );
        }
        if !(self.eps_star > 0.0) {
            return key("eps_star", format!("{} must be positive", self.eps_star));
        }
        if !(self.delta >= 0.0) {
            return key("delta", format!("{} must be nonnegative", self.delta));
        }
        if self.max_outer == 0 {
            return key("max_outer", "must be at least 1".into());
        }
        if !(self.inner_point_tol >= 0.0 && self.inner_point_tol < 1.0) {
            return key("inner_point_tol", format!("{} must lie in [0, 1)", self.inner_point_tol));
        }
        if !(self.kkt_tol > 0.0) {
            return key("kkt_tol", format!("{} must be positive", self.kkt_tol));
        }
        if self.n_starts == 0 {
            return key("n_starts", "must be at least 1".into());
        }
        if self.max_sqp_iters == 0 {
            return key("max_sqp_iters", "must be at least 1".into());
        }
        if self.sf_max_iters == 0 {
            return key("sf_max_iters", "must be at least 1".into());
        }
        if !(self.sf_kkt_tol > 0.0) {
            return key("sf_kkt_tol", format!("{} must be positive", self.sf_kkt_tol));
        }
        if !(self.sf_step_tol >= 0.0) {
            return key("sf_step_tol", format!("{} must be nonnegative", self.sf_step_tol));
        }
        if self.sf_f_tol.is_some_and(|t| !(t >= 0.0)) {
            return key("sf_f_tol", "must be nonnegative".into());
        }
        if !(self.sf_initial_penalty > 0.0) {
            return key("sf_initial_penalty", format!("{} must be positive", self.sf_initial_penalty));
        }
        // Problem-dependent checks (dimension of x0, m against the basis size).
        let problem = rbo_core::benchmark::problem_by_name(&self.problem, self.sigma)
            .map_err(|e| config_error(format!("problem: {e}")))?;
        problem
            .space
            .check(&self.x0)
            .map_err(|e| config_error(format!("x0: {e}")))?;
        self.tr_params(self.n_mc)
            .validate(problem.dim())
            .map_err(|e| config_error(format!("m: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
