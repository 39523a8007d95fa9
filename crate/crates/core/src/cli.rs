//! Configuration, orchestration and artifact export behind the command-line
//! interface: validate a model, run a limit schedule, verify the
//! variational inequality, and run the Monte Carlo saddle checks.
//!
//! All artifacts are plain CSV/JSON. Every solve emits a manifest carrying
//! the full configuration, a content hash of it, the fitted constants and
//! the error estimates, which is enough to reproduce the run bit for bit.

use crate::approx::PenalizationParams;
use crate::continuation::{
    extract_regions, maximality_probe, run_schedule, verify_variational_inequality, LimitSchedule,
    MonitorRect, Stage, VITolerances, ValueSolution,
};
use crate::expr::Expr;
use crate::game::{saddle_check, SaddleReport, SimConfig};
use crate::model::{
    validate_assumptions, AssumptionReport, GameModel, Regime, RegimeFlags, ScanGrid,
};
use crate::pde::{ScalarField, SolverOptions};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

/// Model reference: a built-in name or explicit expressions. The custom
/// variant is tried first so its extra fields are not silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Custom {
        name: String,
        mu: String,
        sigma: String,
        g: String,
        h: String,
        r: f64,
        alpha_bar: f64,
        horizon: f64,
        #[serde(default = "default_gamma")]
        holder_gamma: f64,
    },
    Builtin {
        name: String,
    },
}

fn default_gamma() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Named(String),
    Explicit {
        stages: Vec<StageSpec>,
        #[serde(default = "default_stage_tol")]
        stage_tol: f64,
        monitor: Option<MonitorSpec>,
    },
}

fn default_stage_tol() -> f64 {
    5e-2
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageSpec {
    pub n: u32,
    pub kappa: f64,
    pub eps: f64,
    pub delta: f64,
    pub m: f64,
    pub nt: usize,
    pub nx: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub t_lo: f64,
    pub t_hi: f64,
    pub x_lo: f64,
    pub x_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    #[serde(default = "default_starts")]
    pub start_points: Vec<(f64, f64)>,
}

fn default_starts() -> Vec<(f64, f64)> {
    vec![(0.0, 0.5), (0.0, 1.0), (0.0, 5.0)]
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ToleranceOverrides {
    pub stage_tol: Option<f64>,
    pub vi_min_pass_rate: Option<f64>,
    pub vi_tol_grad: Option<f64>,
}

impl ToleranceOverrides {
    fn validate(&self) -> Result<()> {
        if let Some(v) = self.stage_tol {
            if !(v > 0.0 && v < 10.0) {
                return Err(Error::Config(format!("stage_tol = {v} out of range")));
            }
        }
        if let Some(v) = self.vi_min_pass_rate {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "vi_min_pass_rate = {v} out of range"
                )));
            }
        }
        if let Some(v) = self.vi_tol_grad {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("vi_tol_grad = {v} out of range")));
            }
        }
        Ok(())
    }
}

/// Full run configuration, one structured document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    #[serde(default = "default_schedule_spec")]
    pub schedule: ScheduleSpec,
    pub sim: Option<SimSpec>,
    #[serde(default)]
    pub tolerances: ToleranceOverrides,
    pub out_dir: Option<PathBuf>,
}

fn default_schedule_spec() -> ScheduleSpec {
    ScheduleSpec::Named("default".into())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        if cfg.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported schema_version {}",
                cfg.schema_version
            )));
        }
        cfg.tolerances.validate()?;
        Ok(cfg)
    }

    pub fn build_model(&self) -> Result<GameModel> {
        match &self.model {
            ModelSpec::Builtin { name } => GameModel::builtin(name),
            ModelSpec::Custom {
                name,
                mu,
                sigma,
                g,
                h,
                r,
                alpha_bar,
                horizon,
                holder_gamma,
            } => {
                let mu = Expr::parse(mu)?;
                let sigma = Expr::parse(sigma)?;
                let g = Expr::parse(g)?;
                let h = Expr::parse(h)?;
                GameModel::builder(name)
                    .mu(move |x| mu.eval(0.0, x))
                    .sigma(move |x| sigma.eval(0.0, x))
                    .stopping_payoff(move |t, x| g.eval(t, x))
                    .running_payoff(move |t, x| h.eval(t, x))
                    .discount(*r)
                    .control_cost(*alpha_bar)
                    .horizon(*horizon)
                    .holder_gamma(*holder_gamma)
                    .finite_difference_derivatives()
                    .build()
            }
        }
    }

    pub fn build_schedule(&self, model: &GameModel) -> Result<LimitSchedule> {
        let mut schedule = match &self.schedule {
            ScheduleSpec::Named(name) if name == "default" => LimitSchedule::default_for(model),
            ScheduleSpec::Named(other) => {
                return Err(Error::Config(format!("unknown schedule `{other}`")))
            }
            ScheduleSpec::Explicit {
                stages,
                stage_tol,
                monitor,
            } => {
                let stages = stages
                    .iter()
                    .map(|s| Stage {
                        params: PenalizationParams {
                            n: s.n,
                            kappa: s.kappa,
                            eps: s.eps,
                            delta: s.delta,
                            m: s.m,
                        },
                        nt: s.nt,
                        nx: s.nx,
                    })
                    .collect();
                let monitor = match monitor {
                    Some(m) => MonitorRect {
                        t_lo: m.t_lo,
                        t_hi: m.t_hi,
                        x_lo: m.x_lo,
                        x_hi: m.x_hi,
                    },
                    None => LimitSchedule::default_for(model).monitor,
                };
                LimitSchedule {
                    stages,
                    stage_tol: *stage_tol,
                    monitor,
                }
            }
        };
        if let Some(tol) = self.tolerances.stage_tol {
            schedule.stage_tol = tol;
        }
        schedule.validate()?;
        Ok(schedule)
    }

    /// SHA-256 over the canonical JSON encoding of the configuration.
    pub fn content_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    fn out_dir(&self, cli_out: Option<&Path>) -> Result<PathBuf> {
        let dir = cli_out
            .map(|p| p.to_path_buf())
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| Error::Config("no output directory configured".into()))?;
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub content_hash: String,
    pub config: RunConfig,
    pub model_name: String,
    pub final_params: PenalizationParams,
    pub mesh_error: f64,
    pub error_estimate: f64,
    pub stage_diffs: Vec<f64>,
    pub monitor: MonitorSpec,
    pub stage_only: Option<usize>,
    pub constants: std::collections::BTreeMap<String, f64>,
}

/// Exit status used by the binary: 0 ok, 1 check failure, 2 usage/config
/// error.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Io(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

/// `validate`: run the assumption checks; nonzero exit on failures unless
/// they are explicitly allowed.
pub fn cmd_validate(config: &RunConfig, allow_violations: bool) -> Result<(i32, AssumptionReport)> {
    let model = config.build_model()?;
    let flags = RegimeFlags {
        regime: Regime::A2,
        sigma_lipschitz: true,
    };
    let report = validate_assumptions(&model, flags, ScanGrid::default());
    for check in &report.checks {
        let status = if check.passed { "ok  " } else { "FAIL" };
        println!("[{status}] {} ({})", check.name, check.detail);
    }
    let code = if report.all_passed() || allow_violations {
        0
    } else {
        1
    };
    Ok((code, report))
}

/// `solve`: run the schedule (or a single stage) and write the value,
/// regions, boundaries, diagnostics and manifest artifacts.
pub fn cmd_solve(
    config: &RunConfig,
    stage_only: Option<usize>,
    cli_out: Option<&Path>,
) -> Result<ValueSolution> {
    let model = config.build_model()?;
    let mut schedule = config.build_schedule(&model)?;
    if let Some(k) = stage_only {
        if k >= schedule.stages.len() {
            return Err(Error::Config(format!(
                "--stage-only {k} out of range (schedule has {} stages)",
                schedule.stages.len()
            )));
        }
        schedule.stages = vec![schedule.stages[k]];
    }
    let options = SolverOptions::default();
    let solution = run_schedule(&model, &schedule, &options)?;
    let dir = config.out_dir(cli_out)?;

    write_value_csv(&dir.join("value.csv"), &solution.v)?;
    write_regions_csv(&dir.join("regions.csv"), &solution)?;
    write_boundaries_csv(&dir.join("boundaries.csv"), &solution)?;

    // Diagnostics including the VI report on the monitor compact.
    let k3 = solution
        .diagnostics
        .ledger
        .get("K3_observed")
        .unwrap_or(1.0)
        .max(1.0)
        * 1.5;
    let mut tols =
        VITolerances::from_error_estimate(solution.diagnostics.error_estimate, &model, k3);
    if let Some(tg) = config.tolerances.vi_tol_grad {
        tols.tol_grad = tg * model.alpha_bar;
    }
    let vi = verify_variational_inequality(&solution.v, &model, &tols, &schedule.monitor);
    let diagnostics = serde_json::json!({
        "stage_diffs": solution.diagnostics.stage_diffs,
        "mesh_error": solution.diagnostics.mesh_error,
        "error_estimate": solution.diagnostics.error_estimate,
        "ledger": solution.diagnostics.ledger,
        "vi_report": vi,
        "vi_tolerances": tols,
    });
    fs::write(
        dir.join("diagnostics.json"),
        serde_json::to_string_pretty(&diagnostics)?,
    )?;

    let manifest = Manifest {
        schema_version: 1,
        content_hash: config.content_hash(),
        config: config.clone(),
        model_name: model.name.clone(),
        final_params: solution.final_params,
        mesh_error: solution.diagnostics.mesh_error,
        error_estimate: solution.diagnostics.error_estimate,
        stage_diffs: solution.diagnostics.stage_diffs.clone(),
        monitor: MonitorSpec {
            t_lo: schedule.monitor.t_lo,
            t_hi: schedule.monitor.t_hi,
            x_lo: schedule.monitor.x_lo,
            x_hi: schedule.monitor.x_hi,
        },
        stage_only,
        constants: solution
            .diagnostics
            .ledger
            .entries()
            .map(|(k, v)| (k.clone(), v.value))
            .collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(solution)
}

/// Reload a solved value from its artifacts.
pub fn load_solution(dir: &Path, model: &GameModel) -> Result<(ValueSolution, Manifest)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Config(format!(
            "no manifest at {}; run `solve` first",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let v = read_value_csv(&dir.join("value.csv"))?;
    let tol_obstacle = 10.0 * manifest.mesh_error;
    let (regions, boundaries) = extract_regions(&v, model, 0.02 * model.alpha_bar, tol_obstacle);
    let mut ledger = crate::model::ConstantsLedger::new();
    for (k, val) in &manifest.constants {
        ledger.record(k, *val, crate::model::Provenance::Fitted);
    }
    let solution = ValueSolution {
        v,
        regions,
        boundaries,
        diagnostics: crate::continuation::Diagnostics {
            stage_params: Vec::new(),
            stage_diffs: manifest.stage_diffs.clone(),
            mesh_error: manifest.mesh_error,
            error_estimate: manifest.error_estimate,
            ledger,
        },
        final_params: manifest.final_params,
    };
    Ok((solution, manifest))
}

/// `simulate`: run the saddle-point checks against solved artifacts and
/// write the report plus plot-ready payoff statistics.
pub fn cmd_simulate(
    config: &RunConfig,
    cli_out: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<SaddleReport> {
    let model = config.build_model()?;
    let dir = config.out_dir(cli_out)?;
    let (solution, _manifest) = load_solution(&dir, &model)?;
    let sim = config
        .sim
        .clone()
        .ok_or_else(|| Error::Config("config has no `sim` section".into()))?;
    let sim_config = SimConfig {
        n_paths: sim.n_paths,
        dt: sim.dt,
        seed: seed_override.unwrap_or(sim.seed),
    };
    let report = saddle_check(&model, &solution, &sim_config, &sim.start_points)?;

    fs::write(
        dir.join("saddle_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from(
        "start_t,start_x,value,disc_tol,equilibrium_mean,equilibrium_se,mean_terminal,mean_running,mean_cost,absorption_fraction,mean_stop_time,passed\n",
    );
    for p in &report.points {
        let s = &p.equilibrium_stats;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            p.t0,
            p.x0,
            p.value,
            p.disc_tol,
            s.mean,
            s.std_error,
            s.mean_terminal,
            s.mean_running,
            s.mean_cost,
            s.absorption_fraction,
            s.mean_stop_time,
            p.passed
        ));
    }
    fs::write(dir.join("payoff_stats.csv"), csv)?;

    // Per-path sample (capped at 100) of the equilibrium pair at the first
    // start point, for plotting.
    if let Some(&(t0, x0)) = sim.start_points.first() {
        let nu_star = crate::game::feedback_policy(&solution, &model);
        let tau_star = crate::game::optimal_stop_rule(
            &solution,
            &model,
            10.0 * solution.diagnostics.mesh_error,
        );
        let sample = crate::game::simulate_paths(
            &model,
            &crate::game::Dynamics::from_model(&model),
            &nu_star,
            &tau_star,
            &SimConfig {
                n_paths: sim_config.n_paths.min(100),
                ..sim_config
            },
            t0,
            x0,
            100,
        )?;
        write_paths_csv(&dir.join("paths.csv"), &sample, 100)?;
    }
    Ok(report)
}

/// `verify`: re-run the variational-inequality verification on solved
/// artifacts; returns the pass flag.
pub fn cmd_verify(config: &RunConfig, cli_out: Option<&Path>) -> Result<bool> {
    let model = config.build_model()?;
    let dir = config.out_dir(cli_out)?;
    let (solution, manifest) = load_solution(&dir, &model)?;
    let k3 = manifest
        .constants
        .get("K3_observed")
        .copied()
        .unwrap_or(1.0)
        .max(1.0)
        * 1.5;
    let mut tols = VITolerances::from_error_estimate(manifest.error_estimate, &model, k3);
    if let Some(tg) = config.tolerances.vi_tol_grad {
        tols.tol_grad = tg * model.alpha_bar;
    }
    let region = MonitorRect {
        t_lo: manifest.monitor.t_lo,
        t_hi: manifest.monitor.t_hi,
        x_lo: manifest.monitor.x_lo,
        x_hi: manifest.monitor.x_hi,
    };
    let report = verify_variational_inequality(&solution.v, &model, &tols, &region);
    let min_rate = config.tolerances.vi_min_pass_rate.unwrap_or(0.99);
    for line in &report.lines {
        let status = if line.pass_rate() >= min_rate {
            "ok  "
        } else {
            "FAIL"
        };
        println!(
            "[{status}] {} pass rate {:.4} ({} nodes, worst {:.3e})",
            line.name,
            line.pass_rate(),
            line.applicable,
            line.worst
        );
    }
    fs::write(
        dir.join("vi_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report.all_passed(min_rate))
}

/// Re-run the maximality probe against solved artifacts (used by the
/// examples; the acceptance suite calls the library directly).
pub fn probe_maximality(config: &RunConfig, solution: &ValueSolution) -> Result<f64> {
    let model = config.build_model()?;
    let schedule = config.build_schedule(&model)?;
    maximality_probe(&model, solution, &schedule, &SolverOptions::default())
}

pub fn write_value_csv(path: &Path, v: &ScalarField) -> Result<()> {
    let mut out = String::from("t,x,u,du_dx\n");
    for i in 0..v.ts.len() {
        for j in 0..v.xs.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                v.ts[i],
                v.xs[j],
                v.at(i, j),
                v.ddx(i, j)
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_value_csv(path: &Path) -> Result<ScalarField> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut ts: Vec<f64> = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let mut triples: Vec<(f64, f64, f64)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let t: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad value.csv line {ln}")))?;
        let x: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad value.csv line {ln}")))?;
        let u: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad value.csv line {ln}")))?;
        if ts.last() != Some(&t) {
            ts.push(t);
        }
        if ts.len() == 1 {
            xs.push(x);
        }
        triples.push((t, x, u));
    }
    if ts.is_empty() || xs.is_empty() || triples.len() != ts.len() * xs.len() {
        return Err(Error::Config("value.csv has an inconsistent grid".into()));
    }
    let mut field = ScalarField::new(ts, xs);
    for (k, &(_, _, u)) in triples.iter().enumerate() {
        field.values[k] = u;
    }
    Ok(field)
}

fn write_regions_csv(path: &Path, sol: &ValueSolution) -> Result<()> {
    let mut out = String::from("t,x,label\n");
    for i in 0..sol.v.ts.len() {
        for j in 0..sol.v.xs.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                sol.v.ts[i],
                sol.v.xs[j],
                sol.label_at(i, j).as_str()
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_boundaries_csv(path: &Path, sol: &ValueSolution) -> Result<()> {
    let mut out = String::from("t,x_boundary,kind\n");
    for b in &sol.boundaries {
        out.push_str(&format!("{},{},{}\n", b.t, b.x, b.kind));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Export up to `cap` full paths as CSV (path, step, s, x).
pub fn write_paths_csv(path: &Path, ensemble: &crate::game::Ensemble, cap: usize) -> Result<()> {
    let mut out = String::from("path,step,s,x\n");
    for (p, rec) in ensemble.retained.iter().take(cap.min(100)).enumerate() {
        for (k, (&s, &x)) in rec.control.times.iter().zip(&rec.xs).enumerate() {
            out.push_str(&format!("{p},{k},{s},{x}\n"));
        }
    }
    fs::write(path, out)?;
    Ok(())
}
