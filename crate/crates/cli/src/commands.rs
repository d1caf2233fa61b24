//! The `analyze`, `synthesize`, `simulate` and `report` pipelines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use orbstab::dynsys::verify_orbit;
use orbstab::floquet::{
    alignment, andronov_vitt_verdict, estimate_growth_constants, exponent_sum_check, max_drift_norm, monodromy,
    spectrum_with_tolerance, unit_multiplier, GrowthEstimate, TraceSumReport, ZERO_TOLERANCE,
};
use orbstab::projection::Tube;
use orbstab::riccati::{gain_from_riccati, prde_residual, solve_prde, DEFAULT_MAX_SWEEPS};
use orbstab::sim::{orbital_convergence_metrics, simulate_closed_loop, SimOptions, SimulationTrace};
use orbstab::systems::{frame_identity_residuals, SystemRegistry, SystemSpec};
use orbstab::transverse::{comparison_system, tvl_orthogonal};
use orbstab::{
    periodic_grid, Closure, FloquetSpectrum, GainSchedule, PeriodicLinearSystem, RiccatiWeights, Verdict,
};

use crate::config::{GainSource, Job, JobConfig, LoadedConfig};
use crate::error::CliError;
use crate::output::{complex_pairs, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Synthesize,
    Simulate,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Synthesize => "synthesize",
            Command::Simulate => "simulate",
            Command::Report => "report",
        }
    }
}

pub const ANALYZE_FILE: &str = "analyze.json";
pub const SYNTHESIZE_FILE: &str = "synthesize.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const GAIN_FILE: &str = "gain.csv";
pub const TRACE_FILE: &str = "trace.csv";

struct Context<'a> {
    loaded: &'a LoadedConfig,
    command: Command,
}

impl Context<'_> {
    fn config(&self) -> &JobConfig {
        &self.loaded.config
    }

    fn header(&self, job: &Job, spec: &SystemSpec) -> Value {
        json!({
            "command": self.command.name(),
            "version": orbstab::VERSION,
            "config_hash": self.loaded.hash,
            "system": spec.name,
            "params": spec.params,
            "job": job.name,
            "grid_size": self.config().grid_size,
            "seed": self.config().seed,
        })
    }

    fn zero_tolerance(&self) -> f64 {
        self.config().tolerances.zero_exponent.unwrap_or(ZERO_TOLERANCE)
    }
}

/// Runs `command` for every job of the configuration and returns the
/// directories that received output.
pub fn run(command: Command, config_path: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let loaded = LoadedConfig::load(config_path)?;
    let root = match (out, &loaded.config.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(d)) => loaded.resolve(d),
        (None, None) => return Err(CliError::config("no output directory: pass --out or set output_dir")),
    };
    let jobs = loaded.config.jobs();
    let dirs: Vec<PathBuf> = jobs
        .iter()
        .map(|j| if loaded.config.is_sweep() { root.join(&j.name) } else { root.clone() })
        .collect();
    let ctx = Context {
        loaded: &loaded,
        command,
    };
    if command == Command::Report {
        report(&ctx, &root, &jobs, &dirs)?;
        return Ok(vec![root]);
    }
    for d in &dirs {
        std::fs::create_dir_all(d)?;
    }
    let results: Vec<Result<(), CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .zip(&dirs)
            .map(|(job, dir)| {
                let ctx = &ctx;
                scope.spawn(move || run_job(ctx, job, dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::config("worker thread panicked"))))
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(dirs)
}

fn run_job(ctx: &Context<'_>, job: &Job, dir: &Path) -> Result<(), CliError> {
    let spec = SystemRegistry::builtin()
        .build(&ctx.config().system, &job.params)
        .map_err(|e| CliError::numeric(&job.name, e))?;
    let num = |e| CliError::numeric(&job.name, e);
    match ctx.command {
        Command::Analyze => analyze(ctx, job, &spec, dir).map_err(num),
        Command::Synthesize => synthesize(ctx, job, &spec, dir),
        Command::Simulate => simulate(ctx, job, &spec, dir),
        Command::Report => unreachable!("report is not a per-job command"),
    }
}

#[derive(Debug, Serialize)]
struct SpectrumReport {
    closure: Option<Closure>,
    multipliers: Vec<[f64; 2]>,
    exponents: Vec<[f64; 2]>,
    real_parts: Vec<f64>,
    zero_exponent_index: Option<usize>,
    period_time: f64,
    verdict: Verdict,
}

impl SpectrumReport {
    fn new(spec: &FloquetSpectrum, closure: Option<Closure>) -> Self {
        Self {
            closure,
            multipliers: complex_pairs(&spec.multipliers),
            exponents: complex_pairs(&spec.exponents),
            real_parts: spec.real_parts(),
            zero_exponent_index: spec.zero_exponent_index,
            period_time: spec.period_time,
            verdict: andronov_vitt_verdict(spec),
        }
    }
}

fn spectrum_of(
    ctx: &Context<'_>,
    plin: &PeriodicLinearSystem,
    gain: Option<&GainSchedule>,
    closure: Closure,
) -> orbstab::Result<FloquetSpectrum> {
    let m = monodromy(plin, gain, closure)?;
    Ok(spectrum_with_tolerance(&m, plin.time_period(), ctx.zero_tolerance()))
}

fn write_plin(path: &Path, plin: &PeriodicLinearSystem) -> Result<(), CliError> {
    write_json(path, &plin.to_document())
}

fn analyze(ctx: &Context<'_>, job: &Job, spec: &SystemSpec, dir: &Path) -> orbstab::Result<()> {
    let grid = ctx.config().grid_size;
    let residual = verify_orbit(&spec.system, &spec.orbit, grid)?;
    let frame = frame_identity_residuals(&spec.orbit, grid)?;
    let tube = Tube::of(&spec.orbit)?;
    let tvl = tvl_orthogonal(&spec.system, &spec.orbit, grid)?;
    let cmp = comparison_system(&spec.system, &spec.orbit, grid)?;
    let io = |e: CliError| orbstab::Error::Io(std::io::Error::other(e.to_string()));
    write_plin(&dir.join("tvl.json"), &tvl).map_err(io)?;
    write_plin(&dir.join("comparison.json"), &cmp).map_err(io)?;

    let tvl_spec = spectrum_of(ctx, &tvl, None, Closure::Direct)?;
    let cmp_m = monodromy(&cmp, None, Closure::Direct)?;
    let cmp_spec = spectrum_with_tolerance(&cmp_m, cmp.time_period(), ctx.zero_tolerance());
    let unit = unit_multiplier(&cmp_m);
    let tangent = spec.orbit.tangent(spec.orbit.s0())?;

    let mut doc = ctx.header(job, spec);
    doc["orbit_residual"] = json!(residual);
    doc["frame_invariants"] = json!({
        "gamma_omega": frame[0],
        "omega_tangent": frame[1],
        "omega_idempotence": frame[2],
        "gamma_tangent_minus_one": frame[3],
    });
    doc["tube"] = json!(tube);
    doc["period_time"] = json!(tvl.time_period());
    doc["samples"] = json!({"tvl": "tvl.json", "comparison": "comparison.json"});
    doc["undriven"] = json!({
        "tvl": SpectrumReport::new(&tvl_spec, None),
        "comparison": SpectrumReport::new(&cmp_spec, None),
        "comparison_unit_multiplier": {
            "multiplier": [unit.multiplier.re, unit.multiplier.im],
            "distance": unit.distance,
            "tangent_alignment": alignment(&unit.eigenvector, &tangent),
        },
    });
    write_json(&dir.join(ANALYZE_FILE), &doc).map_err(io)
}

fn weights(config: &JobConfig, k: usize, m: usize) -> Result<RiccatiWeights, CliError> {
    let w = config.weights.clone().unwrap_or(crate::config::WeightSpec { q: None, rw: None });
    let q = w.q.unwrap_or_else(|| vec![1.0; k]);
    let rw = w.rw.unwrap_or_else(|| vec![1.0; m]);
    if q.len() != k || rw.len() != m {
        return Err(CliError::config(format!(
            "weights need q of length {k} and rw of length {m} (got {} and {})",
            q.len(),
            rw.len()
        )));
    }
    RiccatiWeights::diagonal(&q, &rw).map_err(|e| CliError::config(e.to_string()))
}

struct Synthesis {
    cmp: PeriodicLinearSystem,
    gain: GainSchedule,
    doc: Value,
}

fn riccati_design(ctx: &Context<'_>, job: &Job, spec: &SystemSpec) -> Result<Synthesis, CliError> {
    let num = |e| CliError::numeric(&job.name, e);
    let grid = ctx.config().grid_size;
    let cmp = comparison_system(&spec.system, &spec.orbit, grid).map_err(num)?;
    let w = weights(ctx.config(), cmp.dim(), cmp.input_dim())?;
    let sweeps = ctx.config().tolerances.max_sweeps.unwrap_or(DEFAULT_MAX_SWEEPS);
    let sol = solve_prde(&cmp, &w, sweeps).map_err(num)?;
    let gain = gain_from_riccati(&sol, &cmp, &w).map_err(num)?;
    let projected = prde_residual(&sol.r_samples, &cmp, &w, true).map_err(num)?;
    let doc = json!({
        "converged": sol.converged,
        "sweeps": sol.sweeps,
        "periodicity_gap": sol.periodicity_gap,
        "residual_max": sol.residual_max,
        "projected_residual_max": projected,
        "q_diagonal": w.q.diagonal().iter().copied().collect::<Vec<f64>>(),
        "rw_diagonal": w.rw.diagonal().iter().copied().collect::<Vec<f64>>(),
    });
    Ok(Synthesis { cmp, gain, doc })
}

#[derive(Serialize)]
struct GainAssessment {
    tvl: SpectrumReport,
    comparison: SpectrumReport,
    trace_sums: TraceSumReport,
    growth_heuristic: GrowthEstimate,
    andronov_vitt: Verdict,
    comparison_verdict: Verdict,
}

fn assess(
    ctx: &Context<'_>,
    spec: &SystemSpec,
    tvl: &PeriodicLinearSystem,
    cmp: &PeriodicLinearSystem,
    gain: &GainSchedule,
) -> orbstab::Result<GainAssessment> {
    let tvl_spec = spectrum_of(ctx, tvl, Some(gain), Closure::Direct)?;
    let cmp_spec = spectrum_of(ctx, cmp, Some(gain), Closure::Direct)?;
    let lemma = spectrum_of(ctx, cmp, Some(gain), Closure::GainTimesOmega)?;
    let horizon = ctx.config().tolerances.growth_horizon_periods.unwrap_or(2);
    Ok(GainAssessment {
        trace_sums: exponent_sum_check(&spec.system, &spec.orbit, |s| gain.eval(s), ctx.config().grid_size)?,
        growth_heuristic: estimate_growth_constants(cmp, Some(gain), Closure::GainTimesOmega, max_drift_norm(cmp), horizon)?,
        andronov_vitt: andronov_vitt_verdict(&tvl_spec),
        comparison_verdict: andronov_vitt_verdict(&lemma),
        tvl: SpectrumReport::new(&tvl_spec, Some(Closure::Direct)),
        comparison: SpectrumReport::new(&cmp_spec, Some(Closure::Direct)),
    })
}

fn reference_schedule(spec: &SystemSpec, grid: usize) -> Option<orbstab::Result<GainSchedule>> {
    let k = spec.reference_gain.clone()?;
    let s_grid = periodic_grid(spec.orbit.s0(), spec.orbit.period(), grid);
    Some(GainSchedule::from_fn(s_grid, move |s| k(s)))
}

fn synthesize(ctx: &Context<'_>, job: &Job, spec: &SystemSpec, dir: &Path) -> Result<(), CliError> {
    let num = |e| CliError::numeric(&job.name, e);
    let design = riccati_design(ctx, job, spec)?;
    design
        .gain
        .write_csv(BufWriter::new(File::create(dir.join(GAIN_FILE))?))
        .map_err(num)?;
    let tvl = tvl_orthogonal(&spec.system, &spec.orbit, ctx.config().grid_size).map_err(num)?;
    let mut gains = BTreeMap::new();
    gains.insert("riccati", assess(ctx, spec, &tvl, &design.cmp, &design.gain).map_err(num)?);
    if let Some(reference) = reference_schedule(spec, ctx.config().grid_size) {
        let reference = reference.map_err(num)?;
        gains.insert("reference", assess(ctx, spec, &tvl, &design.cmp, &reference).map_err(num)?);
    }
    let mut doc = ctx.header(job, spec);
    doc["riccati"] = design.doc;
    doc["gain_csv"] = json!(GAIN_FILE);
    doc["gains"] = serde_json::to_value(&gains).map_err(|e| CliError::config(e.to_string()))?;
    write_json(&dir.join(SYNTHESIZE_FILE), &doc)
}

fn simulate(ctx: &Context<'_>, job: &Job, spec: &SystemSpec, dir: &Path) -> Result<(), CliError> {
    let num = |e| CliError::numeric(&job.name, e);
    let sim = ctx
        .config()
        .simulation
        .as_ref()
        .ok_or_else(|| CliError::config("simulate needs a [simulation] block"))?;
    let n = spec.system.state_dim();
    if sim.x0.len() != n {
        return Err(CliError::config(format!("simulation.x0 needs {n} entries (got {})", sim.x0.len())));
    }
    let (gain, source) = match (&sim.gain_csv, sim.gain) {
        (Some(path), _) => {
            let path = ctx.loaded.resolve(path);
            let file = File::open(&path)
                .map_err(|e| CliError::config(format!("cannot open gain table {}: {e}", path.display())))?;
            let g = GainSchedule::read_csv(file).map_err(|e| CliError::config(e.to_string()))?;
            if g.shape() != (spec.system.input_dim(), n) {
                return Err(CliError::config("gain table has the wrong shape for this system"));
            }
            (g, format!("csv:{}", path.display()))
        }
        (None, GainSource::Reference) => {
            let g = reference_schedule(spec, ctx.config().grid_size)
                .ok_or_else(|| CliError::config(format!("system {:?} has no reference gain", spec.name)))?
                .map_err(num)?;
            (g, "reference".to_string())
        }
        (None, GainSource::Riccati) => (riccati_design(ctx, job, spec)?.gain, "riccati".to_string()),
    };
    let defaults = SimOptions::default();
    let t = &ctx.config().tolerances;
    let opts = SimOptions {
        rtol: t.rtol.unwrap_or(defaults.rtol),
        atol: t.atol.unwrap_or(defaults.atol),
        dt_max: sim.dt_max.unwrap_or(defaults.dt_max),
        samples_per_period: t.samples_per_period.unwrap_or(defaults.samples_per_period),
    };
    let x0 = nalgebra::DVector::from_vec(sim.x0.clone());
    let outcome = simulate_closed_loop(&spec.system, &spec.orbit, &gain, &x0, sim.horizon_periods, &opts);
    let (trace, failure) = match outcome {
        Ok(trace) => (trace, None),
        Err(orbstab::Error::LeftTube { time, trace }) => {
            let trace = *trace;
            let err = orbstab::Error::LeftTube {
                time,
                trace: Box::new(trace.clone()),
            };
            (trace, Some(err))
        }
        Err(e) => return Err(num(e)),
    };
    trace
        .write_csv(BufWriter::new(File::create(dir.join(TRACE_FILE))?))
        .map_err(num)?;
    let mut doc = ctx.header(job, spec);
    doc["gain_source"] = json!(source);
    doc["x0"] = json!(sim.x0);
    doc["horizon_periods"] = json!(sim.horizon_periods);
    doc["trace_csv"] = json!(TRACE_FILE);
    doc["metrics"] = metrics_json(&trace);
    doc["events"] = json!(trace.events);
    doc["left_tube"] = json!(failure.is_some());
    write_json(&dir.join(METRICS_FILE), &doc)?;
    match failure {
        Some(e) => Err(num(e)),
        None => Ok(()),
    }
}

fn metrics_json(trace: &SimulationTrace) -> Value {
    let final_distance = trace.z_norms.last().copied();
    match orbital_convergence_metrics(trace) {
        Ok(m) => json!(m),
        Err(e) => json!({
            "final_distance": final_distance,
            "unavailable": e.to_string(),
        }),
    }
}

fn read_artifact(path: &Path) -> Result<Option<Value>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let v = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("artifact {} is not valid JSON: {e}", path.display())))?;
    Ok(Some(v))
}

fn real_parts(v: &Value) -> Value {
    v.get("real_parts").cloned().unwrap_or(Value::Null)
}

fn report(ctx: &Context<'_>, root: &Path, jobs: &[Job], dirs: &[PathBuf]) -> Result<(), CliError> {
    let mut entries = Vec::new();
    let mut found = 0;
    let mut lines = vec![
        "| job | orbit residual | TVL exponents (Riccati) | verdict | growth condition (reference) | final distance |".to_string(),
        "|---|---|---|---|---|---|".to_string(),
    ];
    for (job, dir) in jobs.iter().zip(dirs) {
        let analyze = read_artifact(&dir.join(ANALYZE_FILE))?;
        let synth = read_artifact(&dir.join(SYNTHESIZE_FILE))?;
        let metrics = read_artifact(&dir.join(METRICS_FILE))?;
        found += [&analyze, &synth, &metrics].iter().filter(|a| a.is_some()).count();
        let stale = [&analyze, &synth, &metrics]
            .iter()
            .filter_map(|a| a.as_ref())
            .any(|a| a.get("config_hash").and_then(Value::as_str) != Some(ctx.loaded.hash.as_str()));
        let residual = analyze.as_ref().map(|a| a["orbit_residual"]["max_residual"].clone());
        let riccati = synth.as_ref().map(|s| s["gains"]["riccati"].clone());
        let reference = synth.as_ref().and_then(|s| s["gains"].get("reference").cloned());
        let sim = metrics.as_ref().map(|m| m["metrics"].clone());
        let entry = json!({
            "job": job.name,
            "params": job.params,
            "stale": stale,
            "orbit_residual": residual,
            "undriven_comparison_unit_distance": analyze.as_ref().map(|a| a["undriven"]["comparison_unit_multiplier"]["distance"].clone()),
            "riccati": riccati.as_ref().map(|r| json!({
                "tvl_real_parts": real_parts(&r["tvl"]),
                "comparison_exponents": r["comparison"]["exponents"],
                "andronov_vitt": r["andronov_vitt"],
                "comparison_verdict": r["comparison_verdict"],
                "growth_condition_holds": r["growth_heuristic"]["condition_holds"],
            })),
            "reference": reference.as_ref().map(|r| json!({
                "tvl_real_parts": real_parts(&r["tvl"]),
                "andronov_vitt": r["andronov_vitt"],
                "comparison_verdict": r["comparison_verdict"],
                "growth_condition_holds": r["growth_heuristic"]["condition_holds"],
            })),
            "simulation": sim,
        });
        let cell = |v: Option<&Value>| v.filter(|x| !x.is_null()).map_or("-".to_string(), compact);
        lines.push(format!(
            "| {} | {} | {} | {} | {} | {} |",
            if job.name.is_empty() { "-" } else { &job.name },
            cell(entry["orbit_residual"].as_f64().map(|x| json!(x)).as_ref()),
            cell(entry["riccati"].get("tvl_real_parts")),
            cell(entry["riccati"].get("andronov_vitt")),
            cell(entry["reference"].get("growth_condition_holds")),
            cell(entry["simulation"].get("final_distance")),
        ));
        entries.push(entry);
    }
    if found == 0 {
        return Err(CliError::config(format!(
            "no artifacts found under {}; run analyze, synthesize or simulate first",
            root.display()
        )));
    }
    let doc = json!({
        "command": "report",
        "version": orbstab::VERSION,
        "config_hash": ctx.loaded.hash,
        "system": ctx.config().system,
        "jobs": entries,
    });
    std::fs::create_dir_all(root)?;
    write_json(&root.join("report.json"), &doc)?;
    let md = format!(
        "# {} report\n\nconfig hash `{}`, orbstab {}\n\n{}\n",
        ctx.config().system,
        ctx.loaded.hash,
        orbstab::VERSION,
        lines.join("\n")
    );
    std::fs::write(root.join("report.md"), md)?;
    Ok(())
}

fn compact(v: &Value) -> String {
    match v {
        Value::Number(n) => n.as_f64().map_or_else(|| n.to_string(), |x| format!("{x:.4e}")),
        Value::Array(items) => format!("[{}]", items.iter().map(compact).collect::<Vec<_>>().join(", ")),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
