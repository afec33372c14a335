//! Command-line front end: argument parsing, orchestration and report files.
//!
//! Every command writes its outputs plus a `manifest.json` recording the
//! resolved invocation, input and output digests and stage timings. Running
//! `replay` on a manifest re-executes the invocation.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{ingest_csv, read_labels, Backend, ColumnSpec, Dataset, Dependence, Kind, Role, RunConfig};
use crate::diagnostics::diagnose;
use crate::error::{Error, Result};
use crate::estimands::{run_estimands, summarize, EffectSummary, EstimandPlan, EstimandSink, Segment, SegmentDefinition, UnitDraw, UnitSummaries};
use crate::interpret::{marginal_dependence, surrogate_deep_select, surrogate_shallow};
use crate::robustness::{
    default_zeta_grid, estimate_nu, flag_causal_support, flag_extreme_propensity, overlap_report, sensitivity_from_records,
    CRUMP_INDEX_BOUND,
};
use crate::sim::{simulate, Scenario};
use crate::strata::ChainOutput;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Covariates with at most this many distinct values get marginal
/// dependence profiles.
const PROFILE_MAX_LEVELS: usize = 12;

#[derive(Parser, Debug)]
#[command(name = "prince-bart", version, about = "Principal stratification with probit BART surfaces")]
pub struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, env = "PRINCE_BART_THREADS", global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long = "burn-in")]
    pub burn_in: Option<usize>,
    #[arg(long, value_enum)]
    pub dependence: Option<DependenceArg>,
}

impl RunFlags {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.chains {
            c.chains = v;
        }
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.burn_in {
            c.burn_in = v;
        }
        if let Some(v) = self.dependence {
            c.dependence = match v {
                DependenceArg::Independent => Dependence::Independent,
                DependenceArg::Dependent => Dependence::Dependent,
            };
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum BackendArg {
    Bart,
    Linear,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SimBackendArg {
    Bart,
    Linear,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum DependenceArg {
    Independent,
    Dependent,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model and write estimates, diagnostics and surrogate trees.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// JSON file with run settings, column roles and segments.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        #[command(flatten)]
        run: RunFlags,
        /// Refit after excluding the units flagged by each overlap rule.
        #[arg(long)]
        overlap_refit: bool,
    },
    /// Replicate a simulation scenario and tabulate bias, RMSE and coverage.
    Simulate {
        /// `sim1` (placebo) or `sim2` (confounding interaction).
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 50)]
        reps: u64,
        #[arg(long, value_enum, default_value = "both")]
        backend: SimBackendArg,
        /// JSON file with run settings (defaults to the reduced desk budget).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// SATT_c under a grid of confounding shifts, replaying a fit.
    Sensitivity {
        /// Output directory of a previous `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Comma-separated multipliers (default 0,0.5,...,5).
        #[arg(long = "zeta-grid")]
        zeta_grid: Option<String>,
        #[arg(long)]
        nu: Option<f64>,
        /// Estimate the reference scale from this group column of the data.
        #[arg(long = "estimate-nu", value_name = "GROUP_COLUMN")]
        estimate_nu: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Surrogate trees and marginal dependence profiles, replaying a fit.
    Interpret {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convergence diagnostics of the draws written by a fit.
    Diagnose {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute the invocation recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run settings, column roles and reporting segments of a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    /// Column roles; inferred from the header when absent (`z`, `w`, `y`
    /// plus covariates).
    pub columns: Option<Vec<ColumnSpec>>,
    /// Columns ignored when roles are inferred.
    pub exclude: Vec<String>,
    pub segments: Vec<SegmentDefinition>,
}

/// A fully resolved command, as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Fit { data: PathBuf, config: FitConfig, overlap_refit: bool },
    Simulate { scenario: String, reps: u64, backends: Vec<Backend>, config: RunConfig },
    Sensitivity { fit: PathBuf, zeta_grid: Vec<f64>, nu: Option<f64>, estimate_nu: Option<String> },
    Interpret { fit: PathBuf },
    Diagnose { fit: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub software_version: String,
    pub seed: u64,
    pub invocation: Invocation,
    /// Input path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256 digest.
    pub outputs: BTreeMap<String, String>,
    pub timings: Vec<Timing>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::usage(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::usage(format!("manifest schema {} is not supported (expected {SCHEMA_VERSION})", m.schema_version)));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Collects output files and timings for one command.
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    timings: Vec<Timing>,
    clock: Instant,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new(), inputs: BTreeMap::new(), timings: Vec::new(), clock: Instant::now() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    fn stage(&mut self, name: &str) {
        self.timings.push(Timing { stage: name.to_string(), seconds: self.clock.elapsed().as_secs_f64() });
        self.clock = Instant::now();
    }

    fn finish(self, invocation: &Invocation, seed: u64) -> Result<()> {
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            invocation: invocation.clone(),
            inputs: self.inputs,
            outputs: self.files,
            timings: self.timings,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(self.dir.join(MANIFEST), text)?;
        Ok(())
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| Error::usage(format!("cannot resolve {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::usage(format!("{}: {e}", path.display())))
}

/// Roles and kinds from the header: `z`, `w`, `y` are the design columns;
/// every other column is a covariate whose kind follows its values.
pub fn infer_columns(path: &Path, exclude: &[String]) -> Result<Vec<ColumnSpec>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut values: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (k, v) in values.iter_mut().enumerate() {
            v.push(rec.get(k).unwrap_or("").to_string());
        }
    }
    let mut specs = Vec::new();
    for (name, col) in header.iter().zip(&values) {
        if exclude.contains(name) {
            continue;
        }
        let role = match name.as_str() {
            "z" => Role::Assignment,
            "w" => Role::Treatment,
            "y" => Role::Outcome,
            _ => Role::Covariate,
        };
        let parsed: Option<Vec<f64>> = col.iter().map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite())).collect();
        let kind = match parsed {
            Some(v) if v.iter().all(|&a| a == 0.0 || a == 1.0) => Kind::Binary,
            Some(v) if v.iter().all(|a| a.fract() == 0.0 && !col.iter().any(|s| s.contains('.'))) => Kind::Ordinal,
            Some(_) => Kind::Continuous,
            None => Kind::Categorical,
        };
        specs.push(ColumnSpec { name: name.clone(), role, kind: if role == Role::Covariate { kind } else { Kind::Binary } });
    }
    Ok(specs)
}

/// Load the data of a fit and resolve its segments.
fn load_fit_data(data: &Path, config: &FitConfig) -> Result<(Dataset<f64>, Vec<Segment>)> {
    let columns = config.columns.as_ref().ok_or_else(|| Error::usage("fit configuration lacks column roles"))?;
    let d: Dataset<f64> = ingest_csv(data, columns)?;
    let segments = config.segments.iter().map(|s| s.resolve(&d.x)).collect::<Result<Vec<_>>>()?;
    Ok((d, segments))
}

struct FitRun {
    d: Dataset<f64>,
    segments: Vec<Segment>,
    outputs: Vec<ChainOutput<EstimandSink>>,
}

impl FitRun {
    fn records(&self) -> impl Iterator<Item = &crate::estimands::DrawRecord> {
        self.outputs.iter().flat_map(|o| o.sink.records.iter())
    }

    fn units(&self) -> UnitSummaries {
        let mut u = UnitSummaries::default();
        for o in &self.outputs {
            u.merge(&o.sink.units);
        }
        u
    }

    fn unit_draws(&self) -> Vec<&UnitDraw> {
        self.outputs.iter().flat_map(|o| o.sink.unit_draws.iter()).collect()
    }
}

fn run_fit(data: &Path, config: &FitConfig, zeta_grid: Vec<f64>, nu: f64, keep_unit_draws: bool) -> Result<FitRun> {
    let (d, segments) = load_fit_data(data, config)?;
    let plan = Arc::new(EstimandPlan { dependence: config.run.dependence, segments: segments.clone(), zeta_grid, nu, keep_unit_draws });
    log::info!("fitting {} chains on {} units", config.run.chains, d.n());
    let outputs = run_estimands(&d, &config.run, plan)?;
    Ok(FitRun { d, segments, outputs })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn draws_csv(run: &FitRun) -> String {
    let mut s = String::from("chain,draw,satt_c,mate_c,complier_share");
    for seg in &run.segments {
        let _ = write!(s, ",mcate_c[{}]", seg.name);
    }
    s.push('\n');
    for r in run.records() {
        let _ = write!(s, "{},{},{},{},{}", r.chain, r.draw, fmt_opt(r.satt_c), r.mate_c, r.complier_share);
        for v in &r.mcate_c {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn estimand_summaries(run: &FitRun) -> Result<Vec<EffectSummary>> {
    let records: Vec<_> = run.records().collect();
    let mut out = vec![
        summarize("SATT_c", &records.iter().filter_map(|r| r.satt_c).collect::<Vec<_>>())?,
        summarize("MATE_c", &records.iter().map(|r| r.mate_c).collect::<Vec<_>>())?,
        summarize("complier_share", &records.iter().map(|r| r.complier_share).collect::<Vec<_>>())?,
    ];
    for (k, seg) in run.segments.iter().enumerate() {
        out.push(summarize(format!("MCATE_c[{}]", seg.name), &records.iter().map(|r| r.mcate_c[k]).collect::<Vec<_>>())?);
    }
    Ok(out)
}

fn chain_values(run: &FitRun, f: impl Fn(&crate::estimands::DrawRecord) -> Option<f64>) -> Vec<Vec<f64>> {
    run.outputs.iter().map(|o| o.sink.records.iter().filter_map(&f).collect()).collect()
}

fn diagnostics_value(run: &FitRun) -> Value {
    let mut scalars = serde_json::Map::new();
    scalars.insert("SATT_c".into(), json!(diagnose(&chain_values(run, |r| r.satt_c))));
    scalars.insert("MATE_c".into(), json!(diagnose(&chain_values(run, |r| Some(r.mate_c)))));
    scalars.insert("complier_share".into(), json!(diagnose(&chain_values(run, |r| Some(r.complier_share)))));
    for (k, seg) in run.segments.iter().enumerate() {
        scalars.insert(format!("MCATE_c[{}]", seg.name), json!(diagnose(&chain_values(run, |r| Some(r.mcate_c[k])))));
    }
    json!({
        "schema_version": SCHEMA_VERSION,
        "scalars": scalars,
        "chains": run.outputs.iter().map(|o| &o.meta).collect::<Vec<_>>(),
    })
}

/// Deep-tree selection for the complier share and the effect, and the
/// shallow effect tree with per-leaf MCATE_c summaries.
fn surrogate_outputs(run: &FitRun, out: &mut Outputs) -> Result<()> {
    let units = run.units();
    let cate = units.cate.mean();
    let share = units.pi_c.mean();
    let cate_trace = surrogate_deep_select(&cate, &run.d.x);
    let share_trace = surrogate_deep_select(&share, &run.d.x);
    let mut report = json!({
        "schema_version": SCHEMA_VERSION,
        "target": "posterior mean complier effect",
        "cate_selection": cate_trace,
        "complier_share_selection": share_trace,
        "segments": [],
    });
    let selected = cate_trace.selected();
    if !selected.is_empty() {
        let tree = surrogate_shallow(&cate, &run.d.x, &selected)?;
        let draws = run.unit_draws();
        let mut segs = Vec::new();
        for (leaf, description) in tree.leaf_descriptions() {
            let mask: Vec<bool> = (0..run.d.n()).map(|i| tree.leaf_of(&run.d.x, i) == leaf).collect();
            let values: Vec<f64> = draws.iter().filter_map(|u| u.mcate(&mask)).collect();
            let size = mask.iter().filter(|&&m| m).count();
            segs.push(json!({
                "leaf": leaf,
                "description": description,
                "size": size,
                "fitted_mean": tree.nodes[leaf].mean,
                "mcate_c": summarize(format!("MCATE_c[{description}]"), &values).ok(),
            }));
        }
        report["segments"] = Value::Array(segs);
        report["shallow_tree"] = json!(tree);
        out.write("surrogate_cate.txt", tree.to_text().as_bytes())?;
        out.write("surrogate_cate.dot", tree.to_dot().as_bytes())?;
    }
    out.write_json("surrogate.json", &report)
}

fn overlap_value(run: &FitRun, config: &FitConfig, refit: bool) -> Result<Value> {
    let units = run.units();
    let s0 = units.omega_0c.sd();
    let s1 = units.omega_1c.sd();
    let mut rules: Vec<(String, Vec<bool>)> = vec![("causal_support".into(), flag_causal_support(&s0, &s1, &run.d.z))];
    let indices: Vec<&Arc<Vec<f64>>> = run.outputs.iter().filter_map(|o| o.meta.propensity_index.as_ref()).collect();
    if !indices.is_empty() {
        let mean: Vec<f64> =
            (0..run.d.n()).map(|i| indices.iter().map(|e| e[i]).sum::<f64>() / indices.len() as f64).collect();
        rules.insert(0, ("propensity_index_abs_gt_1.282".into(), flag_extreme_propensity(&mean, CRUMP_INDEX_BOUND)));
    }
    let mut reports = Vec::new();
    for (rule, flags) in rules {
        let flagged = flags.iter().filter(|&&f| f).count();
        let mut v = json!({ "rule": rule, "flagged": flagged, "excluded_fraction": flagged as f64 / run.d.n() as f64 });
        if refit && flagged > 0 {
            log::info!("refitting without the {flagged} units flagged by {rule}");
            v["refit"] = json!(overlap_report(&run.d, &config.run, &rule, flags)?);
        }
        reports.push(v);
    }
    Ok(json!({ "schema_version": SCHEMA_VERSION, "rules": reports }))
}

fn summary_value(run: &FitRun, config: &FitConfig) -> Result<Value> {
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "backend": config.run.backend,
        "dependence": config.run.dependence,
        "units": run.d.n(),
        "retained_draws": run.records().count(),
        "estimands": estimand_summaries(run)?,
        "segments": run.segments.iter().map(|s| json!({ "name": s.name, "size": s.size() })).collect::<Vec<_>>(),
    }))
}

fn cmd_fit(data: &Path, config: &FitConfig, overlap_refit: bool, out: &mut Outputs) -> Result<()> {
    out.input(data)?;
    let run = run_fit(data, config, Vec::new(), 0.0, true)?;
    out.stage("sampling");
    out.write("draws.csv", draws_csv(&run).as_bytes())?;
    out.write_json("summary.json", &summary_value(&run, config)?)?;
    out.write_json("diagnostics.json", &diagnostics_value(&run))?;
    out.stage("summaries");
    surrogate_outputs(&run, out)?;
    out.stage("surrogates");
    out.write_json("overlap.json", &overlap_value(&run, config, overlap_refit)?)?;
    out.stage("overlap");
    Ok(())
}

fn fit_invocation(fit_dir: &Path, out: &mut Outputs) -> Result<(PathBuf, FitConfig)> {
    let path = fit_dir.join(MANIFEST);
    let m = Manifest::read(&path)?;
    out.input(&path)?;
    match m.invocation {
        Invocation::Fit { data, config, .. } => {
            let digest = file_digest(&data)?;
            if m.inputs.get(&data.display().to_string()) != Some(&digest) {
                return Err(Error::data(format!("{} changed since the fit was run", data.display())));
            }
            out.input(&data)?;
            Ok((data, config))
        }
        _ => Err(Error::usage(format!("{} is not the manifest of a fit", path.display()))),
    }
}

fn cmd_sensitivity(fit_dir: &Path, zeta_grid: &[f64], nu: Option<f64>, group: Option<&str>, out: &mut Outputs) -> Result<()> {
    let (data, config) = fit_invocation(fit_dir, out)?;
    let (nu, nu_report) = match (nu, group) {
        (_, Some(col)) => {
            let (d, _) = load_fit_data(&data, &config)?;
            let labels = read_labels(&data, col)?;
            let est = estimate_nu(&d, &labels, &config.run)?;
            out.stage("reference_scale");
            (est.nu, json!(est))
        }
        (Some(v), None) => (v, json!({ "nu": v, "source": "given" })),
        (None, None) => return Err(Error::usage("provide --nu or --estimate-nu")),
    };
    let run = run_fit(&data, &config, zeta_grid.to_vec(), nu, false)?;
    out.stage("sampling");
    let curve = sensitivity_from_records(run.records(), zeta_grid, nu)?;
    let baseline = summarize("SATT_c", &run.records().filter_map(|r| r.satt_c).collect::<Vec<_>>())?;
    let mut csv = Vec::new();
    curve.write_csv(&mut csv)?;
    out.write("sensitivity.csv", &csv)?;
    out.write_json(
        "sensitivity.json",
        &json!({ "schema_version": SCHEMA_VERSION, "nu": nu_report, "baseline": baseline, "curve": curve }),
    )
}

fn cmd_interpret(fit_dir: &Path, out: &mut Outputs) -> Result<()> {
    let (data, config) = fit_invocation(fit_dir, out)?;
    let run = run_fit(&data, &config, Vec::new(), 0.0, true)?;
    out.stage("sampling");
    surrogate_outputs(&run, out)?;
    let draws: Vec<Vec<f32>> = run.unit_draws().iter().map(|u| u.pi_c.clone()).collect();
    let mut profiles = serde_json::Map::new();
    for (c, info) in run.d.x.info().iter().enumerate() {
        let col: Vec<f64> = run.d.x.column(c).to_vec();
        let levels: BTreeSet<u64> = col.iter().map(|v| v.to_bits()).collect();
        if levels.len() < 2 || levels.len() > PROFILE_MAX_LEVELS {
            continue;
        }
        profiles.insert(info.name.clone(), json!(marginal_dependence(&draws, &col)?));
    }
    out.write_json(
        "marginal_dependence.json",
        &json!({ "schema_version": SCHEMA_VERSION, "surface": "probit complier share", "covariates": profiles }),
    )?;
    out.stage("interpretation");
    Ok(())
}

fn cmd_diagnose(fit_dir: &Path, out: &mut Outputs) -> Result<()> {
    let path = fit_dir.join("draws.csv");
    out.input(&path)?;
    let mut rdr = csv::Reader::from_path(&path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut chains: Vec<BTreeMap<usize, Vec<f64>>> = vec![BTreeMap::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let chain: usize = rec[0].parse().map_err(|_| Error::data("draws.csv: bad chain index"))?;
        for k in 2..header.len() {
            if let Ok(v) = rec[k].parse::<f64>() {
                chains[k].entry(chain).or_default().push(v);
            }
        }
    }
    let mut scalars = serde_json::Map::new();
    for k in 2..header.len() {
        let per_chain: Vec<Vec<f64>> = chains[k].values().cloned().collect();
        scalars.insert(header[k].clone(), json!(diagnose(&per_chain)));
    }
    out.write_json("diagnostics.json", &json!({ "schema_version": SCHEMA_VERSION, "scalars": scalars }))
}

fn cmd_simulate(scenario: &str, reps: u64, backends: &[Backend], config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let s: Scenario = scenario.parse()?;
    let report = simulate(s, reps, config.seed, backends, config)?;
    out.stage("replications");
    out.write_json(
        "metrics.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "scenario": report.scenario,
            "replications": reps,
            "base_seed": report.base_seed,
            "truths": report.truths,
            "metrics": report.metrics,
        }),
    )?;
    out.write_json("replications.json", &report.replications)
}

/// Seed governing an invocation's random streams.
fn invocation_seed(inv: &Invocation) -> Result<u64> {
    Ok(match inv {
        Invocation::Fit { config, .. } => config.run.seed,
        Invocation::Simulate { config, .. } => config.seed,
        Invocation::Sensitivity { fit, .. } | Invocation::Interpret { fit } | Invocation::Diagnose { fit } => {
            Manifest::read(&fit.join(MANIFEST))?.seed
        }
    })
}

/// Execute a resolved invocation, writing outputs and manifest into `out`.
pub fn execute(inv: &Invocation, out_dir: &Path) -> Result<()> {
    let mut out = Outputs::new(out_dir)?;
    match inv {
        Invocation::Fit { data, config, overlap_refit } => cmd_fit(data, config, *overlap_refit, &mut out)?,
        Invocation::Simulate { scenario, reps, backends, config } => cmd_simulate(scenario, *reps, backends, config, &mut out)?,
        Invocation::Sensitivity { fit, zeta_grid, nu, estimate_nu } => {
            cmd_sensitivity(fit, zeta_grid, *nu, estimate_nu.as_deref(), &mut out)?
        }
        Invocation::Interpret { fit } => cmd_interpret(fit, &mut out)?,
        Invocation::Diagnose { fit } => cmd_diagnose(fit, &mut out)?,
    }
    let seed = invocation_seed(inv)?;
    out.finish(inv, seed)
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::usage(format!("bad zeta value {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("zeta values must be finite"));
    }
    Ok(grid)
}

/// Turn parsed arguments into a resolved invocation and output directory.
pub fn resolve(command: Command) -> Result<(Invocation, PathBuf)> {
    Ok(match command {
        Command::Fit { data, config, out, backend, run, overlap_refit } => {
            let data = absolute(&data)?;
            let mut cfg: FitConfig = match config {
                Some(p) => read_json(&p)?,
                None => FitConfig::default(),
            };
            run.apply(&mut cfg.run);
            if let Some(b) = backend {
                cfg.run.backend = match b {
                    BackendArg::Bart => Backend::Bart,
                    BackendArg::Linear => Backend::Linear,
                };
            }
            cfg.run.validate()?;
            if cfg.columns.is_none() {
                cfg.columns = Some(infer_columns(&data, &cfg.exclude)?);
            }
            (Invocation::Fit { data, config: cfg, overlap_refit }, out)
        }
        Command::Simulate { scenario, reps, backend, config, out, run } => {
            scenario.parse::<Scenario>()?;
            if reps < 2 {
                return Err(Error::usage("at least two replications are needed"));
            }
            let mut cfg = match config {
                Some(p) => read_json(&p)?,
                None => Scenario::desk_config(),
            };
            run.apply(&mut cfg);
            cfg.validate()?;
            let backends = match backend {
                SimBackendArg::Bart => vec![Backend::Bart],
                SimBackendArg::Linear => vec![Backend::Linear],
                SimBackendArg::Both => vec![Backend::Bart, Backend::Linear],
            };
            (Invocation::Simulate { scenario, reps, backends, config: cfg }, out)
        }
        Command::Sensitivity { fit, zeta_grid, nu, estimate_nu, out } => {
            let grid = match zeta_grid {
                Some(t) => parse_grid(&t)?,
                None => default_zeta_grid(),
            };
            if nu.is_none() && estimate_nu.is_none() {
                return Err(Error::usage("provide --nu or --estimate-nu"));
            }
            (Invocation::Sensitivity { fit: absolute(&fit)?, zeta_grid: grid, nu, estimate_nu }, out)
        }
        Command::Interpret { fit, out } => (Invocation::Interpret { fit: absolute(&fit)? }, out),
        Command::Diagnose { fit, out } => (Invocation::Diagnose { fit: absolute(&fit)? }, out),
        Command::Replay { manifest, out } => {
            let m = Manifest::read(&manifest)?;
            for (path, digest) in &m.inputs {
                if &file_digest(Path::new(path))? != digest {
                    return Err(Error::data(format!("input {path} changed since the manifest was written")));
                }
            }
            (m.invocation, out)
        }
    })
}

fn error_json(kind: &str, code: i32, message: &str) -> String {
    json!({ "error": kind, "exit_code": code, "message": message }).to_string()
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            println!("{}", error_json("usage", 2, &e.to_string()));
            return 2;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        pool = pool.num_threads(t);
    }
    let result = pool
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker pool: {e}")))
        .and_then(|pool| pool.install(|| resolve(cli.command).and_then(|(inv, out)| execute(&inv, &out))));
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            println!("{}", error_json(e.kind(), e.exit_code(), &e.to_string()));
            e.exit_code()
        }
    }
}
