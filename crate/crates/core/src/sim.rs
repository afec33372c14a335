//! Simulation scenarios with known truths, and replication metrics.

use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Backend, CovariateInfo, Covariates, Dataset, Kind, RunConfig};
use crate::error::{Error, Result};
use crate::estimands::{run_estimands, summarize, Condition, EffectSummary, EstimandPlan, SegmentDefinition};
use crate::numeric::{norm_cdf_f64, stream_rng};

/// Seed of the synthetic placebo base table.
pub const SIM1_BASE_SEED: u64 = 20_240_615;
pub const SIM1_N: usize = 6808;
pub const SIM2_N: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Sim1,
    Sim2,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim1" => Ok(Scenario::Sim1),
            "sim2" => Ok(Scenario::Sim2),
            other => Err(Error::usage(format!("unknown scenario {other:?}; expected sim1 or sim2"))),
        }
    }
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Sim1 => "sim1",
            Scenario::Sim2 => "sim2",
        }
    }

    /// Reduced chain budget used for replication studies.
    pub fn desk_config() -> RunConfig {
        RunConfig { chains: 4, iterations: 150, burn_in: 50, ..Default::default() }
    }

    pub fn truths(self) -> Truths {
        match self {
            Scenario::Sim1 => Truths { satt_c: 0.0, mate_c: 0.0, segments: Vec::new() },
            Scenario::Sim2 => sim2_truths(),
        }
    }

    /// Dataset of replication `rep`, generated with seed `base_seed + rep`.
    pub fn generate(self, base_seed: u64, rep: u64) -> Dataset<f64> {
        let seed = base_seed.wrapping_add(rep);
        match self {
            Scenario::Sim1 => gen_sim1(&sim1_base(), seed),
            Scenario::Sim2 => gen_sim2(seed),
        }
    }
}

/// Ground-truth complier effects of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truths {
    pub satt_c: f64,
    pub mate_c: f64,
    /// `(definition, MCATE_c truth)` per reported segment.
    pub segments: Vec<(SegmentDefinition, f64)>,
}

/// Covariates and outcome held fixed across placebo replications.
#[derive(Debug, Clone)]
pub struct Sim1Base {
    pub x: Covariates<f64>,
    pub y: Vec<bool>,
}

/// Synthetic stand-in for a survey table: four binary and six ordinal
/// covariates with an outcome drawn from a fixed nonlinear probit surface.
pub fn sim1_base() -> Sim1Base {
    let mut rng = stream_rng(SIM1_BASE_SEED, 0);
    let n = SIM1_N;
    let binary = [0.45, 0.3, 0.6, 0.2];
    let ordinal: [usize; 6] = [3, 4, 5, 5, 3, 7];
    let mut cols: Vec<(CovariateInfo, Vec<f64>)> = Vec::new();
    for (j, &p) in binary.iter().enumerate() {
        let v = (0..n).map(|_| rng.gen_bool(p) as u8 as f64).collect();
        cols.push((CovariateInfo { name: format!("x{}", j + 1), kind: Kind::Binary, transform: None }, v));
    }
    for (j, &levels) in ordinal.iter().enumerate() {
        let v = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        cols.push((CovariateInfo { name: format!("x{}", j + 5), kind: Kind::Ordinal, transform: None }, v));
    }
    let x = Covariates::from_columns(cols);
    let y = (0..n)
        .map(|i| {
            let r = |j: usize| x.get(i, j);
            let f = -0.3 + 0.6 * r(0) - 0.4 * r(1) + 0.5 * r(2) * r(3) - 0.8 * r(0) * r(1) + 0.25 * (r(4) - 1.0).powi(2)
                - 0.15 * r(5)
                + 0.4 * (r(6) * 0.9).sin()
                + if r(7) >= 3.0 { 0.35 } else { -0.1 }
                - 0.05 * r(9) * r(8)
                + 0.2 * r(2) * (r(9) > 3.0) as u8 as f64;
            rng.gen::<f64>() < norm_cdf_f64(f)
        })
        .collect();
    Sim1Base { x, y }
}

/// Placebo data: random assignment, assignment raises uptake by five points,
/// and uptake has no effect on the outcome.
pub fn gen_sim1(base: &Sim1Base, seed: u64) -> Dataset<f64> {
    let mut rng = stream_rng(seed, 1);
    let n = base.y.len();
    let z: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.56)).collect();
    let w: Vec<bool> = z.iter().map(|&zi| rng.gen_bool(0.18 + 0.05 * zi as u8 as f64)).collect();
    Dataset::new(base.x.clone(), z, w, base.y.clone()).expect("generated columns have equal length")
}

fn sim2_covariates() -> Covariates<f64> {
    let x1 = (1..=SIM2_N).map(|i| (i <= 5000) as u8 as f64).collect();
    let x2 = (1..=SIM2_N).map(|i| ((2501..=7500).contains(&i)) as u8 as f64).collect();
    Covariates::from_columns(vec![
        (CovariateInfo { name: "x1".into(), kind: Kind::Binary, transform: None }, x1),
        (CovariateInfo { name: "x2".into(), kind: Kind::Binary, transform: None }, x2),
    ])
}

fn sim2_p_assign(x1: f64, x2: f64) -> f64 {
    0.75 - 0.5 * x1 * x2
}

fn sim2_p_control_complier(x1: f64, x2: f64) -> f64 {
    0.7 - 0.3 * x1 * x2
}

/// Confounding interaction: the `x1 = x2 = 1` cell is less often assigned
/// and is the only one where compliers benefit.
pub fn gen_sim2(seed: u64) -> Dataset<f64> {
    let mut rng = stream_rng(seed, 2);
    let x = sim2_covariates();
    let n = SIM2_N;
    let (mut z, mut w, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (x1, x2) = (x.get(i, 0), x.get(i, 1));
        let zi = rng.gen_bool(sim2_p_assign(x1, x2));
        // 0 = always-taker, 1 = complier, 2 = never-taker.
        let g = rng.gen_range(0..3);
        let wi = match g {
            0 => true,
            1 => zi,
            _ => false,
        };
        let p = if wi { 0.7 } else if g == 1 { sim2_p_control_complier(x1, x2) } else { 0.7 };
        z.push(zi);
        w.push(wi);
        y.push(rng.gen_bool(p));
    }
    Dataset::new(x, z, w, y).expect("generated columns have equal length")
}

fn cell_segment(name: &str, x1: f64, x2: f64) -> SegmentDefinition {
    let cond = |c: &str, v: f64| Condition { covariate: c.into(), values: Some(vec![v]), min: None, max: None };
    SegmentDefinition { name: name.into(), conditions: vec![cond("x1", x1), cond("x2", x2)] }
}

/// Truths of the interaction scenario by enumeration over its four cells.
pub fn sim2_truths() -> Truths {
    let x = sim2_covariates();
    let mut cells = [[0usize; 2]; 2];
    for i in 0..x.n() {
        cells[x.get(i, 0) as usize][x.get(i, 1) as usize] += 1;
    }
    let (mut satt_num, mut satt_den, mut mate_num) = (0.0, 0.0, 0.0);
    for (a, row) in cells.iter().enumerate() {
        for (b, &count) in row.iter().enumerate() {
            let (x1, x2) = (a as f64, b as f64);
            let effect = 0.7 - sim2_p_control_complier(x1, x2);
            let treated_compliers = count as f64 / 3.0 * sim2_p_assign(x1, x2);
            satt_num += treated_compliers * effect;
            satt_den += treated_compliers;
            mate_num += count as f64 * effect;
        }
    }
    Truths {
        satt_c: satt_num / satt_den,
        mate_c: mate_num / x.n() as f64,
        segments: vec![(cell_segment("no_effect", 0.0, 0.0), 0.0), (cell_segment("large_effect", 1.0, 1.0), 0.3)],
    }
}

/// Bias, RMSE and 90% interval coverage of one estimand across replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub backend: Backend,
    pub estimand: String,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage90: f64,
    pub mean_sd: f64,
    pub replications: usize,
}

pub fn evaluate(backend: Backend, estimand: &str, estimates: &[EffectSummary], truth: f64) -> Result<MetricRow> {
    if estimates.len() < 2 {
        return Err(Error::Adequacy(format!("{estimand}: at least two replications are needed")));
    }
    let r = estimates.len() as f64;
    let bias = estimates.iter().map(|e| e.mean - truth).sum::<f64>() / r;
    let rmse = (estimates.iter().map(|e| (e.mean - truth).powi(2)).sum::<f64>() / r).sqrt();
    let coverage90 = estimates.iter().filter(|e| e.covers90(truth)).count() as f64 / r;
    let mean_sd = estimates.iter().map(|e| e.sd).sum::<f64>() / r;
    Ok(MetricRow { backend, estimand: estimand.into(), truth, bias, rmse, coverage90, mean_sd, replications: estimates.len() })
}

/// Posterior summaries from one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replication {
    pub rep: u64,
    pub backend: Backend,
    pub seed: u64,
    pub satt_c: EffectSummary,
    pub mate_c: EffectSummary,
    pub segments: Vec<EffectSummary>,
    #[serde(skip)]
    pub seconds: f64,
}

/// Fit one replication with the chain seed set to its data seed.
pub fn run_replication(scenario: Scenario, base_seed: u64, rep: u64, backend: Backend, config: &RunConfig) -> Result<Replication> {
    let start = std::time::Instant::now();
    let d = scenario.generate(base_seed, rep);
    let truths = scenario.truths();
    let seed = base_seed.wrapping_add(rep);
    let config = RunConfig { backend, seed, ..config.clone() };
    let segments = truths.segments.iter().map(|(s, _)| s.resolve(&d.x)).collect::<Result<Vec<_>>>()?;
    let plan = Arc::new(EstimandPlan { dependence: config.dependence, segments: segments.clone(), ..Default::default() });
    let out = run_estimands(&d, &config, plan)?;
    let records: Vec<_> = out.iter().flat_map(|o| o.sink.records.iter()).collect();
    let satt: Vec<f64> = records.iter().filter_map(|r| r.satt_c).collect();
    let mate: Vec<f64> = records.iter().map(|r| r.mate_c).collect();
    let seg = segments
        .iter()
        .enumerate()
        .map(|(k, s)| summarize(format!("MCATE_c[{}]", s.name), &records.iter().map(|r| r.mcate_c[k]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Replication {
        rep,
        backend,
        seed,
        satt_c: summarize("SATT_c", &satt)?,
        mate_c: summarize("MATE_c", &mate)?,
        segments: seg,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub scenario: Scenario,
    pub base_seed: u64,
    pub truths: Truths,
    pub metrics: Vec<MetricRow>,
    pub replications: Vec<Replication>,
}

impl SimReport {
    pub fn metric(&self, backend: Backend, estimand: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| m.backend == backend && m.estimand == estimand)
    }
}

/// Run `reps` replications per backend (in parallel) and tabulate metrics.
pub fn simulate(scenario: Scenario, reps: u64, base_seed: u64, backends: &[Backend], config: &RunConfig) -> Result<SimReport> {
    let truths = scenario.truths();
    let jobs: Vec<(Backend, u64)> = backends.iter().flat_map(|&b| (0..reps).map(move |r| (b, r))).collect();
    let replications = jobs
        .par_iter()
        .map(|&(b, rep)| {
            let r = run_replication(scenario, base_seed, rep, b, config);
            if let Ok(r) = &r {
                log::info!("{} {:?} replication {} done in {:.1}s", scenario.name(), b, rep, r.seconds);
            }
            r
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metrics = Vec::new();
    for &b in backends {
        let mine: Vec<&Replication> = replications.iter().filter(|r| r.backend == b).collect();
        let pick = |f: &dyn Fn(&Replication) -> EffectSummary| mine.iter().map(|r| f(r)).collect::<Vec<_>>();
        metrics.push(evaluate(b, "SATT_c", &pick(&|r| r.satt_c.clone()), truths.satt_c)?);
        metrics.push(evaluate(b, "MATE_c", &pick(&|r| r.mate_c.clone()), truths.mate_c)?);
        for (k, (seg, truth)) in truths.segments.iter().enumerate() {
            metrics.push(evaluate(b, &format!("MCATE_c[{}]", seg.name), &pick(&|r| r.segments[k].clone()), *truth)?);
        }
    }
    Ok(SimReport { scenario, base_seed, truths, metrics, replications })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm_quantile_f64;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn sim1_rates() {
        let info = CovariateInfo { name: "x".into(), kind: Kind::Binary, transform: None };
        let base = Sim1Base { x: Covariates::from_columns(vec![(info, vec![0.0; 100_000])]), y: vec![false; 100_000] };
        let d = gen_sim1(&base, 3);
        let mean = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
        assert!((mean(&d.z) - 0.56).abs() < 0.005);
        let w1: Vec<bool> = (0..d.n()).filter(|&i| d.z[i]).map(|i| d.w[i]).collect();
        let w0: Vec<bool> = (0..d.n()).filter(|&i| !d.z[i]).map(|i| d.w[i]).collect();
        assert!((mean(&w1) - 0.23).abs() < 0.005);
        assert!((mean(&w0) - 0.18).abs() < 0.005);
    }

    #[test]
    fn sim1_base_is_fixed_and_keeps_outcome() {
        let a = sim1_base();
        let b = sim1_base();
        assert_eq!(a.y, b.y);
        assert_eq!((a.x.n(), a.x.p()), (SIM1_N, 10));
        let rate = a.y.iter().filter(|&&v| v).count() as f64 / SIM1_N as f64;
        assert!(rate > 0.2 && rate < 0.8, "{rate}");
        let d1 = gen_sim1(&a, 1);
        let d2 = gen_sim1(&a, 2);
        assert_eq!(d1.y, d2.y);
        assert_ne!(d1.z, d2.z);
    }

    #[test]
    fn sim2_design() {
        let d = gen_sim2(5);
        let both: Vec<usize> = (0..d.n()).filter(|&i| d.x.get(i, 0) == 1.0 && d.x.get(i, 1) == 1.0).collect();
        assert_eq!(both.len(), 2500);
        assert_eq!((both[0], both[2499]), (2500, 4999));
        let pz = both.iter().filter(|&&i| d.z[i]).count() as f64 / 2500.0;
        assert!((pz - 0.25).abs() < 0.03, "{pz}");
        assert_eq!(gen_sim2(5).y, d.y);
    }

    /// Realized finite-sample truths averaged over generated datasets.
    #[test]
    fn sim2_truths_match_monte_carlo() {
        let t = sim2_truths();
        assert!((t.satt_c - 0.03).abs() < 1e-12);
        assert!((t.mate_c - 0.075).abs() < 1e-12);
        let mut rng = stream_rng(9, 0);
        let x = sim2_covariates();
        let (mut num, mut den, mut shares) = (0.0, 0.0, [0usize; 3]);
        for _ in 0..40 {
            for i in 0..SIM2_N {
                let (x1, x2) = (x.get(i, 0), x.get(i, 1));
                let z = rng.gen_bool(sim2_p_assign(x1, x2));
                let g = rng.gen_range(0..3);
                shares[g] += 1;
                let y1 = rng.gen_bool(0.7) as u8 as f64;
                let y0 = rng.gen_bool(sim2_p_control_complier(x1, x2)) as u8 as f64;
                if g == 1 && z {
                    num += y1 - y0;
                    den += 1.0;
                }
            }
        }
        assert!((num / den - t.satt_c).abs() < 0.01, "{}", num / den);
        for s in shares {
            assert!((s as f64 / 400_000.0 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn scenario_names() {
        assert_eq!("sim2".parse::<Scenario>().unwrap(), Scenario::Sim2);
        assert!(matches!("sim3".parse::<Scenario>(), Err(Error::Usage(_))));
    }

    fn summary(mean: f64, half: f64) -> EffectSummary {
        EffectSummary { estimand: "e".into(), mean, sd: half, ci60: (mean, mean), ci90: (mean - half, mean + half), draws: 10 }
    }

    #[test]
    fn metric_examples() {
        let exact = evaluate(Backend::Bart, "e", &[summary(0.3, 0.0), summary(0.3, 0.0)], 0.3).unwrap();
        assert_eq!((exact.bias, exact.rmse, exact.coverage90), (0.0, 0.0, 1.0));
        let pm = evaluate(Backend::Bart, "e", &[summary(0.4, 0.01), summary(0.2, 0.01)], 0.3).unwrap();
        assert!(pm.bias.abs() < 1e-12 && (pm.rmse - 0.1).abs() < 1e-12);
        assert!(evaluate(Backend::Bart, "e", &[summary(0.3, 0.0)], 0.3).is_err());
    }

    #[test]
    fn coverage_of_correct_intervals() {
        let mut rng = stream_rng(4, 0);
        let half = 0.1 * norm_quantile_f64(0.95);
        let normal = Normal::new(0.3, 0.1).unwrap();
        let est: Vec<EffectSummary> = (0..200).map(|_| summary(normal.sample(&mut rng), half)).collect();
        let m = evaluate(Backend::Linear, "e", &est, 0.3).unwrap();
        assert!((m.coverage90 - 0.9).abs() <= 0.04, "{}", m.coverage90);
        assert!(m.rmse >= m.bias.abs());
    }
}
