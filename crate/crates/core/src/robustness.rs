//! Overlap flags, sensitivity to unmeasured confounding and the cross-site
//! residual reference scale.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::bart::{fit_probit_index, BartParams};
use crate::data::{CovariateInfo, Dataset, Dependence, Kind, RunConfig};
use crate::error::{Error, Result};
use crate::estimands::{
    imputation_rng, imputation_uniforms, impute_with_uniforms, run_estimands, satt_c, summarize, DrawRecord, EffectSummary,
    EstimandPlan,
};
use crate::numeric::{stream_rng, truncated_latent, Real};
use crate::strata::ChainResult;

/// Default sensitivity multipliers `0, 0.5, ..., 5`.
pub fn default_zeta_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 * 0.5).collect()
}

/// Probit-index bound equivalent to propensities outside `[0.1, 0.9]`.
pub const CRUMP_INDEX_BOUND: f64 = 1.2815515655446004;

/// Flag units whose propensity index lies outside `[-bound, bound]`.
pub fn flag_extreme_propensity(index: &[f64], bound: f64) -> Vec<bool> {
    index.iter().map(|e| e.abs() > bound).collect()
}

/// Flag treated units whose posterior sd of the control complier surface
/// exceeds every treated unit's posterior sd of the treated surface.
pub fn flag_causal_support(s0: &[f64], s1: &[f64], z: &[bool]) -> Vec<bool> {
    let max_s1 = s1.iter().zip(z).filter(|(_, &t)| t).map(|(&s, _)| s).fold(f64::NEG_INFINITY, f64::max);
    s0.iter().zip(z).map(|(&s, &t)| t && s > max_s1).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub rule: String,
    #[serde(skip)]
    pub flags: Vec<bool>,
    pub flagged: usize,
    pub excluded_fraction: f64,
    /// SATT_c refit on the unflagged units.
    pub satt_c: EffectSummary,
}

/// Refit the model on the unflagged units and summarize SATT_c.
pub fn overlap_report<T: Real>(d: &Dataset<T>, config: &RunConfig, rule: &str, flags: Vec<bool>) -> Result<OverlapReport> {
    let keep: Vec<usize> = (0..d.n()).filter(|&i| !flags[i]).collect();
    if keep.is_empty() {
        return Err(Error::Adequacy(format!("overlap rule {rule} excludes every unit")));
    }
    let sub = d.subset(&keep)?;
    let plan = Arc::new(EstimandPlan { dependence: config.dependence, ..Default::default() });
    let out = run_estimands(&sub, config, plan)?;
    let values: Vec<f64> = out.iter().flat_map(|o| o.sink.records.iter().filter_map(|r| r.satt_c)).collect();
    let flagged = d.n() - keep.len();
    Ok(OverlapReport {
        rule: rule.to_string(),
        flags,
        flagged,
        excluded_fraction: flagged as f64 / d.n() as f64,
        satt_c: summarize("SATT_c", &values)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityPoint {
    pub zeta: f64,
    pub kappa: f64,
    pub summary: EffectSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub nu: f64,
    pub points: Vec<SensitivityPoint>,
}

impl SensitivityResult {
    fn from_values(nu: f64, zeta_grid: &[f64], values: Vec<Vec<f64>>) -> Result<Self> {
        let points = zeta_grid
            .iter()
            .zip(values)
            .map(|(&zeta, v)| Ok(SensitivityPoint { zeta, kappa: nu * zeta, summary: summarize("SATT_c", &v)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nu, points })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["zeta", "kappa", "mean", "sd", "lo90", "hi90", "lo60", "hi60"])?;
        for p in &self.points {
            let s = &p.summary;
            w.write_record(
                [p.zeta, p.kappa, s.mean, s.sd, s.ci90.0, s.ci90.1, s.ci60.0, s.ci60.1].map(|v| v.to_string()),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// SATT_c under each shift `ν ζ`, recomputed from stored draws with the
/// same imputation uniforms as the baseline.
pub fn sensitivity_curve<T: Real>(
    d: &Dataset<T>,
    chains: &[ChainResult<T>],
    seed: u64,
    dependence: Dependence,
    zeta_grid: &[f64],
    nu: f64,
) -> Result<SensitivityResult> {
    let values: Vec<Vec<f64>> = zeta_grid
        .par_iter()
        .map(|&zeta| {
            let mut v = Vec::new();
            for c in chains {
                for (k, draw) in c.draws.iter().enumerate() {
                    let u = imputation_uniforms(d.n(), &mut imputation_rng(seed, c.meta.chain, k));
                    v.extend(satt_c(&impute_with_uniforms(draw, d, &u, dependence, nu * zeta), &d.z));
                }
            }
            v
        })
        .collect();
    SensitivityResult::from_values(nu, zeta_grid, values)
}

/// Sensitivity curve from streamed records whose plan carried `zeta_grid`.
pub fn sensitivity_from_records<'a>(
    records: impl IntoIterator<Item = &'a DrawRecord>,
    zeta_grid: &[f64],
    nu: f64,
) -> Result<SensitivityResult> {
    let mut values = vec![Vec::new(); zeta_grid.len()];
    for r in records {
        for (v, s) in values.iter_mut().zip(&r.sensitivity) {
            v.extend(*s);
        }
    }
    SensitivityResult::from_values(nu, zeta_grid, values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuEstimate {
    pub nu: f64,
    /// Posterior-mean intercept per group label.
    pub intercepts: Vec<(String, f64)>,
}

const NU_ITERATIONS: usize = 1000;
const NU_BURN_IN: usize = 200;

/// Cross-group residual sd: fit `P(Y = 1 | X, W)` with probit BART, then a
/// probit regression of `Y` on group indicators with the BART index as a
/// fixed offset and `N(0, 1)` intercept priors. Returns the population sd of
/// the posterior-mean intercepts.
pub fn estimate_nu<T: Real>(d: &Dataset<T>, groups: &[String], config: &RunConfig) -> Result<NuEstimate> {
    if groups.len() != d.n() {
        return Err(Error::data(format!("{} group labels for {} units", groups.len(), d.n())));
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        let next = ids.len();
        ids.entry(g.as_str()).or_insert(next);
    }
    if ids.len() < 2 {
        return Err(Error::data("a single group: no across-group variation estimable"));
    }
    let group: Vec<usize> = groups.iter().map(|g| ids[g.as_str()]).collect();
    let k = ids.len();

    let mut x = d.x.clone();
    x.push(
        CovariateInfo { name: "treatment_received".into(), kind: Kind::Binary, transform: None },
        d.w.iter().map(|&w| T::of(w as u8 as f64)).collect(),
    );
    let mut rng = stream_rng(config.seed, u64::MAX - 1);
    let offset: Vec<f64> =
        fit_probit_index(&x, &d.y, BartParams::from_config(config), config.iterations, &mut rng)?.iter().map(|v| v.as_f64()).collect();

    let mut counts = vec![0usize; k];
    for &g in &group {
        counts[g] += 1;
    }
    let mut a = vec![0.0; k];
    let mut acc = vec![0.0; k];
    for it in 0..NU_ITERATIONS {
        let mut resid = vec![0.0; k];
        for i in 0..d.n() {
            let mean = offset[i] + a[group[i]];
            let u: f64 = truncated_latent(&mut rng, mean, d.y[i]);
            resid[group[i]] += u - offset[i];
        }
        for g in 0..k {
            let prec = counts[g] as f64 + 1.0;
            a[g] = resid[g] / prec + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
        }
        if it >= NU_BURN_IN {
            for (s, v) in acc.iter_mut().zip(&a) {
                *s += v;
            }
        }
    }
    let post: Vec<f64> = acc.iter().map(|s| s / (NU_ITERATIONS - NU_BURN_IN) as f64).collect();
    let m = post.iter().sum::<f64>() / k as f64;
    let nu = (post.iter().map(|v| (v - m).powi(2)).sum::<f64>() / k as f64).sqrt();
    let mut intercepts: Vec<(String, f64)> = ids.iter().map(|(&name, &g)| (name.to_string(), post[g])).collect();
    intercepts.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(NuEstimate { nu, intercepts })
}
