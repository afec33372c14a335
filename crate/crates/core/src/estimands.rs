//! Potential-outcome imputation and complier effect estimands.
//!
//! Missing potential outcomes are drawn with common random numbers: every
//! retained draw owns a stream (keyed by seed, chain and draw index) that
//! yields exactly one uniform per unit. Re-running an estimand with a
//! different missing-outcome probability therefore changes only the
//! probabilities, never the uniforms.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Dataset, Dependence};
use crate::error::{Error, Result};
use crate::numeric::{norm_cdf_f64, norm_quantile_f64, quantile_sorted, stream_rng, ChainRng, Real};
use crate::data::RunConfig;
use crate::strata::{clamp_probability, run_chains_with, ChainOutput, DrawContext, DrawSink, PosteriorDraw, Stratum};

/// Stream of imputation uniforms for one retained draw.
pub fn imputation_rng(seed: u64, chain: usize, draw: usize) -> ChainRng {
    // Distinct key from the chain streams, which use `seed` directly.
    stream_rng(seed ^ 0x9e37_79b9_7f4a_7c15, ((chain as u64) << 32) | draw as u64)
}

/// One uniform per unit.
pub fn imputation_uniforms<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen()).collect()
}

/// Largest dependence factor keeping both conditional probabilities of the
/// missing outcome inside `[0, 1]`.
pub fn dependence_kappa(p_obs: f64, p_mis: f64) -> f64 {
    ((1.0 - p_mis) / (1.0 - p_obs)).min(p_mis / p_obs)
}

/// `P(Y_mis = 1 | Y_obs = y_obs)` under the chosen dependence model.
pub fn missing_probability(p_obs: f64, p_mis: f64, y_obs: bool, dependence: Dependence) -> f64 {
    match dependence {
        Dependence::Independent => p_mis,
        Dependence::Dependent => {
            let (p_obs, p_mis) = (clamp_probability(p_obs), clamp_probability(p_mis));
            let y = if y_obs { 1.0 } else { 0.0 };
            (p_mis + (y - p_obs) * dependence_kappa(p_obs, p_mis)).clamp(0.0, 1.0)
        }
    }
}

/// Probit-scale shift of a control-arm probability: `Φ(Φ⁻¹(p) + shift)`.
/// A zero shift returns `p` unchanged.
pub fn shift_probability(p: f64, shift: f64) -> f64 {
    if shift == 0.0 {
        p
    } else {
        norm_cdf_f64(norm_quantile_f64(p) + shift)
    }
}

/// Imputed potential outcomes of the units labelled complier in a draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedPotentials {
    pub units: Vec<usize>,
    pub y1: Vec<bool>,
    pub y0: Vec<bool>,
}

/// Impute complier potential outcomes from per-unit uniforms.
///
/// The observed arm is copied from the data. The missing arm is 1 when the
/// unit's uniform falls below its missing-outcome probability; for treated
/// units that probability is first shifted by `shift` on the probit scale.
pub fn impute_with_uniforms<T: Real>(
    draw: &PosteriorDraw<T>,
    d: &Dataset<T>,
    uniforms: &[f64],
    dependence: Dependence,
    shift: f64,
) -> ImputedPotentials {
    let mut out = ImputedPotentials { units: Vec::new(), y1: Vec::new(), y0: Vec::new() };
    for i in 0..d.n() {
        if draw.gtilde[i] != Stratum::Complier {
            continue;
        }
        let (o1, o0) = (draw.omega_1c[i].as_f64(), draw.omega_0c[i].as_f64());
        let y = d.y[i];
        out.units.push(i);
        if d.z[i] {
            let p = missing_probability(o1, shift_probability(o0, shift), y, dependence);
            out.y1.push(y);
            out.y0.push(uniforms[i] < p);
        } else {
            let p = missing_probability(o0, o1, y, dependence);
            out.y1.push(uniforms[i] < p);
            out.y0.push(y);
        }
    }
    out
}

pub fn impute_independent<T: Real, R: Rng + ?Sized>(draw: &PosteriorDraw<T>, d: &Dataset<T>, rng: &mut R) -> ImputedPotentials {
    let u = imputation_uniforms(d.n(), rng);
    impute_with_uniforms(draw, d, &u, Dependence::Independent, 0.0)
}

pub fn impute_dependent<T: Real, R: Rng + ?Sized>(draw: &PosteriorDraw<T>, d: &Dataset<T>, rng: &mut R) -> ImputedPotentials {
    let u = imputation_uniforms(d.n(), rng);
    impute_with_uniforms(draw, d, &u, Dependence::Dependent, 0.0)
}

/// Mean imputed effect over treated compliers; `None` when there are none.
pub fn satt_c(potentials: &ImputedPotentials, z: &[bool]) -> Option<f64> {
    let (mut sum, mut count) = (0i64, 0usize);
    for (k, &i) in potentials.units.iter().enumerate() {
        if z[i] {
            sum += potentials.y1[k] as i64 - potentials.y0[k] as i64;
            count += 1;
        }
    }
    (count > 0).then(|| sum as f64 / count as f64)
}

/// Complier-share weighted mean of `ω_1c - ω_0c` over the units in `mask`.
fn weighted_cate<T: Real>(draw: &PosteriorDraw<T>, mask: Option<&[bool]>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..draw.pi_c.len() {
        if mask.map_or(true, |m| m[i]) {
            let w = draw.pi_c[i].as_f64();
            num += (draw.omega_1c[i].as_f64() - draw.omega_0c[i].as_f64()) * w;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn mate_c<T: Real>(draw: &PosteriorDraw<T>) -> f64 {
    weighted_cate(draw, None).expect("complier shares are clamped above zero")
}

pub fn mcate_c<T: Real>(draw: &PosteriorDraw<T>, segment: &Segment) -> Result<f64> {
    weighted_cate(draw, Some(&segment.mask)).ok_or_else(|| Error::data(format!("segment {:?} is empty", segment.name)))
}

/// One covariate restriction: the value must be listed in `values` (when
/// given) and lie within `[min, max]` (bounds optional). Values are
/// compared on the covariate's original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub covariate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Condition {
    pub fn holds(&self, v: f64) -> bool {
        self.values.as_ref().map_or(true, |vs| vs.iter().any(|&a| a == v))
            && self.min.map_or(true, |lo| v >= lo)
            && self.max.map_or(true, |hi| v <= hi)
    }
}

/// A named conjunction of conditions; no conditions selects every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDefinition {
    pub name: String,
    #[serde(default)]
    pub conditions: Vec<Condition>,
}

impl SegmentDefinition {
    pub fn all(name: impl Into<String>) -> Self {
        Self { name: name.into(), conditions: Vec::new() }
    }

    /// Membership of every row; fails on unknown covariates or an empty segment.
    pub fn resolve<T: Real>(&self, x: &Covariates<T>) -> Result<Segment> {
        let mut mask = vec![true; x.n()];
        for cond in &self.conditions {
            let c = x
                .index_of(&cond.covariate)
                .ok_or_else(|| Error::usage(format!("segment {:?}: unknown covariate {:?}", self.name, cond.covariate)))?;
            let transform = x.info()[c].transform;
            for (i, m) in mask.iter_mut().enumerate() {
                let raw = x.get(i, c).as_f64();
                let v = transform.map_or(raw, |(mu, sd)| raw * sd + mu);
                *m &= cond.holds(v);
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::data(format!("segment {:?} selects no units", self.name)));
        }
        Ok(Segment { name: self.name.clone(), mask })
    }
}

/// A resolved segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub mask: Vec<bool>,
}

impl Segment {
    pub fn size(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub estimand: String,
    pub mean: f64,
    pub sd: f64,
    pub ci60: (f64, f64),
    pub ci90: (f64, f64),
    pub draws: usize,
}

impl EffectSummary {
    pub fn covers90(&self, truth: f64) -> bool {
        self.ci90.0 <= truth && truth <= self.ci90.1
    }
}

/// Posterior mean, sd and central 60% and 90% intervals of a draw sample.
pub fn summarize(estimand: impl Into<String>, values: &[f64]) -> Result<EffectSummary> {
    if values.len() < 2 {
        return Err(Error::Adequacy(format!("at least two draws are needed, got {}", values.len())));
    }
    let n = values.len() as f64;
    // Centring on the first draw keeps constant samples exact.
    let first = values[0];
    let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let q = |p| quantile_sorted(&sorted, p);
    Ok(EffectSummary {
        estimand: estimand.into(),
        mean,
        sd,
        ci60: (q(0.2), q(0.8)),
        ci90: (q(0.05), q(0.95)),
        draws: values.len(),
    })
}

/// What the estimand sink computes for each retained draw.
#[derive(Debug, Clone, Default)]
pub struct EstimandPlan {
    pub dependence: Dependence,
    pub segments: Vec<Segment>,
    /// Sensitivity multipliers; the shift for multiplier `ζ` is `ν ζ`.
    pub zeta_grid: Vec<f64>,
    pub nu: f64,
    /// Keep per-unit complier share and effect for every draw.
    pub keep_unit_draws: bool,
}

/// Scalar estimands of one retained draw.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrawRecord {
    pub chain: usize,
    pub draw: usize,
    /// `None` when the draw had no treated compliers.
    pub satt_c: Option<f64>,
    pub mate_c: f64,
    pub mcate_c: Vec<f64>,
    pub sensitivity: Vec<Option<f64>>,
    pub complier_share: f64,
}

/// Running first and second moments per unit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitMoments {
    pub count: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl UnitMoments {
    fn add(&mut self, values: impl Iterator<Item = f64>) {
        if self.sum.is_empty() {
            let v: Vec<f64> = values.collect();
            self.sum_sq = v.iter().map(|a| a * a).collect();
            self.sum = v;
        } else {
            for ((s, q), v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(values) {
                *s += v;
                *q += v * v;
            }
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &UnitMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count as f64).collect()
    }

    /// Posterior standard deviation per unit (`n - 1` denominator).
    pub fn sd(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| if n < 2.0 { 0.0 } else { ((q - s * s / n) / (n - 1.0)).max(0.0).sqrt() })
            .collect()
    }
}

/// Per-unit posterior moments of the surfaces used downstream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitSummaries {
    pub pi_c: UnitMoments,
    pub omega_1c: UnitMoments,
    pub omega_0c: UnitMoments,
    pub cate: UnitMoments,
}

impl UnitSummaries {
    pub fn merge(&mut self, other: &UnitSummaries) {
        self.pi_c.merge(&other.pi_c);
        self.omega_1c.merge(&other.omega_1c);
        self.omega_0c.merge(&other.omega_0c);
        self.cate.merge(&other.cate);
    }
}

/// Per-draw unit-level values kept for post-hoc segment summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDraw {
    pub pi_c: Vec<f32>,
    pub cate: Vec<f32>,
}

impl UnitDraw {
    /// Complier-share weighted effect over `mask`.
    pub fn mcate(&self, mask: &[bool]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for ((&p, &c), &m) in self.pi_c.iter().zip(&self.cate).zip(mask) {
            if m {
                num += p as f64 * c as f64;
                den += p as f64;
            }
        }
        (den > 0.0).then(|| num / den)
    }
}

/// Streaming sink computing scalar estimands and per-unit moments.
pub struct EstimandSink {
    plan: Arc<EstimandPlan>,
    pub records: Vec<DrawRecord>,
    pub units: UnitSummaries,
    pub unit_draws: Vec<UnitDraw>,
}

impl EstimandSink {
    pub fn new(plan: Arc<EstimandPlan>) -> Self {
        Self { plan, records: Vec::new(), units: UnitSummaries::default(), unit_draws: Vec::new() }
    }
}

impl<T: Real> DrawSink<T> for EstimandSink {
    fn visit(&mut self, ctx: &DrawContext<'_, T>) {
        let draw = ctx.posterior;
        let d = ctx.data;
        let mut rng = imputation_rng(ctx.config.seed, ctx.chain, ctx.draw);
        let uniforms = imputation_uniforms(d.n(), &mut rng);
        let satt = |shift: f64| satt_c(&impute_with_uniforms(draw, d, &uniforms, self.plan.dependence, shift), &d.z);
        let mcate = self
            .plan
            .segments
            .iter()
            .map(|s| weighted_cate(draw, Some(&s.mask)).expect("segments are nonempty"))
            .collect();
        let sensitivity = self.plan.zeta_grid.iter().map(|&zeta| satt(self.plan.nu * zeta)).collect();
        let share = draw.gtilde.iter().filter(|&&g| g == Stratum::Complier).count() as f64 / d.n() as f64;
        self.records.push(DrawRecord {
            chain: ctx.chain,
            draw: ctx.draw,
            satt_c: satt(0.0),
            mate_c: mate_c(draw),
            mcate_c: mcate,
            sensitivity,
            complier_share: share,
        });
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        let (o1, o0) = (f(&draw.omega_1c), f(&draw.omega_0c));
        self.units.pi_c.add(draw.pi_c.iter().map(|v| v.as_f64()));
        self.units.omega_1c.add(o1.iter().copied());
        self.units.omega_0c.add(o0.iter().copied());
        self.units.cate.add(o1.iter().zip(&o0).map(|(a, b)| a - b));
        if self.plan.keep_unit_draws {
            self.unit_draws.push(UnitDraw {
                pi_c: draw.pi_c.iter().map(|v| v.as_f64() as f32).collect(),
                cate: o1.iter().zip(&o0).map(|(a, b)| (a - b) as f32).collect(),
            });
        }
    }
}

/// Run every chain with its own [`EstimandSink`].
pub fn run_estimands<T: Real>(d: &Dataset<T>, config: &RunConfig, plan: Arc<EstimandPlan>) -> Result<Vec<ChainOutput<EstimandSink>>> {
    run_chains_with(d, config, |_| EstimandSink::new(plan.clone()))
}

/// Per-chain SATT_c draws, skipping draws without treated compliers.
pub fn satt_by_chain(outputs: &[ChainOutput<EstimandSink>]) -> Vec<Vec<f64>> {
    outputs.iter().map(|o| o.sink.records.iter().filter_map(|r| r.satt_c).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateInfo, Kind};
    use rand_distr::{Distribution, Normal};

    fn draw_with(n: usize, o1: f64, o0: f64, pi: f64) -> PosteriorDraw<f64> {
        PosteriorDraw {
            pi_c: vec![pi; n],
            pi_a_given_notc: vec![0.5; n],
            omega_1c: vec![o1; n],
            omega_0c: vec![o0; n],
            omega_1a: vec![0.5; n],
            omega_0n: vec![0.5; n],
            gtilde: vec![Stratum::Complier; n],
            propensity_index: None,
        }
    }

    fn data(z: Vec<bool>, y: Vec<bool>, x: Vec<f64>) -> Dataset<f64> {
        let w = z.clone();
        let cov = Covariates::from_columns(vec![(CovariateInfo { name: "x".into(), kind: Kind::Continuous, transform: None }, x)]);
        Dataset::new(cov, z, w, y).unwrap()
    }

    #[test]
    fn kappa_examples() {
        let k = dependence_kappa(0.6, 0.5);
        assert!((k - 5.0 / 6.0).abs() < 1e-15);
        let p1 = missing_probability(0.6, 0.5, true, Dependence::Dependent);
        let p0 = missing_probability(0.6, 0.5, false, Dependence::Dependent);
        assert!((p1 - 5.0 / 6.0).abs() < 1e-12 && p0.abs() < 1e-12);
        assert!((0.6 * p1 + 0.4 * p0 - 0.5).abs() < 1e-12);
        assert_eq!(dependence_kappa(0.3, 0.3), 1.0);
        assert_eq!(missing_probability(0.3, 0.3, true, Dependence::Dependent), 1.0);
        assert_eq!(missing_probability(0.3, 0.3, false, Dependence::Dependent), 0.0);
    }

    #[test]
    fn shift_examples() {
        assert!((shift_probability(0.5, 1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(shift_probability(0.123_456, 0.0), 0.123_456);
        for &p in &[1e-6, 0.3, 1.0 - 1e-6] {
            let s = shift_probability(p, 3.0);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn imputation_invariants() {
        let n = 400;
        let z: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let y: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let d = data(z.clone(), y.clone(), vec![0.0; n]);
        let mut rng = stream_rng(1, 0);
        let certain = impute_independent(&draw_with(n, 1.0, 0.0, 0.5), &d, &mut rng);
        for (k, &i) in certain.units.iter().enumerate() {
            if z[i] {
                assert_eq!(certain.y1[k], y[i]);
                assert!(!certain.y0[k]);
            } else {
                assert_eq!(certain.y0[k], y[i]);
                assert!(certain.y1[k]);
            }
        }
        // Every ITE is 1 when outcomes agree with the certain surfaces.
        let d1 = data(z.clone(), z.clone(), vec![0.0; n]);
        let pot = impute_independent(&draw_with(n, 1.0, 0.0, 0.5), &d1, &mut rng);
        assert_eq!(satt_c(&pot, &z), Some(1.0));
    }

    #[test]
    fn symmetric_surfaces_give_zero_mean_effect() {
        let n = 1000;
        let z: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let mut rng = stream_rng(2, 0);
        let draw = draw_with(n, 0.4, 0.4, 0.5);
        let mut total = 0.0;
        let reps = 100;
        for _ in 0..reps {
            let y: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.4).collect();
            let d = data(z.clone(), y, vec![0.0; n]);
            let pot = impute_independent(&draw, &d, &mut rng);
            total += pot.y1.iter().zip(&pot.y0).map(|(&a, &b)| a as i32 - b as i32).sum::<i32>() as f64;
        }
        assert!((total / (reps * n) as f64).abs() < 0.01);
    }

    #[test]
    fn satt_arithmetic_and_skip() {
        let pot = ImputedPotentials { units: vec![0, 1, 2, 3], y1: vec![true, false, false, true], y0: vec![false, false, true, false] };
        assert_eq!(satt_c(&pot, &[true, true, true, false]), Some(0.0));
        assert_eq!(satt_c(&pot, &[false; 4]), None);
    }

    #[test]
    fn mate_and_mcate_identities() {
        let mut draw = draw_with(2, 0.0, 0.0, 0.0);
        draw.pi_c = vec![0.2, 0.8];
        draw.omega_1c = vec![0.6, 0.9];
        draw.omega_0c = vec![0.5, 0.4];
        assert!((mate_c(&draw) - 0.42).abs() < 1e-15);
        let x = Covariates::from_columns(vec![(CovariateInfo { name: "x".into(), kind: Kind::Binary, transform: None }, vec![0.0, 1.0])]);
        let all = SegmentDefinition::all("all").resolve(&x).unwrap();
        assert_eq!(mcate_c(&draw, &all).unwrap(), mate_c(&draw));
        let one = SegmentDefinition { name: "one".into(), conditions: vec![Condition { covariate: "x".into(), values: Some(vec![1.0]), min: None, max: None }] };
        let zero = SegmentDefinition { name: "zero".into(), conditions: vec![Condition { covariate: "x".into(), values: None, min: None, max: Some(0.5) }] };
        let (s1, s0) = (one.resolve(&x).unwrap(), zero.resolve(&x).unwrap());
        assert!((mcate_c(&draw, &s1).unwrap() - 0.5).abs() < 1e-15);
        let combined = 0.8 * mcate_c(&draw, &s1).unwrap() + 0.2 * mcate_c(&draw, &s0).unwrap();
        assert!((combined - mate_c(&draw)).abs() < 1e-15);
        let none = SegmentDefinition { name: "none".into(), conditions: vec![Condition { covariate: "x".into(), values: Some(vec![7.0]), min: None, max: None }] };
        assert!(matches!(none.resolve(&x), Err(Error::Data(m)) if m.contains("none")));
        let bad = SegmentDefinition { name: "bad".into(), conditions: vec![Condition { covariate: "q".into(), values: None, min: None, max: None }] };
        assert!(bad.resolve(&x).is_err());
    }

    #[test]
    fn summaries() {
        let c = summarize("c", &[0.3; 10]).unwrap();
        assert_eq!((c.mean, c.sd, c.ci90), (0.3, 0.0, (0.3, 0.3)));
        assert_eq!(summarize("h", &[0.0, 1.0, 0.0, 1.0]).unwrap().mean, 0.5);
        let mut rng = stream_rng(3, 0);
        let normal = Normal::new(0.3, 0.1).unwrap();
        let v: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let s = summarize("n", &v).unwrap();
        // Normal quantiles: 0.3 ∓ 1.6449 × 0.1.
        assert!((s.ci90.0 - 0.135).abs() < 0.01 && (s.ci90.1 - 0.465).abs() < 0.01);
        assert!(s.ci60.0 > s.ci90.0 && s.ci60.1 < s.ci90.1);
        assert!(summarize("x", &[1.0]).is_err());
    }

    #[test]
    fn unit_moments_merge_and_sd() {
        let mut a = UnitMoments::default();
        a.add([1.0, 2.0].into_iter());
        a.add([3.0, 2.0].into_iter());
        let mut b = UnitMoments::default();
        b.add([5.0, 2.0].into_iter());
        a.merge(&b);
        assert_eq!(a.mean(), vec![3.0, 2.0]);
        assert_eq!(a.sd(), vec![2.0, 0.0]);
    }
}
