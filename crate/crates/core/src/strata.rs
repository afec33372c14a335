//! Principal strata and the data-augmentation sampler.
//!
//! Each iteration treats the current stratum imputation as data, takes one
//! posterior draw of the six surfaces (stratum membership and the four
//! outcome surfaces compatible with the observed cells), then re-imputes the
//! latent strata of the `Z = W` units from their mixture posterior.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bart::{fit_propensity, AcceptanceStats, BartParams, BartSampler};
use crate::data::{Backend, Covariates, CovariateInfo, Dataset, Kind, RunConfig};
use crate::error::{Error, Result};
use crate::linear::{inverse_link, LinearSampler};
use crate::numeric::{norm_cdf, norm_quantile_f64, stream_rng, ChainRng, Real};

/// Probabilities are kept inside `[CLAMP, 1 - CLAMP]`.
pub const CLAMP: f64 = 1e-6;

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Complier,
    NeverTaker,
    AlwaysTaker,
}

impl Stratum {
    pub fn code(self) -> char {
        match self {
            Stratum::Complier => 'c',
            Stratum::NeverTaker => 'n',
            Stratum::AlwaysTaker => 'a',
        }
    }
}

pub type GTilde = Vec<Stratum>;

/// Strata consistent with an observed `(Z, W)` cell when there are no defiers.
pub fn compatible(z: bool, w: bool) -> &'static [Stratum] {
    match (z, w) {
        (true, true) => &[Stratum::Complier, Stratum::AlwaysTaker],
        (false, false) => &[Stratum::Complier, Stratum::NeverTaker],
        (false, true) => &[Stratum::AlwaysTaker],
        (true, false) => &[Stratum::NeverTaker],
    }
}

/// Starting imputation: the determined cells get their only label, the
/// ambiguous ones start as compliers.
pub fn initialize_gtilde(z: &[bool], w: &[bool]) -> GTilde {
    z.iter().zip(w).map(|(&z, &w)| compatible(z, w)[0]).collect()
}

/// Posterior probability that a unit is a complier given its cell and
/// outcome. Arguments are the unit's stratum shares and outcome surfaces.
#[allow(clippy::too_many_arguments)]
pub fn class_posterior(
    pi_c: f64,
    pi_a: f64,
    pi_n: f64,
    omega_1c: f64,
    omega_1a: f64,
    omega_0c: f64,
    omega_0n: f64,
    y: bool,
    z: bool,
    w: bool,
) -> f64 {
    let lik = |p: f64| if y { p } else { 1.0 - p };
    match (z, w) {
        (true, true) => {
            let c = pi_c * lik(omega_1c);
            c / (c + pi_a * lik(omega_1a))
        }
        (false, false) => {
            let c = pi_c * lik(omega_0c);
            c / (c + pi_n * lik(omega_0n))
        }
        _ => 0.0,
    }
}

/// Draw fresh labels: complier with probability `gamma[i]` in the ambiguous
/// cells, otherwise the cell's alternative. Determined cells are unchanged.
pub fn impute_gtilde<R: Rng + ?Sized>(gamma: &[f64], z: &[bool], w: &[bool], rng: &mut R) -> GTilde {
    gamma
        .iter()
        .zip(z.iter().zip(w))
        .map(|(&g, (&z, &w))| {
            let options = compatible(z, w);
            if options.len() == 1 {
                options[0]
            } else {
                let u: f64 = rng.gen();
                if u < g {
                    Stratum::Complier
                } else {
                    options[1]
                }
            }
        })
        .collect()
}

/// The six fitted surfaces, in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    PiC,
    PiAGivenNotC,
    Omega1C,
    Omega0C,
    Omega1A,
    Omega0N,
}

impl SurfaceKind {
    pub const ALL: [SurfaceKind; 6] = [
        SurfaceKind::PiC,
        SurfaceKind::PiAGivenNotC,
        SurfaceKind::Omega1C,
        SurfaceKind::Omega0C,
        SurfaceKind::Omega1A,
        SurfaceKind::Omega0N,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SurfaceKind::PiC => "pi_c",
            SurfaceKind::PiAGivenNotC => "pi_a_given_notc",
            SurfaceKind::Omega1C => "omega_1c",
            SurfaceKind::Omega0C => "omega_0c",
            SurfaceKind::Omega1A => "omega_1a",
            SurfaceKind::Omega0N => "omega_0n",
        }
    }

    /// Training rows and binary response for this surface given `g`.
    pub fn training<T>(self, d: &Dataset<T>, g: &[Stratum]) -> (Vec<usize>, Vec<bool>) {
        let n = g.len();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let (keep, resp) = match self {
                SurfaceKind::PiC => (true, g[i] == Stratum::Complier),
                SurfaceKind::PiAGivenNotC => (g[i] != Stratum::Complier, g[i] == Stratum::AlwaysTaker),
                SurfaceKind::Omega1C => (d.z[i] && g[i] == Stratum::Complier, d.y[i]),
                SurfaceKind::Omega0C => (!d.z[i] && g[i] == Stratum::Complier, d.y[i]),
                // Noncomplier outcomes depend on the received treatment only,
                // so both assignment arms inform them.
                SurfaceKind::Omega1A => (g[i] == Stratum::AlwaysTaker, d.y[i]),
                SurfaceKind::Omega0N => (g[i] == Stratum::NeverTaker, d.y[i]),
            };
            if keep {
                rows.push(i);
                y.push(resp);
            }
        }
        (rows, y)
    }
}

/// Method-of-moments rates used to centre each surface, as probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Offsets {
    pub pi_c: f64,
    pub pi_a_given_notc: f64,
    pub omega_1c: f64,
    pub omega_0c: f64,
    pub omega_1a: f64,
    pub omega_0n: f64,
}

/// Offsets are kept inside `[OFFSET_FLOOR, 1 - OFFSET_FLOOR]`.
pub const OFFSET_FLOOR: f64 = 0.01;

impl Offsets {
    pub fn method_of_moments<T>(d: &Dataset<T>) -> Self {
        let rate = |sel: &dyn Fn(usize) -> bool, val: &dyn Fn(usize) -> bool| -> Option<f64> {
            let (mut num, mut den) = (0usize, 0usize);
            for i in 0..d.z.len() {
                if sel(i) {
                    den += 1;
                    num += val(i) as usize;
                }
            }
            (den > 0).then(|| num as f64 / den as f64)
        };
        let a = rate(&|i| !d.z[i], &|i| d.w[i]).unwrap_or(0.0);
        let n = rate(&|i| d.z[i], &|i| !d.w[i]).unwrap_or(0.0);
        let c = 1.0 - a - n;
        let a_notc = if a + n > 0.0 { a / (a + n) } else { 0.5 };
        let y_a = rate(&|i| d.w[i] && !d.z[i], &|i| d.y[i]);
        let y_n = rate(&|i| !d.w[i] && d.z[i], &|i| d.y[i]);
        let y11 = rate(&|i| d.w[i] && d.z[i], &|i| d.y[i]);
        let y00 = rate(&|i| !d.w[i] && !d.z[i], &|i| d.y[i]);
        // Complier means: remove the share of the mixed cell belonging to
        // the other stratum.
        let unmix = |mixed: Option<f64>, other: Option<f64>, share_other: f64| match (mixed, other) {
            (Some(m), Some(o)) if share_other < 1.0 => (m - o * share_other) / (1.0 - share_other),
            (Some(m), _) => m,
            _ => 0.5,
        };
        let s1_other = if c + a > 0.0 { a / (c + a) } else { 0.0 };
        let s0_other = if c + n > 0.0 { n / (c + n) } else { 0.0 };
        let f = |p: f64| p.clamp(OFFSET_FLOOR, 1.0 - OFFSET_FLOOR);
        Self {
            pi_c: f(c),
            pi_a_given_notc: f(a_notc),
            omega_1c: f(unmix(y11, y_a, s1_other)),
            omega_0c: f(unmix(y00, y_n, s0_other)),
            omega_1a: f(y_a.unwrap_or(0.5)),
            omega_0n: f(y_n.unwrap_or(0.5)),
        }
    }

    pub fn get(&self, kind: SurfaceKind) -> f64 {
        match kind {
            SurfaceKind::PiC => self.pi_c,
            SurfaceKind::PiAGivenNotC => self.pi_a_given_notc,
            SurfaceKind::Omega1C => self.omega_1c,
            SurfaceKind::Omega0C => self.omega_0c,
            SurfaceKind::Omega1A => self.omega_1a,
            SurfaceKind::Omega0N => self.omega_0n,
        }
    }
}

/// One retained draw of the data-augmentation sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw<T> {
    pub pi_c: Vec<T>,
    pub pi_a_given_notc: Vec<T>,
    pub omega_1c: Vec<T>,
    pub omega_0c: Vec<T>,
    pub omega_1a: Vec<T>,
    pub omega_0n: Vec<T>,
    /// Strata imputed from this draw's surfaces.
    pub gtilde: GTilde,
    /// Propensity index of the chain (absent for the linear backend).
    pub propensity_index: Option<Arc<Vec<T>>>,
}

impl<T: Real> PosteriorDraw<T> {
    pub fn pi_a(&self, i: usize) -> T {
        (T::one() - self.pi_c[i]) * self.pi_a_given_notc[i]
    }

    pub fn pi_n(&self, i: usize) -> T {
        T::one() - self.pi_c[i] - self.pi_a(i)
    }

    pub fn surface(&self, kind: SurfaceKind) -> &[T] {
        match kind {
            SurfaceKind::PiC => &self.pi_c,
            SurfaceKind::PiAGivenNotC => &self.pi_a_given_notc,
            SurfaceKind::Omega1C => &self.omega_1c,
            SurfaceKind::Omega0C => &self.omega_0c,
            SurfaceKind::Omega1A => &self.omega_1a,
            SurfaceKind::Omega0N => &self.omega_0n,
        }
    }

    /// Complier posterior for every unit (0 for determined non-compliers).
    pub fn gamma(&self, d: &Dataset<T>) -> Vec<f64> {
        (0..d.n())
            .map(|i| {
                class_posterior(
                    self.pi_c[i].as_f64(),
                    self.pi_a(i).as_f64(),
                    self.pi_n(i).as_f64(),
                    self.omega_1c[i].as_f64(),
                    self.omega_1a[i].as_f64(),
                    self.omega_0c[i].as_f64(),
                    self.omega_0n[i].as_f64(),
                    d.y[i],
                    d.z[i],
                    d.w[i],
                )
            })
            .collect()
    }
}

/// A backend that can take one posterior draw of a binary surface on a
/// training subset and report probabilities at every unit.
pub trait SurfaceModel<T: Real>: Send {
    fn fit_draw(&mut self, rows: Vec<usize>, y: Vec<bool>, rng: &mut ChainRng);
    fn probabilities(&self) -> Vec<T>;
    fn acceptance(&self) -> Option<AcceptanceStats> {
        None
    }
}

pub struct BartSurface<T> {
    sampler: BartSampler<T>,
    x: Arc<Covariates<T>>,
}

impl<T: Real> BartSurface<T> {
    pub fn new(x: Arc<Covariates<T>>, params: BartParams, offset_probability: f64) -> Self {
        let sampler = BartSampler::new(&x, params, T::of(norm_quantile_f64(offset_probability)));
        Self { sampler, x }
    }
}

impl<T: Real> SurfaceModel<T> for BartSurface<T> {
    fn fit_draw(&mut self, rows: Vec<usize>, y: Vec<bool>, rng: &mut ChainRng) {
        self.sampler.set_training(rows, y, rng);
        self.sampler.sweep(&self.x, rng);
    }

    fn probabilities(&self) -> Vec<T> {
        self.sampler.index_all().into_iter().map(norm_cdf).collect()
    }

    fn acceptance(&self) -> Option<AcceptanceStats> {
        Some(self.sampler.acceptance())
    }
}

pub struct LinearSurface {
    sampler: LinearSampler,
    link: crate::data::Link,
}

impl LinearSurface {
    pub fn new<T: Real>(x: &Covariates<T>, config: &RunConfig, offset_probability: f64) -> Self {
        let offset = match config.linear_link {
            crate::data::Link::Probit => norm_quantile_f64(offset_probability),
            crate::data::Link::Logit => (offset_probability / (1.0 - offset_probability)).ln(),
        };
        Self { sampler: LinearSampler::new(x, config.linear_link, config.linear_prior_scale, offset), link: config.linear_link }
    }
}

impl<T: Real> SurfaceModel<T> for LinearSurface {
    fn fit_draw(&mut self, rows: Vec<usize>, y: Vec<bool>, rng: &mut ChainRng) {
        self.sampler.set_training(rows, y);
        self.sampler.step(rng);
    }

    fn probabilities(&self) -> Vec<T> {
        self.sampler.index_all().into_iter().map(|e| T::of(inverse_link(self.link, e))).collect()
    }
}

/// Covariates with the propensity index appended as a final column.
pub fn augment_with_propensity<T: Real>(x: &Covariates<T>, index: &[T]) -> Covariates<T> {
    let mut out = x.clone();
    out.push(
        CovariateInfo { name: PROPENSITY_COLUMN.to_string(), kind: Kind::Continuous, transform: None },
        index.to_vec(),
    );
    out
}

pub const PROPENSITY_COLUMN: &str = "propensity_index";

/// Everything a sink sees about one retained draw.
pub struct DrawContext<'a, T> {
    pub chain: usize,
    /// Index among the chain's retained draws.
    pub draw: usize,
    pub data: &'a Dataset<T>,
    pub config: &'a RunConfig,
    pub posterior: &'a PosteriorDraw<T>,
}

/// Receives retained draws as the sampler produces them.
pub trait DrawSink<T>: Send {
    fn visit(&mut self, ctx: &DrawContext<'_, T>);
}

/// Sink that keeps every draw.
#[derive(Debug, Default)]
pub struct KeepDraws<T> {
    pub draws: Vec<PosteriorDraw<T>>,
}

impl<T: Real> DrawSink<T> for KeepDraws<T> {
    fn visit(&mut self, ctx: &DrawContext<'_, T>) {
        self.draws.push(ctx.posterior.clone());
    }
}

/// Per-chain bookkeeping returned alongside the sink.
#[derive(Debug, Clone, Serialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub retained: usize,
    /// Iterations in which each surface had no training rows.
    pub empty_iterations: Vec<(SurfaceKind, usize)>,
    /// Tree-move acceptance per surface (BART only), as
    /// `[grow, prune, change, swap]` rates.
    pub acceptance: Vec<(SurfaceKind, [f64; 4])>,
    #[serde(skip)]
    pub propensity_index: Option<Arc<Vec<f64>>>,
}

#[derive(Debug)]
pub struct ChainOutput<S> {
    pub meta: ChainMeta,
    pub sink: S,
}

/// Retained draws of one chain with its bookkeeping.
#[derive(Debug)]
pub struct ChainResult<T> {
    pub meta: ChainMeta,
    pub draws: Vec<PosteriorDraw<T>>,
}

/// Generator stream of chain `chain` for a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChainRng {
    stream_rng(seed, chain as u64)
}

/// Run all chains, keeping every retained draw.
pub fn run_chains<T: Real>(d: &Dataset<T>, config: &RunConfig) -> Result<Vec<ChainResult<T>>> {
    let out = run_chains_with(d, config, |_| KeepDraws::default())?;
    Ok(out.into_iter().map(|o| ChainResult { meta: o.meta, draws: o.sink.draws }).collect())
}

/// Run all chains in parallel (one rayon task per chain), streaming retained
/// draws into a sink built per chain by `make_sink`.
pub fn run_chains_with<T, S, F>(d: &Dataset<T>, config: &RunConfig, make_sink: F) -> Result<Vec<ChainOutput<S>>>
where
    T: Real,
    S: DrawSink<T>,
    F: Fn(usize) -> S + Sync,
{
    config.validate()?;
    let offsets = Offsets::method_of_moments(d);
    (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let mut sink = make_sink(chain);
            let meta = run_chain(d, config, &offsets, chain, &mut sink)?;
            Ok(ChainOutput { meta, sink })
        })
        .collect()
}

/// One chain of the data-augmentation sampler.
pub fn run_chain<T: Real, S: DrawSink<T>>(
    d: &Dataset<T>,
    config: &RunConfig,
    offsets: &Offsets,
    chain: usize,
    sink: &mut S,
) -> Result<ChainMeta> {
    let mut rng = chain_rng(config.seed, chain);
    let params = BartParams::from_config(config);
    let (mut surfaces, propensity): (Vec<Box<dyn SurfaceModel<T>>>, Option<Arc<Vec<T>>>) = match config.backend {
        Backend::Bart => {
            let e = fit_propensity(&d.x, &d.z, params, config.propensity_iterations, &mut rng)?;
            let x = Arc::new(augment_with_propensity(&d.x, &e));
            let s = SurfaceKind::ALL
                .iter()
                .map(|&k| Box::new(BartSurface::new(x.clone(), params, offsets.get(k))) as Box<dyn SurfaceModel<T>>)
                .collect();
            (s, Some(Arc::new(e)))
        }
        Backend::Linear => {
            let s = SurfaceKind::ALL
                .iter()
                .map(|&k| Box::new(LinearSurface::new(&d.x, config, offsets.get(k))) as Box<dyn SurfaceModel<T>>)
                .collect();
            (s, None)
        }
    };

    let n = d.n();
    let mut g = initialize_gtilde(&d.z, &d.w);
    let mut empty = [0usize; 6];
    let mut retained = 0;
    for it in 0..config.iterations {
        let mut probs: Vec<Vec<T>> = Vec::with_capacity(6);
        for (s, (&kind, model)) in SurfaceKind::ALL.iter().zip(surfaces.iter_mut()).enumerate() {
            let (rows, y) = kind.training(d, &g);
            if rows.is_empty() {
                empty[s] += 1;
                log::warn!("chain {chain} iteration {it}: no training units for {}; using its offset", kind.name());
                probs.push(vec![T::of(offsets.get(kind)); n]);
            } else {
                model.fit_draw(rows, y, &mut rng);
                probs.push(model.probabilities().into_iter().map(|p| T::of(clamp_probability(p.as_f64()))).collect());
            }
        }
        let mut it_probs = probs.into_iter();
        let mut draw = PosteriorDraw {
            pi_c: it_probs.next().unwrap(),
            pi_a_given_notc: it_probs.next().unwrap(),
            omega_1c: it_probs.next().unwrap(),
            omega_0c: it_probs.next().unwrap(),
            omega_1a: it_probs.next().unwrap(),
            omega_0n: it_probs.next().unwrap(),
            gtilde: Vec::new(),
            propensity_index: propensity.clone(),
        };
        let gamma = draw.gamma(d);
        g = impute_gtilde(&gamma, &d.z, &d.w, &mut rng);
        if it >= config.burn_in {
            draw.gtilde = g.clone();
            sink.visit(&DrawContext { chain, draw: retained, data: d, config, posterior: &draw });
            retained += 1;
        }
        if (it + 1) % 50 == 0 {
            log::debug!("chain {chain}: iteration {} of {}", it + 1, config.iterations);
        }
    }

    for (s, &kind) in SurfaceKind::ALL.iter().enumerate() {
        if empty[s] == config.iterations {
            return Err(Error::Adequacy(format!(
                "no units were ever imputed into the training set of {} (chain {chain})",
                kind.name()
            )));
        }
    }
    Ok(ChainMeta {
        chain,
        retained,
        empty_iterations: SurfaceKind::ALL.iter().zip(empty).filter(|(_, e)| *e > 0).map(|(&k, e)| (k, e)).collect(),
        acceptance: SurfaceKind::ALL
            .iter()
            .zip(&surfaces)
            .filter_map(|(&k, m)| {
                m.acceptance().map(|a| {
                    let r = [0, 1, 2, 3].map(|i| if a.proposed[i] == 0 { 0.0 } else { a.accepted[i] as f64 / a.proposed[i] as f64 });
                    (k, r)
                })
            })
            .collect(),
        propensity_index: propensity.map(|p| Arc::new(p.iter().map(|v| v.as_f64()).collect())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn initial_labels() {
        let g = initialize_gtilde(&[false, true, true, false], &[true, false, true, false]);
        assert_eq!(g, vec![Stratum::AlwaysTaker, Stratum::NeverTaker, Stratum::Complier, Stratum::Complier]);
    }

    #[test]
    fn class_posterior_examples() {
        let g = class_posterior(0.5, 0.5, 0.0, 0.8, 0.4, 0.5, 0.5, true, true, true);
        assert!((g - 2.0 / 3.0).abs() < 1e-15);
        let g0 = class_posterior(0.5, 0.5, 0.0, 0.8, 0.4, 0.5, 0.5, false, true, true);
        assert!((g0 - 0.25).abs() < 1e-15);
        assert_eq!(class_posterior(1.0, 0.0, 0.0, 0.3, 0.9, 0.2, 0.6, true, false, false), 1.0);
    }

    #[test]
    fn imputation_respects_cells_and_rate() {
        let mut rng = stream_rng(1, 0);
        let n = 100_000;
        let z = vec![true; n];
        let w = vec![true; n];
        let g = impute_gtilde(&vec![0.3; n], &z, &w, &mut rng);
        let rate = g.iter().filter(|&&s| s == Stratum::Complier).count() as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.005);
        assert_eq!(impute_gtilde(&[1.0], &[true], &[true], &mut rng), vec![Stratum::Complier]);
        assert_eq!(impute_gtilde(&[0.0], &[true], &[true], &mut rng), vec![Stratum::AlwaysTaker]);
        assert_eq!(impute_gtilde(&[0.9], &[true], &[false], &mut rng), vec![Stratum::NeverTaker]);
    }

    proptest! {
        #[test]
        fn imputed_labels_always_compatible(cells in proptest::collection::vec((any::<bool>(), any::<bool>(), 0.0f64..=1.0), 1..50), seed in 0u64..1000) {
            let z: Vec<bool> = cells.iter().map(|c| c.0).collect();
            let w: Vec<bool> = cells.iter().map(|c| c.1).collect();
            let gamma: Vec<f64> = cells.iter().map(|c| c.2).collect();
            let g = impute_gtilde(&gamma, &z, &w, &mut stream_rng(seed, 0));
            for i in 0..g.len() {
                prop_assert!(compatible(z[i], w[i]).contains(&g[i]));
            }
        }
    }

    fn toy(n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = stream_rng(seed, 5);
        let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let mut z = Vec::new();
        let mut w = Vec::new();
        let mut y = Vec::new();
        for &xi in &x {
            let zi = rng.gen::<f64>() < 0.5;
            let u: f64 = rng.gen();
            let g = if u < 0.5 { Stratum::Complier } else if u < 0.75 { Stratum::AlwaysTaker } else { Stratum::NeverTaker };
            let wi = match g {
                Stratum::Complier => zi,
                Stratum::AlwaysTaker => true,
                Stratum::NeverTaker => false,
            };
            z.push(zi);
            w.push(wi);
            y.push(rng.gen::<f64>() < 0.3 + 0.3 * xi + if wi { 0.2 } else { 0.0 });
        }
        let cov = Covariates::from_columns(vec![(CovariateInfo { name: "x".into(), kind: Kind::Continuous, transform: None }, x)]);
        Dataset::new(cov, z, w, y).unwrap()
    }

    #[test]
    fn moment_offsets_match_cell_rates() {
        let d = toy(20_000, 1);
        let o = Offsets::method_of_moments(&d);
        assert!((o.pi_c - 0.5).abs() < 0.03);
        assert!((o.pi_a_given_notc - 0.5).abs() < 0.05);
        let p = [o.pi_c, o.pi_a_given_notc, o.omega_1c, o.omega_0c, o.omega_1a, o.omega_0n];
        assert!(p.iter().all(|&v| (OFFSET_FLOOR..=1.0 - OFFSET_FLOOR).contains(&v)));
    }

    #[test]
    fn chains_are_deterministic_and_sized() {
        let d = toy(300, 2);
        let config = RunConfig {
            chains: 2,
            iterations: 6,
            burn_in: 5,
            trees_m: 10,
            propensity_iterations: 10,
            ..Default::default()
        };
        let a = run_chains(&d, &config).unwrap();
        let b = run_chains(&d, &config).unwrap();
        assert_eq!(a.len(), 2);
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.draws.len(), 1);
            assert_eq!(ca.draws, cb.draws);
        }
        assert_ne!(a[0].draws[0].pi_c, a[1].draws[0].pi_c);
        for draw in &a[0].draws {
            for i in 0..d.n() {
                assert!(compatible(d.z[i], d.w[i]).contains(&draw.gtilde[i]));
                let total = draw.pi_c[i] + draw.pi_a(i) + draw.pi_n(i);
                assert!((total - 1.0).abs() <= 1e-15);
            }
        }
        let lin = run_chains(&d, &RunConfig { backend: Backend::Linear, ..config }).unwrap();
        assert!(lin[0].draws[0].propensity_index.is_none());
    }

    #[test]
    fn permanently_empty_arm_is_an_adequacy_error() {
        // Nobody is assigned, so the treated-complier outcome surface never
        // has training units.
        let n = 200;
        let mut rng = stream_rng(3, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let z = vec![false; n];
        let w: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let cov = Covariates::from_columns(vec![(CovariateInfo { name: "x".into(), kind: Kind::Continuous, transform: None }, x)]);
        let d = Dataset::new(cov, z, w, y).unwrap();
        let config = RunConfig { chains: 1, iterations: 4, burn_in: 2, trees_m: 5, propensity_iterations: 4, ..Default::default() };
        match run_chains(&d, &RunConfig { backend: Backend::Linear, ..config.clone() }) {
            Err(Error::Adequacy(msg)) => assert!(msg.contains("omega_1c"), "{msg}"),
            other => panic!("expected adequacy error, got {:?}", other.map(|_| ())),
        }
        assert!(matches!(run_chains(&d, &config), Err(Error::Data(_))));
    }
}
