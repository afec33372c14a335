//! Probit Bayesian additive regression trees.

pub mod moves;
pub mod prior;
pub mod tree;

use rand::Rng;

use crate::data::{Covariates, RunConfig};
use crate::error::{Error, Result};
use crate::numeric::{norm_cdf, norm_quantile, truncated_latent, Real};
use moves::{leaf_value_draw, LeafStats, MoveKernel, MoveKind};
use prior::TreePrior;
use tree::{CutTable, NodeId, Tree};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BartParams {
    pub trees: usize,
    pub k: f64,
    pub prior: TreePrior,
    pub min_node_size: usize,
    pub max_cuts: usize,
}

impl Default for BartParams {
    fn default() -> Self {
        Self { trees: 200, k: 2.0, prior: TreePrior::default(), min_node_size: 5, max_cuts: 100 }
    }
}

impl BartParams {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            trees: c.trees_m,
            k: c.k,
            prior: TreePrior { alpha: c.alpha, beta: c.beta },
            min_node_size: c.min_node_size,
            max_cuts: c.max_cuts,
        }
    }

    /// Leaf prior scale, `3 / (k sqrt(m))`.
    pub fn sigma_mu(&self) -> f64 {
        3.0 / (self.k * (self.trees as f64).sqrt())
    }
}

/// A sum-of-trees model on the probit index scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest<T> {
    pub trees: Vec<Tree<T>>,
    pub offset: T,
    pub sigma_mu: f64,
    pub n_vars: usize,
}

impl<T: Real> Forest<T> {
    /// Latent index `offset + sum of trees` at every row of `x`.
    pub fn predict_index(&self, x: &Covariates<T>) -> Vec<T> {
        let mut out = vec![self.offset; x.n()];
        for tree in &self.trees {
            for (row, o) in out.iter_mut().enumerate() {
                *o += tree.value(tree.find_leaf(x, row));
            }
        }
        out
    }

    pub fn predict_index_row(&self, row: &[T]) -> Result<T> {
        if row.len() != self.n_vars {
            return Err(Error::usage(format!("expected {} covariates, got {}", self.n_vars, row.len())));
        }
        Ok(self.trees.iter().fold(self.offset, |acc, t| acc + t.predict_row(row)))
    }

    pub fn predict_probability(&self, row: &[T]) -> Result<T> {
        self.predict_index_row(row).map(norm_cdf)
    }
}

/// Proposal and acceptance counts per move kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AcceptanceStats {
    pub proposed: [u64; 4],
    pub accepted: [u64; 4],
}

impl AcceptanceStats {
    pub fn rate(&self, kind: MoveKind) -> f64 {
        let i = kind as usize;
        if self.proposed[i] == 0 {
            0.0
        } else {
            self.accepted[i] as f64 / self.proposed[i] as f64
        }
    }
}

/// Gibbs state of one probit BART surface over a fixed covariate matrix.
///
/// The training set is a list of row indices and may change between
/// sweeps. For every row of the matrix (trained on or not) the sampler
/// caches each tree's leaf and the current sum of trees, so predictions at
/// all rows are available without traversal.
#[derive(Debug, Clone)]
pub struct BartSampler<T> {
    params: BartParams,
    cuts: CutTable<T>,
    forest: Forest<T>,
    n: usize,
    rows: Vec<usize>,
    y: Vec<bool>,
    latents: Vec<T>,
    fit: Vec<T>,
    assign: Vec<Vec<NodeId>>,
    stats: AcceptanceStats,
}

impl<T: Real> BartSampler<T> {
    /// Trees start as single zero leaves; cutpoints come from all rows of `x`.
    pub fn new(x: &Covariates<T>, params: BartParams, offset: T) -> Self {
        let sigma_mu = params.sigma_mu();
        let n = x.n();
        Self {
            cuts: CutTable::from_covariates(x, params.max_cuts),
            forest: Forest { trees: vec![Tree::leaf(T::zero()); params.trees], offset, sigma_mu, n_vars: x.p() },
            params,
            n,
            rows: Vec::new(),
            y: Vec::new(),
            latents: Vec::new(),
            fit: vec![T::zero(); n],
            assign: vec![vec![Tree::<T>::ROOT; n]; params.trees],
            stats: AcceptanceStats::default(),
        }
    }

    pub fn forest(&self) -> &Forest<T> {
        &self.forest
    }

    pub fn cuts(&self) -> &CutTable<T> {
        &self.cuts
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn latents(&self) -> &[T] {
        &self.latents
    }

    pub fn acceptance(&self) -> AcceptanceStats {
        self.stats
    }

    pub fn set_offset(&mut self, offset: T) {
        self.forest.offset = offset;
    }

    /// Replace the training set and draw fresh latents for it.
    pub fn set_training<R: Rng + ?Sized>(&mut self, rows: Vec<usize>, y: Vec<bool>, rng: &mut R) {
        assert_eq!(rows.len(), y.len());
        let offset = self.forest.offset;
        self.latents = rows.iter().zip(&y).map(|(&r, &yy)| truncated_latent(rng, offset + self.fit[r], yy)).collect();
        self.rows = rows;
        self.y = y;
    }

    /// One backfitting pass: an MH move and a leaf-value draw for each tree.
    /// Does nothing while the training set is empty.
    pub fn sweep<R: Rng + ?Sized>(&mut self, x: &Covariates<T>, rng: &mut R) {
        debug_assert_eq!(x.n(), self.n);
        if self.rows.is_empty() {
            return;
        }
        for j in 0..self.forest.trees.len() {
            self.update_tree(j, x, rng);
        }
    }

    /// Redraw the truncated-normal latents given the current fit.
    pub fn draw_latents<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let offset = self.forest.offset;
        for ((z, &r), &yy) in self.latents.iter_mut().zip(&self.rows).zip(&self.y) {
            *z = truncated_latent(rng, offset + self.fit[r], yy);
        }
    }

    pub fn iterate<R: Rng + ?Sized>(&mut self, x: &Covariates<T>, rng: &mut R) {
        self.sweep(x, rng);
        self.draw_latents(rng);
    }

    /// Latent index `offset + sum of trees` at every row of the matrix.
    pub fn index_all(&self) -> Vec<T> {
        self.fit.iter().map(|&f| self.forest.offset + f).collect()
    }

    /// Latent index at each training position.
    pub fn training_index(&self) -> Vec<T> {
        self.rows.iter().map(|&r| self.forest.offset + self.fit[r]).collect()
    }

    /// Cached sum of trees at every row.
    pub fn cached_fit(&self) -> &[T] {
        &self.fit
    }

    fn update_tree<R: Rng + ?Sized>(&mut self, j: usize, x: &Covariates<T>, rng: &mut R) {
        let tree = std::mem::replace(&mut self.forest.trees[j], Tree::leaf(T::zero()));
        let mut assign = std::mem::take(&mut self.assign[j]);
        let cap = tree.capacity();
        let old_vals: Vec<T> = (0..cap as NodeId).map(|id| if tree.is_leaf(id) { tree.value(id) } else { T::zero() }).collect();

        // Partial residuals of the training positions with tree j removed.
        let offset = self.forest.offset;
        let pos_assign: Vec<NodeId> = self.rows.iter().map(|&r| assign[r]).collect();
        let partial_res: Vec<f64> = self
            .rows
            .iter()
            .zip(&self.latents)
            .map(|(&r, &z)| (z - offset - self.fit[r] + old_vals[assign[r] as usize]).as_f64())
            .collect();
        let mut sizes = vec![0usize; cap];
        let mut sums = vec![0.0f64; cap];
        for (&a, &pr) in pos_assign.iter().zip(&partial_res) {
            sizes[a as usize] += 1;
            sums[a as usize] += pr;
        }

        let kernel = MoveKernel {
            prior: self.params.prior,
            cuts: &self.cuts,
            tau2: self.forest.sigma_mu * self.forest.sigma_mu,
            min_node_size: self.params.min_node_size,
        };
        let partial = |pos: usize| partial_res[pos];
        let proposal = kernel.propose(rng, &tree, x, &self.rows, &pos_assign, &partial, &sizes, &sums);

        let mut reroute: Option<(NodeId, Vec<bool>)> = None;
        let mut new_tree = match proposal {
            Some(p) => {
                let i = p.kind as usize;
                self.stats.proposed[i] += 1;
                if rng.gen::<f64>().ln() < p.log_ratio {
                    self.stats.accepted[i] += 1;
                    let mut mask = vec![false; cap];
                    for &l in &p.affected {
                        mask[l as usize] = true;
                    }
                    reroute = Some((p.top, mask));
                    sizes = p.sizes;
                    sums = p.sums;
                    p.tree
                } else {
                    tree
                }
            }
            None => tree,
        };

        for leaf in new_tree.leaves() {
            let s = LeafStats { n: sizes[leaf as usize], sum: sums[leaf as usize] };
            new_tree.set_value(leaf, T::of(leaf_value_draw(s, self.forest.sigma_mu, rng)));
        }

        let new_vals: Vec<T> =
            (0..new_tree.capacity() as NodeId).map(|id| if new_tree.is_leaf(id) { new_tree.value(id) } else { T::zero() }).collect();
        match reroute {
            None => {
                let delta: Vec<T> = new_vals.iter().zip(&old_vals).map(|(&n, &o)| n - o).collect();
                for (f, &a) in self.fit.iter_mut().zip(&assign) {
                    *f += delta[a as usize];
                }
            }
            Some((top, mask)) => {
                for (i, (f, a)) in self.fit.iter_mut().zip(assign.iter_mut()).enumerate() {
                    let old = *a as usize;
                    if mask[old] {
                        *a = new_tree.descend(x, i, top);
                    }
                    *f += new_vals[*a as usize] - old_vals[old];
                }
            }
        }
        self.forest.trees[j] = new_tree;
        self.assign[j] = assign;
    }
}

/// Posterior-mean latent index of a probit BART fit of `z` on `x`, with the
/// first half of `iterations` discarded.
pub fn fit_propensity<T: Real, R: Rng + ?Sized>(
    x: &Covariates<T>,
    z: &[bool],
    params: BartParams,
    iterations: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    if z.iter().all(|&v| v == z[0]) {
        return Err(Error::data("assignment has no variation; propensity cannot be estimated"));
    }
    fit_probit_index(x, z, params, iterations, rng)
}

/// Posterior-mean probit index of a BART fit of `y` on `x`, averaged over
/// the second half of `iterations`. `y` must contain both values.
pub fn fit_probit_index<T: Real, R: Rng + ?Sized>(
    x: &Covariates<T>,
    z: &[bool],
    params: BartParams,
    iterations: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    let n1 = z.iter().filter(|&&v| v).count();
    if n1 == 0 || n1 == z.len() {
        return Err(Error::data("binary response has no variation"));
    }
    let rate = n1 as f64 / z.len() as f64;
    let mut s = BartSampler::new(x, params, norm_quantile(T::of(rate)));
    s.set_training((0..z.len()).collect(), z.to_vec(), rng);
    let burn = iterations / 2;
    let mut acc = vec![0.0f64; z.len()];
    for it in 0..iterations {
        s.iterate(x, rng);
        if it >= burn {
            for (a, v) in acc.iter_mut().zip(s.training_index()) {
                *a += v.as_f64();
            }
        }
    }
    let kept = (iterations - burn) as f64;
    Ok(acc.into_iter().map(|a| T::of(a / kept)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateInfo, Kind};
    use crate::numeric::stream_rng;

    fn design(n: usize, seed: u64) -> Covariates<f64> {
        let mut rng = stream_rng(seed, 99);
        let cols = (0..3)
            .map(|c| {
                (
                    CovariateInfo { name: format!("x{c}"), kind: Kind::Continuous, transform: None },
                    (0..n).map(|_| rng.gen::<f64>()).collect(),
                )
            })
            .collect();
        Covariates::from_columns(cols)
    }

    #[test]
    fn sigma_mu_formula() {
        let p = BartParams { trees: 200, k: 2.0, ..Default::default() };
        assert!((p.sigma_mu() - 3.0 / (2.0 * 200f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn bookkeeping_matches_traversal() {
        let x = design(200, 1);
        let y: Vec<bool> = (0..200).map(|i| x.get(i, 0) + 0.3 * x.get(i, 1) > 0.6).collect();
        let mut rng = stream_rng(2, 0);
        let mut s = BartSampler::new(&x, BartParams { trees: 20, ..Default::default() }, 0.1);
        s.set_training((0..200).collect(), y, &mut rng);
        for it in 0..1000 {
            s.iterate(&x, &mut rng);
            if it == 500 {
                // Change the training subset midway.
                let rows: Vec<usize> = (0..200).filter(|i| i % 3 != 0).collect();
                let yy = rows.iter().map(|&i| x.get(i, 2) > 0.5).collect();
                s.set_training(rows, yy, &mut rng);
            }
        }
        let scratch = s.forest().predict_index(&x);
        for (cached, f) in s.index_all().iter().zip(&scratch) {
            assert!((cached - f).abs() < 1e-10);
        }
        let st = s.acceptance();
        assert!(st.proposed.iter().sum::<u64>() > 0 && st.accepted.iter().sum::<u64>() > 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let x = design(100, 3);
        let y: Vec<bool> = (0..100).map(|i| x.get(i, 1) > 0.4).collect();
        let run = || {
            let mut rng = stream_rng(7, 1);
            let mut s = BartSampler::new(&x, BartParams { trees: 10, ..Default::default() }, 0.0);
            s.set_training((0..100).collect(), y.clone(), &mut rng);
            for _ in 0..50 {
                s.iterate(&x, &mut rng);
            }
            s.forest().predict_index(&x)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_tree_recovers_constant_rate() {
        let n = 2000;
        let x = design(n, 4);
        let mut rng = stream_rng(5, 0);
        let y: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.3).collect();
        let phat = y.iter().filter(|&&v| v).count() as f64 / n as f64;
        let mut s = BartSampler::new(&x, BartParams { trees: 1, ..Default::default() }, 0.0);
        s.set_training((0..n).collect(), y, &mut rng);
        let mut acc = 0.0;
        let draws = 1500;
        for it in 0..(draws + 500) {
            s.iterate(&x, &mut rng);
            if it >= 500 {
                acc += s.index_all().iter().map(|&v| norm_cdf(v)).sum::<f64>() / n as f64;
            }
        }
        assert!((acc / draws as f64 - phat).abs() < 0.02);
    }

    #[test]
    fn probability_prediction_checks_dimension() {
        let x = design(20, 6);
        let s = BartSampler::new(&x, BartParams::default(), 0.0);
        assert!(s.forest().predict_probability(&[0.1, 0.2]).is_err());
        assert!((s.forest().predict_probability(&[0.1, 0.2, 0.3]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn propensity_separates_and_rejects_constant_assignment() {
        let n = 2000;
        let x = design(n, 8);
        let mut rng = stream_rng(9, 0);
        let z: Vec<bool> = (0..n).map(|i| x.get(i, 0) > 0.5).collect();
        let params = BartParams { trees: 50, ..Default::default() };
        let e = fit_propensity(&x, &z, params, 200, &mut rng).unwrap();
        // AUC by pair counting.
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if z[i] && !z[j] {
                    pairs += 1.0;
                    wins += if e[i] > e[j] { 1.0 } else if e[i] == e[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!(wins / pairs > 0.95, "auc {}", wins / pairs);
        assert!(matches!(fit_propensity(&x, &vec![true; n], params, 10, &mut rng), Err(Error::Data(_))));
    }
}
