//! Metropolis–Hastings tree moves with leaf values integrated out.
//!
//! Residuals are on the latent (unit-variance) scale, so a leaf holding `n`
//! partial residuals summing to `S` contributes
//! `-0.5 ln(1 + n τ²) + τ² S² / (2 (1 + n τ²))` to the log marginal
//! likelihood, up to a term shared by all trees.

use rand::Rng;

use super::prior::{draw_rule, TreePrior};
use super::tree::{CutTable, NodeId, Region, SplitRule, Tree};
use crate::data::Covariates;
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
    Swap,
}

impl MoveKind {
    pub const ALL: [MoveKind; 4] = [MoveKind::Grow, MoveKind::Prune, MoveKind::Change, MoveKind::Swap];

    fn weight(self) -> f64 {
        match self {
            MoveKind::Grow => 0.25,
            MoveKind::Prune => 0.25,
            MoveKind::Change => 0.40,
            MoveKind::Swap => 0.10,
        }
    }
}

/// Leaf sufficient statistics: row count and partial-residual sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LeafStats {
    pub n: usize,
    pub sum: f64,
}

impl LeafStats {
    pub fn log_marginal(&self, tau2: f64) -> f64 {
        let a = 1.0 + self.n as f64 * tau2;
        -0.5 * a.ln() + tau2 * self.sum * self.sum / (2.0 * a)
    }
}

/// Number of legal targets of each move kind in a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoveCounts {
    pub growable: usize,
    pub nog: usize,
    pub internal: usize,
    pub swap_pairs: usize,
}

impl MoveCounts {
    fn count(&self, kind: MoveKind) -> usize {
        match kind {
            MoveKind::Grow => self.growable,
            MoveKind::Prune => self.nog,
            MoveKind::Change => self.internal,
            MoveKind::Swap => self.swap_pairs,
        }
    }

    /// Probability of proposing `kind`, renormalized over legal kinds.
    pub fn kind_probability(&self, kind: MoveKind) -> f64 {
        let total: f64 = MoveKind::ALL.iter().filter(|k| self.count(**k) > 0).map(|k| k.weight()).sum();
        if self.count(kind) == 0 || total == 0.0 {
            0.0
        } else {
            kind.weight() / total
        }
    }
}

/// Conjugate draw of a leaf value given its residuals: `Normal(τ²S/(nτ²+1), τ²/(nτ²+1))`,
/// the prior `Normal(0, τ²)` for an empty leaf.
pub fn leaf_value_draw<R: Rng + ?Sized>(stats: LeafStats, sigma_mu: f64, rng: &mut R) -> f64 {
    let tau2 = sigma_mu * sigma_mu;
    let (mean, var) = leaf_posterior(stats, tau2);
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    mean + var.sqrt() * z
}

/// Posterior mean and variance of a leaf value.
pub fn leaf_posterior(stats: LeafStats, tau2: f64) -> (f64, f64) {
    let denom = stats.n as f64 * tau2 + 1.0;
    (tau2 * stats.sum / denom, tau2 / denom)
}

/// Everything the move kernel needs besides the tree and data.
#[derive(Debug, Clone, Copy)]
pub struct MoveKernel<'a, T> {
    pub prior: TreePrior,
    pub cuts: &'a CutTable<T>,
    pub tau2: f64,
    pub min_node_size: usize,
}

/// A proposal that passed the structural checks, with its log acceptance
/// ratio. `sizes`/`sums` describe the proposed tree's leaves.
pub struct Proposal<T> {
    pub kind: MoveKind,
    pub tree: Tree<T>,
    pub log_ratio: f64,
    /// Node below which rows must be re-routed if the move is accepted.
    pub top: NodeId,
    /// Leaves of the current tree whose rows may change leaf.
    pub affected: Vec<NodeId>,
    pub sizes: Vec<usize>,
    pub sums: Vec<f64>,
}

impl<'a, T: Real> MoveKernel<'a, T> {
    pub fn counts(&self, tree: &Tree<T>, sizes: &[usize], regions: &[Region]) -> MoveCounts {
        let leaves = tree.leaves();
        let growable = leaves
            .iter()
            .filter(|&&l| sizes.get(l as usize).copied().unwrap_or(0) >= self.min_node_size && regions[l as usize].has_rules())
            .count();
        let internal = tree.internal_nodes().len();
        MoveCounts { growable, nog: tree.nog_nodes().len(), internal, swap_pairs: tree.swap_pairs().len() }
    }

    fn growable_leaves(&self, tree: &Tree<T>, sizes: &[usize], regions: &[Region]) -> Vec<NodeId> {
        tree.leaves()
            .into_iter()
            .filter(|&l| sizes[l as usize] >= self.min_node_size && regions[l as usize].has_rules())
            .collect()
    }

    fn log_prior(&self, tree: &Tree<T>) -> f64 {
        self.prior.log_prior(tree, self.cuts)
    }

    /// Log acceptance ratio of splitting `leaf` of `tree` with `rule`.
    pub fn log_ratio_grow(
        &self,
        tree: &Tree<T>,
        sizes: &[usize],
        leaf: NodeId,
        rule: SplitRule<T>,
        left: LeafStats,
        right: LeafStats,
    ) -> (f64, Tree<T>, Vec<usize>) {
        let regions = tree.regions(self.cuts);
        let before = self.counts(tree, sizes, &regions);
        let region = &regions[leaf as usize];
        let q_fwd = before.kind_probability(MoveKind::Grow).ln()
            - (before.growable as f64).ln()
            - (region.n_available_vars() as f64).ln()
            - (region.n_cuts(rule.var) as f64).ln();

        let mut grown = tree.clone();
        let (l, r) = grown.grow(leaf, rule, T::zero(), T::zero());
        let mut new_sizes = sizes.to_vec();
        new_sizes.resize(grown.capacity(), 0);
        new_sizes[l as usize] = left.n;
        new_sizes[r as usize] = right.n;
        let after = self.counts(&grown, &new_sizes, &grown.regions(self.cuts));
        let q_rev = after.kind_probability(MoveKind::Prune).ln() - (after.nog as f64).ln();

        let parent = LeafStats { n: left.n + right.n, sum: left.sum + right.sum };
        let d_lik = left.log_marginal(self.tau2) + right.log_marginal(self.tau2) - parent.log_marginal(self.tau2);
        let d_prior = self.log_prior(&grown) - self.log_prior(tree);
        (d_lik + d_prior + q_rev - q_fwd, grown, new_sizes)
    }

    /// Log acceptance ratio of collapsing the leaf children of `node`.
    ///
    /// When the merged leaf is below the minimum node size the current tree
    /// lies outside the sampler's support and the prune is always accepted.
    pub fn log_ratio_prune(
        &self,
        tree: &Tree<T>,
        sizes: &[usize],
        node: NodeId,
        left: LeafStats,
        right: LeafStats,
    ) -> (f64, Tree<T>, Vec<usize>) {
        let regions = tree.regions(self.cuts);
        let before = self.counts(tree, sizes, &regions);
        let q_fwd = before.kind_probability(MoveKind::Prune).ln() - (before.nog as f64).ln();

        let rule = *tree.rule(node).expect("prune target is internal");
        let mut pruned = tree.clone();
        pruned.prune(node, T::zero());
        let mut new_sizes = sizes.to_vec();
        let (l, r) = tree.children(node).unwrap();
        new_sizes[node as usize] = left.n + right.n;
        new_sizes[l as usize] = 0;
        new_sizes[r as usize] = 0;
        if left.n + right.n < self.min_node_size {
            return (f64::INFINITY, pruned, new_sizes);
        }
        let new_regions = pruned.regions(self.cuts);
        let after = self.counts(&pruned, &new_sizes, &new_regions);
        let region = &new_regions[node as usize];
        let q_rev = after.kind_probability(MoveKind::Grow).ln()
            - (after.growable as f64).ln()
            - (region.n_available_vars() as f64).ln()
            - (region.n_cuts(rule.var) as f64).ln();

        let merged = LeafStats { n: left.n + right.n, sum: left.sum + right.sum };
        let d_lik = merged.log_marginal(self.tau2) - left.log_marginal(self.tau2) - right.log_marginal(self.tau2);
        let d_prior = self.log_prior(&pruned) - self.log_prior(tree);
        (d_lik + d_prior + q_rev - q_fwd, pruned, new_sizes)
    }

    /// Propose one move for `tree` given the training assignment and the
    /// per-leaf statistics of the partial residuals. Returns `None` when the
    /// proposal is structurally invalid (empty leaf, rule outside region).
    #[allow(clippy::too_many_arguments)]
    pub fn propose<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        tree: &Tree<T>,
        x: &Covariates<T>,
        rows: &[usize],
        assign: &[NodeId],
        partial: &dyn Fn(usize) -> f64,
        sizes: &[usize],
        sums: &[f64],
    ) -> Option<Proposal<T>> {
        let regions = tree.regions(self.cuts);
        let counts = self.counts(tree, sizes, &regions);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut kind = None;
        for k in MoveKind::ALL {
            let p = counts.kind_probability(k);
            if p > 0.0 {
                acc += p;
                kind = Some(k);
                if u < acc {
                    break;
                }
            }
        }
        let kind = kind?;
        let stats = |id: NodeId| LeafStats { n: sizes[id as usize], sum: sums[id as usize] };

        match kind {
            MoveKind::Grow => {
                let candidates = self.growable_leaves(tree, sizes, &regions);
                let leaf = candidates[rng.gen_range(0..candidates.len())];
                let rule = draw_rule(rng, &regions[leaf as usize], self.cuts)?;
                let (mut left, mut right) = (LeafStats::default(), LeafStats::default());
                for (pos, &a) in assign.iter().enumerate() {
                    if a != leaf {
                        continue;
                    }
                    let r = partial(pos);
                    let goes_left = x.get(rows[pos], rule.var) <= rule.cut;
                    let s = if goes_left { &mut left } else { &mut right };
                    s.n += 1;
                    s.sum += r;
                }
                if left.n == 0 || right.n == 0 {
                    return None;
                }
                let (log_ratio, grown, new_sizes) = self.log_ratio_grow(tree, sizes, leaf, rule, left, right);
                let (l, r) = grown.children(leaf).unwrap();
                let mut new_sums = sums.to_vec();
                new_sums.resize(grown.capacity(), 0.0);
                new_sums[l as usize] = left.sum;
                new_sums[r as usize] = right.sum;
                Some(Proposal { kind, tree: grown, log_ratio, top: leaf, affected: vec![leaf], sizes: new_sizes, sums: new_sums })
            }
            MoveKind::Prune => {
                let nogs = tree.nog_nodes();
                let node = nogs[rng.gen_range(0..nogs.len())];
                let (l, r) = tree.children(node).unwrap();
                let (log_ratio, pruned, new_sizes) = self.log_ratio_prune(tree, sizes, node, stats(l), stats(r));
                let mut new_sums = sums.to_vec();
                new_sums[node as usize] = sums[l as usize] + sums[r as usize];
                new_sums[l as usize] = 0.0;
                new_sums[r as usize] = 0.0;
                Some(Proposal { kind, tree: pruned, log_ratio, top: node, affected: vec![l, r], sizes: new_sizes, sums: new_sums })
            }
            MoveKind::Change => {
                let internal = tree.internal_nodes();
                let node = internal[rng.gen_range(0..internal.len())];
                let old_rule = *tree.rule(node).unwrap();
                let region = &regions[node as usize];
                let new_rule = draw_rule(rng, region, self.cuts)?;
                let mut changed = tree.clone();
                changed.set_rule(node, new_rule);
                let q_ratio = (region.n_cuts(new_rule.var) as f64).ln() - (region.n_cuts(old_rule.var) as f64).ln();
                self.restructure(kind, tree, changed, node, q_ratio, x, rows, assign, partial, sizes, sums)
            }
            MoveKind::Swap => {
                let pairs = tree.swap_pairs();
                let (parent, child) = pairs[rng.gen_range(0..pairs.len())];
                let pr = *tree.rule(parent).unwrap();
                let cr = *tree.rule(child).unwrap();
                let mut swapped = tree.clone();
                swapped.set_rule(parent, cr);
                swapped.set_rule(child, pr);
                self.restructure(kind, tree, swapped, parent, 0.0, x, rows, assign, partial, sizes, sums)
            }
        }
    }

    /// Shared tail of change and swap: the tree shape is unchanged but rows
    /// below `top` are re-routed.
    #[allow(clippy::too_many_arguments)]
    fn restructure(
        &self,
        kind: MoveKind,
        tree: &Tree<T>,
        proposed: Tree<T>,
        top: NodeId,
        log_q_ratio: f64,
        x: &Covariates<T>,
        rows: &[usize],
        assign: &[NodeId],
        partial: &dyn Fn(usize) -> f64,
        sizes: &[usize],
        sums: &[f64],
    ) -> Option<Proposal<T>> {
        let lp_new = self.log_prior(&proposed);
        if lp_new == f64::NEG_INFINITY {
            return None;
        }
        let affected = tree.subtree_leaves(top);
        let mut in_subtree = vec![false; tree.capacity()];
        for &l in &affected {
            in_subtree[l as usize] = true;
        }
        let mut new_sizes = sizes.to_vec();
        let mut new_sums = sums.to_vec();
        for &l in &affected {
            new_sizes[l as usize] = 0;
            new_sums[l as usize] = 0.0;
        }
        for (pos, &a) in assign.iter().enumerate() {
            if !in_subtree[a as usize] {
                continue;
            }
            let leaf = proposed.descend(x, rows[pos], top);
            new_sizes[leaf as usize] += 1;
            new_sums[leaf as usize] += partial(pos);
        }
        if affected.iter().any(|&l| new_sizes[l as usize] == 0) {
            return None;
        }
        let d_lik: f64 = affected
            .iter()
            .map(|&l| {
                let i = l as usize;
                LeafStats { n: new_sizes[i], sum: new_sums[i] }.log_marginal(self.tau2)
                    - LeafStats { n: sizes[i], sum: sums[i] }.log_marginal(self.tau2)
            })
            .sum();
        let before = self.counts(tree, sizes, &tree.regions(self.cuts));
        let after = self.counts(&proposed, &new_sizes, &proposed.regions(self.cuts));
        let d_kind = after.kind_probability(kind).ln() - before.kind_probability(kind).ln();
        let d_prior = lp_new - self.log_prior(tree);
        Some(Proposal {
            kind,
            tree: proposed,
            log_ratio: d_lik + d_prior + d_kind + log_q_ratio,
            top,
            affected,
            sizes: new_sizes,
            sums: new_sums,
        })
    }
}

/// Log marginal likelihood of `tree` for residuals `resid` at `rows`,
/// computed from scratch (up to the tree-independent constant).
pub fn tree_log_marginal<T: Real>(tree: &Tree<T>, x: &Covariates<T>, rows: &[usize], resid: &[f64], tau2: f64) -> f64 {
    let mut stats = vec![LeafStats::default(); tree.capacity()];
    for (pos, &row) in rows.iter().enumerate() {
        let l = tree.find_leaf(x, row) as usize;
        stats[l].n += 1;
        stats[l].sum += resid[pos];
    }
    tree.leaves().iter().map(|&l| stats[l as usize].log_marginal(tau2)).sum()
}

/// One move of the kernel for a single tree against fixed residuals (leaf
/// values integrated out). Returns the new tree and whether it changed.
pub fn propose_and_accept_move<T: Real, R: Rng + ?Sized>(
    kernel: &MoveKernel<'_, T>,
    tree: &Tree<T>,
    x: &Covariates<T>,
    rows: &[usize],
    resid: &[f64],
    rng: &mut R,
) -> (Tree<T>, bool) {
    let assign: Vec<NodeId> = rows.iter().map(|&r| tree.find_leaf(x, r)).collect();
    let mut sizes = vec![0usize; tree.capacity()];
    let mut sums = vec![0.0; tree.capacity()];
    for (pos, &a) in assign.iter().enumerate() {
        sizes[a as usize] += 1;
        sums[a as usize] += resid[pos];
    }
    let partial = |pos: usize| resid[pos];
    match kernel.propose(rng, tree, x, rows, &assign, &partial, &sizes, &sums) {
        Some(p) if rng.gen::<f64>().ln() < p.log_ratio => (p.tree, true),
        _ => (tree.clone(), false),
    }
}
