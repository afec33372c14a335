use rand::Rng;

use super::tree::{CutTable, NodeId, Region, SplitRule, Tree};
use crate::numeric::Real;

/// Prior probability that a node at `depth` is split: `alpha (1 + depth)^-beta`.
pub fn split_probability(depth: u32, alpha: f64, beta: f64) -> f64 {
    alpha * (1.0 + depth as f64).powf(-beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreePrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TreePrior {
    fn default() -> Self {
        Self { alpha: 0.95, beta: 2.0 }
    }
}

impl TreePrior {
    /// Split probability of a node, zero when no rule is available there.
    pub fn split_prob_at(&self, depth: u32, region: &Region) -> f64 {
        if region.has_rules() {
            split_probability(depth, self.alpha, self.beta)
        } else {
            0.0
        }
    }

    /// Log prior mass of the tree structure, `-inf` when a rule falls
    /// outside the region its ancestors leave open.
    pub fn log_prior<T: Real>(&self, tree: &Tree<T>, cuts: &CutTable<T>) -> f64 {
        let mut region = cuts.root_region();
        self.log_prior_node(tree, Tree::<T>::ROOT, &mut region)
    }

    fn log_prior_node<T: Real>(&self, tree: &Tree<T>, id: NodeId, region: &mut Region) -> f64 {
        let depth = tree.depth(id);
        match tree.children(id) {
            None => {
                let p = self.split_prob_at(depth, region);
                (1.0 - p).ln()
            }
            Some((l, r)) => {
                let rule = *tree.rule(id).unwrap();
                if !region.contains(&rule) {
                    return f64::NEG_INFINITY;
                }
                let here = split_probability(depth, self.alpha, self.beta).ln()
                    - (region.n_available_vars() as f64).ln()
                    - (region.n_cuts(rule.var) as f64).ln();
                let saved = region.bounds[rule.var];
                region.bounds[rule.var].1 = rule.cut_index as u32;
                let left = self.log_prior_node(tree, l, region);
                region.bounds[rule.var] = (rule.cut_index as u32 + 1, saved.1);
                let right = self.log_prior_node(tree, r, region);
                region.bounds[rule.var] = saved;
                here + left + right
            }
        }
    }
}

/// Draw a uniformly chosen rule available in `region`, or `None`.
pub fn draw_rule<T: Real, R: Rng + ?Sized>(rng: &mut R, region: &Region, cuts: &CutTable<T>) -> Option<SplitRule<T>> {
    let vars: Vec<usize> = region.available_vars().collect();
    if vars.is_empty() {
        return None;
    }
    let var = vars[rng.gen_range(0..vars.len())];
    let (lo, hi) = region.bounds[var];
    let cut_index = rng.gen_range(lo..hi) as usize;
    Some(SplitRule { var, cut_index, cut: cuts.value(var, cut_index) })
}

/// One draw from the branching-process tree prior. Leaf values are zero.
pub fn sample_prior_tree<T: Real, R: Rng + ?Sized>(rng: &mut R, prior: &TreePrior, cuts: &CutTable<T>) -> Tree<T> {
    let mut tree = Tree::leaf(T::zero());
    let mut stack = vec![(Tree::<T>::ROOT, cuts.root_region())];
    while let Some((id, region)) = stack.pop() {
        let p = prior.split_prob_at(tree.depth(id), &region);
        if p <= 0.0 || rng.gen::<f64>() >= p {
            continue;
        }
        let Some(rule) = draw_rule(rng, &region, cuts) else { continue };
        let (l, r) = tree.grow(id, rule, T::zero(), T::zero());
        stack.push((r, region.right_of(&rule)));
        stack.push((l, region.left_of(&rule)));
    }
    tree
}
