//! Surrogate regression trees and marginal dependence summaries of fitted
//! surfaces.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::numeric::{norm_quantile_f64, pearson_r2, quantile_sorted, Real};

/// Required improvement in R² for forward selection to add a covariate.
pub const SELECTION_GAIN: f64 = 0.01;
pub const DEEP_MIN_NODE: usize = 5;
pub const SHALLOW_DEPTH: usize = 3;
pub const SHALLOW_MIN_NODE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CartSplit {
    /// Column of the matrix the tree was fit on.
    pub var: usize,
    /// Rows with `x <= cut` go left.
    pub cut: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CartNode {
    pub split: Option<CartSplit>,
    pub left: usize,
    pub right: usize,
    pub mean: f64,
    pub n: usize,
    pub depth: usize,
}

/// Least-squares regression tree grown greedily.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CartTree {
    pub nodes: Vec<CartNode>,
    pub max_depth: Option<usize>,
    pub min_node_size: usize,
    /// Column names of the fitting matrix.
    pub names: Vec<String>,
}

/// Best split of `rows` by SSE reduction, ties to the lowest variable and
/// then the lowest cut. Only splits leaving at least `min_node` rows on each
/// side and strictly reducing SSE qualify.
pub fn best_split<T: Real>(targets: &[f64], x: &Covariates<T>, rows: &[usize], min_node: usize) -> Option<(CartSplit, f64)> {
    let n = rows.len();
    if n < 2 * min_node.max(1) {
        return None;
    }
    let total: f64 = rows.iter().map(|&r| targets[r]).sum();
    let base = total * total / n as f64;
    let mut best: Option<(CartSplit, f64)> = None;
    let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
    for var in 0..x.p() {
        order.clear();
        order.extend(rows.iter().map(|&r| (x.get(r, var).as_f64(), targets[r])));
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite covariates"));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += order[k].1;
            let nl = k + 1;
            if order[k].0 == order[k + 1].0 || nl < min_node || n - nl < min_node {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / (n - nl) as f64 - base;
            if gain > best.map_or(gain_floor(base, total, n), |b| b.1) {
                best = Some((CartSplit { var, cut: order[k].0 }, gain));
            }
        }
    }
    best
}

/// Smallest SSE reduction treated as real rather than rounding noise.
fn gain_floor(base: f64, _total: f64, _n: usize) -> f64 {
    1e-12 * base.abs().max(1.0)
}

impl CartTree {
    pub fn fit<T: Real>(targets: &[f64], x: &Covariates<T>, max_depth: Option<usize>, min_node_size: usize) -> Self {
        assert_eq!(targets.len(), x.n());
        let mut tree = CartTree {
            nodes: Vec::new(),
            max_depth,
            min_node_size,
            names: x.names().into_iter().map(String::from).collect(),
        };
        let rows: Vec<usize> = (0..x.n()).collect();
        tree.grow(targets, x, rows, 0);
        tree
    }

    fn grow<T: Real>(&mut self, targets: &[f64], x: &Covariates<T>, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let mean = if rows.is_empty() { 0.0 } else { rows.iter().map(|&r| targets[r]).sum::<f64>() / rows.len() as f64 };
        self.nodes.push(CartNode { split: None, left: 0, right: 0, mean, n: rows.len(), depth });
        if self.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }
        if let Some((split, _)) = best_split(targets, x, &rows, self.min_node_size) {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&row| x.get(row, split.var).as_f64() <= split.cut);
            drop(rows);
            let left = self.grow(targets, x, l, depth + 1);
            let right = self.grow(targets, x, r, depth + 1);
            let node = &mut self.nodes[id];
            node.split = Some(split);
            node.left = left;
            node.right = right;
        }
        id
    }

    pub fn leaf_of<T: Real>(&self, x: &Covariates<T>, row: usize) -> usize {
        let mut id = 0;
        while let Some(s) = self.nodes[id].split {
            id = if x.get(row, s.var).as_f64() <= s.cut { self.nodes[id].left } else { self.nodes[id].right };
        }
        id
    }

    pub fn predict<T: Real>(&self, x: &Covariates<T>) -> Vec<f64> {
        (0..x.n()).map(|r| self.nodes[self.leaf_of(x, r)].mean).collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].split.is_none()).collect()
    }

    /// Squared Pearson correlation between fitted values and `targets`.
    pub fn r2<T: Real>(&self, targets: &[f64], x: &Covariates<T>) -> f64 {
        pearson_r2(&self.predict(x), targets)
    }

    /// Conditions on the path from the root to each leaf, e.g. `x1 > 0.5 & x2 <= 3`.
    pub fn leaf_descriptions(&self) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::<String>::new())];
        while let Some((id, path)) = stack.pop() {
            match self.nodes[id].split {
                None => out.push((id, if path.is_empty() { "all".to_string() } else { path.join(" & ") })),
                Some(s) => {
                    let name = &self.names[s.var];
                    let mut r = path.clone();
                    r.push(format!("{name} > {}", s.cut));
                    let mut l = path;
                    l.push(format!("{name} <= {}", s.cut));
                    stack.push((self.nodes[id].right, r));
                    stack.push((self.nodes[id].left, l));
                }
            }
        }
        out
    }

    /// Indented text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.text_node(0, 0, &mut out);
        out
    }

    fn text_node(&self, id: usize, indent: usize, out: &mut String) {
        let node = &self.nodes[id];
        let pad = "  ".repeat(indent);
        match node.split {
            None => {
                let _ = writeln!(out, "{pad}leaf {id}: mean {:.4} (n = {})", node.mean, node.n);
            }
            Some(s) => {
                let name = &self.names[s.var];
                let _ = writeln!(out, "{pad}{name} <= {} (n = {})", s.cut, node.n);
                self.text_node(node.left, indent + 1, out);
                let _ = writeln!(out, "{pad}{name} > {}", s.cut);
                self.text_node(node.right, indent + 1, out);
            }
        }
    }

    /// Graphviz rendering.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph surrogate {\n  node [shape=box];\n");
        for (id, node) in self.nodes.iter().enumerate() {
            let label = match node.split {
                None => format!("mean {:.4}\\nn = {}", node.mean, node.n),
                Some(s) => format!("{} <= {}\\nn = {}", self.names[s.var], s.cut, node.n),
            };
            let _ = writeln!(out, "  n{id} [label=\"{label}\"];");
            if node.split.is_some() {
                let _ = writeln!(out, "  n{id} -> n{} [label=\"yes\"];", node.left);
                let _ = writeln!(out, "  n{id} -> n{} [label=\"no\"];", node.right);
            }
        }
        out.push_str("}\n");
        out
    }
}

pub fn fit_cart<T: Real>(targets: &[f64], x: &Covariates<T>, max_depth: Option<usize>, min_node_size: usize) -> CartTree {
    CartTree::fit(targets, x, max_depth, min_node_size)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionStep {
    pub covariate: String,
    pub index: usize,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionTrace {
    pub steps: Vec<SelectionStep>,
    pub status: String,
}

impl SelectionTrace {
    pub fn selected(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.index).collect()
    }
}

/// Forward selection of covariates by the R² of an unbounded-depth tree fit
/// to `predictions`. The first covariate is always taken; later ones only
/// while they raise R² by more than [`SELECTION_GAIN`].
pub fn surrogate_deep_select<T: Real>(predictions: &[f64], x: &Covariates<T>) -> SelectionTrace {
    let first = predictions.first().copied().unwrap_or(0.0);
    if predictions.iter().all(|&p| p == first) {
        return SelectionTrace { steps: Vec::new(), status: "predictions are constant; nothing to explain".into() };
    }
    let names = x.names();
    let mut selected: Vec<usize> = Vec::new();
    let mut steps: Vec<SelectionStep> = Vec::new();
    let mut current = 0.0;
    loop {
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..x.p()).filter(|c| !selected.contains(c)) {
            let mut cols = selected.clone();
            cols.push(cand);
            let sub = x.select_columns(&cols);
            let r2 = fit_cart(predictions, &sub, None, DEEP_MIN_NODE).r2(predictions, &sub);
            if best.map_or(true, |b| r2 > b.1) {
                best = Some((cand, r2));
            }
        }
        let Some((cand, r2)) = best else {
            return SelectionTrace { steps, status: "all covariates selected".into() };
        };
        if !selected.is_empty() && r2 - current <= SELECTION_GAIN {
            return SelectionTrace { steps, status: format!("stopped: best gain {:.4} is not above {SELECTION_GAIN}", r2 - current) };
        }
        selected.push(cand);
        current = current.max(r2);
        steps.push(SelectionStep { covariate: names[cand].to_string(), index: cand, r2: current });
    }
}

/// Depth-3 tree on the selected covariates; its leaves are the segments.
pub fn surrogate_shallow<T: Real>(predictions: &[f64], x: &Covariates<T>, selected: &[usize]) -> Result<CartTree> {
    if selected.is_empty() {
        return Err(Error::usage("shallow surrogate needs at least one selected covariate"));
    }
    let sub = x.select_columns(selected);
    let mut tree = fit_cart(predictions, &sub, Some(SHALLOW_DEPTH), SHALLOW_MIN_NODE);
    // Report splits against the caller's column numbering.
    for node in &mut tree.nodes {
        if let Some(s) = node.split.as_mut() {
            s.var = selected[s.var];
        }
    }
    tree.names = x.names().into_iter().map(String::from).collect();
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub value: f64,
    pub n: usize,
    pub mean: f64,
    pub lo90: f64,
    pub hi90: f64,
    /// Fewer than ten units in the group.
    pub small_cell: bool,
}

/// Per observed value of `group`, the posterior mean and 90% band of the
/// group average of `Φ⁻¹(surface)`. `draws[d][i]` is the surface at unit `i`
/// in draw `d`.
pub fn marginal_dependence<S: Copy + Into<f64>>(draws: &[Vec<S>], group: &[f64]) -> Result<Vec<GroupSummary>> {
    let mut values: Vec<f64> = group.to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite covariate"));
    values.dedup();
    if values.len() < 2 {
        return Err(Error::usage("grouping covariate needs at least two observed values"));
    }
    if draws.is_empty() {
        return Err(Error::Adequacy("no draws to summarize".into()));
    }
    let idx: Vec<usize> = group.iter().map(|g| values.binary_search_by(|v| v.partial_cmp(g).unwrap()).unwrap()).collect();
    let k = values.len();
    let mut counts = vec![0usize; k];
    for &i in &idx {
        counts[i] += 1;
    }
    let mut per_draw: Vec<Vec<f64>> = vec![Vec::with_capacity(draws.len()); k];
    for draw in draws {
        let mut sums = vec![0.0; k];
        for (u, &g) in idx.iter().enumerate() {
            sums[g] += norm_quantile_f64(draw[u].into());
        }
        for g in 0..k {
            per_draw[g].push(sums[g] / counts[g] as f64);
        }
    }
    Ok(values
        .iter()
        .zip(per_draw)
        .zip(&counts)
        .map(|((&value, mut v), &n)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            GroupSummary { value, n, mean, lo90: quantile_sorted(&v, 0.05), hi90: quantile_sorted(&v, 0.95), small_cell: n < 10 }
        })
        .collect())
}
