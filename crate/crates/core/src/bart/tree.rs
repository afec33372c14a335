use serde::Serialize;

use crate::data::Covariates;
use crate::numeric::Real;

pub type NodeId = u32;

/// Candidate cutpoints per covariate: sorted, distinct observed values,
/// excluding each column's maximum (which would leave the right child
/// empty everywhere). Columns with more distinct values than `max_cuts` are
/// thinned to evenly spaced order statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CutTable<T> {
    cuts: Vec<Vec<T>>,
}

impl<T: Real> CutTable<T> {
    pub fn from_covariates(x: &Covariates<T>, max_cuts: usize) -> Self {
        let cuts = (0..x.p())
            .map(|c| {
                let mut vals: Vec<T> = x.column(c).to_vec();
                vals.sort_by(|a, b| a.partial_cmp(b).expect("finite covariates"));
                vals.dedup();
                vals.pop();
                if vals.len() > max_cuts {
                    let len = vals.len();
                    let mut picked: Vec<T> = (0..max_cuts).map(|k| vals[(k * len) / max_cuts]).collect();
                    picked.dedup();
                    picked
                } else {
                    vals
                }
            })
            .collect();
        Self { cuts }
    }

    /// A table with `counts[v]` equally spaced cuts for variable `v`.
    pub fn uniform(counts: &[usize]) -> Self {
        Self { cuts: counts.iter().map(|&c| (0..c).map(|k| T::of(k as f64)).collect()).collect() }
    }

    pub fn n_vars(&self) -> usize {
        self.cuts.len()
    }

    pub fn count(&self, var: usize) -> usize {
        self.cuts[var].len()
    }

    pub fn value(&self, var: usize, index: usize) -> T {
        self.cuts[var][index]
    }

    /// Full-range region of the root node.
    pub fn root_region(&self) -> Region {
        Region { bounds: self.cuts.iter().map(|c| (0, c.len() as u32)).collect() }
    }
}

/// Per-variable half-open ranges `[lo, hi)` of cut indices still usable at a
/// node, given the rules of its ancestors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub bounds: Vec<(u32, u32)>,
}

impl Region {
    pub fn n_cuts(&self, var: usize) -> usize {
        let (lo, hi) = self.bounds[var];
        hi.saturating_sub(lo) as usize
    }

    pub fn available_vars(&self) -> impl Iterator<Item = usize> + '_ {
        self.bounds.iter().enumerate().filter(|(_, (lo, hi))| hi > lo).map(|(v, _)| v)
    }

    pub fn n_available_vars(&self) -> usize {
        self.available_vars().count()
    }

    pub fn has_rules(&self) -> bool {
        self.bounds.iter().any(|(lo, hi)| hi > lo)
    }

    pub fn contains(&self, rule: &SplitRule<impl Copy>) -> bool {
        let (lo, hi) = self.bounds[rule.var];
        (rule.cut_index as u32) >= lo && (rule.cut_index as u32) < hi
    }

    pub fn left_of(&self, rule: &SplitRule<impl Copy>) -> Region {
        let mut r = self.clone();
        r.bounds[rule.var].1 = rule.cut_index as u32;
        r
    }

    pub fn right_of(&self, rule: &SplitRule<impl Copy>) -> Region {
        let mut r = self.clone();
        r.bounds[rule.var].0 = rule.cut_index as u32 + 1;
        r
    }
}

/// Send `x[var] <= cut` to the left child.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitRule<T> {
    pub var: usize,
    pub cut_index: usize,
    pub cut: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind<T> {
    Leaf { value: T },
    Internal { rule: SplitRule<T>, left: NodeId, right: NodeId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub parent: Option<NodeId>,
    pub depth: u32,
    pub kind: NodeKind<T>,
}

/// Binary regression tree stored in an arena. Slots freed by pruning are
/// reused; `live` marks which slots belong to the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree<T> {
    nodes: Vec<Node<T>>,
    live: Vec<bool>,
    free: Vec<NodeId>,
}

impl<T: Real> Tree<T> {
    pub const ROOT: NodeId = 0;

    pub fn leaf(value: T) -> Self {
        Self {
            nodes: vec![Node { parent: None, depth: 0, kind: NodeKind::Leaf { value } }],
            live: vec![true],
            free: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        debug_assert!(self.live[id as usize]);
        &self.nodes[id as usize]
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id as usize].kind, NodeKind::Leaf { .. })
    }

    pub fn depth(&self, id: NodeId) -> u32 {
        self.nodes[id as usize].depth
    }

    pub fn value(&self, id: NodeId) -> T {
        match self.nodes[id as usize].kind {
            NodeKind::Leaf { value } => value,
            NodeKind::Internal { .. } => panic!("node {id} is not a leaf"),
        }
    }

    pub fn set_value(&mut self, id: NodeId, v: T) {
        match &mut self.nodes[id as usize].kind {
            NodeKind::Leaf { value } => *value = v,
            NodeKind::Internal { .. } => panic!("node {id} is not a leaf"),
        }
    }

    pub fn rule(&self, id: NodeId) -> Option<&SplitRule<T>> {
        match &self.nodes[id as usize].kind {
            NodeKind::Internal { rule, .. } => Some(rule),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn children(&self, id: NodeId) -> Option<(NodeId, NodeId)> {
        match self.nodes[id as usize].kind {
            NodeKind::Internal { left, right, .. } => Some((left, right)),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn set_rule(&mut self, id: NodeId, new_rule: SplitRule<T>) {
        match &mut self.nodes[id as usize].kind {
            NodeKind::Internal { rule, .. } => *rule = new_rule,
            NodeKind::Leaf { .. } => panic!("node {id} is a leaf"),
        }
    }

    /// Live node ids in depth-first (pre-)order.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![Self::ROOT];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Some((l, r)) = self.children(id) {
                stack.push(r);
                stack.push(l);
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.preorder().into_iter().filter(|&id| self.is_leaf(id)).collect()
    }

    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.preorder().into_iter().filter(|&id| !self.is_leaf(id)).collect()
    }

    /// Internal nodes whose two children are leaves (prune candidates).
    pub fn nog_nodes(&self) -> Vec<NodeId> {
        self.internal_nodes()
            .into_iter()
            .filter(|&id| {
                let (l, r) = self.children(id).unwrap();
                self.is_leaf(l) && self.is_leaf(r)
            })
            .collect()
    }

    /// `(parent, child)` pairs of internal nodes (swap candidates).
    pub fn swap_pairs(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for id in self.internal_nodes() {
            let (l, r) = self.children(id).unwrap();
            for c in [l, r] {
                if !self.is_leaf(c) {
                    out.push((id, c));
                }
            }
        }
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    /// Leaves below (or equal to) `id`.
    pub fn subtree_leaves(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            match self.children(n) {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => out.push(n),
            }
        }
        out
    }

    /// Leaf reached by row `row` starting from node `from`.
    #[inline]
    pub fn descend(&self, x: &Covariates<T>, row: usize, from: NodeId) -> NodeId {
        let mut id = from;
        loop {
            match &self.nodes[id as usize].kind {
                NodeKind::Leaf { .. } => return id,
                NodeKind::Internal { rule, left, right } => {
                    id = if x.get(row, rule.var) <= rule.cut { *left } else { *right };
                }
            }
        }
    }

    #[inline]
    pub fn find_leaf(&self, x: &Covariates<T>, row: usize) -> NodeId {
        self.descend(x, row, Self::ROOT)
    }

    pub fn predict_row(&self, row: &[T]) -> T {
        let mut id = Self::ROOT;
        loop {
            match &self.nodes[id as usize].kind {
                NodeKind::Leaf { value } => return *value,
                NodeKind::Internal { rule, left, right } => {
                    id = if row[rule.var] <= rule.cut { *left } else { *right };
                }
            }
        }
    }

    fn alloc(&mut self, node: Node<T>) -> NodeId {
        if let Some(id) = self.free.pop() {
            self.nodes[id as usize] = node;
            self.live[id as usize] = true;
            id
        } else {
            self.nodes.push(node);
            self.live.push(true);
            (self.nodes.len() - 1) as NodeId
        }
    }

    /// Split leaf `id`; returns the new `(left, right)` leaves.
    pub fn grow(&mut self, id: NodeId, rule: SplitRule<T>, left_value: T, right_value: T) -> (NodeId, NodeId) {
        assert!(self.is_leaf(id), "grow on internal node");
        let depth = self.nodes[id as usize].depth + 1;
        let left = self.alloc(Node { parent: Some(id), depth, kind: NodeKind::Leaf { value: left_value } });
        let right = self.alloc(Node { parent: Some(id), depth, kind: NodeKind::Leaf { value: right_value } });
        self.nodes[id as usize].kind = NodeKind::Internal { rule, left, right };
        (left, right)
    }

    /// Collapse the two leaf children of `id` into a leaf with `value`.
    pub fn prune(&mut self, id: NodeId, value: T) {
        let (l, r) = self.children(id).expect("prune on leaf");
        assert!(self.is_leaf(l) && self.is_leaf(r), "prune requires two leaf children");
        for c in [l, r] {
            self.live[c as usize] = false;
            self.free.push(c);
        }
        self.nodes[id as usize].kind = NodeKind::Leaf { value };
    }

    /// Region of every live node, indexed by node id (dead slots get the
    /// root region).
    pub fn regions(&self, cuts: &CutTable<T>) -> Vec<Region> {
        let root = cuts.root_region();
        let mut out = vec![root.clone(); self.nodes.len()];
        let mut stack = vec![Self::ROOT];
        while let Some(id) = stack.pop() {
            if let Some((l, r)) = self.children(id) {
                let rule = *self.rule(id).unwrap();
                out[l as usize] = out[id as usize].left_of(&rule);
                out[r as usize] = out[id as usize].right_of(&rule);
                stack.push(l);
                stack.push(r);
            }
        }
        out
    }

    /// Every rule lies within the region its ancestors leave open.
    pub fn rules_valid(&self, cuts: &CutTable<T>) -> bool {
        let regions = self.regions(cuts);
        self.internal_nodes().into_iter().all(|id| regions[id as usize].contains(self.rule(id).unwrap()))
    }

    /// Indented text rendering.
    pub fn render(&self, names: &[&str]) -> String {
        let mut out = String::new();
        self.render_node(Self::ROOT, names, &mut out);
        out
    }

    fn render_node(&self, id: NodeId, names: &[&str], out: &mut String) {
        let pad = "  ".repeat(self.depth(id) as usize);
        match &self.nodes[id as usize].kind {
            NodeKind::Leaf { value } => out.push_str(&format!("{pad}leaf {value:.6}\n")),
            NodeKind::Internal { rule, left, right } => {
                let name = names.get(rule.var).copied().unwrap_or("?");
                out.push_str(&format!("{pad}{name} <= {}\n", rule.cut));
                self.render_node(*left, names, out);
                out.push_str(&format!("{pad}{name} > {}\n", rule.cut));
                self.render_node(*right, names, out);
            }
        }
    }
}
