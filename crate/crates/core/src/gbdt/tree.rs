//! Regression trees grown by exact greedy search on second-order statistics.

use serde::{Deserialize, Serialize};

use super::GbdtParams;
use crate::features::NUM_FEATURES;

pub type Row = [f64; NUM_FEATURES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        weight: f64,
        grad_sum: f64,
        hess_sum: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Unshrunk leaf weight for `row`.
    pub fn predict(&self, row: &Row) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => idx = if row[*feature] < *threshold { *left } else { *right },
                Node::Leaf { weight, .. } => return *weight,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize) -> usize {
            match &nodes[idx] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf {
                weight,
                grad_sum,
                hess_sum,
            } => Some((*weight, *grad_sum, *hess_sum)),
            Node::Split { .. } => None,
        })
    }

    pub fn split_gains(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { gain, .. } => Some(*gain),
            Node::Leaf { .. } => None,
        })
    }

    /// Checks that every child index exists and every node is reachable once.
    pub fn is_well_formed(&self) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            if idx >= self.nodes.len() || seen[idx] {
                return false;
            }
            seen[idx] = true;
            if let Node::Split { feature, left, right, .. } = &self.nodes[idx] {
                if *feature >= NUM_FEATURES {
                    return false;
                }
                stack.push(*left);
                stack.push(*right);
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Newton step minimising `G·w + ½(H + λ)·w²`.
pub fn leaf_weight(grad_sum: f64, hess_sum: f64, lambda: f64) -> f64 {
    let denom = hess_sum + lambda;
    if denom > 0.0 {
        -grad_sum / denom
    } else {
        0.0
    }
}

/// Reduction in the regularised second-order objective from splitting a node,
/// minus `gamma`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

pub(crate) struct TreeBuilder<'a> {
    rows: &'a [Row],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<Node>,
}

/// Row indices of one node: ascending, and sorted by each feature.
struct NodeRows {
    members: Vec<u32>,
    by_feature: [Vec<u32>; NUM_FEATURES],
}

impl<'a> TreeBuilder<'a> {
    pub(crate) fn new(rows: &'a [Row], grad: &'a [f64], hess: &'a [f64], params: &'a GbdtParams) -> Self {
        Self {
            rows,
            grad,
            hess,
            params,
            nodes: Vec::new(),
        }
    }

    /// `presorted[f]` holds all row indices ordered by feature `f`.
    pub(crate) fn build(mut self, presorted: &[Vec<u32>; NUM_FEATURES]) -> Tree {
        let root = NodeRows {
            members: (0..self.rows.len() as u32).collect(),
            by_feature: presorted.clone(),
        };
        self.grow(root, 0);
        Tree { nodes: self.nodes }
    }

    fn grow(&mut self, node: NodeRows, depth: usize) -> usize {
        let idx = self.nodes.len();
        let (g, h) = node.members.iter().fold((0.0, 0.0), |(g, h), &i| {
            (g + self.grad[i as usize], h + self.hess[i as usize])
        });
        let leaf = Node::Leaf {
            weight: leaf_weight(g, h, self.params.lambda),
            grad_sum: g,
            hess_sum: h,
        };
        self.nodes.push(leaf);
        if depth >= self.params.max_depth || node.members.len() < 2 {
            return idx;
        }
        let Some(best) = self.best_split(&node, g, h) else {
            return idx;
        };

        let rows = self.rows;
        let goes_left = |i: u32| rows[i as usize][best.feature] < best.threshold;
        let split = |v: &[u32]| -> (Vec<u32>, Vec<u32>) { v.iter().partition(|&&i| goes_left(i)) };
        let (ml, mr) = split(&node.members);
        let mut left = NodeRows {
            members: ml,
            by_feature: Default::default(),
        };
        let mut right = NodeRows {
            members: mr,
            by_feature: Default::default(),
        };
        for f in 0..NUM_FEATURES {
            let (l, r) = split(&node.by_feature[f]);
            left.by_feature[f] = l;
            right.by_feature[f] = r;
        }
        drop(node);

        let left_idx = self.grow(left, depth + 1);
        let right_idx = self.grow(right, depth + 1);
        self.nodes[idx] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: left_idx,
            right: right_idx,
            gain: best.gain,
        };
        idx
    }

    /// Highest-gain split over all features and all midpoints between
    /// consecutive distinct values. Only strictly positive gains qualify;
    /// ties keep the earlier (feature, threshold).
    fn best_split(&self, node: &NodeRows, g: f64, h: f64) -> Option<Candidate> {
        let p = self.params;
        let mut best: Option<Candidate> = None;
        for (feature, sorted) in node.by_feature.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in sorted.windows(2) {
                let (i, j) = (w[0] as usize, w[1] as usize);
                gl += self.grad[i];
                hl += self.hess[i];
                let (lo, hi) = (self.rows[i][feature], self.rows[j][feature]);
                if lo >= hi {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl < p.min_child_weight || hr < p.min_child_weight {
                    continue;
                }
                let gain = split_gain(gl, hl, gr, hr, p.lambda, p.gamma);
                if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        gain,
                        feature,
                        threshold: midpoint(lo, hi),
                    });
                }
            }
        }
        best
    }
}

/// A threshold `t` with `lo < t <= hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo && mid.is_finite() {
        mid
    } else {
        hi
    }
}
