//! Exact greedy tree growth over pre-sorted feature columns.

use rayon::prelude::*;

use super::tree::{Node, Tree};
use super::{split_gain, BoostParams, Dataset};

const UNASSIGNED: u32 = u32::MAX;

/// Row indices sorted by each feature's value, missing values excluded.
pub(crate) struct SortedColumns {
    pub order: Vec<Vec<u32>>,
}

impl SortedColumns {
    pub fn new(data: &Dataset) -> Self {
        let order = (0..data.n_features())
            .map(|f| {
                let mut idx: Vec<u32> = (0..data.n_rows() as u32)
                    .filter(|&r| !data.value(r as usize, f).is_nan())
                    .collect();
                idx.sort_by(|&a, &b| {
                    data.value(a as usize, f)
                        .total_cmp(&data.value(b as usize, f))
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        SortedColumns { order }
    }
}

/// Best split found for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub default_left: bool,
    pub gain: f64,
}

impl SplitCandidate {
    /// Higher gain wins; equal gains go to the lower feature index, then the
    /// smaller threshold.
    fn beats(&self, other: &SplitCandidate) -> bool {
        if self.gain != other.gain {
            return self.gain > other.gain;
        }
        (self.feature, self.threshold) < (other.feature, other.threshold)
    }
}

/// Threshold strictly above `lo` and at most `hi`.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m > lo {
        m
    } else {
        hi
    }
}

struct NodeStats {
    g: f64,
    h: f64,
    n: usize,
}

/// Scans one feature for the best split of the rows with `node_of == node`.
#[allow(clippy::too_many_arguments)]
fn best_for_feature(
    data: &Dataset,
    sorted: &[u32],
    f: usize,
    node_of: &[u32],
    node: u32,
    total: &NodeStats,
    grad: &[f64],
    hess: &[f64],
    params: &BoostParams,
) -> Option<SplitCandidate> {
    let rows: Vec<u32> = sorted.iter().copied().filter(|&r| node_of[r as usize] == node).collect();
    if rows.len() < 2 {
        return None;
    }
    let (g_nm, h_nm) = rows
        .iter()
        .fold((0.0, 0.0), |(g, h), &r| (g + grad[r as usize], h + hess[r as usize]));
    let (g_miss, h_miss) = (total.g - g_nm, total.h - h_nm);
    let has_missing = rows.len() < total.n;

    let mut best: Option<SplitCandidate> = None;
    let (mut gl, mut hl) = (0.0, 0.0);
    for w in 0..rows.len() - 1 {
        let r = rows[w] as usize;
        gl += grad[r];
        hl += hess[r];
        let (x, next) = (data.value(r, f), data.value(rows[w + 1] as usize, f));
        if next <= x {
            continue;
        }
        let (gr, hr) = (g_nm - gl, h_nm - hl);
        let threshold = midpoint(x, next);
        let mut push = |gain: f64, default_left: bool| {
            let cand = SplitCandidate {
                feature: f,
                threshold,
                default_left,
                gain,
            };
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                best = Some(cand);
            }
        };
        if has_missing {
            push(split_gain(gl + g_miss, hl + h_miss, gr, hr, params.l2_reg, params.min_split_gain), true);
            push(split_gain(gl, hl, gr + g_miss, hr + h_miss, params.l2_reg, params.min_split_gain), false);
        } else {
            // Unseen missing values follow the heavier child.
            push(split_gain(gl, hl, gr, hr, params.l2_reg, params.min_split_gain), hl >= hr);
        }
    }
    best
}

/// Best split over all features for one node, or `None` if no candidate has
/// positive gain.
pub(crate) fn find_split(
    data: &Dataset,
    cols: &SortedColumns,
    node_of: &[u32],
    node: u32,
    grad: &[f64],
    hess: &[f64],
    params: &BoostParams,
) -> Option<SplitCandidate> {
    let (g, h, n) = node_of
        .iter()
        .enumerate()
        .filter(|(_, &n)| n == node)
        .fold((0.0, 0.0, 0), |(g, h, n), (r, _)| (g + grad[r], h + hess[r], n + 1));
    let total = NodeStats { g, h, n };
    cols.order
        .par_iter()
        .enumerate()
        .filter_map(|(f, sorted)| best_for_feature(data, sorted, f, node_of, node, &total, grad, hess, params))
        .reduce_with(|a, b| if b.beats(&a) { b } else { a })
        .filter(|c| c.gain > 0.0)
}

/// Grows one tree on the rows flagged in `in_sample`.
pub(crate) fn grow_tree(
    data: &Dataset,
    cols: &SortedColumns,
    grad: &[f64],
    hess: &[f64],
    in_sample: &[bool],
    params: &BoostParams,
) -> Tree {
    let mut node_of: Vec<u32> = in_sample.iter().map(|&s| if s { 0 } else { UNASSIGNED }).collect();
    let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0, cover: 0.0 }];
    // (node id, depth)
    let mut frontier = vec![(0u32, 0usize)];
    while let Some((id, depth)) = frontier.pop() {
        let (g, h) = node_of
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == id)
            .fold((0.0, 0.0), |(g, h), (r, _)| (g + grad[r], h + hess[r]));
        let split = if depth < params.max_depth {
            find_split(data, cols, &node_of, id, grad, hess, params)
        } else {
            None
        };
        let Some(split) = split else {
            nodes[id as usize] = Node::Leaf {
                value: -g / (h + params.l2_reg) * params.learning_rate,
                cover: h,
            };
            continue;
        };
        let (left, right) = (nodes.len() as u32, nodes.len() as u32 + 1);
        nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
        nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
        for (r, n) in node_of.iter_mut().enumerate() {
            if *n != id {
                continue;
            }
            let x = data.value(r, split.feature);
            let go_left = if x.is_nan() { split.default_left } else { x < split.threshold };
            *n = if go_left { left } else { right };
        }
        nodes[id as usize] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            default_left: split.default_left,
            left: left as usize,
            right: right as usize,
            cover: h,
        };
        // Right pushed first so the left subtree is expanded first.
        frontier.push((right, depth + 1));
        frontier.push((left, depth + 1));
    }
    Tree { nodes }
}
