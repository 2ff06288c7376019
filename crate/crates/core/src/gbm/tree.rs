use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A tree node. Splits send `value < threshold` left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        #[serde(rename = "f")]
        feature: usize,
        #[serde(rename = "t")]
        threshold: f64,
        #[serde(rename = "l")]
        left: usize,
        #[serde(rename = "r")]
        right: usize,
    },
    Leaf {
        #[serde(rename = "leaf")]
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    /// Leaf value reached by `row`.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature] < threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Checks structural soundness of a deserialized tree.
    pub(crate) fn validate(&self, n_features: usize) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        let n = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Leaf { value } if !value.is_finite() => {
                    return Err(format!("node {i}: non-finite leaf"))
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature >= n_features {
                        return Err(format!("node {i}: feature index {feature} out of range"));
                    }
                    if !threshold.is_finite() {
                        return Err(format!("node {i}: non-finite threshold"));
                    }
                    // Children always follow their parent, which rules out cycles.
                    if left <= i || right <= i || left >= n || right >= n {
                        return Err(format!("node {i}: invalid child index"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-tree growth parameters.
pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    /// Number of rows sent left, i.e. the sorted-rank split position.
    n_left: usize,
    threshold: f64,
}

struct Segment {
    node: usize,
    start: usize,
    end: usize,
    sum: f64,
}

/// Grows one least-squares tree on `residual` over the rows in `sample`.
///
/// `sorted` holds, per feature, the sampled rows ordered by feature value
/// (ties by row index). Splits are found by exact enumeration; among equal
/// gains the lowest feature index and then the lowest rank position win.
pub(crate) fn grow_tree(
    columns: &[Vec<f64>],
    residual: &[f64],
    sample: &[usize],
    mut sorted: Vec<Vec<usize>>,
    params: &GrowParams,
) -> RegressionTree {
    let n_rows = residual.len();
    let mut node_of = vec![usize::MAX; n_rows];
    let mut root_sum = 0.0;
    for &r in sample {
        node_of[r] = 0;
        root_sum += residual[r];
    }
    let mut nodes = vec![Node::Leaf {
        value: root_sum / sample.len() as f64,
    }];
    let mut segments = vec![Segment {
        node: 0,
        start: 0,
        end: sample.len(),
        sum: root_sum,
    }];

    for _depth in 0..params.max_depth {
        if segments.is_empty() {
            break;
        }
        let per_feature: Vec<Vec<Option<Candidate>>> = sorted
            .par_iter()
            .enumerate()
            .map(|(f, order)| {
                segments
                    .iter()
                    .map(|seg| {
                        best_split(
                            f,
                            &columns[f],
                            residual,
                            &order[seg.start..seg.end],
                            seg.sum,
                            params,
                        )
                    })
                    .collect()
            })
            .collect();

        let mut next = Vec::new();
        let mut splits: Vec<(usize, Candidate, usize, usize)> = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            let mut best: Option<Candidate> = None;
            for cands in &per_feature {
                if let Some(c) = cands[s] {
                    if best.is_none_or(|b| c.gain > b.gain) {
                        best = Some(c);
                    }
                }
            }
            let Some(c) = best else { continue };
            let left = nodes.len();
            let right = left + 1;
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[seg.node] = Node::Split {
                feature: c.feature,
                threshold: c.threshold,
                left,
                right,
            };
            splits.push((s, c, left, right));
        }
        if splits.is_empty() {
            break;
        }

        for &(s, c, left, right) in &splits {
            let seg = &segments[s];
            // Route by rank within the winning feature's order.
            let order = &sorted[c.feature][seg.start..seg.end];
            for &r in &order[..c.n_left] {
                node_of[r] = left;
            }
            for &r in &order[c.n_left..] {
                node_of[r] = right;
            }
        }

        let mut buffer = Vec::new();
        for order in sorted.iter_mut() {
            for &(s, _, left, _) in &splits {
                let seg = &segments[s];
                let slice = &mut order[seg.start..seg.end];
                buffer.clear();
                buffer.extend(slice.iter().copied().filter(|&r| node_of[r] == left));
                buffer.extend(slice.iter().copied().filter(|&r| node_of[r] != left));
                slice.copy_from_slice(&buffer);
            }
        }

        // Child sums in ascending row order keep leaf values independent of
        // which feature produced the split.
        let mut child_sum = vec![0.0; nodes.len()];
        let mut child_count = vec![0usize; nodes.len()];
        for &r in sample {
            let n = node_of[r];
            child_sum[n] += residual[r];
            child_count[n] += 1;
        }
        for &(s, c, left, right) in &splits {
            let seg = &segments[s];
            let mid = seg.start + c.n_left;
            for (node, start, end) in [(left, seg.start, mid), (right, mid, seg.end)] {
                let sum = child_sum[node];
                nodes[node] = Node::Leaf {
                    value: sum / child_count[node] as f64,
                };
                next.push(Segment {
                    node,
                    start,
                    end,
                    sum,
                });
            }
        }
        segments = next;
    }

    RegressionTree { nodes }
}

fn best_split(
    feature: usize,
    values: &[f64],
    residual: &[f64],
    order: &[usize],
    total: f64,
    params: &GrowParams,
) -> Option<Candidate> {
    let n = order.len();
    let min_leaf = params.min_samples_leaf.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let parent = total * total / n as f64;
    let mut best: Option<Candidate> = None;
    let mut sum_left = 0.0;
    for i in 0..n - 1 {
        sum_left += residual[order[i]];
        let n_left = i + 1;
        let n_right = n - n_left;
        if n_left < min_leaf {
            continue;
        }
        if n_right < min_leaf {
            break;
        }
        let a = values[order[i]];
        let b = values[order[i + 1]];
        if a >= b {
            continue;
        }
        let sum_right = total - sum_left;
        let gain =
            sum_left * sum_left / n_left as f64 + sum_right * sum_right / n_right as f64 - parent;
        if gain > 0.0 && best.is_none_or(|c| gain > c.gain) {
            best = Some(Candidate {
                gain,
                feature,
                n_left,
                threshold: midpoint(a, b),
            });
        }
    }
    best
}

/// A threshold strictly above `a` and at most `b`.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a / 2.0 + b / 2.0;
    if m > a && m <= b {
        m
    } else {
        b
    }
}
