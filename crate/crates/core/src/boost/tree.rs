use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
        /// Hessian sum of the training rows reaching this node.
        cover: f64,
    },
    Split {
        feature: usize,
        /// Rows with `x < threshold` go left.
        threshold: f64,
        /// Direction taken by a missing value.
        default_left: bool,
        left: usize,
        right: usize,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match *self {
            Node::Leaf { cover, .. } | Node::Split { cover, .. } => cover,
        }
    }
}

/// A binary regression tree stored as an arena; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value, cover }],
        }
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn is_leaf_only(&self) -> bool {
        matches!(self.nodes[0], Node::Leaf { .. })
    }

    /// Child taken by `row` at a split node.
    pub fn next(&self, node: usize, row: &[f64]) -> usize {
        match self.nodes[node] {
            Node::Split {
                feature,
                threshold,
                default_left,
                left,
                right,
                ..
            } => {
                let x = row[feature];
                let go_left = if x.is_nan() { default_left } else { x < threshold };
                if go_left {
                    left
                } else {
                    right
                }
            }
            Node::Leaf { .. } => node,
        }
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut at = 0;
        while let Node::Split { .. } = self.nodes[at] {
            at = self.next(at, row);
        }
        at
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    /// Cover-weighted mean leaf value.
    pub fn expected_value(&self) -> f64 {
        let total = self.nodes[0].cover();
        self.nodes
            .iter()
            .filter_map(|n| match *n {
                Node::Leaf { value, cover } => Some(value * cover),
                Node::Split { .. } => None,
            })
            .sum::<f64>()
            / total
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }

    pub fn uses_feature(&self, f: usize) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n, Node::Split { feature, .. } if *feature == f))
    }

    pub fn to_json(&self) -> JsonNode {
        fn build(t: &Tree, at: usize) -> JsonNode {
            match t.nodes[at] {
                Node::Leaf { value, cover } => JsonNode::Leaf { value, cover },
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    cover,
                } => JsonNode::Split {
                    feature,
                    threshold,
                    default_left,
                    cover,
                    left: Box::new(build(t, left)),
                    right: Box::new(build(t, right)),
                },
            }
        }
        build(self, 0)
    }

    pub fn from_json(root: &JsonNode, n_features: usize) -> Result<Self> {
        fn push(nodes: &mut Vec<Node>, n: &JsonNode, n_features: usize) -> Result<usize> {
            let at = nodes.len();
            match n {
                JsonNode::Leaf { value, cover } => {
                    if !value.is_finite() {
                        return Err(Error::UndefinedInput("non-finite leaf value".into()));
                    }
                    nodes.push(Node::Leaf {
                        value: *value,
                        cover: *cover,
                    });
                }
                JsonNode::Split {
                    feature,
                    threshold,
                    default_left,
                    cover,
                    left,
                    right,
                } => {
                    if *feature >= n_features {
                        return Err(Error::UndefinedInput(format!("split on feature {feature} out of range")));
                    }
                    nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
                    let l = push(nodes, left, n_features)?;
                    let r = push(nodes, right, n_features)?;
                    nodes[at] = Node::Split {
                        feature: *feature,
                        threshold: *threshold,
                        default_left: *default_left,
                        left: l,
                        right: r,
                        cover: *cover,
                    };
                }
            }
            Ok(at)
        }
        let mut nodes = Vec::new();
        push(&mut nodes, root, n_features)?;
        Ok(Tree { nodes })
    }
}

/// Nested serialised form of a tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JsonNode {
    Leaf {
        value: f64,
        cover: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        cover: f64,
        left: Box<JsonNode>,
        right: Box<JsonNode>,
    },
}
