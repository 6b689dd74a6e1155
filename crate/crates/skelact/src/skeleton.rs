//! Skeleton topologies and the joint orders that define skeleton-image columns.
//!
//! A topology is a rooted tree over joints with an explicit child order. Two
//! column orders are derived from it: a plain chain (any permutation of the
//! joints) and the depth-first Euler tour, in which every pair of neighbouring
//! columns is an edge of the tree.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("invalid topology: {0}")]
    InvalidTopology(ValidationReport),
    #[error("joint id {0} out of range 1..={1}")]
    UnknownJoint(usize, usize),
    #[error("not a permutation of 1..={expected}: {reason}")]
    NotAPermutation { expected: usize, reason: String },
    #[error("failed to read topology file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse topology file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown builtin topology id {0:?}")]
    UnknownBuiltin(String),
}

/// 1-based index into a topology's joint list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JointId(pub usize);

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderKind {
    Chain,
    EulerTour,
}

/// A column order for skeleton images. Euler tours repeat joints; chains do not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointOrder {
    pub order: Vec<JointId>,
    pub kind: OrderKind,
}

impl JointOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().map(|j| j.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyViolation {
    BadRoot { root: usize, joint_count: usize },
    UnknownJoint { joint: usize },
    DuplicateChild { parent: usize, child: usize },
    MultipleParents { joint: usize },
    Cycle { joint: usize },
    Disconnected { joint: usize },
    WrongEdgeCount { expected: usize, found: usize },
}

impl fmt::Display for TopologyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadRoot { root, joint_count } => {
                write!(f, "root {root} outside 1..={joint_count}")
            }
            Self::UnknownJoint { joint } => write!(f, "child id {joint} names no joint"),
            Self::DuplicateChild { parent, child } => {
                write!(f, "joint {child} listed twice under parent {parent}")
            }
            Self::MultipleParents { joint } => write!(f, "joint {joint} has more than one parent"),
            Self::Cycle { joint } => write!(f, "cycle through joint {joint}"),
            Self::Disconnected { joint } => write!(f, "joint {joint} unreachable from the root"),
            Self::WrongEdgeCount { expected, found } => {
                write!(f, "expected {expected} edges, found {found}")
            }
        }
    }
}

/// Report-style result of `validate_topology`; ok iff no violations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<TopologyViolation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Rooted tree of joints with ordered children. Child order is part of the
/// definition: it fixes the Euler tour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    pub name: String,
    pub joint_names: Vec<String>,
    pub root: JointId,
    children: Vec<Vec<usize>>, // indexed by joint id - 1, values are 1-based ids
}

#[derive(Deserialize)]
struct TopologyFile {
    name: String,
    joint_names: Vec<String>,
    root: usize,
    children: HashMap<String, Vec<usize>>,
}

impl SkeletonTopology {
    pub fn new(
        name: impl Into<String>,
        joint_names: Vec<String>,
        root: usize,
        children_map: &HashMap<usize, Vec<usize>>,
    ) -> Self {
        let n = joint_names.len();
        let mut children = vec![Vec::new(); n];
        for (&parent, kids) in children_map {
            if parent >= 1 && parent <= n {
                children[parent - 1] = kids.clone();
            } else {
                // keep the bad entry visible to validate() by storing it nowhere;
                // a parent outside the joint range means its kids are unreachable,
                // which validate() reports as disconnection.
            }
        }
        Self {
            name: name.into(),
            joint_names,
            root: JointId(root),
            children,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, SkeletonError> {
        let file: TopologyFile = serde_json::from_str(text)?;
        let mut map = HashMap::new();
        for (k, v) in file.children {
            let parent: usize = k
                .parse()
                .map_err(|_| SkeletonError::UnknownJoint(0, file.joint_names.len()))?;
            map.insert(parent, v);
        }
        Ok(Self::new(file.name, file.joint_names, file.root, &map))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Topologies shipped with the crate: `ntu25`, `sbu15`, `openpose18`.
    pub fn builtin(id: &str) -> Result<&'static SkeletonTopology, SkeletonError> {
        static NTU25: OnceLock<SkeletonTopology> = OnceLock::new();
        static SBU15: OnceLock<SkeletonTopology> = OnceLock::new();
        static OPENPOSE18: OnceLock<SkeletonTopology> = OnceLock::new();
        match id {
            "ntu25" => Ok(NTU25.get_or_init(|| {
                Self::from_json_str(include_str!("../data/ntu25.json")).expect("shipped ntu25")
            })),
            "sbu15" => Ok(SBU15.get_or_init(|| {
                Self::from_json_str(include_str!("../data/sbu15.json")).expect("shipped sbu15")
            })),
            "openpose18" => Ok(OPENPOSE18.get_or_init(|| {
                Self::from_json_str(include_str!("../data/openpose18.json"))
                    .expect("shipped openpose18")
            })),
            other => Err(SkeletonError::UnknownBuiltin(other.to_string())),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn children_of(&self, joint: JointId) -> &[usize] {
        &self.children[joint.0 - 1]
    }

    /// True if {a, b} is an edge of the tree (either direction).
    pub fn is_edge(&self, a: usize, b: usize) -> bool {
        let n = self.joint_count();
        if a < 1 || a > n || b < 1 || b > n {
            return false;
        }
        self.children[a - 1].contains(&b) || self.children[b - 1].contains(&a)
    }

    /// Checks the tree invariants and lists every violation found.
    pub fn validate(&self) -> ValidationReport {
        let n = self.joint_count();
        let mut report = ValidationReport::default();
        if self.root.0 < 1 || self.root.0 > n {
            report.violations.push(TopologyViolation::BadRoot {
                root: self.root.0,
                joint_count: n,
            });
            return report;
        }

        let mut edge_count = 0usize;
        let mut parent_count = vec![0usize; n + 1];
        for (idx, kids) in self.children.iter().enumerate() {
            let parent = idx + 1;
            let mut seen = Vec::new();
            for &child in kids {
                if child < 1 || child > n {
                    report
                        .violations
                        .push(TopologyViolation::UnknownJoint { joint: child });
                    continue;
                }
                if seen.contains(&child) {
                    report
                        .violations
                        .push(TopologyViolation::DuplicateChild { parent, child });
                    continue;
                }
                seen.push(child);
                parent_count[child] += 1;
                edge_count += 1;
            }
        }
        for joint in 1..=n {
            if parent_count[joint] > 1 {
                report
                    .violations
                    .push(TopologyViolation::MultipleParents { joint });
            }
        }
        if edge_count != n - 1 {
            report.violations.push(TopologyViolation::WrongEdgeCount {
                expected: n - 1,
                found: edge_count,
            });
        }

        // Walk from the root; a revisit is a cycle, anything never reached is
        // disconnected.
        let mut visited = vec![false; n + 1];
        let mut stack = vec![self.root.0];
        while let Some(joint) = stack.pop() {
            if visited[joint] {
                report.violations.push(TopologyViolation::Cycle { joint });
                continue;
            }
            visited[joint] = true;
            for &child in &self.children[joint - 1] {
                if child >= 1 && child <= n {
                    stack.push(child);
                }
            }
        }
        for joint in 1..=n {
            if !visited[joint] {
                report
                    .violations
                    .push(TopologyViolation::Disconnected { joint });
            }
        }
        report
    }

    /// Depth-first Euler tour: emit the node, then for each child in declared
    /// order recurse and emit the node again. Length is 2·(joints − 1) + 1.
    pub fn euler_tour(&self) -> Result<JointOrder, SkeletonError> {
        let report = self.validate();
        if !report.is_ok() {
            return Err(SkeletonError::InvalidTopology(report));
        }
        let mut order = Vec::with_capacity(2 * self.joint_count() - 1);
        self.tour_from(self.root.0, &mut order);
        Ok(JointOrder {
            order,
            kind: OrderKind::EulerTour,
        })
    }

    fn tour_from(&self, joint: usize, out: &mut Vec<JointId>) {
        out.push(JointId(joint));
        for &child in &self.children[joint - 1] {
            self.tour_from(child, out);
            out.push(JointId(joint));
        }
    }

    /// Wraps a permutation of all joints as a chain-kind order.
    pub fn chain_order(&self, perm: &[usize]) -> Result<JointOrder, SkeletonError> {
        let n = self.joint_count();
        if perm.len() != n {
            return Err(SkeletonError::NotAPermutation {
                expected: n,
                reason: format!("length {} != {}", perm.len(), n),
            });
        }
        let mut seen = vec![false; n + 1];
        for &id in perm {
            if id < 1 || id > n {
                return Err(SkeletonError::NotAPermutation {
                    expected: n,
                    reason: format!("id {id} out of range"),
                });
            }
            if seen[id] {
                return Err(SkeletonError::NotAPermutation {
                    expected: n,
                    reason: format!("id {id} repeated"),
                });
            }
            seen[id] = true;
        }
        Ok(JointOrder {
            order: perm.iter().map(|&id| JointId(id)).collect(),
            kind: OrderKind::Chain,
        })
    }

    /// Identity chain 1..=joint_count.
    pub fn identity_chain(&self) -> JointOrder {
        let perm: Vec<usize> = (1..=self.joint_count()).collect();
        self.chain_order(&perm).expect("identity is a permutation")
    }
}

/// Fraction of consecutive pairs in `order` that are edges of `topology`
/// (repeated ids count as adjacent). An order of length 1 is vacuously 1.0.
pub fn adjacency_fraction(
    order: &JointOrder,
    topology: &SkeletonTopology,
) -> Result<f64, SkeletonError> {
    let n = topology.joint_count();
    for id in order.ids() {
        if id < 1 || id > n {
            return Err(SkeletonError::UnknownJoint(id, n));
        }
    }
    if order.len() < 2 {
        return Ok(1.0);
    }
    let pairs = order.len() - 1;
    let mut adjacent = 0usize;
    for window in order.order.windows(2) {
        let (a, b) = (window[0].0, window[1].0);
        if a == b || topology.is_edge(a, b) {
            adjacent += 1;
        }
    }
    Ok(adjacent as f64 / pairs as f64)
}

/// The 49-column TSSI order for the NTU 25-joint tree.
pub fn ntu25_tssi_reference() -> Vec<usize> {
    vec![
        2, 21, 3, 4, 3, 21, 5, 6, 7, 8, 22, 23, 22, 8, 7, 6, 5, 21, 9, 10, 11, 12, 24, 25, 24, 12,
        11, 10, 9, 21, 2, 1, 13, 14, 15, 16, 15, 14, 13, 1, 17, 18, 19, 20, 19, 18, 17, 1, 2,
    ]
}

/// Helpers for randomized property tests (also used by the acceptance suite).
pub mod test_util {
    use super::*;
    use rand::prelude::*;

    /// Random rooted tree with `n` nodes and shuffled child orders.
    pub fn random_tree(n: usize, rng: &mut impl Rng) -> SkeletonTopology {
        let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
        // Attach node i to a random earlier node; ids are a random relabeling.
        let mut labels: Vec<usize> = (1..=n).collect();
        labels.shuffle(rng);
        for i in 1..n {
            let parent = labels[rng.gen_range(0..i)];
            children.entry(parent).or_default().push(labels[i]);
        }
        for kids in children.values_mut() {
            kids.shuffle(rng);
        }
        let names = (0..n).map(|i| format!("j{i}")).collect();
        SkeletonTopology::new("random", names, labels[0], &children)
    }
}
