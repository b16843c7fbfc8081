//! Skeleton graph topology: adjacency, degrees, parent map.

use serde::{Deserialize, Serialize};

use super::DataError;

/// Joint adjacency of a skeleton, with per-joint degree and an optional
/// parent map used for bone-stream derivation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub num_joints: usize,
    /// Unordered joint-index pairs, each stored once.
    pub edges: Vec<(usize, usize)>,
    /// Per-joint parent index; the root carries `None`. Forms a forest.
    pub parents: Vec<Option<usize>>,
    /// Per-joint count of incident edges.
    pub degrees: Vec<usize>,
    /// Left/right mirror pairs, used by the horizontal-flip augmentation.
    /// Empty when the skeleton has no lateral symmetry.
    pub symmetric_pairs: Vec<(usize, usize)>,
}

impl SkeletonGraph {
    /// Build a graph from an edge list, deriving degrees and a BFS parent
    /// map rooted at `root`.
    pub fn from_edges(
        num_joints: usize,
        edges: &[(usize, usize)],
        root: usize,
    ) -> Result<Self, DataError> {
        for &(a, b) in edges {
            if a >= num_joints || b >= num_joints {
                return Err(DataError::InvalidGraph(format!(
                    "edge ({a},{b}) out of range for {num_joints} joints"
                )));
            }
        }
        if root >= num_joints {
            return Err(DataError::InvalidGraph(format!(
                "root {root} out of range for {num_joints} joints"
            )));
        }
        let mut degrees = vec![0usize; num_joints];
        let mut neighbors = vec![Vec::new(); num_joints];
        for &(a, b) in edges {
            degrees[a] += 1;
            degrees[b] += 1;
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        // BFS from the root; joints unreachable from it stay parentless,
        // so the map is a forest by construction.
        let mut parents = vec![None; num_joints];
        let mut visited = vec![false; num_joints];
        let mut queue = std::collections::VecDeque::new();
        visited[root] = true;
        queue.push_back(root);
        while let Some(v) = queue.pop_front() {
            for &u in &neighbors[v] {
                if !visited[u] {
                    visited[u] = true;
                    parents[u] = Some(v);
                    queue.push_back(u);
                }
            }
        }
        Ok(Self {
            num_joints,
            edges: edges.to_vec(),
            parents,
            degrees,
            symmetric_pairs: Vec::new(),
        })
    }

    pub fn degree_sum(&self) -> usize {
        self.degrees.iter().sum()
    }
}

/// NTU RGB+D skeleton edges, 1-based joint labels as published with the
/// dataset. Joint 1 is the spine base, joint 21 the spine (degree 4).
const NTU_EDGES_1BASED: [(usize, usize); 24] = [
    (1, 2),
    (2, 21),
    (3, 21),
    (4, 3),
    (5, 21),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 21),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 1),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 1),
    (18, 17),
    (19, 18),
    (20, 19),
    (22, 23),
    (23, 8),
    (24, 25),
    (25, 12),
];

/// Left/right mirror joints (1-based): arms, hands, legs.
const NTU_SYMMETRIC_1BASED: [(usize, usize); 10] = [
    (5, 9),
    (6, 10),
    (7, 11),
    (8, 12),
    (22, 24),
    (23, 25),
    (13, 17),
    (14, 18),
    (15, 19),
    (16, 20),
];

/// Number of joints in the NTU RGB+D skeleton.
pub const NTU_NUM_JOINTS: usize = 25;

/// The standard 25-joint NTU skeleton with its 24 edges and a parent map
/// rooted at the spine base (joint 1, index 0).
pub fn build_ntu_graph() -> SkeletonGraph {
    let edges: Vec<(usize, usize)> = NTU_EDGES_1BASED
        .iter()
        .map(|&(a, b)| (a - 1, b - 1))
        .collect();
    let mut g = SkeletonGraph::from_edges(NTU_NUM_JOINTS, &edges, 0)
        .expect("static NTU edge list is valid");
    g.symmetric_pairs = NTU_SYMMETRIC_1BASED
        .iter()
        .map(|&(a, b)| (a - 1, b - 1))
        .collect();
    g
}
