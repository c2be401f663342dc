use std::collections::VecDeque;

use super::NUM_JOINTS;
use crate::tensor::Tensor;

/// BODY_25 bone list.
pub const BODY25_EDGES: [(usize, usize); 24] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (10, 11),
    (8, 12),
    (12, 13),
    (13, 14),
    (0, 15),
    (15, 17),
    (0, 16),
    (16, 18),
    (14, 19),
    (19, 20),
    (14, 21),
    (11, 22),
    (22, 23),
    (11, 24),
];

/// Joint connectivity: binary adjacency, its symmetric normalization
/// `D^-1/2 (A + I) D^-1/2`, and all-pairs hop distances.
#[derive(Clone, Debug)]
pub struct AdjacencyGraph {
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Tensor,
    pub normalized: Tensor,
    hops: Vec<[u32; NUM_JOINTS]>,
}

pub fn build_adjacency() -> AdjacencyGraph {
    AdjacencyGraph::from_edges(&BODY25_EDGES)
}

impl AdjacencyGraph {
    /// Graph over the 25 joints with an arbitrary undirected edge list.
    pub fn from_edges(edges: &[(usize, usize)]) -> Self {
        build(edges)
    }
}

fn build(edges: &[(usize, usize)]) -> AdjacencyGraph {
    let n = NUM_JOINTS;
    let mut a = vec![0.0; n * n];
    for &(i, j) in edges {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let degree: Vec<f64> = (0..n)
        .map(|i| 1.0 + a[i * n..(i + 1) * n].iter().sum::<f64>())
        .collect();
    let mut norm = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let aij = a[i * n + j] + if i == j { 1.0 } else { 0.0 };
            norm[i * n + j] = aij / (degree[i].sqrt() * degree[j].sqrt());
        }
    }
    let neighbours = neighbour_lists(edges);
    let hops = (0..n).map(|s| bfs_hops(&neighbours, s)).collect();
    AdjacencyGraph {
        edges: edges.to_vec(),
        adjacency: Tensor::from_parts(vec![n, n], a),
        normalized: Tensor::from_parts(vec![n, n], norm),
        hops,
    }
}

fn neighbour_lists(edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut nb = vec![Vec::new(); NUM_JOINTS];
    for &(i, j) in edges {
        nb[i].push(j);
        nb[j].push(i);
    }
    nb
}

fn bfs_hops(neighbours: &[Vec<usize>], source: usize) -> [u32; NUM_JOINTS] {
    let mut dist = [u32::MAX; NUM_JOINTS];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for &v in &neighbours[u] {
            if dist[v] == u32::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

impl AdjacencyGraph {
    /// Hop distance between two joints (`u32::MAX` if disconnected).
    pub fn hops(&self, from: usize, to: usize) -> u32 {
        self.hops[from][to]
    }

    pub fn degree(&self, joint: usize) -> usize {
        self.adjacency.data()[joint * NUM_JOINTS..(joint + 1) * NUM_JOINTS]
            .iter()
            .filter(|&&v| v != 0.0)
            .count()
    }
}
