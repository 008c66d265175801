//! Symmetrized citation-style graphs and the normalization operators the
//! models consume.
//!
//! Graphs store the undirected adjacency without self-loops; operator
//! builders inject the self-loop and its weight. Degrees therefore match the
//! published edge counts directly, while every normalization uses the
//! self-loop-inclusive degree.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::{EdgeIndex, SparseOperator};

/// Immutable undirected graph in CSR form. No duplicate edges, no stored
/// self-loops; neighbor lists are sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    neighbors: Vec<usize>,
    degrees: Vec<usize>,
}

/// Dense id remap produced by [`Graph::induced_subgraph`].
#[derive(Clone, Debug)]
pub struct Remap {
    old_to_new: Vec<Option<usize>>,
    new_to_old: Vec<usize>,
}

impl Remap {
    pub fn to_new(&self, old: usize) -> Option<usize> {
        self.old_to_new.get(old).copied().flatten()
    }

    pub fn to_old(&self, new: usize) -> usize {
        self.new_to_old[new]
    }

    /// Kept node ids in the full graph, ordered by their new id.
    pub fn kept(&self) -> &[usize] {
        &self.new_to_old
    }

    pub fn len(&self) -> usize {
        self.new_to_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new_to_old.is_empty()
    }
}

impl Graph {
    /// Builds the symmetrized graph: input pairs are treated as undirected,
    /// duplicates collapse, self-loops in the input are dropped.
    pub fn build(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        let mut pairs = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= num_nodes {
                return Err(Error::NodeOutOfRange { id: u, num_nodes });
            }
            if v >= num_nodes {
                return Err(Error::NodeOutOfRange { id: v, num_nodes });
            }
            if u == v {
                continue;
            }
            pairs.push(if u < v { (u, v) } else { (v, u) });
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut degrees = vec![0usize; num_nodes];
        for &(u, v) in &pairs {
            degrees[u] += 1;
            degrees[v] += 1;
        }
        let mut row_offsets = vec![0usize; num_nodes + 1];
        for i in 0..num_nodes {
            row_offsets[i + 1] = row_offsets[i] + degrees[i];
        }
        let mut cursor = row_offsets.clone();
        let mut neighbors = vec![0usize; pairs.len() * 2];
        for &(u, v) in &pairs {
            neighbors[cursor[u]] = v;
            cursor[u] += 1;
            neighbors[cursor[v]] = u;
            cursor[v] += 1;
        }
        for i in 0..num_nodes {
            neighbors[row_offsets[i]..row_offsets[i + 1]].sort_unstable();
        }
        Ok(Graph {
            num_nodes,
            row_offsets,
            neighbors,
            degrees,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn mean_degree(&self) -> f64 {
        if self.num_nodes == 0 {
            return 0.0;
        }
        self.neighbors.len() as f64 / self.num_nodes as f64
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.row_offsets[node]..self.row_offsets[node + 1]]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges with u < v, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| u < v)
                .map(move |&v| (u, v))
        })
    }

    /// Subgraph induced by `keep`: exactly the edges with both endpoints
    /// kept, nodes relabeled densely in the order given.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<(Graph, Remap)> {
        if keep.is_empty() {
            return Err(Error::EmptyNodeSet("induced subgraph"));
        }
        let mut old_to_new = vec![None; self.num_nodes];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.num_nodes {
                return Err(Error::NodeOutOfRange {
                    id: old,
                    num_nodes: self.num_nodes,
                });
            }
            if old_to_new[old].is_some() {
                return Err(Error::InvalidParameter {
                    name: "keep",
                    reason: format!("node {old} listed twice"),
                });
            }
            old_to_new[old] = Some(new);
        }
        let mut edges = Vec::new();
        for (u, v) in self.edges() {
            if let (Some(nu), Some(nv)) = (old_to_new[u], old_to_new[v]) {
                edges.push((nu, nv));
            }
        }
        let graph = Graph::build(keep.len(), &edges)?;
        Ok((
            graph,
            Remap {
                old_to_new,
                new_to_old: keep.to_vec(),
            },
        ))
    }

    /// The insertion event: brings the held-out nodes and edges into a
    /// training subgraph, returning the graph in full-graph ids. Verifies
    /// that `train` really is the subgraph `full` induces under `remap` and
    /// that the edge accounting train + unseen = total holds.
    pub fn insert_nodes_edges(train: &Graph, full: &Graph, remap: &Remap) -> Result<Graph> {
        if remap.len() != train.num_nodes() {
            return Err(Error::GraphMismatch(format!(
                "remap covers {} nodes but training graph has {}",
                remap.len(),
                train.num_nodes()
            )));
        }
        let mut induced_count = 0usize;
        for (u, v) in full.edges() {
            if let (Some(nu), Some(nv)) = (remap.to_new(u), remap.to_new(v)) {
                if !train.has_edge(nu, nv) {
                    return Err(Error::GraphMismatch(format!(
                        "full edge ({u}, {v}) missing from training graph"
                    )));
                }
                induced_count += 1;
            }
        }
        if induced_count != train.num_edges() {
            return Err(Error::GraphMismatch(format!(
                "training graph has {} edges but only {} are induced by the full graph",
                train.num_edges(),
                induced_count
            )));
        }
        Ok(full.clone())
    }
}

/// Symmetric-normalized operator over adjacency plus self-loops: weight of
/// (i, j) is 1 / (sqrt(d_i + 1) * sqrt(d_j + 1)). An isolated node gets a
/// unit self-loop.
pub fn gcn_operator(g: &Graph) -> Arc<SparseOperator> {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt())
        .collect();
    let mut triplets = Vec::with_capacity(g.num_edges() * 2 + n);
    for i in 0..n {
        triplets.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
        for &j in g.neighbors(i) {
            triplets.push((i, j, inv_sqrt[i] * inv_sqrt[j]));
        }
    }
    Arc::new(SparseOperator::from_triplets(n, n, &triplets).expect("valid adjacency triplets"))
}

/// Row-stochastic mean operator over adjacency plus self-loops: weight of
/// (i, j) is 1 / (d_i + 1); every row sums to one.
pub fn sage_mean_operator(g: &Graph) -> Arc<SparseOperator> {
    let n = g.num_nodes();
    let mut triplets = Vec::with_capacity(g.num_edges() * 2 + n);
    for i in 0..n {
        let w = 1.0 / (g.degree(i) + 1) as f64;
        triplets.push((i, i, w));
        for &j in g.neighbors(i) {
            triplets.push((i, j, w));
        }
    }
    Arc::new(SparseOperator::from_triplets(n, n, &triplets).expect("valid adjacency triplets"))
}

/// Directed edge array with both directions of every undirected edge plus
/// one self-loop per node, grouped by destination.
pub fn edge_index_with_self_loops(g: &Graph) -> Arc<EdgeIndex> {
    let n = g.num_nodes();
    let mut pairs = Vec::with_capacity(g.num_edges() * 2 + n);
    for i in 0..n {
        pairs.push((i, i));
        for &j in g.neighbors(i) {
            pairs.push((j, i));
        }
    }
    Arc::new(EdgeIndex::new(n, pairs).expect("valid edge pairs"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn build_dedupes_and_drops_self_loops() {
        let g = Graph::build(2, &[(0, 1), (1, 0), (1, 1)]).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.degrees(), &[1, 1]);
    }

    #[test]
    fn path_degrees() {
        let g = Graph::build(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.degrees(), &[1, 2, 1]);
    }

    #[test]
    fn build_rejects_out_of_range() {
        assert!(matches!(
            Graph::build(2, &[(0, 2)]),
            Err(Error::NodeOutOfRange { .. })
        ));
    }

    #[test]
    fn build_is_idempotent_under_resymmetrization() {
        let g = Graph::build(4, &[(0, 1), (2, 1), (3, 0), (1, 0)]).unwrap();
        let edges: Vec<_> = g.edges().collect();
        let g2 = Graph::build(4, &edges).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn induced_subgraph_full_set_is_identity_up_to_relabeling() {
        let g = Graph::build(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let keep: Vec<usize> = (0..4).collect();
        let (sub, remap) = g.induced_subgraph(&keep).unwrap();
        assert_eq!(sub, g);
        assert_eq!(remap.kept(), &[0, 1, 2, 3]);
    }

    #[test]
    fn induced_subgraph_triangle() {
        let g = Graph::build(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let (sub, _) = g.induced_subgraph(&[0, 1]).unwrap();
        assert_eq!(sub.num_edges(), 1);
    }

    #[test]
    fn induced_subgraph_rejects_empty() {
        let g = Graph::build(2, &[(0, 1)]).unwrap();
        assert!(g.induced_subgraph(&[]).is_err());
    }

    #[test]
    fn insertion_round_trips() {
        let g = Graph::build(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
        let (sub, remap) = g.induced_subgraph(&[1, 2, 4]).unwrap();
        let restored = Graph::insert_nodes_edges(&sub, &g, &remap).unwrap();
        assert_eq!(restored, g);
        // edge accounting
        let train_edges = sub.num_edges();
        let unseen = g.num_edges() - train_edges;
        assert_eq!(train_edges + unseen, g.num_edges());
    }

    #[test]
    fn insertion_into_identical_graph_is_identity() {
        let g = Graph::build(3, &[(0, 1), (1, 2)]).unwrap();
        let keep: Vec<usize> = (0..3).collect();
        let (sub, remap) = g.induced_subgraph(&keep).unwrap();
        let restored = Graph::insert_nodes_edges(&sub, &g, &remap).unwrap();
        assert_eq!(restored, g);
    }

    #[test]
    fn insertion_detects_inconsistency() {
        let g = Graph::build(3, &[(0, 1), (1, 2)]).unwrap();
        let other = Graph::build(2, &[(0, 1)]).unwrap();
        let (_, remap) = g.induced_subgraph(&[0, 2]).unwrap();
        // {0,2} induces no edges, so a graph with an edge is inconsistent
        assert!(Graph::insert_nodes_edges(&other, &g, &remap).is_err());
    }

    /// Dense oracle: D^{-1/2} (A + I) D^{-1/2} with self-loop degrees.
    fn dense_gcn_oracle(g: &Graph) -> Tensor {
        let n = g.num_nodes();
        let mut a = Tensor::zeros(n, n);
        for i in 0..n {
            a.set(i, i, 1.0);
            for &j in g.neighbors(i) {
                a.set(i, j, 1.0);
            }
        }
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let di = (g.degree(i) + 1) as f64;
                let dj = (g.degree(j) + 1) as f64;
                out.set(i, j, a.get(i, j) / (di.sqrt() * dj.sqrt()));
            }
        }
        out
    }

    /// Dense oracle: D^{-1} (A + I) with self-loop degrees.
    fn dense_sage_oracle(g: &Graph) -> Tensor {
        let n = g.num_nodes();
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            let w = 1.0 / (g.degree(i) + 1) as f64;
            out.set(i, i, w);
            for &j in g.neighbors(i) {
                out.set(i, j, w);
            }
        }
        out
    }

    #[test]
    fn gcn_operator_isolated_node() {
        let g = Graph::build(1, &[]).unwrap();
        let op = gcn_operator(&g);
        assert_eq!(op.to_dense().values(), &[1.0]);
    }

    #[test]
    fn gcn_operator_path_and_triangle() {
        let path = Graph::build(2, &[(0, 1)]).unwrap();
        let dense = gcn_operator(&path).to_dense();
        let oracle = dense_gcn_oracle(&path);
        for (a, b) in dense.values().iter().zip(oracle.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        // both nodes have self-loop degree 2 so every weight is 1/2
        assert!(dense.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let tri = Graph::build(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let dense_tri = gcn_operator(&tri).to_dense();
        assert!(dense_tri
            .values()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn sage_operator_star_and_row_sums() {
        let star = Graph::build(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let op = sage_mean_operator(&star);
        let dense = op.to_dense();
        let oracle = dense_sage_oracle(&star);
        for (a, b) in dense.values().iter().zip(oracle.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        for v in dense.row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        for i in 0..4 {
            assert!((op.row_sum(i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn operators_match_dense_oracles_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=32);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.gen::<f64>() < 0.2 {
                        edges.push((u, v));
                    }
                }
            }
            let g = Graph::build(n, &edges).unwrap();
            let gcn = gcn_operator(&g).to_dense();
            let gcn_oracle = dense_gcn_oracle(&g);
            let sage = sage_mean_operator(&g).to_dense();
            let sage_oracle = dense_sage_oracle(&g);
            for (a, b) in gcn.values().iter().zip(gcn_oracle.values()) {
                assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in sage.values().iter().zip(sage_oracle.values()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn edge_index_counts() {
        let single = Graph::build(1, &[]).unwrap();
        let e = edge_index_with_self_loops(&single);
        assert_eq!(e.num_edges(), 1);
        assert_eq!((e.src()[0], e.dst()[0]), (0, 0));

        let path = Graph::build(2, &[(0, 1)]).unwrap();
        let e2 = edge_index_with_self_loops(&path);
        assert_eq!(e2.num_edges(), 4);
        let mut pairs: Vec<_> = e2.src().iter().zip(e2.dst()).collect();
        pairs.sort();
        assert_eq!(pairs, vec![(&0, &0), (&0, &1), (&1, &0), (&1, &1)]);
    }
}
