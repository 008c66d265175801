//! Deterministic synthetic citation-style bundles.
//!
//! Generates homophilous graphs with class-correlated bag-of-words features
//! in the documented bundle layout. The built-in profiles carry the exact
//! node / edge / feature / class cardinalities of the Cora, Citeseer, and
//! Pubmed benchmarks, so split statistics and edge accounting can be
//! exercised end to end without shipping the original datasets. Use
//! `tools/convert_planetoid.py` to build bundles from the real data.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;

use crate::data::{write_bundle, BundleFiles};
use crate::error::Result;
use crate::seed::rng_stream;

const STREAM_LABELS: u64 = 11;
const STREAM_EDGES: u64 = 12;
const STREAM_FEATURES: u64 = 13;

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub name: String,
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub num_edges: usize,
    /// Probability that an edge endpoint is drawn from the same class.
    pub homophily: f64,
    /// Probability that a feature token lands in the class's own block.
    pub signal: f64,
    /// Token draws per node (before collisions).
    pub tokens_per_node: usize,
}

impl SynthSpec {
    pub fn new(
        name: &str,
        num_nodes: usize,
        num_features: usize,
        num_classes: usize,
        num_edges: usize,
    ) -> SynthSpec {
        SynthSpec {
            name: name.to_string(),
            num_nodes,
            num_features,
            num_classes,
            num_edges,
            homophily: 0.88,
            signal: 0.75,
            tokens_per_node: 20,
        }
    }
}

/// The three citation-benchmark shapes.
pub fn citation_profiles() -> Vec<SynthSpec> {
    vec![
        SynthSpec::new("cora", 2708, 1433, 7, 5278),
        SynthSpec::new("citeseer", 3327, 3703, 6, 4552),
        SynthSpec::new("pubmed", 19717, 500, 3, 44324),
    ]
}

/// Generated dataset in memory.
pub struct SynthBundle {
    pub labels: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub features: Vec<f32>,
}

/// Draws labels, a homophilous edge set of the exact requested size, and
/// sparse class-correlated features. Deterministic in (spec, seed).
pub fn generate(spec: &SynthSpec, seed: u64) -> SynthBundle {
    let n = spec.num_nodes;
    let c = spec.num_classes;

    let mut label_rng = rng_stream(seed, STREAM_LABELS);
    let labels: Vec<usize> = (0..n).map(|_| label_rng.gen_range(0..c)).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (node, &label) in labels.iter().enumerate() {
        by_class[label].push(node);
    }

    let mut edge_rng = rng_stream(seed, STREAM_EDGES);
    let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(spec.num_edges * 2);
    let mut edges = Vec::with_capacity(spec.num_edges);
    let mut attempts = 0usize;
    let max_attempts = spec.num_edges.saturating_mul(200).max(10_000);
    while edges.len() < spec.num_edges && attempts < max_attempts {
        attempts += 1;
        let u = edge_rng.gen_range(0..n);
        let v = if edge_rng.gen::<f64>() < spec.homophily {
            let pool = &by_class[labels[u]];
            pool[edge_rng.gen_range(0..pool.len())]
        } else {
            edge_rng.gen_range(0..n)
        };
        if u == v {
            continue;
        }
        let key = if u < v { (u, v) } else { (v, u) };
        if seen.insert(key) {
            edges.push(key);
        }
    }

    let f = spec.num_features;
    let block = (f / c).max(1);
    let mut feat_rng = rng_stream(seed, STREAM_FEATURES);
    let mut features = vec![0.0f32; n * f];
    for (node, &label) in labels.iter().enumerate() {
        let row = &mut features[node * f..(node + 1) * f];
        for _ in 0..spec.tokens_per_node {
            let dim = if feat_rng.gen::<f64>() < spec.signal {
                let start = label * block;
                start + feat_rng.gen_range(0..block.min(f - start))
            } else {
                feat_rng.gen_range(0..f)
            };
            row[dim] += 1.0;
        }
    }

    SynthBundle {
        labels,
        edges,
        features,
    }
}

/// Generates and writes one bundle directory under `out_dir/<name>`.
pub fn generate_bundle(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<()> {
    let bundle = generate(spec, seed);
    let dir = out_dir.join(&spec.name);
    write_bundle(
        &dir,
        &BundleFiles {
            name: &spec.name,
            num_nodes: spec.num_nodes,
            num_features: spec.num_features,
            num_classes: spec.num_classes,
            features: &bundle.features,
            labels: &bundle.labels,
            edges: &bundle.edges,
            train_mask: None,
            test_mask: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_cardinalities() {
        let spec = SynthSpec::new("tiny", 200, 32, 4, 350);
        let bundle = generate(&spec, 1);
        assert_eq!(bundle.labels.len(), 200);
        assert_eq!(bundle.edges.len(), 350);
        assert_eq!(bundle.features.len(), 200 * 32);
        // no self loops, no duplicates
        let mut seen = HashSet::new();
        for &(u, v) in &bundle.edges {
            assert_ne!(u, v);
            assert!(u < v);
            assert!(seen.insert((u, v)));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = SynthSpec::new("tiny", 100, 16, 3, 150);
        let a = generate(&spec, 9);
        let b = generate(&spec, 9);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.features, b.features);
        let c = generate(&spec, 10);
        assert_ne!(a.edges, c.edges);
    }

    #[test]
    fn edges_are_mostly_homophilous() {
        let spec = SynthSpec::new("tiny", 400, 16, 4, 800);
        let bundle = generate(&spec, 2);
        let same = bundle
            .edges
            .iter()
            .filter(|&&(u, v)| bundle.labels[u] == bundle.labels[v])
            .count();
        let frac = same as f64 / bundle.edges.len() as f64;
        assert!(frac > 0.75, "homophily fraction {frac}");
    }
}
