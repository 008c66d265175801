//! Dataset bundles on disk and the two train-test settings.
//!
//! A bundle is a plain directory: `meta.json` (counts and optional mask file
//! names), `edges.tsv` (one `u<TAB>v` pair per line, 0-based), `features.bin`
//! (row-major 32-bit little-endian floats), `labels.tsv` (one class id per
//! line), plus optional `train_mask.txt` / `test_mask.txt` (one node id per
//! line). Features are row-normalized to unit L1 norm on load; zero rows are
//! left as zero.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed::rng_stream;
use crate::tensor::Tensor;

const STREAM_SPLIT_TRAIN: u64 = 101;
const STREAM_SPLIT_TEST: u64 = 102;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    name: String,
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_mask: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub num_classes: usize,
    /// n x f, unit L1 rows.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub train_mask: Option<Vec<usize>>,
    pub test_mask: Option<Vec<usize>>,
}

impl DatasetBundle {
    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn build_graph(&self) -> Result<Graph> {
        Graph::build(self.num_nodes(), &self.edges)
    }
}

/// Train-test setting: A is few-many, B the inverted many-few mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setting::A => write!(f, "A"),
            Setting::B => write!(f, "B"),
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Setting::A),
            "B" | "b" => Ok(Setting::B),
            other => Err(format!("unknown setting {other:?}, expected A or B")),
        }
    }
}

/// Node partition for one setting. Train and unseen partition the node set,
/// the test set is contained in the unseen set, and in setting B the test
/// set *is* the unseen set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub setting: Setting,
    pub train_nodes: Vec<usize>,
    pub unseen_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
}

impl Split {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let train: BTreeSet<_> = self.train_nodes.iter().copied().collect();
        let unseen: BTreeSet<_> = self.unseen_nodes.iter().copied().collect();
        if train.len() + unseen.len() != num_nodes || !train.is_disjoint(&unseen) {
            return Err(Error::GraphMismatch(
                "train and unseen must partition the node set".into(),
            ));
        }
        if !self.test_nodes.iter().all(|n| unseen.contains(n)) {
            return Err(Error::GraphMismatch("test must be within unseen".into()));
        }
        if self.setting == Setting::B && self.test_nodes.len() != self.unseen_nodes.len() {
            return Err(Error::GraphMismatch(
                "setting B requires test = unseen".into(),
            ));
        }
        Ok(())
    }
}

/// Published setting-A cardinalities for the three citation benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

pub fn table_split_sizes(dataset: &str) -> Option<SplitSizes> {
    match dataset.to_ascii_lowercase().as_str() {
        "cora" => Some(SplitSizes {
            train: 440,
            test: 1000,
        }),
        "citeseer" => Some(SplitSizes {
            train: 620,
            test: 1000,
        }),
        "pubmed" => Some(SplitSizes {
            train: 560,
            test: 1000,
        }),
        _ => None,
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|_| Error::BundleMissingFile {
        path: path.to_path_buf(),
    })?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::IoAt {
            path: path.to_path_buf(),
            source: e,
        })?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn parse_id(token: &str, path: &Path) -> Result<usize> {
    token.trim().parse::<usize>().map_err(|_| Error::BundleFormat {
        path: path.to_path_buf(),
        reason: format!("expected non-negative integer, found {token:?}"),
    })
}

fn read_mask(path: &Path, num_nodes: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for line in read_lines(path)? {
        let id = parse_id(&line, path)?;
        if id >= num_nodes {
            return Err(Error::NodeOutOfRange {
                id,
                num_nodes,
            });
        }
        ids.push(id);
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|_| Error::BundleMissingFile {
        path: meta_path.clone(),
    })?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| Error::BundleFormat {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;

    let features_path = dir.join("features.bin");
    let bytes = fs::read(&features_path).map_err(|_| Error::BundleMissingFile {
        path: features_path.clone(),
    })?;
    let expected = meta.num_nodes * meta.num_features * 4;
    if bytes.len() != expected {
        return Err(Error::BundleShape {
            path: features_path,
            expected: format!(
                "{} bytes ({} x {} f32)",
                expected, meta.num_nodes, meta.num_features
            ),
            actual: format!("{} bytes", bytes.len()),
        });
    }
    let mut values = Vec::with_capacity(meta.num_nodes * meta.num_features);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let mut features = Tensor::from_vec(meta.num_nodes, meta.num_features, values)?;
    for i in 0..meta.num_nodes {
        let row = features.row_mut(i);
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    let labels_path = dir.join("labels.tsv");
    let label_lines = read_lines(&labels_path)?;
    if label_lines.len() != meta.num_nodes {
        return Err(Error::BundleShape {
            path: labels_path.clone(),
            expected: format!("{} labels", meta.num_nodes),
            actual: format!("{} labels", label_lines.len()),
        });
    }
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for (node, line) in label_lines.iter().enumerate() {
        let label = parse_id(line, &labels_path)?;
        if label >= meta.num_classes {
            return Err(Error::LabelOutOfRange {
                node,
                label,
                num_classes: meta.num_classes,
            });
        }
        labels.push(label);
    }

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for line in read_lines(&edges_path)? {
        let mut parts = line.split('\t');
        let (u, v) = match (parts.next(), parts.next()) {
            (Some(u), Some(v)) => (parse_id(u, &edges_path)?, parse_id(v, &edges_path)?),
            _ => {
                return Err(Error::BundleFormat {
                    path: edges_path.clone(),
                    reason: format!("expected u<TAB>v, found {line:?}"),
                })
            }
        };
        if u >= meta.num_nodes {
            return Err(Error::NodeOutOfRange {
                id: u,
                num_nodes: meta.num_nodes,
            });
        }
        if v >= meta.num_nodes {
            return Err(Error::NodeOutOfRange {
                id: v,
                num_nodes: meta.num_nodes,
            });
        }
        edges.push((u, v));
    }

    let train_mask = meta
        .train_mask
        .as_ref()
        .map(|f| read_mask(&dir.join(f), meta.num_nodes))
        .transpose()?;
    let test_mask = meta
        .test_mask
        .as_ref()
        .map(|f| read_mask(&dir.join(f), meta.num_nodes))
        .transpose()?;

    Ok(DatasetBundle {
        name: meta.name,
        num_classes: meta.num_classes,
        features,
        labels,
        edges,
        train_mask,
        test_mask,
    })
}

/// Everything needed to write a bundle directory.
pub struct BundleFiles<'a> {
    pub name: &'a str,
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub features: &'a [f32],
    pub labels: &'a [usize],
    pub edges: &'a [(usize, usize)],
    pub train_mask: Option<&'a [usize]>,
    pub test_mask: Option<&'a [usize]>,
}

/// Writes a bundle directory in the documented layout.
pub fn write_bundle(dir: &Path, files: &BundleFiles) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        name: files.name.to_string(),
        num_nodes: files.num_nodes,
        num_features: files.num_features,
        num_classes: files.num_classes,
        train_mask: files.train_mask.map(|_| "train_mask.txt".to_string()),
        test_mask: files.test_mask.map(|_| "test_mask.txt".to_string()),
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;

    let mut feat = fs::File::create(dir.join("features.bin"))?;
    let mut buf = Vec::with_capacity(files.features.len() * 4);
    for &v in files.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    feat.write_all(&buf)?;

    let mut labels = String::new();
    for &l in files.labels {
        labels.push_str(&l.to_string());
        labels.push('\n');
    }
    fs::write(dir.join("labels.tsv"), labels)?;

    let mut edges = String::new();
    for &(u, v) in files.edges {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    fs::write(dir.join("edges.tsv"), edges)?;

    let write_mask = |name: &str, mask: &[usize]| -> Result<()> {
        let mut text = String::new();
        for &id in mask {
            text.push_str(&id.to_string());
            text.push('\n');
        }
        fs::write(dir.join(name), text)?;
        Ok(())
    };
    if let Some(mask) = files.train_mask {
        write_mask("train_mask.txt", mask)?;
    }
    if let Some(mask) = files.test_mask {
        write_mask("test_mask.txt", mask)?;
    }
    Ok(())
}

/// Class-stratified sample of `count` nodes: per-class quotas by largest
/// remainder (at most one node from exact proportionality), members drawn
/// uniformly without replacement.
fn stratified_sample(
    labels: &[usize],
    num_classes: usize,
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let n = labels.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (node, &label) in labels.iter().enumerate() {
        by_class[label].push(node);
    }
    let mut quotas: Vec<usize> = Vec::with_capacity(num_classes);
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(num_classes);
    let mut assigned = 0usize;
    for (c, members) in by_class.iter().enumerate() {
        let exact = count as f64 * members.len() as f64 / n as f64;
        let floor = exact.floor() as usize;
        quotas.push(floor);
        assigned += floor;
        fractions.push((c, exact - floor as f64));
    }
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(c, _) in fractions.iter().take(count.saturating_sub(assigned)) {
        quotas[c] += 1;
    }
    let mut sample = Vec::with_capacity(count);
    for (c, members) in by_class.iter().enumerate() {
        let mut pool = members.clone();
        let take = quotas[c].min(pool.len());
        let (chosen, _) = pool.partial_shuffle(rng, take);
        sample.extend_from_slice(chosen);
    }
    sample.sort_unstable();
    sample
}

/// Builds the few-many setting. Predefined bundle masks are honored when
/// present; otherwise the train set is a seeded class-stratified sample of
/// the published size and the test set a uniform sample of the unseen set.
pub fn build_setting_a(bundle: &DatasetBundle, seed: u64) -> Result<Split> {
    let sizes = table_split_sizes(&bundle.name);
    let n = bundle.num_nodes();

    let train_nodes = match &bundle.train_mask {
        Some(mask) => {
            if mask.is_empty() {
                return Err(Error::EmptyNodeSet("train mask"));
            }
            mask.clone()
        }
        None => {
            let sizes = sizes.ok_or_else(|| Error::UnknownSplitSizes(bundle.name.clone()))?;
            if sizes.train >= n {
                return Err(Error::DatasetTooSmall {
                    dataset: bundle.name.clone(),
                    needed: sizes.train + 1,
                    available: n,
                });
            }
            let mut rng = rng_stream(seed, STREAM_SPLIT_TRAIN);
            stratified_sample(&bundle.labels, bundle.num_classes, sizes.train, &mut rng)
        }
    };

    let train_set: BTreeSet<_> = train_nodes.iter().copied().collect();
    let unseen_nodes: Vec<usize> = (0..n).filter(|i| !train_set.contains(i)).collect();
    if unseen_nodes.is_empty() {
        return Err(Error::EmptyNodeSet("unseen nodes"));
    }

    let test_nodes = match &bundle.test_mask {
        Some(mask) => {
            for &id in mask {
                if train_set.contains(&id) {
                    return Err(Error::GraphMismatch(format!(
                        "test mask node {id} is in the train mask"
                    )));
                }
            }
            mask.clone()
        }
        None => {
            let sizes = sizes.ok_or_else(|| Error::UnknownSplitSizes(bundle.name.clone()))?;
            if sizes.test > unseen_nodes.len() {
                return Err(Error::DatasetTooSmall {
                    dataset: bundle.name.clone(),
                    needed: sizes.test,
                    available: unseen_nodes.len(),
                });
            }
            let mut rng = rng_stream(seed, STREAM_SPLIT_TEST);
            let mut pool = unseen_nodes.clone();
            let (chosen, _) = pool.partial_shuffle(&mut rng, sizes.test);
            let mut test: Vec<usize> = chosen.to_vec();
            test.sort_unstable();
            test
        }
    };

    let split = Split {
        setting: Setting::A,
        train_nodes,
        unseen_nodes,
        test_nodes,
    };
    split.validate(n)?;
    Ok(split)
}

/// Mask inversion: the other setting's train set becomes unseen and the
/// whole unseen set is tested.
pub fn build_setting_b(split_a: &Split) -> Split {
    Split {
        setting: match split_a.setting {
            Setting::A => Setting::B,
            Setting::B => Setting::A,
        },
        train_nodes: split_a.unseen_nodes.clone(),
        unseen_nodes: split_a.train_nodes.clone(),
        test_nodes: split_a.train_nodes.clone(),
    }
}

/// Number of edges with both endpoints in the train set, and the rest.
/// The two always sum to the graph's edge count.
pub fn split_edge_stats(graph: &Graph, split: &Split) -> (usize, usize) {
    let mut in_train = vec![false; graph.num_nodes()];
    for &n in &split.train_nodes {
        in_train[n] = true;
    }
    let mut train_edges = 0usize;
    for (u, v) in graph.edges() {
        if in_train[u] && in_train[v] {
            train_edges += 1;
        }
    }
    (train_edges, graph.num_edges() - train_edges)
}

/// Convenience: the bundle directory for `dataset` under `data_dir`.
pub fn bundle_dir(data_dir: &Path, dataset: &str) -> PathBuf {
    data_dir.join(dataset)
}
