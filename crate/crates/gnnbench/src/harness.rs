//! The online-evaluation protocol: pretrain on the induced training
//! subgraph, insert the unseen nodes and edges, then run a bounded number of
//! inference epochs with a freshly initialized optimizer, recording test
//! accuracy before the first and after every inference epoch.
//!
//! Repetitions are independent jobs over immutable shared inputs; each owns
//! its parameters, optimizer state, and tape. Results do not depend on the
//! worker count.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_setting_a, build_setting_b, load_bundle, DatasetBundle, Setting, Split,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{
    forward, graph_support, init_params, GraphSupport, ModelConfig, ModelKind, ModelParams,
};
use crate::seed::{derive_seed, rng_stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Named random streams consumed by a single run.
pub const STREAM_PARAMS: u64 = 1;
pub const STREAM_DROPOUT: u64 = 2;
/// Stream for split construction (per dataset, not per repetition unless
/// split reseeding is requested).
pub const STREAM_SPLIT: u64 = 3;

/// First and second moment estimates per parameter tensor.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.value.rows(), t.value.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Weight decay is coupled L2: it is added
/// to the gradient as wd * param before the moment updates.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameter tensors", params.tensors.len()),
            format!("{} gradients", grads.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, named) in params.tensors.iter_mut().enumerate() {
        let param = &mut named.value;
        let grad = &grads[i];
        if !param.same_shape(grad) {
            return Err(Error::shape(
                "adam_step",
                param.shape_string(),
                grad.shape_string(),
            ));
        }
        let m = self_mut(&mut state.m[i]);
        let v = self_mut(&mut state.v[i]);
        for (((p, g0), mi), vi) in param
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g0 + weight_decay * *p;
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

fn self_mut(t: &mut Tensor) -> &mut [f64] {
    t.values_mut()
}

/// One full-batch epoch: forward in training mode, masked cross-entropy,
/// backward, one Adam step. Returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    config: &ModelConfig,
    params: &mut ModelParams,
    state: &mut AdamState,
    support: &GraphSupport,
    features: &Tensor,
    labels: &Arc<Vec<usize>>,
    mask: &Arc<Vec<usize>>,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    context: &str,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut tape = Tape::new();
    let pass = forward(&mut tape, config, params, support, features, true, rng)?;
    let log_probs = tape.log_softmax_rows(pass.logits);
    let loss_node = tape.masked_nll(log_probs, labels, mask)?;
    let loss = tape.value(loss_node).scalar_value()?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss,
            epoch,
            context: context.to_string(),
        });
    }
    let mut grads = tape.backward(loss_node)?;
    let grad_tensors: Vec<Tensor> = pass
        .params
        .iter()
        .map(|&id| {
            grads.take(id).unwrap_or_else(|| {
                let t = tape.value(id);
                Tensor::zeros(t.rows(), t.cols())
            })
        })
        .collect();
    adam_step(params, &grad_tensors, state, config.learning_rate, config.weight_decay)?;
    Ok(loss)
}

/// Fraction of masked nodes whose argmax logit equals the label. Dropout is
/// off; ties break toward the lowest class index.
pub fn evaluate(
    config: &ModelConfig,
    params: &ModelParams,
    support: &GraphSupport,
    features: &Tensor,
    labels: &[usize],
    mask: &[usize],
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut tape = Tape::new();
    let mut rng = rng_stream(0, 0); // unused: dropout is identity in eval mode
    let pass = forward(&mut tape, config, params, support, features, false, &mut rng)?;
    let logits = tape.value(pass.logits);
    let mut correct = 0usize;
    for &i in mask {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}

/// One cell of the experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub dataset: String,
    pub setting: Setting,
    pub pretrain_epochs: usize,
    pub inference_epochs: usize,
    pub repetitions: usize,
    pub base_seed: u64,
    /// When set, each repetition draws its own split instead of sharing the
    /// per-dataset one.
    pub reseed_splits: bool,
}

impl ExperimentConfig {
    /// Stable identifier used in record files, curve tables, and seeds.
    pub fn id(&self) -> String {
        format!(
            "{}-{}-{}-pre{}",
            self.dataset, self.setting, self.model, self.pretrain_epochs
        )
    }
}

/// Accuracy trajectory of one repetition. `accuracies[0]` is measured after
/// insertion but before the first inference epoch; one more entry follows
/// each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub repetition: usize,
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub pretrain_losses: Vec<f64>,
}

/// Executes the two-phase protocol for one repetition.
///
/// Phase 1 trains `pretrain_epochs` epochs on the subgraph induced by the
/// training nodes, with features and labels restricted through the id
/// remap. Phase 2 inserts the unseen nodes and edges, reinitializes the
/// optimizer, then alternates evaluation and training for
/// `inference_epochs` epochs. Training labels never change; there is no
/// early stopping.
pub fn run_single(
    bundle: &DatasetBundle,
    full_graph: &Graph,
    split: &Split,
    exp: &ExperimentConfig,
    repetition: usize,
) -> Result<RunRecord> {
    let config = ModelConfig::for_dataset(exp.model, &exp.dataset);
    let seed = derive_seed(exp.base_seed, &exp.id(), repetition as u64);
    let mut rng_init = rng_stream(seed, STREAM_PARAMS);
    let mut rng_dropout = rng_stream(seed, STREAM_DROPOUT);

    let num_classes = bundle.num_classes;
    let mut params = init_params(&config, bundle.num_features(), num_classes, &mut rng_init);
    let context = format!("config {} seed {}", exp.id(), seed);

    let labels_full = Arc::new(bundle.labels.clone());
    let train_mask = Arc::new(split.train_nodes.clone());
    let mut pretrain_losses = Vec::with_capacity(exp.pretrain_epochs);

    // Phase 1: the model sees only the training subgraph and its features.
    let phase2_graph = if exp.pretrain_epochs > 0 {
        let (train_graph, remap) = full_graph.induced_subgraph(&split.train_nodes)?;
        let sub_features = bundle.features.gather_rows(remap.kept());
        let sub_labels: Arc<Vec<usize>> =
            Arc::new(remap.kept().iter().map(|&old| bundle.labels[old]).collect());
        let sub_mask: Arc<Vec<usize>> = Arc::new((0..train_graph.num_nodes()).collect());
        let support = graph_support(exp.model, &train_graph);
        let mut adam = AdamState::new(&params);
        for epoch in 0..exp.pretrain_epochs {
            let loss = train_epoch(
                &config,
                &mut params,
                &mut adam,
                &support,
                &sub_features,
                &sub_labels,
                &sub_mask,
                &mut rng_dropout,
                epoch,
                &context,
            )?;
            pretrain_losses.push(loss);
        }
        // The insertion event: unseen nodes and edges join the graph.
        Graph::insert_nodes_edges(&train_graph, full_graph, &remap)?
    } else {
        full_graph.clone()
    };

    // Phase 2: full graph, fresh optimizer, accuracy before the first and
    // after each inference epoch.
    let support = graph_support(exp.model, &phase2_graph);
    let mut adam = AdamState::new(&params);
    debug_assert_eq!(adam.step_count(), 0);
    let mut accuracies = Vec::with_capacity(exp.inference_epochs + 1);
    accuracies.push(evaluate(
        &config,
        &params,
        &support,
        &bundle.features,
        &bundle.labels,
        &split.test_nodes,
    )?);
    for epoch in 0..exp.inference_epochs {
        train_epoch(
            &config,
            &mut params,
            &mut adam,
            &support,
            &bundle.features,
            &labels_full,
            &train_mask,
            &mut rng_dropout,
            exp.pretrain_epochs + epoch,
            &context,
        )?;
        accuracies.push(evaluate(
            &config,
            &params,
            &support,
            &bundle.features,
            &bundle.labels,
            &split.test_nodes,
        )?);
    }

    Ok(RunRecord {
        repetition,
        seed,
        accuracies,
        pretrain_losses,
    })
}

/// On-disk record: one JSON object per line, append-only, safe to
/// concatenate across partial runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_id: String,
    pub model: String,
    pub dataset: String,
    pub setting: Setting,
    pub pretrain_epochs: usize,
    pub repetition: usize,
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub wall_ms: u64,
}

pub fn write_records(out: &mut dyn Write, records: &[ResultRecord]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut *out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::IoAt {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    Ok(records)
}

/// Grid axes. Defaults reproduce the published protocol: five models, three
/// datasets, two settings, pretraining 200 epochs versus none.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub datasets: Vec<String>,
    pub models: Vec<ModelKind>,
    pub settings: Vec<Setting>,
    pub pretrain_options: Vec<usize>,
    pub inference_epochs: usize,
    pub repetitions: usize,
    pub base_seed: u64,
    pub reseed_splits: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            datasets: vec!["cora".into(), "citeseer".into(), "pubmed".into()],
            models: ModelKind::all().to_vec(),
            settings: vec![Setting::A, Setting::B],
            pretrain_options: vec![200, 0],
            inference_epochs: 50,
            repetitions: 100,
            base_seed: 12345,
            reseed_splits: false,
        }
    }
}

/// Enumerates the full cross product, dataset-major then setting, model,
/// pretraining mode.
pub fn enumerate_configs(spec: &GridSpec) -> Vec<ExperimentConfig> {
    let mut configs = Vec::new();
    for dataset in &spec.datasets {
        for &setting in &spec.settings {
            for &model in &spec.models {
                for &pretrain_epochs in &spec.pretrain_options {
                    configs.push(ExperimentConfig {
                        model,
                        dataset: dataset.clone(),
                        setting,
                        pretrain_epochs,
                        inference_epochs: spec.inference_epochs,
                        repetitions: spec.repetitions,
                        base_seed: spec.base_seed,
                        reseed_splits: spec.reseed_splits,
                    });
                }
            }
        }
    }
    configs
}

/// Outcome of a (partial) grid run.
#[derive(Debug, Default, Clone, Copy)]
pub struct RunOutcome {
    pub records: usize,
    pub failures: usize,
}

/// Shared per-dataset state so the bundle is loaded and the splits are
/// built once.
struct DatasetState {
    bundle: Arc<DatasetBundle>,
    graph: Arc<Graph>,
    split_a: Arc<Split>,
    split_b: Arc<Split>,
}

fn dataset_state(data_dir: &Path, dataset: &str, base_seed: u64) -> Result<DatasetState> {
    let bundle = load_bundle(&crate::data::bundle_dir(data_dir, dataset))?;
    let graph = bundle.build_graph()?;
    let split_seed = derive_seed(base_seed, &format!("split:{dataset}"), STREAM_SPLIT);
    let split_a = build_setting_a(&bundle, split_seed)?;
    let split_b = build_setting_b(&split_a);
    Ok(DatasetState {
        bundle: Arc::new(bundle),
        graph: Arc::new(graph),
        split_a: Arc::new(split_a),
        split_b: Arc::new(split_b),
    })
}

/// Runs configurations in order; repetitions of one configuration execute
/// in parallel on a bounded pool. Records stream to `out` per completed
/// configuration, in repetition order, so the byte output is independent of
/// the worker count (modulo the wall-clock field). Per-run failures are
/// logged and the grid continues.
pub fn run_configs(
    data_dir: &Path,
    configs: &[ExperimentConfig],
    workers: usize,
    out: &mut dyn Write,
) -> Result<RunOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter {
            name: "workers",
            reason: e.to_string(),
        })?;

    let mut outcome = RunOutcome::default();
    let mut current: Option<(String, u64, DatasetState)> = None;
    for exp in configs {
        let reload = match &current {
            Some((name, seed, _)) => name != &exp.dataset || *seed != exp.base_seed,
            None => true,
        };
        if reload {
            current = Some((
                exp.dataset.clone(),
                exp.base_seed,
                dataset_state(data_dir, &exp.dataset, exp.base_seed)?,
            ));
        }
        let state = &current.as_ref().expect("loaded above").2;
        let split = match exp.setting {
            Setting::A => Arc::clone(&state.split_a),
            Setting::B => Arc::clone(&state.split_b),
        };

        log::info!(
            "running {} ({} repetitions, {} inference epochs)",
            exp.id(),
            exp.repetitions,
            exp.inference_epochs
        );
        let results: Vec<std::result::Result<ResultRecord, String>> = pool.install(|| {
            (0..exp.repetitions)
                .into_par_iter()
                .map(|rep| {
                    let started = Instant::now();
                    let rep_split: Arc<Split> = if exp.reseed_splits {
                        let seed = derive_seed(
                            exp.base_seed,
                            &format!("split:{}:rep", exp.dataset),
                            rep as u64,
                        );
                        let a = build_setting_a(&state.bundle, seed).map_err(|e| e.to_string());
                        match (a, exp.setting) {
                            (Ok(a), Setting::A) => Arc::new(a),
                            (Ok(a), Setting::B) => Arc::new(build_setting_b(&a)),
                            (Err(e), _) => return Err(e),
                        }
                    } else {
                        Arc::clone(&split)
                    };
                    run_single(&state.bundle, &state.graph, &rep_split, exp, rep)
                        .map(|record| ResultRecord {
                            config_id: exp.id(),
                            model: exp.model.to_string(),
                            dataset: exp.dataset.clone(),
                            setting: exp.setting,
                            pretrain_epochs: exp.pretrain_epochs,
                            repetition: rep,
                            seed: record.seed,
                            accuracies: record.accuracies,
                            wall_ms: started.elapsed().as_millis() as u64,
                        })
                        .map_err(|e| e.to_string())
                })
                .collect()
        });

        let mut batch = Vec::with_capacity(results.len());
        for result in results {
            match result {
                Ok(record) => batch.push(record),
                Err(message) => {
                    log::warn!("repetition failed in {}: {message}", exp.id());
                    outcome.failures += 1;
                }
            }
        }
        write_records(out, &batch)?;
        out.flush()?;
        outcome.records += batch.len();
    }
    Ok(outcome)
}
