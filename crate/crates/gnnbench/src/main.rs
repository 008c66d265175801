use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use gnnbench::analysis::{emit_outputs, group_by_config, settings_divergence_report, summarize};
use gnnbench::data::{
    build_setting_a, build_setting_b, bundle_dir, load_bundle, split_edge_stats, Setting,
};
use gnnbench::harness::{
    enumerate_configs, read_records, run_configs, ExperimentConfig, GridSpec,
};
use gnnbench::models::ModelKind;

#[derive(Parser)]
#[command(
    name = "gnnbench",
    about = "Pretraining-vs-scratch benchmark for graph neural networks under node/edge insertion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate bundles and print split statistics against the published
    /// benchmark numbers.
    Prepare {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Datasets to check; defaults to cora, citeseer, pubmed.
        #[arg(long = "dataset")]
        datasets: Vec<String>,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
    /// Run one configuration for a number of repetitions.
    Run {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        setting: Setting,
        #[arg(long, default_value_t = 200)]
        pretrain_epochs: usize,
        #[arg(long, default_value_t = 50)]
        inference_epochs: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Output record file (JSON lines), appended to if present.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 0 uses all cores. Results are identical for any
        /// value.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Draw a fresh split per repetition instead of one per dataset.
        #[arg(long, default_value_t = false)]
        reseed_splits: bool,
    },
    /// Run the full sweep: 5 models x 3 datasets x 2 settings x
    /// {pretraining, none} = 60 configurations.
    Grid {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these datasets (repeatable).
        #[arg(long = "dataset")]
        datasets: Vec<String>,
        /// Restrict to these models (repeatable).
        #[arg(long = "model")]
        models: Vec<ModelKind>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 50)]
        inference_epochs: usize,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Only enumerate and print the configurations, do not run.
        #[arg(long, default_value_t = false)]
        dry_run: bool,
    },
    /// Aggregate a record file into curve tables, charts, and the
    /// divergence report.
    Analyze {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Published per-dataset statistics used by `prepare` for validation.
struct TableStats {
    classes: usize,
    features: usize,
    nodes: usize,
    edges: usize,
}

fn table_stats(dataset: &str) -> Option<TableStats> {
    match dataset.to_ascii_lowercase().as_str() {
        "cora" => Some(TableStats {
            classes: 7,
            features: 1433,
            nodes: 2708,
            edges: 5278,
        }),
        "citeseer" => Some(TableStats {
            classes: 6,
            features: 3703,
            nodes: 3327,
            edges: 4552,
        }),
        "pubmed" => Some(TableStats {
            classes: 3,
            features: 500,
            nodes: 19717,
            edges: 44324,
        }),
        _ => None,
    }
}

fn prepare(data_dir: &PathBuf, datasets: &[String], seed: u64) -> anyhow::Result<()> {
    let names: Vec<String> = if datasets.is_empty() {
        vec!["cora".into(), "citeseer".into(), "pubmed".into()]
    } else {
        datasets.to_vec()
    };
    let mut failures = 0usize;
    for name in &names {
        let dir = bundle_dir(data_dir, name);
        let bundle = load_bundle(&dir).with_context(|| format!("loading bundle {dir:?}"))?;
        let graph = bundle.build_graph()?;
        println!("== {name} ({})", dir.display());
        println!(
            "   nodes {}  edges {}  features {}  classes {}  mean degree {:.2}",
            bundle.num_nodes(),
            graph.num_edges(),
            bundle.num_features(),
            bundle.num_classes,
            graph.mean_degree()
        );
        if let Some(expect) = table_stats(name) {
            let ok = expect.nodes == bundle.num_nodes()
                && expect.edges == graph.num_edges()
                && expect.features == bundle.num_features()
                && expect.classes == bundle.num_classes;
            if ok {
                println!("   counts match the published statistics");
            } else {
                println!(
                    "   MISMATCH vs published: nodes {} edges {} features {} classes {}",
                    expect.nodes, expect.edges, expect.features, expect.classes
                );
                failures += 1;
            }
        }
        let split_seed = gnnbench::seed::derive_seed(seed, &format!("split:{name}"), 3);
        let split_a = build_setting_a(&bundle, split_seed)?;
        let split_b = build_setting_b(&split_a);
        for split in [&split_a, &split_b] {
            let (train_edges, unseen_edges) = split_edge_stats(&graph, split);
            println!(
                "   setting {}: train {}  unseen {}  test {}  train edges {}  unseen edges {}  label rate {:.1}%",
                split.setting,
                split.train_nodes.len(),
                split.unseen_nodes.len(),
                split.test_nodes.len(),
                train_edges,
                unseen_edges,
                100.0 * split.train_nodes.len() as f64 / bundle.num_nodes() as f64
            );
            if train_edges + unseen_edges != graph.num_edges() {
                println!("   MISMATCH: edge accounting violated");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} validation failure(s)");
    }
    Ok(())
}

fn open_append(path: &PathBuf) -> anyhow::Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {path:?}"))?;
    Ok(BufWriter::new(file))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Prepare {
            data_dir,
            datasets,
            seed,
        } => prepare(&data_dir, &datasets, seed)?,

        Command::Run {
            dataset,
            model,
            setting,
            pretrain_epochs,
            inference_epochs,
            reps,
            seed,
            data_dir,
            out,
            workers,
            reseed_splits,
        } => {
            let config = ExperimentConfig {
                model,
                dataset,
                setting,
                pretrain_epochs,
                inference_epochs,
                repetitions: reps,
                base_seed: seed,
                reseed_splits,
            };
            let mut writer = open_append(&out)?;
            let outcome = run_configs(&data_dir, &[config], workers, &mut writer)?;
            println!(
                "wrote {} record(s) to {} ({} failure(s))",
                outcome.records,
                out.display(),
                outcome.failures
            );
            if outcome.records == 0 {
                bail!("no records produced");
            }
        }

        Command::Grid {
            data_dir,
            out,
            datasets,
            models,
            reps,
            inference_epochs,
            seed,
            workers,
            dry_run,
        } => {
            let mut spec = GridSpec {
                repetitions: reps,
                inference_epochs,
                base_seed: seed,
                ..GridSpec::default()
            };
            if !datasets.is_empty() {
                spec.datasets = datasets;
            }
            if !models.is_empty() {
                spec.models = models;
            }
            let configs = enumerate_configs(&spec);
            println!("{} configuration(s)", configs.len());
            if dry_run {
                for c in &configs {
                    println!("  {}", c.id());
                }
                return Ok(());
            }
            let mut writer = open_append(&out)?;
            let outcome = run_configs(&data_dir, &configs, workers, &mut writer)?;
            println!(
                "wrote {} record(s) to {} ({} failure(s))",
                outcome.records,
                out.display(),
                outcome.failures
            );
            if outcome.records == 0 {
                bail!("no records produced");
            }
        }

        Command::Analyze {
            records,
            bins,
            out_dir,
        } => {
            let records = read_records(&records)?;
            if records.is_empty() {
                bail!("record file is empty");
            }
            let written = emit_outputs(&records, bins, &out_dir)?;
            for path in &written {
                println!("wrote {}", path.display());
            }
            // brief stdout summary
            for (config_id, group) in group_by_config(&records) {
                let trajectories: Vec<&[f64]> =
                    group.iter().map(|r| r.accuracies.as_slice()).collect();
                if let Ok(summary) = summarize(&config_id, &trajectories) {
                    let last = summary.mean.len() - 1;
                    println!(
                        "{config_id}: n={} final accuracy {:.4} +/- {:.4}",
                        summary.repetitions, summary.mean[last], summary.std[last]
                    );
                }
            }
            let rows = settings_divergence_report(&records, bins)?;
            if !rows.is_empty() {
                println!("\nsetting divergence (A vs B, final epoch):");
                for row in rows {
                    println!(
                        "  {:>6} pre{:<4} JSD {:.4}",
                        row.model, row.pretrain_epochs, row.jsd
                    );
                }
            }
        }
    }
    Ok(())
}
