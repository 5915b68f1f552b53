use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use embattr::contrastive::Temperature;
use embattr::embedding_store::{read_set, write_set, EmbeddingSet};
use embattr::error::Result;
use embattr::harness::{pca2, run_splits, sweep_shots, write_pca_csv, write_sweep_csv, ExperimentConfig, SplitSet, SweepConfig};
use embattr::knn::{build_support, classify_batch, read_support, write_support, DEFAULT_K, DEFAULT_SHOTS};
use embattr::metrics::{read_records_csv, report, write_records_csv, EvalRecord, Split};
use embattr::trainer::{make_clusters, read_head, train, write_head, Activation, ClusterSpec, ProjectionHead, TrainConfig};

#[derive(Parser)]
#[command(name = "embattr", version, about = "Few-shot attribution of synthetic images from backbone embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a projection head with the supervised contrastive loss.
    TrainHead {
        #[arg(long)]
        train: PathBuf,
        /// Comma-separated class names to train on.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        learn_tau: bool,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hidden layer widths, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "64")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        out_dim: usize,
        /// Also write the per-epoch loss history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Project a labeled pool through a head and sample a k-NN support set.
    BuildSupport {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SHOTS)]
        shots: usize,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict the support to these classes.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute query embeddings against a support set.
    Classify {
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Classes that count as seen; defaults to the support classes.
        #[arg(long, value_delimiter = ',')]
        seen: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a metrics report from a records CSV.
    Eval {
        #[arg(long)]
        records: PathBuf,
        /// Seen classes; defaults to the labels of seen-partition records.
        #[arg(long, value_delimiter = ',')]
        seen: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the report as a flat CSV row.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run every seen/unseen split and average the reports.
    Splits {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot sensitivity sweep over support sizes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-dimensional PCA coordinates for plotting.
    Pca2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a Gaussian cluster data set.
    MakeClusters {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
struct SplitsFile {
    base: ExperimentConfig,
    #[serde(flatten)]
    splits: SplitSet,
}

#[derive(Deserialize)]
struct SweepFile {
    train: PathBuf,
    test: PathBuf,
    #[serde(flatten)]
    sweep: SweepConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn load_set(path: &Path) -> Result<EmbeddingSet> {
    read_set(BufReader::new(File::open(path)?))
}

fn load_head(path: &Path) -> Result<ProjectionHead> {
    read_head(BufReader::new(File::open(path)?))
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainHead {
            train: train_path,
            classes,
            out,
            epochs,
            lr,
            tau,
            learn_tau,
            batch,
            samples_per_class,
            seed,
            hidden,
            out_dim,
            history,
        } => {
            let data = load_set(&train_path)?;
            let ids = data.labels().ids_of(&classes)?;
            let data = data.restrict_to(&ids)?;
            let mut cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
            }
            cfg.tau = Temperature::new(tau.unwrap_or(cfg.tau.value()), learn_tau)?;
            if let Some(s) = samples_per_class {
                cfg.samples_per_class = s;
            }
            if let Some(b) = batch {
                cfg.batch_size = b;
            }
            cfg.classes_per_batch = (cfg.batch_size / cfg.samples_per_class.max(1)).min(ids.len());
            if batch.is_none() {
                cfg.batch_size = cfg.classes_per_batch * cfg.samples_per_class;
            }
            let dims: Vec<usize> = std::iter::once(data.dim())
                .chain(hidden.iter().copied().filter(|&h| h > 0))
                .chain(std::iter::once(out_dim))
                .collect();
            let head = ProjectionHead::new(&dims, Activation::Relu, seed)?;
            let outcome = train(&head, &data, &cfg)?;
            let mut w = create(&out)?;
            write_head(&outcome.head, &mut w)?;
            w.flush()?;
            if let Some(path) = history {
                write_text(&path, &serde_json::to_string(&outcome.history)?)?;
            }
            Ok(())
        }
        Command::BuildSupport {
            data,
            head,
            shots,
            k,
            seed,
            classes,
            out,
        } => {
            let mut data = load_set(&data)?;
            if let Some(names) = classes {
                let ids = data.labels().ids_of(&names)?;
                data = data.subset_labels(&ids)?.0;
            }
            let projected = load_head(&head)?.project(&data)?;
            let support = build_support(&projected, shots, k, seed)?;
            let mut w = create(&out)?;
            write_support(&support, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Classify {
            support,
            head,
            queries,
            k,
            seen,
            out,
        } => {
            let support = read_support(BufReader::new(File::open(&support)?))?;
            let queries = load_set(&queries)?;
            let projected = load_head(&head)?.project(&queries)?;
            let labels = support.labels().clone();
            let seen_ids = match seen {
                Some(names) => labels.ids_of(&names)?,
                None => support.classes(),
            };
            let predictions = classify_batch(&support, &projected, k)?;
            let records: Vec<EvalRecord> = projected
                .records()
                .iter()
                .zip(predictions)
                .enumerate()
                .map(|(i, (r, prediction))| {
                    let name = projected.labels().name(r.label_id).unwrap_or_default();
                    let true_label = labels.id(name);
                    let split = match true_label {
                        Some(id) if seen_ids.contains(&id) => Split::Seen,
                        _ => Split::Unseen,
                    };
                    EvalRecord {
                        sample_id: i as u64,
                        true_label,
                        split,
                        prediction,
                    }
                })
                .collect();
            let mut w = create(&out)?;
            write_records_csv(&records, &labels, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Eval { records, seen, out, csv } => {
            let (records, labels) = read_records_csv(BufReader::new(File::open(&records)?))?;
            let seen_ids = match seen {
                Some(names) => labels.ids_of(&names)?,
                None => {
                    let mut ids: Vec<u32> = records
                        .iter()
                        .filter(|r| r.split == Split::Seen)
                        .filter_map(|r| r.true_label)
                        .collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids
                }
            };
            let rep = report(&records, &labels, &seen_ids)?;
            write_text(&out, &rep.to_json()?)?;
            if let Some(path) = csv {
                let (header, row) = rep.csv_row();
                write_text(&path, &format!("{header}\n{row}\n"))?;
            }
            Ok(())
        }
        Command::Splits { data, config, out } => {
            let file: SplitsFile = load_json(&config)?;
            let data = load_set(&data)?;
            let outcome = run_splits(&file.splits, &data, &file.base)?;
            fs::create_dir_all(&out)?;
            for (i, rep) in outcome.per_split.iter().enumerate() {
                write_text(&out.join(format!("split_{i}.json")), &rep.to_json()?)?;
            }
            write_text(&out.join("mean.json"), &outcome.mean.to_json()?)?;
            write_text(&out.join("stddev.json"), &serde_json::to_string_pretty(&outcome.stddev)?)?;
            Ok(())
        }
        Command::Sweep { config, out } => {
            let file: SweepFile = load_json(&config)?;
            let base_dir = config.parent().unwrap_or(Path::new("."));
            let train_data = load_set(&base_dir.join(&file.train))?;
            let test_data = load_set(&base_dir.join(&file.test))?;
            let rows = sweep_shots(&file.sweep, &train_data, &test_data)?;
            let mut w = create(&out)?;
            write_sweep_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Pca2 { data, out } => {
            let set = load_set(&data)?;
            let coords = pca2(&set)?;
            let mut w = create(&out)?;
            write_pca_csv(&set, &coords, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::MakeClusters { spec, out } => {
            let spec: ClusterSpec = load_json(&spec)?;
            let set = make_clusters(&spec)?;
            let mut w = create(&out)?;
            write_set(&set, &mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}
