//! Command implementations behind the `cesaa` binary.
//!
//! Every command writes line-delimited JSON records to `<out>/<command>.jsonl`.
//! The first record of each file carries the resolved configuration and its
//! digest; later records repeat the digest.

mod config;

pub use config::{AblateConfig, DataConfig, EvalConfig, RunConfig, SweepConfig};

use cesaa_core::data::{generate_synthetic, load_csv, write_csv, CsvSchema, Dataset};
use cesaa_core::train::{
    AblationVariant, EpochMetrics, EvalMetrics, GroupKey, TrainConfig, Trainer,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(cesaa_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<cesaa_core::Error> for CliError {
    fn from(e: cesaa_core::Error) -> Self {
        match e {
            cesaa_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    /// 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        use cesaa_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::Numeric(_)
                | E::Shape { .. }
                | E::InvalidMask { .. }
                | E::NonScalarLoss { .. } => 4,
                _ => 3,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Train and test sets named by the data configuration.
pub fn load_data(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let full = match &cfg.train_csv {
        Some(path) => load_csv(path, &CsvSchema::default())?,
        None => generate_synthetic(&cfg.synthetic)?,
    };
    match &cfg.test_csv {
        Some(path) => {
            let schema = CsvSchema {
                n_domains: Some(full.n_domains()),
                vocab_sizes: Some(full.vocab_sizes().to_vec()),
            };
            Ok((full, load_csv(path, &schema)?))
        }
        None => Ok(full.split_every(cfg.test_every)?),
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub variant: AblationVariant,
    pub label: &'static str,
    pub seed: u64,
    pub top_k: usize,
    pub alpha: f64,
    pub epochs: Vec<EpochMetrics>,
    pub eval: EvalMetrics,
    /// Hex SHA-256 of the final parameters.
    pub param_digest: String,
}

/// Trains `config.epochs` epochs and evaluates on `test`.
pub fn train_run(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    group_key: GroupKey,
) -> Result<(Trainer, RunOutcome)> {
    let mut trainer = Trainer::for_dataset(config.clone(), train)?;
    let epochs = trainer.fit(train)?;
    let eval = trainer.evaluate(test, group_key)?;
    let outcome = RunOutcome {
        variant: config.variant,
        label: config.variant.label(),
        seed: config.seed,
        top_k: trainer.model().config.top_k,
        alpha: config.alpha,
        epochs,
        eval,
        param_digest: hex(&trainer.param_digest()),
    };
    Ok((trainer, outcome))
}

/// Runs independent trainings on at most `jobs` threads; results keep the
/// order of `configs`.
pub fn run_parallel(
    jobs: usize,
    configs: &[TrainConfig],
    train: &Dataset,
    test: &Dataset,
    group_key: GroupKey,
) -> Result<Vec<RunOutcome>> {
    if jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        configs
            .par_iter()
            .map(|c| train_run(c, train, test, group_key).map(|(_, o)| o))
            .collect()
    })
}

/// Serialised writer for one records file.
pub struct Records {
    out: BufWriter<File>,
    digest: String,
    written: Vec<Value>,
}

impl Records {
    pub fn create(dir: &Path, name: &str, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let file = File::create(dir.join(format!("{name}.jsonl")))?;
        let mut r = Self {
            out: BufWriter::new(file),
            digest: config.digest(),
            written: Vec::new(),
        };
        r.emit("config", json!({ "config": config }))?;
        Ok(r)
    }

    pub fn emit(&mut self, kind: &str, body: Value) -> Result<()> {
        let mut record = json!({ "kind": kind, "config_digest": self.digest });
        if let (Some(r), Value::Object(b)) = (record.as_object_mut(), body) {
            r.extend(b);
        }
        serde_json::to_writer(&mut self.out, &record).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.written.push(record);
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<Value>> {
        self.out.flush()?;
        Ok(self.written)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("records serialise")
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<Value>> {
    let mut records = Records::create(out, "gen-data", cfg)?;
    let (train, test) =
        generate_synthetic(&cfg.data.synthetic)?.split_every(cfg.data.test_every)?;
    write_csv(&train, out.join("train.csv"))?;
    write_csv(&test, out.join("test.csv"))?;
    records.emit(
        "dataset",
        json!({
            "train_rows": train.len(),
            "test_rows": test.len(),
            "n_domains": train.n_domains(),
            "vocab_sizes": train.vocab_sizes(),
        }),
    )?;
    records.finish()
}

/// Default checkpoint location inside an output directory.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("model.ckpt")
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<Value>> {
    let (train, test) = load_data(&cfg.data)?;
    let mut records = Records::create(out, "train", cfg)?;
    let mut trainer = Trainer::for_dataset(cfg.train.clone(), &train)?;
    for _ in 0..cfg.train.epochs {
        let m = trainer.train_epoch(&train)?;
        records.emit("epoch", to_value(&m))?;
    }
    let eval = trainer.evaluate(&test, cfg.eval.group_key)?;
    trainer.save(&checkpoint_path(out))?;
    records.emit(
        "final",
        json!({
            "variant": cfg.train.variant.label(),
            "eval": eval,
            "param_digest": hex(&trainer.param_digest()),
        }),
    )?;
    records.finish()
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<Value>> {
    let trainer = Trainer::load(checkpoint)?;
    let (_, test) = load_data(&cfg.data)?;
    let mut records = Records::create(out, "evaluate", cfg)?;
    let eval = trainer.evaluate(&test, cfg.eval.group_key)?;
    records.emit(
        "evaluation",
        json!({
            "checkpoint": checkpoint,
            "variant": trainer.config().variant.label(),
            "checkpoint_config_digest": hex(&trainer.config().digest()),
            "eval": eval,
        }),
    )?;
    records.finish()
}

fn summary_row(o: &RunOutcome) -> Value {
    json!({
        "variant": o.label,
        "seed": o.seed,
        "top_k": o.top_k,
        "alpha": o.alpha,
        "auc": o.eval.auc,
        "gauc": o.eval.gauc,
        "group_key": o.eval.group_key,
        "bce": o.eval.bce,
        "mutual_information": o.eval.mutual_information,
        "routing_mutual_information": o.eval.routing.mutual_information,
        "final_train_bce": o.epochs.last().map(|e| e.mean_bce),
        "param_digest": o.param_digest,
    })
}

/// Every configured variant × seed, one record per run in that order.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<Value>> {
    let (train, test) = load_data(&cfg.data)?;
    let configs: Vec<TrainConfig> = cfg
        .ablate
        .variants
        .iter()
        .flat_map(|&variant| {
            cfg.ablate.seeds.iter().map(move |&seed| TrainConfig {
                variant,
                seed,
                ..cfg.train.clone()
            })
        })
        .collect();
    let outcomes = run_parallel(jobs, &configs, &train, &test, cfg.eval.group_key)?;
    let mut records = Records::create(out, "ablate", cfg)?;
    for o in &outcomes {
        records.emit("ablation", summary_row(o))?;
    }
    records.finish()
}

/// One record per `k` in `sweep.ks`, with the configured variant and seed.
pub fn cmd_sweep_k(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<Value>> {
    let (train, test) = load_data(&cfg.data)?;
    let configs: Vec<TrainConfig> = cfg
        .sweep
        .ks
        .iter()
        .map(|&top_k| TrainConfig {
            top_k,
            ..cfg.train.clone()
        })
        .collect();
    let outcomes = run_parallel(jobs, &configs, &train, &test, cfg.eval.group_key)?;
    let mut records = Records::create(out, "sweep-k", cfg)?;
    for (k, o) in cfg.sweep.ks.iter().zip(&outcomes) {
        let mut row = summary_row(o);
        row["k"] = json!(k);
        records.emit("sweep_k", row)?;
    }
    records.finish()
}

/// `P(E|D)` of a checkpoint on the test data, as a record and a text table.
pub fn cmd_inspect_routing(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<(Vec<Value>, String)> {
    let trainer = Trainer::load(checkpoint)?;
    let (_, test) = load_data(&cfg.data)?;
    let report =
        cesaa_core::aea::routing_report(trainer.model(), &test, trainer.config().batch_size)?;
    let mut table = String::from("domain  samples  P(E|D)\n");
    for (m, row) in report.conditional.iter().enumerate() {
        let cells = match row {
            Some(r) => r
                .iter()
                .map(|p| format!("{p:.3}"))
                .collect::<Vec<_>>()
                .join("  "),
            None => "-".into(),
        };
        table.push_str(&format!(
            "{m:>6}  {:>7}  {cells}\n",
            report.samples_per_domain[m]
        ));
    }
    table.push_str(&format!("I(D;E) = {:.4}\n", report.mutual_information));
    let mut records = Records::create(out, "inspect-routing", cfg)?;
    records.emit(
        "routing",
        json!({
            "checkpoint": checkpoint,
            "variant": trainer.config().variant.label(),
            "routing": report,
            "joint_mutual_information": trainer.joint().stats()?.mutual_information,
        }),
    )?;
    Ok((records.finish()?, table))
}
