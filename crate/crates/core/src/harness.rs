//! Training loop, evaluation, multi-seed aggregation and metric files.
//!
//! Output layout of one configuration:
//!
//! ```text
//! <out_dir>/config.json
//! <out_dir>/summary.json
//! <out_dir>/seed-<n>/epochs.csv
//! <out_dir>/seed-<n>/selection.jsonl   (DBA runs only)
//! <out_dir>/seed-<n>/params.json
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, RunConfig};
use crate::data::{load_mnist, make_batches, subsample, Dataset, Split, SubsetMode, SubsetSpec};
use crate::dba::{dba_step, BatchSizeController, LayerSelection, MetricState, SelectionOutcome};
use crate::mlp::{accuracy, backward_per_sample, batch_gradient, forward, loss, Architecture, MlpParams, NUM_LAYERS};
use crate::optim::{Adam, Optimizer, PlateauScheduler, Sgd};
use crate::rng::{Purpose, RngState};
use crate::tensor::mean_std;
use crate::{Error, Result};

/// Environment variable consulted when no data directory is given.
pub const DATA_DIR_ENV: &str = "MNIST_DATA_DIR";

pub const EPOCHS_HEADER: &str = "epoch,train_loss,test_acc,batch_size,data_utilization,real_epochs,lr";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub test_acc: f64,
    pub batch_size: usize,
    /// Samples that entered updates over samples forwarded.
    pub data_utilization: f64,
    /// Cumulative selected samples divided by the training-set size.
    pub real_epochs: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// One line of `selection.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionLogEntry {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub selection: LayerSelection,
}

/// Receives every DBA step's selections as they happen.
pub trait SelectionSink {
    fn record(&mut self, step: u64, epoch: usize, outcome: &SelectionOutcome) -> Result<()>;
}

/// Discards selections.
pub struct NoSink;

impl SelectionSink for NoSink {
    fn record(&mut self, _: u64, _: usize, _: &SelectionOutcome) -> Result<()> {
        Ok(())
    }
}

impl SelectionSink for Vec<SelectionLogEntry> {
    fn record(&mut self, step: u64, epoch: usize, outcome: &SelectionOutcome) -> Result<()> {
        self.extend(outcome.layers.iter().map(|s| SelectionLogEntry {
            step,
            epoch,
            selection: s.clone(),
        }));
        Ok(())
    }
}

/// Streams selections to a JSON-lines file.
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl SelectionSink for JsonlSink {
    fn record(&mut self, step: u64, epoch: usize, outcome: &SelectionOutcome) -> Result<()> {
        for s in &outcome.layers {
            let entry = SelectionLogEntry {
                step,
                epoch,
                selection: s.clone(),
            };
            serde_json::to_writer(&mut self.out, &entry).map_err(|e| Error::serde(&self.path, e))?;
            self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Training and test data of one seed-run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Full MNIST splits, loaded once and subsampled per seed.
#[derive(Clone, Debug)]
pub struct MnistSource {
    pub train: Dataset,
    pub test: Dataset,
}

impl MnistSource {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            train: load_mnist(dir, Split::Train)?,
            test: load_mnist(dir, Split::Test)?,
        })
    }

    /// The subset is drawn from the run seed, so each seed trains on its own
    /// sample of the training split.
    pub fn run_data(&self, subset: SubsetMode, seed: u64) -> Result<RunData> {
        let train = match subset {
            SubsetMode::Fraction(1.0) => self.train.clone(),
            mode => subsample(&self.train, &SubsetSpec { mode, seed })?,
        };
        Ok(RunData {
            train,
            test: self.test.clone(),
        })
    }
}

/// First of: explicit path, `MNIST_DATA_DIR`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
        _ => Err(Error::Config(format!(
            "no data directory: pass --data-dir or set {DATA_DIR_ENV}"
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub params: MlpParams,
}

pub fn evaluate(params: &MlpParams, test: &Dataset) -> Result<f64> {
    accuracy(params, test)
}

fn make_optimizer(cfg: &RunConfig) -> Result<Box<dyn Optimizer>> {
    Ok(match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd::new(cfg.sgd)?),
        OptimizerKind::Adam => Box::new(Adam::new(cfg.adam)?),
    })
}

/// Trains one seed for `cfg.max_epochs` epochs.
///
/// Random streams: weight init, per-epoch shuffling and strategy draws each
/// use their own substream of `seed`.
pub fn run_training(cfg: &RunConfig, seed: u64, data: &RunData, sink: &mut dyn SelectionSink) -> Result<RunOutput> {
    cfg.validate()?;
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    let arch = Architecture {
        input: train.image_dim(),
        ..Architecture::MNIST
    };
    let dba = cfg.resolved_dba(train.len())?;
    let mut params = MlpParams::init(arch, &mut RngState::substream(seed, Purpose::WeightInit, 0));
    let mut opt = make_optimizer(cfg)?;
    let mut scheduler = if cfg.scheduler {
        Some(PlateauScheduler::new(cfg.plateau)?)
    } else {
        None
    };
    let mut controller = match &dba {
        Some(d) => Some(BatchSizeController::new(cfg.batch_size, d.delta, d.min_batch, d.max_batch)?),
        None => None,
    };
    let mut metric_state = match &dba {
        Some(d) => Some(MetricState::new(NUM_LAYERS, d.smoothing)?),
        None => None,
    };
    let mut strategy_rng = RngState::substream(seed, Purpose::Strategy, 0);

    let n = train.len() as f64;
    let mut real_epochs = 0.0;
    let mut step: u64 = 0;
    let mut records = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        let batch_size = controller.as_ref().map_or(cfg.batch_size, |c| c.current());
        let lr = opt.lr();
        let mut shuffle = RngState::substream(seed, Purpose::Shuffle, epoch as u64);
        let mut loss_sum = 0.0;
        let mut forwarded = 0usize;
        let mut selected = 0usize;
        for batch in make_batches(train, batch_size, &mut shuffle)? {
            let cache = forward(&params, &batch.images)?;
            let batch_loss = loss(&cache, &batch.labels)?.mean_loss;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric {
                    layer: format!("loss (epoch {epoch}, step {step})"),
                });
            }
            loss_sum += batch_loss * batch.len() as f64;
            forwarded += batch.len();
            let grads = match (&dba, metric_state.as_mut(), controller.as_mut()) {
                (Some(d), Some(state), Some(ctl)) => {
                    let per_sample = backward_per_sample(&params, &cache, &batch.labels)?;
                    let out = dba_step(&per_sample, batch_loss, state, d, &mut strategy_rng)?;
                    let k = out.outcome.samples_selected();
                    ctl.record(k);
                    selected += k;
                    sink.record(step, epoch, &out.outcome)?;
                    out.grads
                }
                _ => {
                    selected += batch.len();
                    batch_gradient(&params, &cache, &batch.labels)?
                }
            };
            opt.step(&mut params, &grads)?;
            if !params.is_finite() {
                return Err(Error::Numeric {
                    layer: format!("parameters after step {step} (epoch {epoch})"),
                });
            }
            step += 1;
        }
        let train_loss = loss_sum / forwarded as f64;
        let test_acc = evaluate(&params, &data.test)?;
        real_epochs += selected as f64 / n;
        if let Some(s) = scheduler.as_mut() {
            if s.update(train_loss, opt.as_mut())? {
                log::debug!("epoch {epoch}: learning rate reduced to {}", opt.lr());
            }
        }
        if let Some(c) = controller.as_mut() {
            c.next_batch_size()?;
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            test_acc,
            batch_size,
            data_utilization: selected as f64 / forwarded as f64,
            real_epochs,
            lr,
        };
        log::info!(
            "{} seed {seed} epoch {epoch}: loss {:.5} acc {:.4} batch {} util {:.3}",
            cfg.name,
            rec.train_loss,
            rec.test_acc,
            rec.batch_size,
            rec.data_utilization
        );
        records.push(rec);
    }
    Ok(RunOutput { seed, records, params })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMax {
    pub seed: u64,
    pub max_test_acc: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub per_seed: Vec<SeedMax>,
    /// Mean of the per-seed maxima.
    pub mean: f64,
    /// Sample standard deviation (n − 1) of the per-seed maxima.
    pub std: f64,
}

pub fn aggregate(name: &str, runs: &[(u64, Vec<EpochRecord>)]) -> Result<RunSummary> {
    let per_seed: Vec<SeedMax> = runs
        .iter()
        .filter_map(|(seed, recs)| {
            recs.iter()
                .fold(None, |best: Option<&EpochRecord>, r| match best {
                    Some(b) if b.test_acc >= r.test_acc => Some(b),
                    _ => Some(r),
                })
                .map(|r| SeedMax {
                    seed: *seed,
                    max_test_acc: r.test_acc,
                    best_epoch: r.epoch,
                })
        })
        .collect();
    if per_seed.is_empty() {
        return Err(Error::State("no completed runs to aggregate".into()));
    }
    let maxima: Vec<f64> = per_seed.iter().map(|s| s.max_test_acc).collect();
    let (mean, std) = mean_std(&maxima)?;
    Ok(RunSummary {
        name: name.to_string(),
        per_seed,
        mean,
        std,
    })
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_epochs_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in records {
        w.serialize(r).map_err(|e| Error::serde(path, e))?;
    }
    if records.is_empty() {
        w.write_record(EPOCHS_HEADER.split(',')).map_err(|e| Error::serde(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::serde(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::serde(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != EPOCHS_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unexpected header `{}`", header.join(",")),
        });
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<EpochRecord>, _>>()
        .map_err(|e| Error::serde(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::serde(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::serde(path, e))
}

/// Writes one seed's epoch table and final parameters.
pub fn emit_seed(out_dir: &Path, run: &RunOutput) -> Result<()> {
    let dir = seed_dir(out_dir, run.seed);
    create_dir(&dir)?;
    write_epochs_csv(&dir.join("epochs.csv"), &run.records)?;
    run.params.save_json(dir.join("params.json"))
}

pub fn emit_summary(out_dir: &Path, summary: &RunSummary) -> Result<()> {
    create_dir(out_dir)?;
    write_json(&out_dir.join("summary.json"), summary)
}

/// Trains one seed and writes its files; DBA runs also stream
/// `selection.jsonl`.
pub fn run_seed(cfg: &RunConfig, seed: u64, data: &RunData) -> Result<RunOutput> {
    let dir = seed_dir(&cfg.out_dir, seed);
    create_dir(&dir)?;
    let run = if cfg.dba_enabled {
        let path = dir.join("selection.jsonl");
        let mut sink = JsonlSink::create(&path)?;
        let run = run_training(cfg, seed, data, &mut sink)?;
        sink.finish()?;
        run
    } else {
        let stale = dir.join("selection.jsonl");
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        run_training(cfg, seed, data, &mut NoSink)?
    };
    emit_seed(&cfg.out_dir, &run)?;
    Ok(run)
}

/// Runs every configured seed in order and writes the summary. A seed that
/// fails is logged and left out of the summary.
pub fn sweep(cfg: &RunConfig, source: &MnistSource) -> Result<RunSummary> {
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let data = source.run_data(cfg.subset, seed)?;
        match run_seed(cfg, seed, &data) {
            Ok(run) => runs.push((seed, run.records)),
            Err(e) => log::error!("{} seed {seed} aborted: {e}", cfg.name),
        }
    }
    let summary = aggregate(&cfg.name, &runs)?;
    emit_summary(&cfg.out_dir, &summary)?;
    Ok(summary)
}

/// Rebuilds the summary of an output directory from its `seed-*/epochs.csv`.
pub fn report(out_dir: &Path) -> Result<RunSummary> {
    let mut runs = Vec::new();
    let entries = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        let csv_path = entry.path().join("epochs.csv");
        if csv_path.exists() {
            runs.push((seed, read_epochs_csv(&csv_path)?));
        }
    }
    runs.sort_by_key(|(s, _)| *s);
    let name = read_json::<serde_json::Value>(&out_dir.join("config.json"))
        .ok()
        .and_then(|v| v.get("name").and_then(|n| n.as_str()).map(str::to_string))
        .unwrap_or_else(|| out_dir.display().to_string());
    let summary = aggregate(&name, &runs)?;
    emit_summary(out_dir, &summary)?;
    Ok(summary)
}
