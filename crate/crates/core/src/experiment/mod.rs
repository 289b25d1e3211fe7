//! Training runs, bottleneck sweeps, evaluation and reconstruction grids.

pub mod config;
pub mod grids;
pub mod metrics;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::ExperimentConfig;
pub use grids::dump_grids;
pub use metrics::{read_csv, write_csv, MetricsRow};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::{load_split, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{l1_recon, l2_zero, total_loss, LossConfig};
use crate::models::{count_params, Autoencoder, ModelKind, ModelSpec};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.txt";

/// Offset separating the prior-sample stream from the shuffle stream.
const PRIOR_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Reconstructions of `x` without recording a tape, 500 images at a time.
pub fn reconstruct_images(model: &Autoencoder<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    let mut data = Vec::with_capacity(x.numel());
    let mut start = 0;
    while start < n {
        let len = 500.min(n - start);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.slice_rows(start, len)?);
        data.extend_from_slice(model.reconstruct(&mut tape, &xv)?.x_hat.value().data());
        start += len;
    }
    Tensor::new(x.shape(), data)
}

/// Test-set losses of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub l1: f64,
    /// Mean `z²`; zero for classical models.
    pub zero_pad_l2: f64,
}

/// Mean L1 and zero-padding loss over `data` in file order.
pub fn evaluate(model: &Autoencoder<f32>, data: &Dataset, batch_size: usize) -> Result<EvalStats> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation on an empty dataset".into()));
    }
    let (mut l1, mut l2, mut z_count) = (0.0f64, 0.0f64, 0usize);
    for batch in data.sequential(batch_size)? {
        let mut tape = Tape::no_grad();
        let x = tape.constant(batch);
        let r = model.reconstruct(&mut tape, &x)?;
        let n = x.value().numel() as f64;
        l1 += l1_recon(&mut tape, &x, &r.x_hat)?.value().item() as f64 * n;
        if let Some(z) = &r.z {
            let m = z.value().numel();
            l2 += l2_zero(&mut tape, z)?.value().item() as f64 * m as f64;
            z_count += m;
        }
    }
    Ok(EvalStats {
        l1: l1 / data.images.numel() as f64,
        zero_pad_l2: if z_count == 0 { 0.0 } else { l2 / z_count as f64 },
    })
}

/// Loads the configured train and test splits, applying subsets.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no data directory configured (data_dir)".into()))?;
    let mut train = load_split(cfg.dataset, dir, Split::Train)?;
    let mut test = load_split(cfg.dataset, dir, Split::Test)?;
    if cfg.subset > 0 {
        train = train.subset(cfg.subset, cfg.shuffle_seed)?;
    }
    if cfg.test_subset > 0 {
        test = test.head(cfg.test_subset)?;
    }
    Ok((train, test))
}

pub struct RunResult {
    pub spec: ModelSpec,
    pub model: Autoencoder<f32>,
    /// One row per epoch.
    pub rows: Vec<MetricsRow>,
}

impl RunResult {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("at least one epoch")
    }
}

/// Trains on in-memory splits. `on_epoch` sees each row as it is produced.
pub fn train_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRow, &Autoencoder<f32>) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    let shape = cfg.dataset.image_shape();
    for d in [train, test] {
        if d.sample_shape() != shape {
            return Err(Error::shape("dataset", d.sample_shape(), &shape));
        }
    }
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let spec = cfg.model_spec();
    let mut model = spec.build::<f32>()?;
    let param_count = model.param_count();
    let loss_cfg = if cfg.model == ModelKind::InnVae {
        LossConfig::vae()
    } else {
        LossConfig::default()
    };
    let schedule = cfg.schedule();
    let mut adam = AdamState::new(model.params(), cfg.lr, cfg.weight_decay);
    let mut prior_rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed.wrapping_add(PRIOR_SEED_OFFSET));
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.lr = schedule.lr_at(epoch);
        let (mut l1_sum, mut l2_sum, mut mmd_sum, mut seen) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for (b, batch) in train.batches(cfg.batch_size, cfg.shuffle_seed, epoch as u64)?.enumerate() {
            let n = batch.shape()[0];
            let context = format!("epoch {} batch {b}", epoch + 1);
            let step = |model: &mut Autoencoder<f32>, rng: &mut ChaCha8Rng| -> Result<(f64, f64, f64)> {
                let mut tape = Tape::new();
                let x = tape.constant(batch);
                let r = model.reconstruct(&mut tape, &x)?;
                let (loss, l1, l2, mmd) = match &r.z {
                    Some(z) => {
                        let b = total_loss(&mut tape, &x, &r.x_hat, z, &r.y, &loss_cfg, rng)?;
                        (b.total, b.recon, b.zero_pad, b.mmd.unwrap_or(0.0))
                    }
                    None => {
                        let l = l1_recon(&mut tape, &x, &r.x_hat)?;
                        let v = l.value().item();
                        (l, v, 0.0, 0.0)
                    }
                };
                if !loss.value().item().is_finite() {
                    return Err(Error::NonFinite { op: "loss".into() });
                }
                tape.backward(&loss, model.params_mut())?;
                Ok((l1 as f64, l2 as f64, mmd as f64))
            };
            let (l1, l2, mmd) = step(&mut model, &mut prior_rng).map_err(|e| e.in_context(&context))?;
            adam.step(model.params_mut())?;
            l1_sum += l1 * n as f64;
            l2_sum += l2 * n as f64;
            mmd_sum += mmd * n as f64;
            seen += n;
        }
        let eval = evaluate(&model, test, cfg.eval_batch_size)?;
        let row = MetricsRow {
            dataset: cfg.dataset.to_string(),
            model: cfg.model.to_string(),
            k: cfg.k,
            param_count,
            epoch: epoch + 1,
            train_l1: l1_sum / seen as f64,
            test_l1: eval.l1,
            zero_pad_l2: l2_sum / seen as f64,
            mmd: loss_cfg.mmd.then(|| mmd_sum / seen as f64),
            lr: adam.lr,
            wall_seconds: start.elapsed().as_secs_f64(),
            seed: cfg.seed,
        };
        on_epoch(&row, &model)?;
        rows.push(row);
    }
    Ok(RunResult { spec, model, rows })
}

/// Trains with data from disk, writing `metrics.csv` after every epoch and
/// the config and checkpoint into `out`.
pub fn train_to(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, out: &Path) -> Result<RunResult> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics = out.join(METRICS_FILE);
    let mut so_far = Vec::new();
    let result = train_on(cfg, train, test, |row, _| {
        so_far.push(row.clone());
        write_csv(&metrics, &so_far)
    })?;
    checkpoint::save(&out.join(CHECKPOINT_DIR), &result.spec, &result.model)?;
    Ok(result)
}

/// Loads data per the config and trains into `cfg.out`.
pub fn train(cfg: &ExperimentConfig) -> Result<RunResult> {
    let (train, test) = load_data(cfg)?;
    train_to(cfg, &train, &test, &cfg.out)
}

/// Parameter comparison between the classical baseline and the INN at one
/// bottleneck size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessRecord {
    pub dataset: String,
    pub k: usize,
    pub classical_model: String,
    pub classical_params: usize,
    pub inn_params: usize,
    /// The classical model has at least as many parameters as the INN.
    pub holds: bool,
}

pub fn fairness(cfg: &ExperimentConfig, k: usize) -> Result<FairnessRecord> {
    let classical = if cfg.model.is_inn() {
        ModelKind::baseline(cfg.dataset)
    } else {
        cfg.model
    };
    let classical_params = count_params(&ModelSpec::new(cfg.dataset, classical, k.max(1), cfg.seed))?;
    let inn_params = count_params(&ModelSpec::new(cfg.dataset, ModelKind::Inn, k, cfg.seed))?;
    Ok(FairnessRecord {
        dataset: cfg.dataset.to_string(),
        k,
        classical_model: classical.to_string(),
        classical_params,
        inn_params,
        holds: classical_params >= inn_params,
    })
}

pub struct SweepResult {
    /// Final-epoch row of every successful run.
    pub rows: Vec<MetricsRow>,
    /// Bottleneck sizes whose runs failed, with the error.
    pub failures: Vec<(usize, String)>,
    pub fairness: Vec<FairnessRecord>,
}

pub const SWEEP_FILE: &str = "sweep.csv";
pub const FAIRNESS_FILE: &str = "fairness.csv";
pub const FAILURES_FILE: &str = "failures.txt";

/// Run directory of one sweep point.
pub fn run_dir(out: &Path, model: ModelKind, k: usize) -> PathBuf {
    out.join(format!("{model}-k{k}"))
}

/// Trains one model per bottleneck size on shared data. A failed run is
/// recorded and the sweep continues.
pub fn sweep_on(base: &ExperimentConfig, ks: &[usize], train: &Dataset, test: &Dataset) -> Result<SweepResult> {
    let out = &base.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut result = SweepResult {
        rows: Vec::new(),
        failures: Vec::new(),
        fairness: Vec::new(),
    };
    for &k in ks {
        result.fairness.push(fairness(base, k)?);
        let cfg = ExperimentConfig {
            k,
            out: run_dir(out, base.model, k),
            ..base.clone()
        };
        match cfg.validate().and_then(|_| train_to(&cfg, train, test, &cfg.out)) {
            Ok(run) => result.rows.push(run.final_row().clone()),
            Err(e) => result.failures.push((k, e.to_string())),
        }
        write_csv(&out.join(SWEEP_FILE), &result.rows)?;
    }
    write_fairness(&out.join(FAIRNESS_FILE), &result.fairness)?;
    if !result.failures.is_empty() {
        let text: String = result.failures.iter().map(|(k, e)| format!("k = {k}: {e}\n")).collect();
        let path = out.join(FAILURES_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}

pub fn sweep(base: &ExperimentConfig, ks: &[usize]) -> Result<SweepResult> {
    let (train, test) = load_data(base)?;
    sweep_on(base, ks, &train, &test)
}

fn write_fairness(path: &Path, records: &[FairnessRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: e.to_string(),
    })?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean test L1 of a saved checkpoint over the whole of `test`.
pub fn eval_checkpoint(dir: &Path, test: &Dataset, batch_size: usize) -> Result<f64> {
    let (spec, model) = checkpoint::load::<f32>(dir)?;
    let shape = spec.dataset.image_shape();
    if test.sample_shape() != shape {
        return Err(Error::shape("checkpoint input", &shape, test.sample_shape()));
    }
    Ok(evaluate(&model, test, batch_size)?.l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::mnist_like;
    use crate::models::ClassicVariant;

    fn tiny_cfg(model: &str, k: usize, out: &Path) -> ExperimentConfig {
        ExperimentConfig::from_pairs([
            ("model", model),
            ("bottleneck", &k.to_string()),
            ("epochs", "2"),
            ("batch_size", "16"),
            ("seed", "1"),
            ("out", out.to_str().unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn rows_per_epoch_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let train = mnist_like(40, 1, Split::Train);
        let test = mnist_like(10, 2, Split::Test);
        let cfg = tiny_cfg("classic", 4, dir.path());
        let run = train_to(&cfg, &train, &test, dir.path()).unwrap();
        assert_eq!(run.rows.len(), 2);
        assert_eq!(run.rows[1].epoch, 2);
        assert_eq!(run.rows[0].mmd, None);
        let csv = read_csv(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv, run.rows);
        let l1 = eval_checkpoint(&dir.path().join(CHECKPOINT_DIR), &test, cfg.eval_batch_size).unwrap();
        assert_eq!(l1, run.rows[1].test_l1);
        let batched = eval_checkpoint(&dir.path().join(CHECKPOINT_DIR), &test, 3).unwrap();
        assert!((batched - l1).abs() < 1e-6 * l1);
        let again = ExperimentConfig::load(Some(&dir.path().join(CONFIG_FILE)), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn vae_rows_report_mmd() {
        let dir = tempfile::tempdir().unwrap();
        let train = mnist_like(16, 1, Split::Train);
        let test = mnist_like(4, 2, Split::Test);
        let mut cfg = tiny_cfg("inn-vae", 8, dir.path());
        cfg.epochs = 1;
        let run = train_on(&cfg, &train, &test, |_, _| Ok(())).unwrap();
        assert!(run.rows[0].mmd.unwrap() > 0.0);
        assert!(run.rows[0].zero_pad_l2 > 0.0);
    }

    #[test]
    fn full_bottleneck_inn_is_exact_after_training() {
        let train = mnist_like(16, 1, Split::Train);
        let test = mnist_like(8, 2, Split::Test);
        let cfg = tiny_cfg("inn", 784, Path::new("unused"));
        let run = train_on(&cfg, &train, &test, |_, _| Ok(())).unwrap();
        assert!(run.final_row().test_l1 < 1e-4, "{}", run.final_row().test_l1);
    }

    #[test]
    fn sweep_records_fairness_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let train = mnist_like(24, 1, Split::Train);
        let test = mnist_like(6, 2, Split::Test);
        let mut cfg = tiny_cfg("classic", 1, dir.path());
        cfg.epochs = 1;
        let r = sweep_on(&cfg, &[2, 0, 4], &train, &test).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].0, 0);
        assert!(r.rows[0].param_count < r.rows[1].param_count);
        assert!(r.fairness.iter().all(|f| f.holds));
        assert!(dir.path().join(FAILURES_FILE).exists());
        assert_eq!(read_csv(&dir.path().join(SWEEP_FILE)).unwrap(), r.rows);
        assert!(run_dir(dir.path(), ModelKind::Classical(ClassicVariant::Classic), 4)
            .join(METRICS_FILE)
            .exists());
    }

    #[test]
    fn cifar_fairness_is_reported_not_enforced() {
        let cfg = ExperimentConfig::paper(crate::models::DatasetKind::Cifar10, ModelKind::Inn, 64);
        let f = fairness(&cfg, 64).unwrap();
        assert_eq!(f.classical_model, "conv-cifar");
        assert!(!f.holds);
        assert!(fairness(&cfg, 1024).unwrap().holds);
    }
}
