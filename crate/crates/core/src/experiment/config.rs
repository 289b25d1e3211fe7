use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{parse_clamp, parse_key_values};
use crate::error::{Error, Result};
use crate::inn::Clamp;
use crate::models::{DatasetKind, ModelKind, ModelSpec};
use crate::optim::LrSchedule;

/// Every key accepted in a config file or as a command-line override.
pub const KEYS: [&str; 16] = [
    "dataset",
    "data_dir",
    "model",
    "bottleneck",
    "epochs",
    "batch_size",
    "lr",
    "milestones",
    "weight_decay",
    "clamp",
    "seed",
    "shuffle_seed",
    "subset",
    "test_subset",
    "out",
    "eval_batch_size",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Directory with the standard dataset file names.
    pub data_dir: Option<PathBuf>,
    pub model: ModelKind,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0-based epochs at which the rate drops tenfold.
    pub milestones: Vec<usize>,
    pub weight_decay: f64,
    pub clamp: Clamp,
    /// Weight initialisation and channel permutations.
    pub seed: u64,
    /// Batch order, training subset and prior samples.
    pub shuffle_seed: u64,
    /// Training images used; 0 keeps the full split.
    pub subset: usize,
    /// Test images used; 0 keeps the full split.
    pub test_subset: usize,
    pub out: PathBuf,
    pub eval_batch_size: usize,
}

/// Training schedule from the reference setup.
pub struct PaperSchedule {
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub weight_decay: f64,
}

pub fn paper_schedule(dataset: DatasetKind, model: ModelKind) -> PaperSchedule {
    match (model.is_inn(), dataset) {
        (true, DatasetKind::Mnist) => PaperSchedule {
            epochs: 10,
            milestones: LrSchedule::inn_mnist().milestones,
            weight_decay: 1e-6,
        },
        (true, DatasetKind::Cifar10) => PaperSchedule {
            epochs: 15,
            milestones: LrSchedule::inn_cifar().milestones,
            weight_decay: 1e-6,
        },
        (false, DatasetKind::Mnist) => PaperSchedule {
            epochs: 100,
            milestones: LrSchedule::classic_mnist(100).milestones,
            weight_decay: 1e-5,
        },
        (false, DatasetKind::Cifar10) => PaperSchedule {
            epochs: 100,
            milestones: LrSchedule::classic_cifar().milestones,
            weight_decay: 1e-5,
        },
    }
}

/// Milestones of a schedule stretched or shrunk to a different epoch count.
/// Duplicates and milestones at or past the end are dropped.
pub fn scale_milestones(milestones: &[usize], from_epochs: usize, to_epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = milestones
        .iter()
        .map(|&m| ((m * to_epochs) as f64 / from_epochs as f64).round() as usize)
        .filter(|&m| m > 0 && m < to_epochs)
        .collect();
    out.dedup();
    out
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has an invalid value {v:?}")))
}

pub fn parse_milestones(v: &str) -> Result<Vec<usize>> {
    let v = v.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|m| parse("milestones", m.trim())).collect()
}

impl ExperimentConfig {
    /// Reference hyperparameters for a dataset, model and bottleneck.
    pub fn paper(dataset: DatasetKind, model: ModelKind, k: usize) -> Self {
        let sched = paper_schedule(dataset, model);
        ExperimentConfig {
            dataset,
            data_dir: None,
            model,
            k,
            epochs: sched.epochs,
            batch_size: 128,
            lr: 1e-3,
            milestones: sched.milestones,
            weight_decay: sched.weight_decay,
            clamp: Clamp::default(),
            seed: 0,
            shuffle_seed: 0,
            subset: 0,
            test_subset: 0,
            out: PathBuf::from("runs"),
            eval_batch_size: 500,
        }
    }

    /// Builds a config from `key = value` pairs. Later pairs win, so config
    /// file entries followed by command-line flags give flag precedence.
    ///
    /// Defaults follow [`ExperimentConfig::paper`] for the chosen dataset
    /// and model. When `epochs` is set without `milestones`, the reference
    /// milestones are scaled proportionally.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            let key = k.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            map.insert(key, v.trim().to_owned());
        }
        let dataset: DatasetKind = map.get("dataset").map_or(Ok(DatasetKind::Mnist), |v| v.parse())?;
        let model: ModelKind = map
            .get("model")
            .map_or(Ok(ModelKind::Inn), |v| v.parse())?;
        let k = map.get("bottleneck").map_or(Ok(12), |v| parse("bottleneck", v))?;
        let mut cfg = ExperimentConfig::paper(dataset, model, k);
        let reference_epochs = cfg.epochs;

        for (key, v) in &map {
            match key.as_str() {
                "dataset" | "model" | "bottleneck" => {}
                "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                "epochs" => cfg.epochs = parse(key, v)?,
                "batch_size" => cfg.batch_size = parse(key, v)?,
                "lr" => cfg.lr = parse(key, v)?,
                "milestones" => cfg.milestones = parse_milestones(v)?,
                "weight_decay" => cfg.weight_decay = parse(key, v)?,
                "clamp" => cfg.clamp = parse_clamp(v)?,
                "seed" => {
                    cfg.seed = parse(key, v)?;
                    if !map.contains_key("shuffle_seed") {
                        cfg.shuffle_seed = cfg.seed;
                    }
                }
                "shuffle_seed" => cfg.shuffle_seed = parse(key, v)?,
                "subset" => cfg.subset = parse(key, v)?,
                "test_subset" => cfg.test_subset = parse(key, v)?,
                "out" => cfg.out = PathBuf::from(v),
                "eval_batch_size" => cfg.eval_batch_size = parse(key, v)?,
                _ => unreachable!("keys are checked above"),
            }
        }
        if map.contains_key("epochs") && !map.contains_key("milestones") {
            cfg.milestones = scale_milestones(&cfg.milestones, reference_epochs, cfg.epochs);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a flat `key = value` file, then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            pairs.extend(parse_key_values(&text, path)?);
        }
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.model.supports(self.dataset) {
            return Err(Error::Config(format!("model {} is not defined for {}", self.model, self.dataset)));
        }
        let d = self.dataset.dim();
        if self.k > d {
            return Err(Error::Config(format!("bottleneck {} exceeds dimension {d}", self.k)));
        }
        if !self.model.is_inn() && self.k == 0 {
            return Err(Error::Config("classical bottleneck must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay * self.lr < 1.0) {
            return Err(Error::Config(format!("invalid weight decay {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr, self.milestones.clone())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            dataset: self.dataset,
            kind: self.model,
            k: self.k,
            clamp: self.clamp,
            seed: self.seed,
        }
    }

    /// Flat text form accepted by [`ExperimentConfig::load`].
    pub fn to_text(&self) -> String {
        let clamp = match self.clamp {
            Clamp::Soft(c) => c.to_string(),
            Clamp::Off => "off".into(),
        };
        let milestones: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        let mut s = format!(
            "dataset = {}\nmodel = {}\nbottleneck = {}\nepochs = {}\nbatch_size = {}\nlr = {}\nmilestones = {}\n\
             weight_decay = {}\nclamp = {clamp}\nseed = {}\nshuffle_seed = {}\nsubset = {}\ntest_subset = {}\n\
             eval_batch_size = {}\nout = {}\n",
            self.dataset,
            self.model,
            self.k,
            self.epochs,
            self.batch_size,
            self.lr,
            if milestones.is_empty() { "none".into() } else { milestones.join(",") },
            self.weight_decay,
            self.seed,
            self.shuffle_seed,
            self.subset,
            self.test_subset,
            self.eval_batch_size,
            self.out.display(),
        );
        if let Some(dir) = &self.data_dir {
            s += &format!("data_dir = {}\n", dir.display());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ClassicVariant;

    #[test]
    fn paper_defaults() {
        let c = ExperimentConfig::from_pairs([("model", "classic")]).unwrap();
        assert_eq!((c.epochs, c.weight_decay, c.batch_size), (100, 1e-5, 128));
        assert_eq!(c.milestones, (1..10).map(|i| i * 10).collect::<Vec<_>>());
        let c = ExperimentConfig::from_pairs([("dataset", "cifar10"), ("model", "inn")]).unwrap();
        assert_eq!((c.epochs, c.milestones.clone(), c.weight_decay), (15, vec![10], 1e-6));
        let c = ExperimentConfig::from_pairs([("dataset", "cifar10"), ("model", "conv-cifar")]).unwrap();
        assert_eq!(c.milestones, vec![60, 85]);
    }

    #[test]
    fn cut_epochs_scale_milestones() {
        let c = ExperimentConfig::from_pairs([("model", "classic"), ("epochs", "30")]).unwrap();
        assert_eq!(c.milestones, (1..10).map(|i| i * 3).collect::<Vec<_>>());
        let c = ExperimentConfig::from_pairs([("model", "classic"), ("epochs", "30"), ("milestones", "5")]).unwrap();
        assert_eq!(c.milestones, vec![5]);
        assert_eq!(scale_milestones(&[8], 10, 5), vec![4]);
        assert!(scale_milestones(&[8], 10, 2).is_empty());
    }

    #[test]
    fn later_pairs_win_and_file_round_trips() {
        let c = ExperimentConfig::from_pairs([("bottleneck", "4"), ("bottleneck", "8"), ("seed", "3")]).unwrap();
        assert_eq!((c.k, c.seed, c.shuffle_seed), (8, 3, 3));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut base = ExperimentConfig::paper(DatasetKind::Mnist, ModelKind::Classical(ClassicVariant::Classic1024), 32);
        base.milestones.clear();
        base.data_dir = Some("/data".into());
        std::fs::write(&path, base.to_text()).unwrap();
        assert_eq!(ExperimentConfig::load(Some(&path), &[]).unwrap(), base);
        let flags = vec![("bottleneck".to_string(), "64".to_string())];
        assert_eq!(ExperimentConfig::load(Some(&path), &flags).unwrap().k, 64);
    }

    #[test]
    fn violations_are_rejected() {
        for bad in [
            vec![("bottleneck", "785")],
            vec![("model", "classic"), ("bottleneck", "0")],
            vec![("lr", "0")],
            vec![("epochs", "0")],
            vec![("dataset", "cifar10"), ("model", "classic")],
            vec![("colour", "red")],
            vec![("milestones", "3,x")],
        ] {
            assert!(matches!(ExperimentConfig::from_pairs(bad.clone()), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(ExperimentConfig::from_pairs([("bottleneck", "0")]).is_ok());
    }
}
