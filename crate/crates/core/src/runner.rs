//! Configuration-driven experiments.
//!
//! A configuration is a flat text file of `key = value` lines with dotted
//! keys (`engine.gamma = 0.1`). Lines starting with `#` are comments. A
//! `recipe` key selects a built-in starting point that the remaining keys
//! override. Every run writes its complete configuration back as
//! `config.txt`, which can be fed to `run` again to reproduce the results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::attack::{AttackConfig, MaskForm};
use crate::data::{self, BackgroundMode, ClassOrder, Dataset};
use crate::engine::{DifTraceRow, EngineConfig, FusionMode, Learner};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::nn::{ArchKind, ArchSpec};
use crate::optim::LrSchedule;

/// Environment variable naming the directory relative output paths resolve
/// against. Defaults to `runs`.
pub const OUTPUT_ROOT_ENV: &str = "ARI_OUTPUT_ROOT";

pub const RECIPES: [&str; 2] = ["mnist-5task", "toy-background"];

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Mnist {
        dir: PathBuf,
    },
    Synthetic {
        mode: BackgroundMode,
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub recipe: String,
    pub dataset: DatasetSpec,
    pub classes_per_task: usize,
    pub class_order: ClassOrder,
    pub arch: ArchSpec,
    pub engine: EngineConfig,
    pub attack: AttackConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn mnist_5task() -> ExperimentConfig {
    ExperimentConfig {
        recipe: "mnist-5task".into(),
        dataset: DatasetSpec::Mnist {
            dir: PathBuf::from("data/mnist"),
        },
        classes_per_task: 2,
        class_order: ClassOrder::Natural,
        arch: ArchSpec::mlp2(),
        // Rehearsal alone decides how much of the old tasks survives under an
        // all-seen argmax, so the memory fine-tune runs longer and at the full rate.
        engine: EngineConfig {
            meta_epochs: 30,
            meta_lr: Some(0.1),
            ..EngineConfig::default()
        },
        attack: AttackConfig::default(),
        seed: 0,
        output_dir: PathBuf::from("mnist-5task"),
    }
}

fn toy_background() -> ExperimentConfig {
    let mut cfg = mnist_5task();
    cfg.recipe = "toy-background".into();
    cfg.dataset = DatasetSpec::Synthetic {
        mode: BackgroundMode::Shared,
        classes: 10,
        train_per_class: 100,
        test_per_class: 50,
    };
    // 200 images per task: a faster base update and more, smaller steps. At a
    // higher rate the occasional task model diverges on its first epoch.
    cfg.engine.gamma = 0.5;
    cfg.engine.epochs_per_task = 30;
    cfg.engine.meta_epochs = 5;
    cfg.engine.meta_lr = None;
    cfg.engine.schedule = LrSchedule {
        initial: 0.025,
        factor: 0.5,
        milestones: vec![15, 25],
    };
    cfg.engine.batch_size = 16;
    cfg.engine.memory_budget = 100;
    // A weaker attack; at 8/255 training on so few images does not converge.
    cfg.attack.epsilon = 4.0 / 255.0;
    cfg.attack.step_size = 1.0 / 255.0;
    cfg.output_dir = PathBuf::from("toy-background");
    cfg
}

pub fn recipe(name: &str) -> Result<ExperimentConfig> {
    match name.trim() {
        "mnist-5task" => Ok(mnist_5task()),
        "toy-background" => Ok(toy_background()),
        other => Err(Error::Config(format!(
            "unknown recipe {other:?} (expected one of {})",
            RECIPES.join(", ")
        ))),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key = value, got {line:?}",
                n + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Parses a configuration text. Keys apply in order on top of the
    /// recipe named by `recipe` (default `mnist-5task`).
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let base = pairs
            .iter()
            .find(|(k, _)| k == "recipe")
            .map_or("mnist-5task", |(_, v)| v.as_str());
        let mut cfg = recipe(base)?;
        for (k, v) in &pairs {
            if k != "recipe" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Loads a configuration file, or a built-in recipe when `source` names
    /// one and no such file exists.
    pub fn load(source: &str) -> Result<Self> {
        let path = Path::new(source);
        if !path.exists() && RECIPES.contains(&source) {
            return recipe(source);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.engine;
        let a = &mut self.attack;
        match key {
            "recipe" => {
                let keep = self.clone();
                *self = recipe(value)?;
                self.seed = keep.seed;
            }
            "seed" => self.seed = parse(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "dataset.kind" => {
                self.dataset = match value.trim() {
                    "mnist" => DatasetSpec::Mnist {
                        dir: PathBuf::from("data/mnist"),
                    },
                    "synthetic" => match toy_background().dataset {
                        d @ DatasetSpec::Synthetic { .. } => d,
                        DatasetSpec::Mnist { .. } => unreachable!(),
                    },
                    other => return Err(Error::Config(format!("unknown dataset kind {other:?}"))),
                }
            }
            "dataset.mnist_dir" => match &mut self.dataset {
                DatasetSpec::Mnist { dir } => *dir = PathBuf::from(value),
                _ => return Err(Error::Config(format!("{key} needs dataset.kind = mnist"))),
            },
            "dataset.background_mode"
            | "dataset.classes"
            | "dataset.train_per_class"
            | "dataset.test_per_class" => {
                let DatasetSpec::Synthetic {
                    mode,
                    classes,
                    train_per_class,
                    test_per_class,
                } = &mut self.dataset
                else {
                    return Err(Error::Config(format!(
                        "{key} needs dataset.kind = synthetic"
                    )));
                };
                match key {
                    "dataset.background_mode" => *mode = value.parse()?,
                    "dataset.classes" => *classes = parse(key, value)?,
                    "dataset.train_per_class" => *train_per_class = parse(key, value)?,
                    _ => *test_per_class = parse(key, value)?,
                }
            }
            "split.classes_per_task" => self.classes_per_task = parse(key, value)?,
            "split.order" => {
                self.class_order = match value.trim() {
                    "natural" => ClassOrder::Natural,
                    "shuffled" => ClassOrder::Shuffled { seed: self.seed },
                    other => return Err(Error::Config(format!("unknown class order {other:?}"))),
                }
            }
            "model.arch" => {
                let hidden = self.arch.hidden;
                self.arch = value.parse()?;
                if self.arch.kind == ArchKind::Mlp2 {
                    self.arch.hidden = hidden;
                }
            }
            "model.hidden" => self.arch.hidden = parse(key, value)?,
            "model.attention" => self.arch.attention = parse_bool(key, value)?,
            "engine.gamma" => e.gamma = parse(key, value)?,
            "engine.epochs_per_task" => e.epochs_per_task = parse(key, value)?,
            "engine.meta_epochs" => e.meta_epochs = parse(key, value)?,
            "engine.meta_lr" => {
                e.meta_lr = match value.trim() {
                    "final" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "engine.lr" => e.schedule.initial = parse(key, value)?,
            "engine.lr_factor" => e.schedule.factor = parse(key, value)?,
            "engine.lr_milestones" => {
                e.schedule.milestones = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "engine.batch_size" => e.batch_size = parse(key, value)?,
            "engine.momentum" => e.momentum = parse(key, value)?,
            "engine.weight_decay" => e.weight_decay = parse(key, value)?,
            "engine.dif_scale" => e.dif_scale = value.parse()?,
            "engine.fusion" => e.fusion = value.parse()?,
            "engine.reg_weight" => e.reg_weight = parse(key, value)?,
            "engine.memory_budget" => e.memory_budget = parse(key, value)?,
            "engine.parallel" => e.parallel = parse_bool(key, value)?,
            "attack.epsilon" => a.epsilon = parse(key, value)?,
            "attack.step_size" => a.step_size = parse(key, value)?,
            "attack.iterations" => a.iterations = parse(key, value)?,
            "attack.mask_form" => a.mask_form = value.parse()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut p: Vec<(&str, String)> = vec![
            ("recipe", self.recipe.clone()),
            ("seed", self.seed.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        match &self.dataset {
            DatasetSpec::Mnist { dir } => {
                p.push(("dataset.kind", "mnist".into()));
                p.push(("dataset.mnist_dir", dir.display().to_string()));
            }
            DatasetSpec::Synthetic {
                mode,
                classes,
                train_per_class,
                test_per_class,
            } => {
                p.push(("dataset.kind", "synthetic".into()));
                p.push(("dataset.background_mode", mode.to_string()));
                p.push(("dataset.classes", classes.to_string()));
                p.push(("dataset.train_per_class", train_per_class.to_string()));
                p.push(("dataset.test_per_class", test_per_class.to_string()));
            }
        }
        p.push(("split.classes_per_task", self.classes_per_task.to_string()));
        p.push((
            "split.order",
            match self.class_order {
                ClassOrder::Natural => "natural".into(),
                ClassOrder::Shuffled { .. } => "shuffled".into(),
            },
        ));
        p.push(("model.arch", self.arch.name().into()));
        p.push(("model.hidden", self.arch.hidden.to_string()));
        p.push(("model.attention", self.arch.attention.to_string()));
        let e = &self.engine;
        p.push(("engine.gamma", e.gamma.to_string()));
        p.push(("engine.epochs_per_task", e.epochs_per_task.to_string()));
        p.push(("engine.meta_epochs", e.meta_epochs.to_string()));
        p.push((
            "engine.meta_lr",
            e.meta_lr
                .map_or_else(|| "final".to_string(), |r| r.to_string()),
        ));
        p.push(("engine.lr", e.schedule.initial.to_string()));
        p.push(("engine.lr_factor", e.schedule.factor.to_string()));
        p.push(("engine.lr_milestones", join(&e.schedule.milestones)));
        p.push(("engine.batch_size", e.batch_size.to_string()));
        p.push(("engine.momentum", e.momentum.to_string()));
        p.push(("engine.weight_decay", e.weight_decay.to_string()));
        p.push(("engine.dif_scale", e.dif_scale.to_string()));
        p.push(("engine.fusion", e.fusion.to_string()));
        p.push(("engine.reg_weight", e.reg_weight.to_string()));
        p.push(("engine.memory_budget", e.memory_budget.to_string()));
        p.push(("engine.parallel", e.parallel.to_string()));
        let a = &self.attack;
        p.push(("attack.epsilon", a.epsilon.to_string()));
        p.push(("attack.step_size", a.step_size.to_string()));
        p.push(("attack.iterations", a.iterations.to_string()));
        p.push(("attack.mask_form", a.mask_form.to_string()));
        p.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.attack.validate()?;
        self.arch.validate()?;
        if self.classes_per_task == 0 {
            return Err(Error::Config(
                "split.classes_per_task must be positive".into(),
            ));
        }
        match &self.dataset {
            DatasetSpec::Mnist { dir } => {
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "MNIST directory {} does not exist",
                        dir.display()
                    )));
                }
            }
            DatasetSpec::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                ..
            } => {
                if *classes < 2 || *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config(
                        "synthetic dataset needs 2+ classes and samples per class".into(),
                    ));
                }
            }
        }
        if let ClassOrder::Shuffled { seed } = self.class_order {
            if seed != self.seed {
                return Err(Error::Config(
                    "shuffled class order must use the run seed".into(),
                ));
            }
        }
        Ok(())
    }

    /// Absolute output directory: relative paths resolve against the
    /// output root.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            let root = std::env::var_os(OUTPUT_ROOT_ENV)
                .map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(&self.output_dir)
        }
    }

    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            seed: self.seed,
            ..self.engine.clone()
        }
    }
}

pub fn load_datasets(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Mnist { dir } => data::load_mnist_dir(dir),
        DatasetSpec::Synthetic {
            mode,
            classes,
            train_per_class,
            test_per_class,
        } => {
            data::synth_background_dataset(*mode, *classes, *train_per_class, *test_per_class, seed)
        }
    }
}

/// Everything a finished run measured.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub accuracy: AccuracyMatrix,
    /// Same layout as `accuracy`, each task scored over its own classes only.
    pub restricted: AccuracyMatrix,
    pub trace: Vec<DifTraceRow>,
    pub meta_losses: Vec<Vec<f64>>,
    pub output_dir: PathBuf,
}

impl RunReport {
    pub fn final_average_accuracy(&self) -> Result<f64> {
        self.accuracy.average_accuracy(self.accuracy.tasks())
    }

    /// `max_offdiag_dif` per epoch for one task.
    pub fn dif_series(&self, task: usize) -> Vec<f64> {
        self.trace
            .iter()
            .filter(|r| r.task == task)
            .map(|r| r.max_offdiag_dif)
            .collect()
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn metric_or_null(v: Result<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

/// Runs an experiment on already loaded data and writes its artifacts.
pub fn run_with_data(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    let partition = data::split_tasks(train, cfg.classes_per_task, cfg.class_order)?;
    let tasks = partition.tasks();
    let t = tasks.len();
    let out = cfg.resolved_output_dir();
    let ckpt = out.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    write(&out.join("config.txt"), cfg.to_text())?;

    let mut learner = Learner::new(
        cfg.arch.clone(),
        cfg.engine_config(),
        cfg.attack.clone(),
        tasks,
    )?;
    let mut accuracy = AccuracyMatrix::new(t)?;
    let mut restricted = AccuracyMatrix::new(t)?;
    accuracy.set_baselines(
        (1..=t)
            .map(|j| learner.baseline(test, j))
            .collect::<Result<_>>()?,
    )?;
    let mut csv = String::from("after_task,eval_task,accuracy,task_restricted_accuracy\n");
    for i in 1..=t {
        let outcome = learner.learn_next(train)?;
        outcome
            .model
            .snapshot()
            .save(&ckpt.join(format!("task_{i}.ckpt")))?;
        for j in 1..=t {
            let (acc, res) = learner.evaluate_task(test, j)?;
            accuracy.set(i, j, acc)?;
            restricted.set(i, j, res)?;
            let _ = writeln!(csv, "{i},{j},{acc},{res}");
        }
        eprintln!(
            "task {i}/{t}: average accuracy {:.4}",
            accuracy.average_accuracy(i)?
        );
    }
    write(&out.join("metrics.csv"), csv)?;

    let mut trace = String::from("task,epoch,max_offdiag_dif");
    for k in 1..=t + 1 {
        let _ = write!(trace, ",weights_{k}");
    }
    trace.push('\n');
    for row in learner.trace() {
        let _ = write!(trace, "{},{},{}", row.task, row.epoch, row.max_offdiag_dif);
        for k in 0..=t {
            match row.weights.get(k) {
                Some(w) => {
                    let _ = write!(trace, ",{w}");
                }
                None => trace.push(','),
            }
        }
        trace.push('\n');
    }
    write(&out.join("dif_trace.csv"), trace)?;

    let averages: Vec<f64> = (1..=t)
        .map(|i| accuracy.average_accuracy(i))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (1..=t)
        .map(|i| {
            (1..=t)
                .map(|j| accuracy.get(i, j).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let config: BTreeMap<String, String> = cfg.to_pairs().into_iter().collect();
    let summary = json!({
        "config": config,
        "seed": cfg.seed,
        "tasks": t,
        "average_accuracy": averages,
        "final_average_accuracy": averages[t - 1],
        "bwt": metric_or_null(accuracy.bwt()),
        "fwt": metric_or_null(accuracy.fwt()),
        "baselines": accuracy.baselines(),
        "accuracy_matrix": rows,
        "meta_losses": learner.meta_losses(),
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::State(e.to_string()))?;
    write(&out.join("summary.json"), text + "\n")?;
    Ok(RunReport {
        accuracy,
        restricted,
        trace: learner.trace().to_vec(),
        meta_losses: learner.meta_losses().to_vec(),
        output_dir: out,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (train, test) = load_datasets(&cfg.dataset, cfg.seed)?;
    run_with_data(cfg, &train, &test)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    MaskForm,
    Fusion,
    BackgroundMode,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mask_form" => Ok(Self::MaskForm),
            "fusion" | "fusion_on_off" => Ok(Self::Fusion),
            "background_mode" => Ok(Self::BackgroundMode),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (mask_form, fusion or background_mode)"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::MaskForm => "mask_form",
            AblationAxis::Fusion => "fusion",
            AblationAxis::BackgroundMode => "background_mode",
        }
    }

    /// `(key, value)` overrides, one per run.
    pub fn settings(self) -> Vec<(&'static str, String)> {
        match self {
            AblationAxis::MaskForm => MaskForm::ALL
                .iter()
                .map(|m| ("attack.mask_form", m.to_string()))
                .collect(),
            AblationAxis::Fusion => FusionMode::ALL
                .iter()
                .map(|m| ("engine.fusion", m.to_string()))
                .collect(),
            AblationAxis::BackgroundMode => [BackgroundMode::Shared, BackgroundMode::Distinct]
                .iter()
                .map(|m| ("dataset.background_mode", m.to_string()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: String,
    pub report: RunReport,
}

/// One run per axis value under `<output>/<axis>-<value>`, plus
/// `ablation_<axis>.csv` in the base output directory.
pub fn ablate(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let base = cfg.resolved_output_dir();
    let variants: Vec<(String, ExperimentConfig)> = axis
        .settings()
        .into_iter()
        .map(|(key, value)| {
            let mut c = cfg.clone();
            c.set(key, &value)?;
            c.output_dir = base.join(format!("{}-{value}", axis.as_str()));
            Ok((value, c))
        })
        .collect::<Result<_>>()?;
    let shared = match axis {
        AblationAxis::BackgroundMode => None,
        _ => Some(load_datasets(&cfg.dataset, cfg.seed)?),
    };
    let one = |(value, c): &(String, ExperimentConfig)| -> Result<AblationRow> {
        let report = match &shared {
            Some((train, test)) => run_with_data(c, train, test)?,
            None => run(c)?,
        };
        Ok(AblationRow {
            value: value.clone(),
            report,
        })
    };
    let rows: Vec<AblationRow> = if parallel {
        variants.par_iter().map(one).collect::<Result<_>>()?
    } else {
        variants.iter().map(one).collect::<Result<_>>()?
    };
    let mut csv = format!("{},final_average_accuracy,bwt,fwt\n", axis.as_str());
    for r in &rows {
        let f = |v: Result<f64>| v.map_or_else(|_| String::new(), |x| x.to_string());
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.value,
            f(r.report.final_average_accuracy()),
            f(r.report.accuracy.bwt()),
            f(r.report.accuracy.fwt())
        );
    }
    write(&base.join(format!("ablation_{}.csv", axis.as_str())), csv)?;
    Ok(rows)
}
