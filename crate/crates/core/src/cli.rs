//! Experiment orchestration: TOML configs, the pretrain / attack / evaluate
//! stages, γ sweeps and report files.
//!
//! Output layout of a run directory:
//!
//! ```text
//! config.toml             resolved config (its sha256 is the manifest hash)
//! manifest.json           status, timestamps, file inventory
//! pretrain.json           classifier accuracies, task warnings
//! data/*.vmids            private train / test and auxiliary data
//! checkpoints/*.vmick     target, evaluator, generator, discriminator, fitted families
//! samples/*.vmids         attack samples, labelled by target class
//! attacks.json            per-class KL and entropy of each fitted family
//! traces.csv, layers.csv  optimization traces, per-layer KL / entropy
//! metrics_per_class.csv, summary.csv, summary.json
//! sweep.csv, sweep_per_class.csv   (sweep only)
//! ```
//!
//! All CSV and JSON reports are byte-identical across reruns with the same
//! seed. Only `manifest.json` carries timestamps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng as _, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{general_mi, generative_mi, run_attack, AttackConfig, AttackResult};
use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::models::{
    train_classifier, train_discriminator, train_gan, AnyGenerator, Classifier, ClassifierTraining, CodeGenerator,
    Discriminator, GanTraining,
};
use crate::rng::{normal_tensor, stream};
use crate::tasks::{load_dataset, make_synthetic_task, save_dataset, LabeledDataset, Split, TaskSpec};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub private_train: PathBuf,
    pub private_test: PathBuf,
    pub auxiliary: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorSource {
    /// Train a GAN on the auxiliary data.
    #[default]
    Gan,
    /// Use the synthetic task's true generator.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSettings {
    pub source: GeneratorSource,
    pub gan: GanTraining,
    /// Discriminator training against the frozen oracle generator.
    pub discriminator_steps: usize,
    pub discriminator_batch_size: usize,
    pub discriminator_lr: f64,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        GeneratorSettings {
            source: GeneratorSource::Gan,
            gan: GanTraining::default(),
            discriminator_steps: 1000,
            discriminator_batch_size: 64,
            discriminator_lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub k: usize,
    pub samples_per_class: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings { k: 5, samples_per_class: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSettings {
    pub general_mi: bool,
    pub general_mi_steps: usize,
    pub general_mi_lr: f64,
    pub generative_mi: bool,
    pub lambda: f64,
    pub generative_mi_steps: usize,
    pub generative_mi_lr: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            general_mi: true,
            general_mi_steps: 200,
            general_mi_lr: 0.1,
            generative_mi: true,
            lambda: 100.0,
            generative_mi_steps: 1000,
            generative_mi_lr: 1e-3,
        }
    }
}

fn default_evaluator() -> ClassifierTraining {
    ClassifierTraining { hidden: vec![64], epochs: 60, ..ClassifierTraining::default() }
}

fn default_gammas() -> Vec<f64> {
    vec![1e-3]
}

/// A whole experiment. `seed` is the only mandatory key.
///
/// Inside `[attack]` and `[[class_attack]]`, the `class`, `gamma` and `seed`
/// keys are overwritten by the pipeline: classes come from `classes`, γ from
/// `gammas`, and attack seeds are derived from the root seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Target classes to attack; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub target: ClassifierTraining,
    #[serde(default = "default_evaluator")]
    pub evaluator: ClassifierTraining,
    #[serde(default)]
    pub generator: GeneratorSettings,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub metrics: MetricSettings,
    #[serde(default)]
    pub baselines: BaselineSettings,
    /// Per-class replacements for `[attack]`.
    #[serde(default, rename = "class_attack", skip_serializing_if = "Vec::is_empty")]
    pub class_attacks: Vec<AttackConfig>,
}

impl ExperimentConfig {
    /// Parses and validates. Errors carry the TOML line and key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative `output` and `data.*` paths are taken
    /// relative to the file's directory, and data files must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(out) = &cfg.output {
            cfg.output = Some(base.join(out));
        }
        if let Some(d) = &mut cfg.data {
            for (name, p) in [("private_train", &mut d.private_train), ("private_test", &mut d.private_test), ("auxiliary", &mut d.auxiliary)] {
                *p = base.join(&*p);
                if !p.is_file() {
                    return Err(Error::Config(format!("data.{name}: no such file {}", p.display())));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.task.is_some() && self.data.is_some() {
            return bad("set either [task] or [data], not both".into());
        }
        if self.data.is_some() && self.generator.source == GeneratorSource::Oracle {
            return bad("generator.source = \"oracle\" needs a synthetic [task]".into());
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad(format!("gammas must be a non-empty list of finite values >= 0, got {:?}", self.gammas));
        }
        if self.metrics.k == 0 || self.metrics.samples_per_class <= self.metrics.k {
            return bad("metrics: need k >= 1 and samples_per_class > k".into());
        }
        if self.baselines.lambda <= 0.0 || !self.baselines.lambda.is_finite() {
            return bad("baselines.lambda must be finite and > 0".into());
        }
        for (i, a) in std::iter::once(&self.attack).chain(&self.class_attacks).enumerate() {
            a.validate().map_err(|e| Error::Config(format!("attack config {i}: {e}")))?;
        }
        let mut seen: Vec<usize> = self.class_attacks.iter().map(|a| a.class).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return bad("class_attack lists a class twice".into());
        }
        Ok(())
    }

    /// Canonical TOML form; the config hash is taken over these bytes.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// The attack config for `class` at `gamma`, seeded from the root seed.
    /// The seed does not depend on γ, so γ sweeps share random numbers.
    pub fn attack_for(&self, class: usize, gamma: f64) -> AttackConfig {
        let mut a = self.class_attacks.iter().find(|a| a.class == class).unwrap_or(&self.attack).clone();
        a.class = class;
        a.gamma = gamma;
        a.seed = stream(self.seed, "pipeline.attack", class as u64).next_u64();
        a
    }

    /// `--out` wins over the config's `output`.
    pub fn output_dir(&self, cli_out: Option<&Path>) -> Result<PathBuf> {
        cli_out
            .map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .ok_or_else(|| Error::Config("no output directory: set `output` or pass --out".into()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub status: RunStatus,
    /// Every file under the output directory except the manifest itself.
    pub files: Vec<FileEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Sorted inventory of `dir`, manifest excluded.
pub fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel == MANIFEST {
                continue;
            }
            let bytes = fs::read(&path)?;
            out.push(FileEntry { path: rel, bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `config.toml` and a running manifest, runs `body`, then finalizes
/// the manifest as complete or failed. Partial outputs stay on disk.
fn staged<T>(cfg: &ExperimentConfig, out: &Path, stage: &str, body: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(out)?;
    let toml_text = cfg.to_toml()?;
    fs::write(out.join("config.toml"), &toml_text)?;
    let mut manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        stage: stage.into(),
        config_hash: sha256_hex(toml_text.as_bytes()),
        seed: cfg.seed,
        started_unix_ms: now_ms(),
        finished_unix_ms: None,
        status: RunStatus::Running,
        files: inventory(out)?,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    let result = body();
    manifest.finished_unix_ms = Some(now_ms());
    manifest.status = match &result {
        Ok(_) => RunStatus::Complete,
        Err(e) => RunStatus::Failed { error: e.to_string() },
    };
    manifest.files = inventory(out)?;
    write_json(&out.join(MANIFEST), &manifest)?;
    result
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainInfo {
    pub classes: usize,
    pub generator_source: GeneratorSource,
    pub target_train_accuracy: f64,
    pub target_test_accuracy: f64,
    pub evaluator_train_accuracy: f64,
    /// Evaluator accuracy on the private training split (unseen by it).
    pub evaluator_heldout_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Everything the attack and evaluation stages share.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub private_train: LabeledDataset,
    pub private_test: LabeledDataset,
    pub auxiliary: LabeledDataset,
    /// The attacked model, trained on `private_train`.
    pub target: Classifier,
    /// Scores attack accuracy and supplies features; trained on `private_test`.
    pub evaluator: Classifier,
    pub generator: AnyGenerator,
    pub discriminator: Discriminator,
    pub info: PretrainInfo,
}

impl Pretrained {
    pub fn classes(&self) -> usize {
        self.private_train.classes()
    }

    /// The configured target classes, checked against the data.
    pub fn attacked_classes(&self, cfg: &ExperimentConfig) -> Result<Vec<usize>> {
        let c = self.classes();
        let classes = cfg.classes.clone().unwrap_or_else(|| (0..c).collect());
        if classes.is_empty() || classes.iter().any(|&y| y >= c) {
            return Err(Error::Config(format!("classes must be a non-empty subset of 0..{c}, got {classes:?}")));
        }
        Ok(classes)
    }

    /// Private training rows of `class`: the real cloud for the metrics.
    pub fn real_class(&self, class: usize) -> Tensor {
        self.private_train.subset(&self.private_train.class_indices(class)).features()
    }
}

/// Builds or loads the data, then trains the target classifier, the
/// evaluation classifier, and the generator / discriminator pair.
/// Data are rounded to f32 first so in-memory and on-disk runs agree.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<Pretrained> {
    let seed = cfg.seed;
    let (train, test, aux, oracle, warnings) = match &cfg.data {
        Some(d) => (
            load_dataset(&d.private_train, Split::PrivateTrain)?,
            load_dataset(&d.private_test, Split::PrivateTest)?,
            load_dataset(&d.auxiliary, Split::Auxiliary)?,
            None,
            Vec::new(),
        ),
        None => {
            let b = make_synthetic_task(&cfg.task.clone().unwrap_or_default(), seed)?;
            (b.private_train, b.private_test, b.auxiliary, Some(b.generator), b.warnings)
        }
    };
    let (train, test, aux) = (train.quantized(), test.quantized(), aux.quantized());
    if train.dim() != test.dim() || train.dim() != aux.dim() || train.classes() != test.classes() {
        return Err(Error::Config("private train / test / auxiliary data disagree on dimension or class count".into()));
    }

    let (target, _) = train_classifier(&train, &cfg.target, &mut stream(seed, "pretrain.target", 0))?;
    let (evaluator, _) = train_classifier(&test, &cfg.evaluator, &mut stream(seed, "pretrain.evaluator", 0))?;
    let (generator, discriminator) = match (cfg.generator.source, oracle) {
        (GeneratorSource::Gan, _) => {
            let (g, d, _) = train_gan(&aux, &cfg.generator.gan, &mut stream(seed, "pretrain.gan", 0))?;
            (AnyGenerator::Layered(g), d)
        }
        (GeneratorSource::Oracle, Some(g)) => {
            let s = &cfg.generator;
            let (d, _) = train_discriminator(
                &aux,
                &g,
                &s.gan.discriminator_hidden,
                s.discriminator_steps,
                s.discriminator_batch_size,
                s.discriminator_lr,
                &mut stream(seed, "pretrain.discriminator", 0),
            )?;
            (g, d)
        }
        (GeneratorSource::Oracle, None) => return Err(Error::Config("oracle generator needs a synthetic task".into())),
    };
    let info = PretrainInfo {
        classes: train.classes(),
        generator_source: cfg.generator.source,
        target_train_accuracy: target.accuracy(&train)?,
        target_test_accuracy: target.accuracy(&test)?,
        evaluator_train_accuracy: evaluator.accuracy(&test)?,
        evaluator_heldout_accuracy: evaluator.accuracy(&train)?,
        warnings,
    };
    Ok(Pretrained { private_train: train, private_test: test, auxiliary: aux, target, evaluator, generator, discriminator, info })
}

pub fn save_pretrained(pre: &Pretrained, out: &Path) -> Result<()> {
    fs::create_dir_all(out.join("data"))?;
    fs::create_dir_all(out.join("checkpoints"))?;
    save_dataset(&pre.private_train, out.join("data/private_train.vmids"))?;
    save_dataset(&pre.private_test, out.join("data/private_test.vmids"))?;
    save_dataset(&pre.auxiliary, out.join("data/auxiliary.vmids"))?;
    checkpoint::save(&pre.target, out.join("checkpoints/target.vmick"))?;
    checkpoint::save(&pre.evaluator, out.join("checkpoints/evaluator.vmick"))?;
    fs::write(out.join("checkpoints/generator.vmick"), pre.generator.to_bytes())?;
    checkpoint::save(&pre.discriminator, out.join("checkpoints/discriminator.vmick"))?;
    write_json(&out.join("pretrain.json"), &pre.info)
}

pub fn load_pretrained(out: &Path) -> Result<Pretrained> {
    let info: PretrainInfo = serde_json::from_slice(&fs::read(out.join("pretrain.json"))?)?;
    Ok(Pretrained {
        private_train: load_dataset(out.join("data/private_train.vmids"), Split::PrivateTrain)?,
        private_test: load_dataset(out.join("data/private_test.vmids"), Split::PrivateTest)?,
        auxiliary: load_dataset(out.join("data/auxiliary.vmids"), Split::Auxiliary)?,
        target: checkpoint::load(out.join("checkpoints/target.vmick"))?,
        evaluator: checkpoint::load(out.join("checkpoints/evaluator.vmick"))?,
        generator: AnyGenerator::from_bytes(&fs::read(out.join("checkpoints/generator.vmick"))?)?,
        discriminator: checkpoint::load(out.join("checkpoints/discriminator.vmick"))?,
        info,
    })
}

// ---------------------------------------------------------------------------
// Attacks

/// One attack method's samples for every attacked class.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSamples {
    pub method: String,
    pub gamma: Option<f64>,
    /// Rows labelled by target class, rounded to f32.
    pub samples: LabeledDataset,
}

impl MethodSamples {
    fn new(method: &str, gamma: Option<f64>, per_class: Vec<(usize, Tensor)>, classes: usize) -> Result<Self> {
        let dim = per_class[0].1.cols();
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (c, t) in &per_class {
            x.extend_from_slice(t.data());
            labels.extend(std::iter::repeat_n(*c as u16, t.rows()));
        }
        let samples = LabeledDataset::from_f64(&x, dim, labels, classes, Split::Auxiliary)?.quantized();
        Ok(MethodSamples { method: method.into(), gamma, samples })
    }

    pub fn file_name(&self) -> String {
        match self.gamma {
            Some(g) => format!("{}_gamma{}.vmids", self.method, g),
            None => format!("{}.vmids", self.method),
        }
    }

    pub fn per_class(&self, classes: &[usize]) -> Vec<(usize, Tensor)> {
        classes.iter().map(|&c| (c, self.samples.subset(&self.samples.class_indices(c)).features())).collect()
    }
}

/// Final diagnostics of one fitted family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub gamma: f64,
    pub class: usize,
    pub family: String,
    pub kl: f64,
    pub kl_std_error: f64,
    pub entropy: f64,
    pub entropy_std_error: f64,
    pub final_objective: f64,
    pub restart: usize,
    pub layer_kl: Vec<f64>,
    pub layer_kl_std_error: Vec<f64>,
    pub layer_entropy: Vec<f64>,
    pub layer_entropy_std_error: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VmiOutcome {
    pub gamma: f64,
    pub results: Vec<(usize, AttackResult)>,
    pub samples: MethodSamples,
}

impl VmiOutcome {
    pub fn summaries(&self) -> Vec<AttackSummary> {
        self.results
            .iter()
            .map(|(c, r)| AttackSummary {
                gamma: self.gamma,
                class: *c,
                family: format!("{:?}", r.config.family).to_lowercase(),
                kl: r.final_kl.estimate,
                kl_std_error: r.final_kl.std_error,
                entropy: r.final_entropy.estimate,
                entropy_std_error: r.final_entropy.std_error,
                final_objective: r.trace.last().map_or(f64::NAN, |t| t.total),
                restart: r.restart,
                layer_kl: r.layer_kl.iter().map(|e| e.estimate).collect(),
                layer_kl_std_error: r.layer_kl.iter().map(|e| e.std_error).collect(),
                layer_entropy: r.layer_entropy.iter().map(|e| e.estimate).collect(),
                layer_entropy_std_error: r.layer_entropy.iter().map(|e| e.std_error).collect(),
            })
            .collect()
    }
}

/// Runs VMI against the target classifier for every attacked class at one γ
/// and draws `samples_per_class` observations from each fitted family.
pub fn vmi_attack(cfg: &ExperimentConfig, pre: &Pretrained, gamma: f64) -> Result<VmiOutcome> {
    let n = cfg.metrics.samples_per_class;
    let mut results = Vec::new();
    let mut per_class = Vec::new();
    for c in pre.attacked_classes(cfg)? {
        let res = run_attack(&cfg.attack_for(c, gamma), &pre.generator, &pre.target)?;
        let x = res.family.generate(&pre.generator, n, &mut stream(cfg.seed, "samples.vmi", c as u64))?;
        per_class.push((c, x));
        results.push((c, res));
    }
    let samples = MethodSamples::new("vmi", Some(gamma), per_class, pre.classes())?;
    Ok(VmiOutcome { gamma, results, samples })
}

/// General MI: input-space gradient ascent from random auxiliary rows.
pub fn general_mi_attack(cfg: &ExperimentConfig, pre: &Pretrained) -> Result<MethodSamples> {
    let n = cfg.metrics.samples_per_class;
    let aux = pre.auxiliary.features();
    let mut per_class = Vec::new();
    for c in pre.attacked_classes(cfg)? {
        let mut rng = stream(cfg.seed, "baseline.general_mi", c as u64);
        let rows: Vec<f64> = (0..n).flat_map(|_| aux.row(rng.random_range(0..aux.rows())).to_vec()).collect();
        let x0 = Tensor::matrix(n, aux.cols(), rows)?;
        let res = general_mi(&pre.target, c, &x0, cfg.baselines.general_mi_steps, cfg.baselines.general_mi_lr)?;
        per_class.push((c, res.x));
    }
    MethodSamples::new("general_mi", None, per_class, pre.classes())
}

/// Generative MI: one code per class, its image replicated
/// `samples_per_class` times.
pub fn generative_mi_attack(cfg: &ExperimentConfig, pre: &Pretrained) -> Result<MethodSamples> {
    let n = cfg.metrics.samples_per_class;
    let b = &cfg.baselines;
    let mut per_class = Vec::new();
    for c in pre.attacked_classes(cfg)? {
        let z0 = normal_tensor(&mut stream(cfg.seed, "baseline.generative_mi", c as u64), vec![1, pre.generator.code_dim()]);
        let res = generative_mi(&pre.generator, &pre.discriminator, &pre.target, c, b.lambda, &z0, b.generative_mi_steps, b.generative_mi_lr)?;
        let x = pre.generator.generate(&res.z)?;
        per_class.push((c, Tensor::matrix(n, x.cols(), x.data().repeat(n))?));
    }
    MethodSamples::new("generative_mi", None, per_class, pre.classes())
}

// ---------------------------------------------------------------------------
// Evaluation and reports

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub gamma: Option<f64>,
    pub report: MetricsReport,
    /// Class means of the fitted families' final KL and entropy (VMI only).
    pub kl_final: Option<f64>,
    pub entropy_final: Option<f64>,
}

/// Scores one method's samples against the private training data of each
/// attacked class, in the evaluation classifier's feature space.
pub fn evaluate_samples(cfg: &ExperimentConfig, pre: &Pretrained, samples: &MethodSamples, attacks: &[AttackSummary]) -> Result<MethodReport> {
    let classes = pre.attacked_classes(cfg)?;
    let generated = samples.per_class(&classes);
    let real: Vec<(usize, Tensor)> = classes.iter().map(|&c| (c, pre.real_class(c))).collect();
    let report = evaluate(&generated, &real, &pre.evaluator, &pre.evaluator, cfg.metrics.k)?;
    let mine: Vec<&AttackSummary> = attacks.iter().filter(|a| Some(a.gamma) == samples.gamma).collect();
    let mean = |f: fn(&AttackSummary) -> f64| (!mine.is_empty()).then(|| mine.iter().map(|a| f(a)).sum::<f64>() / mine.len() as f64);
    Ok(MethodReport {
        method: samples.method.clone(),
        gamma: samples.gamma,
        report,
        kl_final: mean(|a| a.kl),
        entropy_final: mean(|a| a.entropy),
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

pub const PER_CLASS_COLUMNS: [&str; 12] = [
    "method", "gamma", "class", "accuracy", "accuracy_half_width", "precision", "recall", "density", "coverage", "diversity",
    "n_generated", "n_real",
];

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "method", "gamma", "accuracy", "accuracy_half_width", "precision", "recall", "density", "coverage", "diversity", "fid",
    "kl_final", "entropy_final", "k",
];

pub const SWEEP_COLUMNS: [&str; 10] =
    ["gamma", "accuracy", "precision", "recall", "density", "coverage", "diversity", "fid", "kl_final", "entropy_final"];

pub const TRACE_COLUMNS: [&str; 7] = ["method", "gamma", "class", "step", "nll", "kl", "total"];

pub const LAYER_COLUMNS: [&str; 7] = ["gamma", "class", "layer", "kl", "kl_std_error", "entropy", "entropy_std_error"];

pub fn write_per_class_csv(path: &Path, reports: &[MethodReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(PER_CLASS_COLUMNS)?;
    for r in reports {
        for c in &r.report.per_class {
            w.write_record([
                r.method.clone(),
                fmt_opt(r.gamma),
                c.class.to_string(),
                fmt_f(c.accuracy),
                fmt_f(c.accuracy_half_width),
                fmt_f(c.precision),
                fmt_f(c.recall),
                fmt_f(c.density),
                fmt_f(c.coverage),
                fmt_f(c.diversity),
                c.n_generated.to_string(),
                c.n_real.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, reports: &[MethodReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in reports {
        let m = &r.report.mean;
        w.write_record([
            r.method.clone(),
            fmt_opt(r.gamma),
            fmt_f(m.accuracy),
            fmt_f(m.accuracy_half_width),
            fmt_f(m.precision),
            fmt_f(m.recall),
            fmt_f(m.density),
            fmt_f(m.coverage),
            fmt_f(m.diversity),
            fmt_f(r.report.fid),
            fmt_opt(r.kl_final),
            fmt_opt(r.entropy_final),
            r.report.k.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_traces_csv(path: &Path, outcomes: &[VmiOutcome]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TRACE_COLUMNS)?;
    for o in outcomes {
        for (c, r) in &o.results {
            for t in &r.trace {
                w.write_record(["vmi".into(), fmt_f(o.gamma), c.to_string(), t.step.to_string(), fmt_f(t.nll), fmt_f(t.kl), fmt_f(t.total)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_layers_csv(path: &Path, attacks: &[AttackSummary]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(LAYER_COLUMNS)?;
    for a in attacks {
        for l in 0..a.layer_kl.len() {
            w.write_record([
                fmt_f(a.gamma),
                a.class.to_string(),
                l.to_string(),
                fmt_f(a.layer_kl[l]),
                fmt_f(a.layer_kl_std_error[l]),
                fmt_f(a.layer_entropy[l]),
                fmt_f(a.layer_entropy_std_error[l]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    artifact_version: &'a str,
    config_hash: String,
    seed: u64,
    k: usize,
    samples_per_class: usize,
    pretrain: &'a PretrainInfo,
    methods: &'a [MethodReport],
}

fn write_reports(cfg: &ExperimentConfig, pre: &Pretrained, out: &Path, reports: &[MethodReport]) -> Result<()> {
    write_per_class_csv(&out.join("metrics_per_class.csv"), reports)?;
    write_summary_csv(&out.join("summary.csv"), reports)?;
    write_json(
        &out.join("summary.json"),
        &Summary {
            artifact_version: ARTIFACT_VERSION,
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            k: cfg.metrics.k,
            samples_per_class: cfg.metrics.samples_per_class,
            pretrain: &pre.info,
            methods: reports,
        },
    )
}

fn save_vmi(out: &Path, outcome: &VmiOutcome) -> Result<()> {
    for (c, r) in &outcome.results {
        fs::write(out.join(format!("checkpoints/vmi_gamma{}_class{c}.vmick", outcome.gamma)), r.family.to_bytes())?;
    }
    save_dataset(&outcome.samples.samples, out.join("samples").join(outcome.samples.file_name()))
}

fn sort_gammas(gammas: &[f64]) -> Vec<f64> {
    let mut g = gammas.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

// ---------------------------------------------------------------------------
// Stages

/// `pretrain`: data, classifiers and generator, saved under `out`.
pub fn pretrain_stage(cfg: &ExperimentConfig, out: &Path) -> Result<Pretrained> {
    staged(cfg, out, "pretrain", || {
        let pre = pretrain(cfg)?;
        save_pretrained(&pre, out)?;
        Ok(pre)
    })
}

fn attack_body(cfg: &ExperimentConfig, pre: &Pretrained, out: &Path) -> Result<(Vec<VmiOutcome>, Vec<MethodSamples>)> {
    fs::create_dir_all(out.join("samples"))?;
    fs::create_dir_all(out.join("checkpoints"))?;
    let outcomes: Vec<VmiOutcome> =
        sort_gammas(&cfg.gammas).par_iter().map(|&g| vmi_attack(cfg, pre, g)).collect::<Result<_>>()?;
    for o in &outcomes {
        save_vmi(out, o)?;
    }
    let attacks: Vec<AttackSummary> = outcomes.iter().flat_map(VmiOutcome::summaries).collect();
    write_json(&out.join("attacks.json"), &attacks)?;
    write_traces_csv(&out.join("traces.csv"), &outcomes)?;
    write_layers_csv(&out.join("layers.csv"), &attacks)?;
    let mut baselines = Vec::new();
    if cfg.baselines.general_mi {
        baselines.push(general_mi_attack(cfg, pre)?);
    }
    if cfg.baselines.generative_mi {
        baselines.push(generative_mi_attack(cfg, pre)?);
    }
    for b in &baselines {
        save_dataset(&b.samples, out.join("samples").join(b.file_name()))?;
    }
    Ok((outcomes, baselines))
}

/// `attack`: VMI at every configured γ plus the enabled baselines, using the
/// pretrained artifacts already in `out`.
pub fn attack_stage(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    staged(cfg, out, "attack", || {
        let pre = load_pretrained(out)?;
        attack_body(cfg, &pre, out).map(|_| ())
    })
}

fn evaluate_body(cfg: &ExperimentConfig, pre: &Pretrained, out: &Path) -> Result<Vec<MethodReport>> {
    let attacks: Vec<AttackSummary> = serde_json::from_slice(&fs::read(out.join("attacks.json"))?)?;
    let mut sets = Vec::new();
    for g in sort_gammas(&attacks.iter().map(|a| a.gamma).collect::<Vec<_>>()) {
        sets.push(MethodSamples { method: "vmi".into(), gamma: Some(g), samples: LabeledDataset::empty(0, 0, Split::Auxiliary) });
    }
    sets.push(MethodSamples { method: "general_mi".into(), gamma: None, samples: LabeledDataset::empty(0, 0, Split::Auxiliary) });
    sets.push(MethodSamples { method: "generative_mi".into(), gamma: None, samples: LabeledDataset::empty(0, 0, Split::Auxiliary) });
    let mut reports = Vec::new();
    for mut s in sets {
        let path = out.join("samples").join(s.file_name());
        if s.gamma.is_none() && !path.is_file() {
            continue;
        }
        s.samples = load_dataset(&path, Split::Auxiliary)?;
        reports.push(evaluate_samples(cfg, pre, &s, &attacks)?);
    }
    write_reports(cfg, pre, out, &reports)?;
    Ok(reports)
}

/// `evaluate`: scores every sample file written by the attack stage.
pub fn evaluate_stage(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MethodReport>> {
    staged(cfg, out, "evaluate", || {
        let pre = load_pretrained(out)?;
        evaluate_body(cfg, &pre, out)
    })
}

/// `run`: pretrain, attack and evaluate into one directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MethodReport>> {
    staged(cfg, out, "run", || {
        let pre = pretrain(cfg)?;
        save_pretrained(&pre, out)?;
        attack_body(cfg, &pre, out)?;
        evaluate_body(cfg, &pre, out)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub diversity: f64,
    pub fid: f64,
    pub kl_final: f64,
    pub entropy_final: f64,
}

impl SweepRow {
    pub fn from_report(r: &MethodReport) -> Self {
        let m = &r.report.mean;
        SweepRow {
            gamma: r.gamma.unwrap_or(f64::NAN),
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            density: m.density,
            coverage: m.coverage,
            diversity: m.diversity,
            fid: r.report.fid,
            kl_final: r.kl_final.unwrap_or(f64::NAN),
            entropy_final: r.entropy_final.unwrap_or(f64::NAN),
        }
    }
}

/// VMI at each γ against shared pretrained models, entries in parallel.
/// Rows come back in the order of `gammas`.
pub fn sweep_with(cfg: &ExperimentConfig, pre: &Pretrained, gammas: &[f64]) -> Result<Vec<(VmiOutcome, MethodReport)>> {
    if gammas.is_empty() || gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(Error::Config(format!("gammas must be a non-empty list of finite values >= 0, got {gammas:?}")));
    }
    gammas
        .par_iter()
        .map(|&g| {
            let o = vmi_attack(cfg, pre, g)?;
            let r = evaluate_samples(cfg, pre, &o.samples, &o.summaries())?;
            Ok((o, r))
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record(
            [r.gamma, r.accuracy, r.precision, r.recall, r.density, r.coverage, r.diversity, r.fid, r.kl_final, r.entropy_final]
                .map(fmt_f),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `sweep`: pretrain once, then one attack + evaluation per γ. Writes
/// `sweep.csv`, `sweep_per_class.csv` and `layers.csv`.
pub fn sweep_gamma(cfg: &ExperimentConfig, gammas: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    staged(cfg, out, "sweep", || {
        let pre = pretrain(cfg)?;
        save_pretrained(&pre, out)?;
        let entries = sweep_with(cfg, &pre, gammas)?;
        let reports: Vec<MethodReport> = entries.iter().map(|e| e.1.clone()).collect();
        let attacks: Vec<AttackSummary> = entries.iter().flat_map(|e| e.0.summaries()).collect();
        let rows: Vec<SweepRow> = reports.iter().map(SweepRow::from_report).collect();
        write_sweep_csv(&out.join("sweep.csv"), &rows)?;
        write_per_class_csv(&out.join("sweep_per_class.csv"), &reports)?;
        write_layers_csv(&out.join("layers.csv"), &attacks)?;
        Ok(rows)
    })
}

/// Checks a finished run directory: manifest complete and matching the
/// files on disk, config hash matching `config.toml`, report headers and
/// metric ranges. Returns the problems found.
pub fn validate_run_dir(out: &Path) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    let manifest: RunManifest = serde_json::from_slice(&fs::read(out.join(MANIFEST))?)?;
    if manifest.status != RunStatus::Complete {
        problems.push(format!("manifest status {:?}", manifest.status));
    }
    if manifest.files != inventory(out)? {
        problems.push("manifest inventory differs from the files on disk".into());
    }
    let cfg_text = fs::read_to_string(out.join("config.toml"))?;
    let cfg = ExperimentConfig::from_toml_str(&cfg_text)?;
    if cfg.hash()? != manifest.config_hash || sha256_hex(cfg_text.as_bytes()) != manifest.config_hash {
        problems.push("config hash mismatch".into());
    }
    for (file, columns) in [
        ("summary.csv", &SUMMARY_COLUMNS[..]),
        ("metrics_per_class.csv", &PER_CLASS_COLUMNS[..]),
        ("traces.csv", &TRACE_COLUMNS[..]),
        ("layers.csv", &LAYER_COLUMNS[..]),
    ] {
        let mut r = match csv::Reader::from_path(out.join(file)) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{file}: {e}"));
                continue;
            }
        };
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header != columns {
            problems.push(format!("{file}: header {header:?}"));
            continue;
        }
        for rec in r.records() {
            let rec = rec?;
            for (name, v) in columns.iter().zip(rec.iter()) {
                let unit = ["accuracy", "precision", "recall", "coverage", "diversity"].contains(name);
                if unit && !v.parse::<f64>().is_ok_and(|x| (0.0..=1.0).contains(&x)) {
                    problems.push(format!("{file}: {name} = {v:?} outside [0, 1]"));
                }
                if (*name == "density" || *name == "fid") && !v.parse::<f64>().is_ok_and(|x| x >= 0.0) {
                    problems.push(format!("{file}: {name} = {v:?} negative or unparsable"));
                }
            }
        }
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json"))?)?;
    for key in ["artifact_version", "config_hash", "seed", "k", "samples_per_class", "pretrain", "methods"] {
        if summary.get(key).is_none() {
            problems.push(format!("summary.json lacks `{key}`"));
        }
    }
    Ok(problems)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 3\n";

    #[test]
    fn seed_is_mandatory() {
        let err = ExperimentConfig::from_toml_str("gammas = [0.1]\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.gammas, vec![1e-3]);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n[attack]\nstpes = 10\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stpes") && msg.contains("line 3"), "{msg}");
        assert!(ExperimentConfig::from_toml_str("seed = 1\nsede = 2\n").is_err());
    }

    #[test]
    fn missing_data_path_names_field() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n[data]\nprivate_train = \"a\"\nprivate_test = \"b\"\n").unwrap_err();
        assert!(err.to_string().contains("auxiliary"), "{err}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 1\n[data]\nprivate_train = \"a\"\nprivate_test = \"b\"\nauxiliary = \"c\"\n").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("data.private_train"), "{err}");
    }

    #[test]
    fn semantic_validation() {
        for bad in [
            "seed = 1\ngammas = [-1.0]\n",
            "seed = 1\ngammas = []\n",
            "seed = 1\n[metrics]\nk = 5\nsamples_per_class = 5\n",
            "seed = 1\n[task]\n[data]\nprivate_train = \"a\"\nprivate_test = \"b\"\nauxiliary = \"c\"\n",
            "seed = 1\n[[class_attack]]\nclass = 1\n[[class_attack]]\nclass = 1\n",
        ] {
            assert!(ExperimentConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_is_stable_under_reserialization() {
        let cfg = ExperimentConfig::from_toml_str("seed = 9\ngammas = [0.001, 0.1]\n[attack]\nfamily = \"flow\"\n[[class_attack]]\nclass = 2\nsteps = 5\n").unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn attack_for_uses_overrides_and_shared_seeds() {
        let cfg = ExperimentConfig::from_toml_str("seed = 9\n[attack]\nsteps = 7\n[[class_attack]]\nclass = 2\nsteps = 5\n").unwrap();
        assert_eq!(cfg.attack_for(0, 0.1).steps, 7);
        let a = cfg.attack_for(2, 0.1);
        assert_eq!((a.steps, a.class, a.gamma), (5, 2, 0.1));
        assert_eq!(cfg.attack_for(1, 0.1).seed, cfg.attack_for(1, 10.0).seed);
        assert_ne!(cfg.attack_for(1, 0.1).seed, cfg.attack_for(0, 0.1).seed);
    }

    #[test]
    fn output_dir_precedence() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert!(cfg.output_dir(None).is_err());
        cfg.output = Some("a".into());
        assert_eq!(cfg.output_dir(None).unwrap(), PathBuf::from("a"));
        assert_eq!(cfg.output_dir(Some(Path::new("b"))).unwrap(), PathBuf::from("b"));
    }

    #[test]
    fn failed_stage_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let err = attack_stage(&cfg, dir.path()).unwrap_err();
        let m: RunManifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert!(matches!(m.status, RunStatus::Failed { .. }), "{err}");
        assert_eq!(m.files, inventory(dir.path()).unwrap());
        assert!(m.files.iter().any(|f| f.path == "config.toml"));
    }
}
