//! Synthetic private/auxiliary tasks with known ground truth, identity
//! splitting and the `VMIDS1` dataset format.
//!
//! `VMIDS1` layout, little-endian:
//!
//! ```text
//! magic   7 bytes "VMIDS1\0"
//! n, d, C u32 each
//! X       n*d f32, row-major
//! y       n u16, 0-based class indices
//! ```
//!
//! Datasets hold `f64` in memory and are rounded to `f32` when written, so a
//! save/load round trip is bit-exact for anything already loaded from disk.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{AnyGenerator, CodeGenerator, GeneratorConfig, LayeredGenerator, LinearGaussianGenerator};
use crate::rng::{normal, normal_tensor, stream};

pub const MAGIC: &[u8; 7] = b"VMIDS1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    PrivateTrain,
    PrivateTest,
    Auxiliary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    x: Vec<f64>,
    dim: usize,
    labels: Vec<u16>,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn from_f64(x: &[f64], dim: usize, labels: Vec<u16>, classes: usize, split: Split) -> Result<Self> {
        if dim == 0 || classes == 0 || classes > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!("dataset needs dim >= 1 and 1..=65536 classes, got {dim}, {classes}")));
        }
        if x.len() != labels.len() * dim {
            return Err(Error::InvalidArgument(format!("{} values for {} rows of dim {dim}", x.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "dataset features".into() });
        }
        Ok(LabeledDataset { x: x.to_vec(), dim, labels, classes, split })
    }

    pub fn from_tensor(x: &Tensor, labels: Vec<u16>, classes: usize, split: Split) -> Result<Self> {
        LabeledDataset::from_f64(x.data(), x.cols(), labels, classes, split)
    }

    /// A dataset with no rows; only useful for exercising error paths.
    pub fn empty(dim: usize, classes: usize, split: Split) -> Self {
        LabeledDataset { x: Vec::new(), dim, labels: Vec::new(), classes, split }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn raw(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Features as an `n x d` tensor.
    pub fn features(&self) -> Tensor {
        Tensor::new_unchecked(vec![self.len().max(1), self.dim], if self.is_empty() { vec![0.0; self.dim] } else { self.x.clone() })
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        LabeledDataset {
            x,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] as usize == class).collect()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Copy with every feature rounded to `f32`, as it would be stored.
    pub fn quantized(&self) -> LabeledDataset {
        let mut out = self.clone();
        for v in &mut out.x {
            *v = *v as f32 as f64;
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19 + self.x.len() * 4 + self.labels.len() * 2);
        out.extend_from_slice(MAGIC);
        for v in [self.len(), self.dim, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.x {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    /// Decodes a `VMIDS1` payload; the split is not stored and must be supplied.
    pub fn from_bytes(bytes: &[u8], split: Split) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            if MAGIC.starts_with(bytes) {
                return Err(Error::Truncated { context: "dataset header".into() });
            }
            return Err(Error::BadMagic { expected: "VMIDS1\\0" });
        }
        if &bytes[..7] != MAGIC {
            return Err(Error::BadMagic { expected: "VMIDS1\\0" });
        }
        if bytes.len() < 19 {
            return Err(Error::Truncated { context: "dataset header".into() });
        }
        let field = |i: usize| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize;
        let (n, d, c) = (field(0), field(1), field(2));
        if d == 0 || c == 0 || c > u16::MAX as usize + 1 {
            return Err(Error::Corrupt(format!("bad header dims d={d}, C={c}")));
        }
        let payload = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|x| x.checked_add(n.checked_mul(2)?))
            .ok_or_else(|| Error::Corrupt(format!("dimension overflow: n={n}, d={d}")))?;
        let body = &bytes[19..];
        if body.len() < payload {
            return Err(Error::Truncated { context: format!("expected {payload} payload bytes, found {}", body.len()) });
        }
        if body.len() > payload {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - payload)));
        }
        let (xs, ys) = body.split_at(n * d * 4);
        let x: Vec<f64> = xs.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let labels: Vec<u16> = ys.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect();
        LabeledDataset::from_f64(&x, d, labels, c, split).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

pub fn save_dataset(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, data.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    LabeledDataset::from_bytes(&std::fs::read(path)?, split)
}

/// The `n_target` most frequent identities (ties to the lower label) form the
/// target set, everything else the auxiliary set. Labels are kept as-is.
pub fn split_identities(data: &LabeledDataset, n_target: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut counts = vec![0usize; data.classes()];
    for &l in data.labels() {
        counts[l as usize] += 1;
    }
    let mut present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    if n_target >= present.len() {
        return Err(Error::InvalidArgument(format!(
            "n_target {n_target} must be below the identity count {}",
            present.len()
        )));
    }
    present.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut is_target = vec![false; data.classes()];
    for &c in &present[..n_target] {
        is_target[c] = true;
    }
    let (t, a): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| is_target[data.labels()[i] as usize]);
    Ok((data.subset(&t).with_split(Split::PrivateTrain), data.subset(&a).with_split(Split::Auxiliary)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Identity,
    Linear,
    Layered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub code_dim: usize,
    pub output_dim: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub aux_samples: usize,
    pub test_fraction: f64,
    pub generator: GeneratorKind,
    /// Explicit per-class code means; drawn as `mean_scale * N(0, I)` when absent.
    pub means: Option<Vec<Vec<f64>>>,
    pub mean_scale: f64,
    pub cluster_std: f64,
    pub min_separation: f64,
    pub noise_std: f64,
    pub layers: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            code_dim: 8,
            output_dim: 16,
            classes: 10,
            samples_per_class: 200,
            aux_samples: 5000,
            test_fraction: 0.2,
            generator: GeneratorKind::Linear,
            means: None,
            mean_scale: 1.0,
            cluster_std: 0.4,
            min_separation: 1.5,
            noise_std: 0.0,
            layers: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskBundle {
    pub private_train: LabeledDataset,
    pub private_test: LabeledDataset,
    /// Auxiliary data, all carrying identity `C` (outside the target classes).
    pub auxiliary: LabeledDataset,
    pub generator: AnyGenerator,
    pub code_means: Vec<Vec<f64>>,
    pub cluster_std: f64,
    pub warnings: Vec<String>,
}

impl TaskBundle {
    /// Canonical serialization used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in [&self.private_train, &self.private_test, &self.auxiliary] {
            out.extend(d.to_bytes());
            out.extend(d.raw().iter().flat_map(|v| v.to_le_bytes()));
        }
        out.extend(self.generator.to_bytes());
        for m in &self.code_means {
            out.extend(m.iter().flat_map(|v| v.to_le_bytes()));
        }
        out
    }
}

fn generator_for(spec: &TaskSpec, seed: u64) -> Result<AnyGenerator> {
    let (k, d) = (spec.code_dim, spec.output_dim);
    let mut rng = stream(seed, "task.generator", 0);
    Ok(match spec.generator {
        GeneratorKind::Identity => {
            if k != d {
                return Err(Error::InvalidArgument(format!("identity generator needs code_dim == output_dim, got {k}, {d}")));
            }
            let mut g = LinearGaussianGenerator::identity(k);
            if spec.noise_std > 0.0 {
                g = LinearGaussianGenerator::new(&Tensor::matrix(d, k, g.matrix().transpose().as_slice().to_vec())?, vec![0.0; d], spec.noise_std)?;
            }
            AnyGenerator::Linear(g)
        }
        GeneratorKind::Linear => {
            let a = normal_tensor(&mut rng, vec![d, k]);
            let b: Vec<f64> = (0..d).map(|_| 0.5 * normal(&mut rng)).collect();
            AnyGenerator::Linear(LinearGaussianGenerator::new(&a, b, spec.noise_std)?)
        }
        GeneratorKind::Layered => {
            let cfg = GeneratorConfig {
                code_dim: k,
                style_dim: k,
                layers: spec.layers,
                output_dim: d,
                noise_std: spec.noise_std,
                ..GeneratorConfig::default()
            };
            AnyGenerator::Layered(LayeredGenerator::new(&cfg, &mut rng)?)
        }
    })
}

fn push_through(g: &AnyGenerator, codes: &Tensor, seed: u64, label: &str) -> Result<Tensor> {
    let x = g.generate(codes)?;
    if g.noise_std() == 0.0 {
        return Ok(x);
    }
    let mut rng = stream(seed, label, 1);
    let eps = normal_tensor(&mut rng, x.shape().to_vec());
    let data = x.data().iter().zip(eps.data()).map(|(a, e)| a + g.noise_std() * e).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Builds a task whose private classes are Gaussian code clusters and whose
/// auxiliary data comes from `N(0, I)`, both pushed through one generator.
pub fn make_synthetic_task(spec: &TaskSpec, seed: u64) -> Result<TaskBundle> {
    let (k, c) = (spec.code_dim, spec.classes);
    if c < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {c}")));
    }
    if spec.samples_per_class == 0 || spec.aux_samples == 0 || k == 0 || spec.output_dim == 0 {
        return Err(Error::InvalidArgument("samples_per_class, aux_samples and dims must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) || !(spec.cluster_std > 0.0) {
        return Err(Error::InvalidArgument("test_fraction must be in [0, 1) and cluster_std > 0".into()));
    }
    let generator = generator_for(spec, seed)?;

    let code_means = match &spec.means {
        Some(m) => {
            if m.len() != c || m.iter().any(|v| v.len() != k) {
                return Err(Error::InvalidArgument(format!("means must be {c} vectors of length {k}")));
            }
            m.clone()
        }
        None => {
            let mut rng = stream(seed, "task.means", 0);
            (0..c).map(|_| (0..k).map(|_| spec.mean_scale * normal(&mut rng)).collect()).collect()
        }
    };
    let mut warnings = Vec::new();
    for a in 0..c {
        for b in a + 1..c {
            let dist = code_means[a].iter().zip(&code_means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if dist < spec.min_separation {
                warnings.push(format!("classes {a} and {b} have code means {dist:.3} apart (< {})", spec.min_separation));
            }
        }
    }

    let n_test = if spec.samples_per_class >= 2 {
        ((spec.samples_per_class as f64 * spec.test_fraction).floor() as usize).clamp(usize::from(spec.test_fraction > 0.0), spec.samples_per_class - 1)
    } else {
        0
    };
    let mut rng = stream(seed, "task.private", 0);
    let mut codes = Vec::with_capacity(c * spec.samples_per_class * k);
    let mut labels = Vec::new();
    for (class, mean) in code_means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            codes.extend(mean.iter().map(|m| m + spec.cluster_std * normal(&mut rng)));
            labels.push(class as u16);
        }
    }
    let codes = Tensor::matrix(labels.len(), k, codes)?;
    let x = push_through(&generator, &codes, seed, "task.private")?;
    let all = LabeledDataset::from_tensor(&x, labels, c, Split::PrivateTrain)?;
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for i in 0..all.len() {
        if i % spec.samples_per_class < n_test {
            test_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }

    let mut rng = stream(seed, "task.auxiliary", 0);
    let aux_codes = normal_tensor(&mut rng, vec![spec.aux_samples, k]);
    let aux_x = push_through(&generator, &aux_codes, seed, "task.auxiliary")?;
    let auxiliary = LabeledDataset::from_tensor(&aux_x, vec![c as u16; spec.aux_samples], c + 1, Split::Auxiliary)?;

    Ok(TaskBundle {
        private_train: all.subset(&train_idx),
        private_test: all.subset(&test_idx).with_split(Split::PrivateTest),
        auxiliary,
        generator,
        code_means,
        cluster_std: spec.cluster_std,
        warnings,
    })
}

/// Distance from each row of `x` to the affine column space of `A`.
pub fn manifold_residual(g: &LinearGaussianGenerator, x: &LabeledDataset) -> f64 {
    let a = g.matrix();
    let b = DVector::from_column_slice(g.bias());
    let qr = a.clone().qr();
    let q = qr.q();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let v = DVector::from_column_slice(x.row(i)) - &b;
        let proj: DVector<f64> = &q * (q.transpose() * &v);
        worst = worst.max((v - proj).norm());
    }
    worst
}

/// Sample `n` labels uniformly; used to probe accuracy baselines.
pub fn random_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, "random_labels", 0);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{train_classifier, ClassifierTraining};
    use crate::rng::seeded;

    fn counts_dataset(counts: &[usize]) -> LabeledDataset {
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat(c as u16).take(n));
        }
        let x: Vec<f64> = (0..labels.len()).map(|i| i as f64).collect();
        LabeledDataset::from_f64(&x, 1, labels, counts.len(), Split::PrivateTrain).unwrap()
    }

    #[test]
    fn split_by_frequency() {
        let data = counts_dataset(&[3, 5, 1]);
        let (t, a) = split_identities(&data, 1).unwrap();
        assert!(t.labels().iter().all(|&l| l == 1) && t.len() == 5);
        assert_eq!(a.len(), 4);

        let tie = counts_dataset(&[4, 4]);
        let (t, _) = split_identities(&tie, 1).unwrap();
        assert!(t.labels().iter().all(|&l| l == 0));
        assert!(split_identities(&tie, 2).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let data = counts_dataset(&[2, 7, 7, 1, 4]);
        let (t, a) = split_identities(&data, 2).unwrap();
        let mut rows: Vec<(u64, u16)> = t
            .raw()
            .iter()
            .zip(t.labels())
            .chain(a.raw().iter().zip(a.labels()))
            .map(|(x, &y)| (x.to_bits(), y))
            .collect();
        let mut orig: Vec<(u64, u16)> = data.raw().iter().zip(data.labels()).map(|(x, &y)| (x.to_bits(), y)).collect();
        rows.sort_unstable();
        orig.sort_unstable();
        assert_eq!(rows, orig);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.vmids");
        let data = counts_dataset(&[2, 3]);
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path, Split::PrivateTrain).unwrap();
        assert_eq!(back, data.quantized());
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());

        let mut bytes = data.to_bytes();
        bytes[2] = b'?';
        assert!(LabeledDataset::from_bytes(&bytes, Split::PrivateTrain).unwrap_err().to_string().contains("bad magic"));
        assert!(LabeledDataset::from_bytes(&[], Split::PrivateTrain).unwrap_err().to_string().contains("truncated"));
        let good = data.to_bytes();
        assert!(matches!(LabeledDataset::from_bytes(&good[..good.len() - 1], Split::PrivateTrain), Err(Error::Truncated { .. })));
        let mut huge = good.clone();
        huge[7..11].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[11..15].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(LabeledDataset::from_bytes(&huge, Split::PrivateTrain).is_err());
    }

    #[test]
    fn identity_task_is_raw_mixture() {
        let spec = TaskSpec {
            code_dim: 3,
            output_dim: 3,
            classes: 2,
            samples_per_class: 10,
            aux_samples: 5,
            generator: GeneratorKind::Identity,
            ..Default::default()
        };
        let b = make_synthetic_task(&spec, 1).unwrap();
        // regenerate the codes from the same stream
        let mut rng = stream(1, "task.private", 0);
        let mut expect = Vec::new();
        for mean in &b.code_means {
            for _ in 0..10 {
                expect.push(mean.iter().map(|m| m + 0.4 * normal(&mut rng)).collect::<Vec<_>>());
            }
        }
        let n_test = 2;
        let train_rows: Vec<&Vec<f64>> = expect.iter().enumerate().filter(|(i, _)| i % 10 >= n_test).map(|(_, r)| r).collect();
        for (i, r) in train_rows.iter().enumerate() {
            assert_eq!(b.private_train.row(i), r.as_slice());
        }
        assert_eq!(b.private_test.len(), 4);
    }

    #[test]
    fn task_errors_and_determinism() {
        let spec = TaskSpec { samples_per_class: 0, ..Default::default() };
        assert!(make_synthetic_task(&spec, 0).is_err());
        let spec = TaskSpec { classes: 3, samples_per_class: 20, aux_samples: 30, ..Default::default() };
        assert_eq!(make_synthetic_task(&spec, 5).unwrap().to_bytes(), make_synthetic_task(&spec, 5).unwrap().to_bytes());
        assert_ne!(make_synthetic_task(&spec, 5).unwrap().to_bytes(), make_synthetic_task(&spec, 6).unwrap().to_bytes());
        let close = TaskSpec {
            classes: 2,
            code_dim: 1,
            output_dim: 2,
            means: Some(vec![vec![0.0], vec![0.1]]),
            samples_per_class: 5,
            aux_samples: 5,
            ..Default::default()
        };
        assert_eq!(make_synthetic_task(&close, 0).unwrap().warnings.len(), 1);
    }

    #[test]
    fn private_data_on_generator_manifold() {
        let spec = TaskSpec { classes: 3, samples_per_class: 50, aux_samples: 100, ..Default::default() };
        let b = make_synthetic_task(&spec, 2).unwrap();
        let AnyGenerator::Linear(g) = &b.generator else { panic!() };
        assert!(manifold_residual(g, &b.private_train) < 1e-8);
        assert!(manifold_residual(g, &b.auxiliary) < 1e-8);
        let noisy = make_synthetic_task(&TaskSpec { noise_std: 0.1, ..spec }, 2).unwrap();
        let AnyGenerator::Linear(g) = &noisy.generator else { panic!() };
        assert!(manifold_residual(g, &noisy.private_train) > 1e-3);
    }

    #[test]
    fn separated_two_class_task_is_learnable() {
        let spec = TaskSpec {
            classes: 2,
            means: Some(vec![vec![2.0; 8], vec![-2.0; 8]]),
            samples_per_class: 200,
            aux_samples: 10,
            ..Default::default()
        };
        let b = make_synthetic_task(&spec, 3).unwrap();
        let hp = ClassifierTraining { epochs: 10, ..Default::default() };
        let (clf, _) = train_classifier(&b.private_train, &hp, &mut seeded(4)).unwrap();
        assert!(clf.accuracy(&b.private_test).unwrap() >= 0.95);
    }
}
