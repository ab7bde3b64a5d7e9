//! Evaluation suite: top-1 attack accuracy, Fréchet distance between feature
//! clouds, and k-NN precision/recall/density/coverage.
//!
//! k-NN radii exclude the point itself and a point lies inside a ball when
//! its squared distance is `<=` the squared radius. The k-d tree path and the
//! brute-force path in [`brute`] use the same distance routine, so they agree
//! exactly.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::models::Classifier;

/// Maps inputs to labels.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;
}

impl Predictor for Classifier {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Classifier::predict(self, x)
    }
}

/// Maps inputs to the feature space the distribution metrics work in.
pub trait FeatureExtractor {
    fn extract(&self, x: &Tensor) -> Result<Tensor>;
}

/// Penultimate-layer activations.
impl FeatureExtractor for Classifier {
    fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.features(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CloudLabel {
    Class(usize),
    Pooled,
}

/// A set of feature vectors with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCloud {
    pub features: Tensor,
    pub source: Source,
    pub label: CloudLabel,
}

impl FeatureCloud {
    pub fn new(features: Tensor, source: Source, label: CloudLabel) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(shape_err("feature_cloud", format!("features {:?} are not a matrix", features.shape())));
        }
        Ok(FeatureCloud { features, source, label })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

// ---------------------------------------------------------------------------
// Accuracy

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyReport {
    /// `(class, accuracy, sample count)`.
    pub per_class: Vec<(usize, f64, usize)>,
    /// Unweighted mean over classes.
    pub mean: f64,
}

/// Fraction of each class's samples predicted as that class.
pub fn attack_accuracy(samples: &[(usize, Tensor)], predictor: &dyn Predictor) -> Result<AccuracyReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no classes to score".into()));
    }
    let mut per_class = Vec::with_capacity(samples.len());
    for (class, x) in samples {
        if x.shape().len() != 2 || x.rows() == 0 {
            return Err(Error::InvalidArgument(format!("class {class} has no samples")));
        }
        let pred = predictor.predict(x)?;
        let hits = pred.iter().filter(|&&p| p == *class).count();
        per_class.push((*class, hits as f64 / pred.len() as f64, pred.len()));
    }
    let mean = per_class.iter().map(|c| c.1).sum::<f64>() / per_class.len() as f64;
    Ok(AccuracyReport { per_class, mean })
}

// ---------------------------------------------------------------------------
// Fréchet distance

/// Sample mean and covariance (`n - 1` denominator) of the rows of `x`.
pub fn moments(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, f) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, f, x.data());
    let mean = DVector::from_fn(f, |j, _| m.column(j).sum() / n as f64);
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Symmetric eigendecomposition with eigenvalues below `1e-10 * max` set to 0.
fn clamped_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.max().max(0.0);
    let vals = eig.eigenvalues.map(|v| if v < 1e-10 * max || v <= 0.0 { 0.0 } else { v });
    (vals, eig.eigenvectors)
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the trace of the
/// root taken as `tr((S1^{1/2} S2 S1^{1/2})^{1/2})`. Floored at 0.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let f = mu1.len();
    if mu2.len() != f || s1.shape() != (f, f) || s2.shape() != (f, f) {
        return Err(shape_err("frechet", format!("means {} / {}, covariances {:?} / {:?}", f, mu2.len(), s1.shape(), s2.shape())));
    }
    let (vals, vecs) = clamped_eigen(s1);
    let root1 = &vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose();
    let inner = &root1 * s2 * &root1;
    let (inner_vals, _) = clamped_eigen(&inner);
    let tr_root: f64 = inner_vals.iter().map(|v| v.sqrt()).sum();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_root;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature clouds.
pub fn fid(real: &Tensor, generated: &Tensor) -> Result<f64> {
    for (name, x) in [("real", real), ("generated", generated)] {
        if x.shape().len() != 2 || x.rows() < x.cols() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{name} cloud {:?} needs at least feature-dim + 1 rows",
                x.shape()
            )));
        }
    }
    if real.cols() != generated.cols() {
        return Err(shape_err("fid", format!("feature dims {} vs {}", real.cols(), generated.cols())));
    }
    let (m1, s1) = moments(real);
    let (m2, s2) = moments(generated);
    frechet_distance(&m1, &s1, &m2, &s2)
}

// ---------------------------------------------------------------------------
// k-NN geometry

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

struct Node {
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Largest squared radius among the node's points (ball queries only).
    max_r2: f64,
    kind: NodeKind,
}

enum NodeKind {
    Leaf(Vec<usize>),
    Split(Box<Node>, Box<Node>),
}

/// Exact k-d tree over the rows of a matrix.
pub struct KdTree<'a> {
    points: &'a Tensor,
    root: Node,
}

const LEAF: usize = 8;

impl<'a> KdTree<'a> {
    pub fn new(points: &'a Tensor) -> Self {
        let idx: Vec<usize> = (0..points.rows()).collect();
        KdTree { points, root: Self::build(points, idx, None) }
    }

    /// Tree whose nodes also carry the max squared radius, for
    /// [`KdTree::count_containing`].
    pub fn with_radii(points: &'a Tensor, r2: &[f64]) -> Self {
        let idx: Vec<usize> = (0..points.rows()).collect();
        KdTree { points, root: Self::build(points, idx, Some(r2)) }
    }

    fn build(points: &Tensor, mut idx: Vec<usize>, r2: Option<&[f64]>) -> Node {
        let f = points.cols();
        let mut lo = vec![f64::INFINITY; f];
        let mut hi = vec![f64::NEG_INFINITY; f];
        let mut max_r2 = 0.0f64;
        for &i in &idx {
            for (j, &v) in points.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
            if let Some(r) = r2 {
                max_r2 = max_r2.max(r[i]);
            }
        }
        if idx.len() <= LEAF {
            return Node { lo, hi, max_r2, kind: NodeKind::Leaf(idx) };
        }
        let axis = (0..f).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        if hi[axis] - lo[axis] == 0.0 {
            return Node { lo, hi, max_r2, kind: NodeKind::Leaf(idx) };
        }
        idx.sort_by(|&a, &b| points.at(a, axis).total_cmp(&points.at(b, axis)).then(a.cmp(&b)));
        let right = idx.split_off(idx.len() / 2);
        let l = Self::build(points, idx, r2);
        let r = Self::build(points, right, r2);
        Node { lo, hi, max_r2, kind: NodeKind::Split(Box::new(l), Box::new(r)) }
    }

    /// Lower bound on the squared distance from `q` to any point in the box.
    /// Rounding is monotone, so this never exceeds a computed `dist2`.
    fn box_dist2(node: &Node, q: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..q.len() {
            let d = if q[j] < node.lo[j] {
                q[j] - node.lo[j]
            } else if q[j] > node.hi[j] {
                q[j] - node.hi[j]
            } else {
                0.0
            };
            s += d * d;
        }
        s
    }

    /// Squared distance from point `i` to its `k`-th nearest other point.
    pub fn kth_neighbor_dist2(&self, i: usize, k: usize) -> f64 {
        let q = self.points.row(i);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        self.knn(&self.root, q, i, k, &mut best);
        best[k - 1]
    }

    fn knn(&self, node: &Node, q: &[f64], skip: usize, k: usize, best: &mut Vec<f64>) {
        if best.len() == k && Self::box_dist2(node, q) > best[k - 1] {
            return;
        }
        match &node.kind {
            NodeKind::Leaf(idx) => {
                for &p in idx {
                    if p == skip {
                        continue;
                    }
                    let d = dist2(q, self.points.row(p));
                    if best.len() < k || d < best[k - 1] {
                        let pos = best.partition_point(|&b| b <= d);
                        best.insert(pos, d);
                        best.truncate(k);
                    }
                }
            }
            NodeKind::Split(l, r) => {
                let (a, b) = if Self::box_dist2(l, q) <= Self::box_dist2(r, q) { (l, r) } else { (r, l) };
                self.knn(a, q, skip, k, best);
                self.knn(b, q, skip, k, best);
            }
        }
    }

    /// Number of tree points `p` with `dist2(q, p) <= r2[p]`.
    pub fn count_containing(&self, q: &[f64], r2: &[f64], stop_at_first: bool) -> usize {
        let mut count = 0;
        self.contain(&self.root, q, r2, stop_at_first, &mut count);
        count
    }

    fn contain(&self, node: &Node, q: &[f64], r2: &[f64], first: bool, count: &mut usize) {
        if (first && *count > 0) || Self::box_dist2(node, q) > node.max_r2 {
            return;
        }
        match &node.kind {
            NodeKind::Leaf(idx) => {
                for &p in idx {
                    if dist2(q, self.points.row(p)) <= r2[p] {
                        *count += 1;
                        if first {
                            return;
                        }
                    }
                }
            }
            NodeKind::Split(l, r) => {
                self.contain(l, q, r2, first, count);
                self.contain(r, q, r2, first, count);
            }
        }
    }

    /// Whether any tree point lies within squared distance `r2` of `q`.
    pub fn any_within(&self, q: &[f64], r2: f64) -> bool {
        self.within(&self.root, q, r2)
    }

    fn within(&self, node: &Node, q: &[f64], r2: f64) -> bool {
        if Self::box_dist2(node, q) > r2 {
            return false;
        }
        match &node.kind {
            NodeKind::Leaf(idx) => idx.iter().any(|&p| dist2(q, self.points.row(p)) <= r2),
            NodeKind::Split(l, r) => self.within(l, q, r2) || self.within(r, q, r2),
        }
    }
}

fn check_clouds(real: &Tensor, generated: &Tensor, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if real.shape().len() != 2 || generated.shape().len() != 2 || real.cols() != generated.cols() {
        return Err(shape_err("knn_metrics", format!("clouds {:?} and {:?}", real.shape(), generated.shape())));
    }
    if k >= real.rows() || k >= generated.rows() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs clouds larger than k (sizes {} and {})",
            real.rows(),
            generated.rows()
        )));
    }
    Ok(())
}

/// Squared k-NN radius of every row of `x`, excluding itself.
pub fn knn_radii2(x: &Tensor, k: usize) -> Vec<f64> {
    let tree = KdTree::new(x);
    (0..x.rows()).map(|i| tree.kth_neighbor_dist2(i, k)).collect()
}

fn manifold_hits(anchors: &Tensor, r2: &[f64], queries: &Tensor) -> usize {
    let tree = KdTree::with_radii(anchors, r2);
    (0..queries.rows()).filter(|&i| tree.count_containing(queries.row(i), r2, true) > 0).count()
}

/// Improved precision and recall: the share of generated points inside the
/// union of real k-NN balls, and vice versa.
pub fn precision_recall(real: &Tensor, generated: &Tensor, k: usize) -> Result<(f64, f64)> {
    check_clouds(real, generated, k)?;
    let rr = knn_radii2(real, k);
    let rg = knn_radii2(generated, k);
    let precision = manifold_hits(real, &rr, generated) as f64 / generated.rows() as f64;
    let recall = manifold_hits(generated, &rg, real) as f64 / real.rows() as f64;
    Ok((precision, recall))
}

/// Density (mean count of real balls containing each generated point, over
/// `k`) and coverage (share of real balls holding a generated point).
pub fn density_coverage(real: &Tensor, generated: &Tensor, k: usize) -> Result<(f64, f64)> {
    check_clouds(real, generated, k)?;
    let rr = knn_radii2(real, k);
    let tree = KdTree::with_radii(real, &rr);
    let total: usize = (0..generated.rows()).map(|i| tree.count_containing(generated.row(i), &rr, false)).sum();
    let density = total as f64 / (k * generated.rows()) as f64;
    let gtree = KdTree::new(generated);
    let covered = (0..real.rows()).filter(|&i| gtree.any_within(real.row(i), rr[i])).count();
    Ok((density, covered as f64 / real.rows() as f64))
}

/// O(n^2) reference implementations.
pub mod brute {
    use super::*;

    pub fn knn_radii2(x: &Tensor, k: usize) -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                let mut d: Vec<f64> = (0..x.rows()).filter(|&j| j != i).map(|j| dist2(x.row(i), x.row(j))).collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect()
    }

    fn inside(anchors: &Tensor, r2: &[f64], q: &[f64]) -> usize {
        (0..anchors.rows()).filter(|&j| dist2(q, anchors.row(j)) <= r2[j]).count()
    }

    pub fn precision_recall(real: &Tensor, generated: &Tensor, k: usize) -> Result<(f64, f64)> {
        check_clouds(real, generated, k)?;
        let rr = knn_radii2(real, k);
        let rg = knn_radii2(generated, k);
        let p = (0..generated.rows()).filter(|&i| inside(real, &rr, generated.row(i)) > 0).count();
        let r = (0..real.rows()).filter(|&i| inside(generated, &rg, real.row(i)) > 0).count();
        Ok((p as f64 / generated.rows() as f64, r as f64 / real.rows() as f64))
    }

    pub fn density_coverage(real: &Tensor, generated: &Tensor, k: usize) -> Result<(f64, f64)> {
        check_clouds(real, generated, k)?;
        let rr = knn_radii2(real, k);
        let total: usize = (0..generated.rows()).map(|i| inside(real, &rr, generated.row(i))).sum();
        let covered = (0..real.rows())
            .filter(|&i| (0..generated.rows()).any(|j| dist2(generated.row(j), real.row(i)) <= rr[i]))
            .count();
        Ok((total as f64 / (k * generated.rows()) as f64, covered as f64 / real.rows() as f64))
    }
}

/// Mean of recall and coverage.
pub fn diversity(recall: f64, coverage: f64) -> Result<f64> {
    for (name, v) in [("recall", recall), ("coverage", coverage)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok((recall + coverage) / 2.0)
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub accuracy: f64,
    /// 95% normal-approximation half-width of `accuracy`.
    pub accuracy_half_width: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub diversity: f64,
    pub n_generated: usize,
    pub n_real: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub diversity: f64,
    /// 95% half-width of the across-class mean accuracy.
    pub accuracy_half_width: f64,
    pub diversity_half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean: MeanMetrics,
    pub fid: f64,
    pub k: usize,
}

fn half_width(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    1.96 * (var / n).sqrt()
}

/// Scores per-class generated samples against per-class real data: accuracy
/// from `evaluator`, k-NN metrics per class in `extractor` feature space,
/// unweighted class means, and FID on the pooled clouds.
pub fn evaluate(
    generated: &[(usize, Tensor)],
    real: &[(usize, Tensor)],
    evaluator: &dyn Predictor,
    extractor: &dyn FeatureExtractor,
    k: usize,
) -> Result<MetricsReport> {
    if generated.len() != real.len() || generated.iter().zip(real).any(|(g, r)| g.0 != r.0) {
        return Err(Error::InvalidArgument("generated and real clouds must list the same classes in order".into()));
    }
    let acc = attack_accuracy(generated, evaluator)?;
    let mut per_class = Vec::with_capacity(generated.len());
    let mut pooled_real = Vec::new();
    let mut pooled_gen = Vec::new();
    let mut f = 0;
    for (((class, g), (_, r)), (_, a, n)) in generated.iter().zip(real).zip(&acc.per_class) {
        let fg = extractor.extract(g)?;
        let fr = extractor.extract(r)?;
        f = fg.cols();
        let (precision, recall) = precision_recall(&fr, &fg, k)?;
        let (density, coverage) = density_coverage(&fr, &fg, k)?;
        pooled_gen.extend_from_slice(fg.data());
        pooled_real.extend_from_slice(fr.data());
        per_class.push(ClassMetrics {
            class: *class,
            accuracy: *a,
            accuracy_half_width: 1.96 * (a * (1.0 - a) / *n as f64).sqrt(),
            precision,
            recall,
            density,
            coverage,
            diversity: diversity(recall, coverage)?,
            n_generated: g.rows(),
            n_real: r.rows(),
        });
    }
    let col = |get: fn(&ClassMetrics) -> f64| per_class.iter().map(get).collect::<Vec<f64>>();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let accs = col(|c| c.accuracy);
    let divs = col(|c| c.diversity);
    let mean = MeanMetrics {
        accuracy: avg(&accs),
        precision: avg(&col(|c| c.precision)),
        recall: avg(&col(|c| c.recall)),
        density: avg(&col(|c| c.density)),
        coverage: avg(&col(|c| c.coverage)),
        diversity: avg(&divs),
        accuracy_half_width: half_width(&accs),
        diversity_half_width: half_width(&divs),
    };
    let pr = Tensor::matrix(pooled_real.len() / f, f, pooled_real)?;
    let pg = Tensor::matrix(pooled_gen.len() / f, f, pooled_gen)?;
    Ok(MetricsReport { per_class, mean, fid: fid(&pr, &pg)?, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use proptest::prelude::*;
    use rand::Rng as _;

    struct Constant(usize);

    impl Predictor for Constant {
        fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
            Ok(vec![self.0; x.rows()])
        }
    }

    struct Random(std::cell::RefCell<crate::rng::Rng>, usize);

    impl Predictor for Random {
        fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
            Ok((0..x.rows()).map(|_| self.0.borrow_mut().random_range(0..self.1)).collect())
        }
    }

    #[test]
    fn accuracy_cases() {
        let x = normal_tensor(&mut seeded(1), vec![5, 2]);
        let r = attack_accuracy(&[(3, x.clone())], &Constant(3)).unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(attack_accuracy(&[], &Constant(0)).is_err());

        let c = 10;
        let n = 10_000;
        let rand_pred = Random(std::cell::RefCell::new(seeded(2)), c);
        let x = Tensor::zeros(vec![n, 1]);
        let r = attack_accuracy(&[(4, x)], &rand_pred).unwrap();
        let p = 1.0 / c as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r.mean - p).abs() < 3.0 * se, "{}", r.mean);
    }

    #[test]
    fn frechet_cases() {
        let x = normal_tensor(&mut seeded(3), vec![300, 4]);
        assert!(fid(&x, &x).unwrap() < 1e-8);
        let d = frechet_distance(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 1.0),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        assert!((d - 2.0).abs() < 1e-10);
        let y = normal_tensor(&mut seeded(4), vec![200, 4]);
        let y = Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| 2.0 * v + 0.5).collect()).unwrap();
        assert!((fid(&x, &y).unwrap() - fid(&y, &x).unwrap()).abs() < 1e-8);
        assert!(fid(&x, &normal_tensor(&mut seeded(5), vec![100, 3])).is_err());
        assert!(fid(&x, &normal_tensor(&mut seeded(5), vec![4, 4])).is_err());
    }

    #[test]
    fn knn_metric_limits() {
        let x = normal_tensor(&mut seeded(6), vec![60, 3]);
        let (p, r) = precision_recall(&x, &x, 3).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
        let (d, c) = density_coverage(&x, &x, 5).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(density_coverage(&x, &x, 5).unwrap(), brute::density_coverage(&x, &x, 5).unwrap());
        assert!((d - 1.0).abs() < 0.3, "{d}");

        let far = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 1e3).collect()).unwrap();
        assert_eq!(precision_recall(&x, &far, 5).unwrap(), (0.0, 0.0));
        assert_eq!(density_coverage(&x, &far, 5).unwrap(), (0.0, 0.0));
        assert!(precision_recall(&x, &x, 60).is_err());
        assert!(precision_recall(&x, &x, 0).is_err());
    }

    #[test]
    fn single_point_generator_has_zero_recall() {
        let x = normal_tensor(&mut seeded(7), vec![50, 2]);
        let g = Tensor::matrix(20, 2, [0.1, -0.2].repeat(20)).unwrap();
        let (_, recall) = precision_recall(&x, &g, 5).unwrap();
        assert_eq!(recall, brute::precision_recall(&x, &g, 5).unwrap().1);
        assert_eq!(recall, 0.0);
        let (_, cov) = density_coverage(&x, &g, 5).unwrap();
        assert_eq!(cov, brute::density_coverage(&x, &g, 5).unwrap().1);
    }

    #[test]
    fn diversity_examples() {
        let round = |v: f64| (v * 100.0).round() / 100.0;
        assert_eq!(round(diversity(0.21, 0.83).unwrap()), 0.52);
        assert_eq!(round(diversity(0.01, 0.67).unwrap()), 0.34);
        assert_eq!(round(diversity(0.42, 0.98).unwrap()), 0.70);
        assert!(diversity(1.2, 0.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tree_matches_brute_force(seed in 0u64..10_000, n in 7usize..80, m in 7usize..80, f in 1usize..5, k in 1usize..6) {
            let mut rng = seeded(seed);
            // quantized coordinates force exact ties in distances
            let q = |t: Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| (v * 4.0).round() / 4.0).collect()).unwrap();
            let real = q(normal_tensor(&mut rng, vec![n, f]));
            let gen = q(normal_tensor(&mut rng, vec![m, f]));
            prop_assert_eq!(knn_radii2(&real, k), brute::knn_radii2(&real, k));
            prop_assert_eq!(precision_recall(&real, &gen, k).unwrap(), brute::precision_recall(&real, &gen, k).unwrap());
            prop_assert_eq!(density_coverage(&real, &gen, k).unwrap(), brute::density_coverage(&real, &gen, k).unwrap());
        }
    }
}
