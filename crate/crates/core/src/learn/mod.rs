//! SVM training and evaluation over precomputed kernels: kernel fusion,
//! binary and one-vs-rest models, the train/test protocol and stratified
//! k-fold cross-validation.

mod smo;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;

pub use smo::{svm_predict, svm_train, SvmModel, SvmParams};

/// Entrywise sum of kernels sharing one manifest.
pub fn fuse_kernels(kernels: &[KernelMatrix]) -> Result<KernelMatrix> {
    let first = kernels.first().ok_or_else(|| Error::InvalidConfig("nothing to fuse".into()))?;
    let mut values = first.values().to_vec();
    for k in &kernels[1..] {
        if k.row_ids() != first.row_ids() || k.col_ids() != first.col_ids() {
            return Err(Error::ManifestMismatch("fused kernels must share row and column manifests".into()));
        }
        for (v, x) in values.iter_mut().zip(k.values()) {
            *v += x;
        }
    }
    KernelMatrix::new(first.row_ids().to_vec(), first.col_ids().to_vec(), values)
}

/// One-vs-rest classifier. Two classes use a single binary model with
/// class 1 as the positive side, so it predicts exactly like that model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvrModel {
    pub classes: Vec<String>,
    pub models: Vec<SvmModel>,
}

impl OvrModel {
    pub fn train_ids(&self) -> &[String] {
        &self.models[0].train_ids
    }

    /// Predicted class for one row of kernel values against the training
    /// manifest. Ties go to the lowest class index.
    pub fn predict_row(&self, row: &[f64]) -> usize {
        if self.classes.len() == 2 {
            return usize::from(self.models[0].decision(row) >= 0.0);
        }
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (c, m) in self.models.iter().enumerate() {
            let v = m.decision(row);
            if v > best_value {
                best = c;
                best_value = v;
            }
        }
        best
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn ovr_train_subset(
    k: &KernelMatrix,
    idx: &[usize],
    labels: &[usize],
    classes: &[String],
    params: &SvmParams,
) -> Result<OvrModel> {
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels("need at least two classes".into()));
    }
    for (c, name) in classes.iter().enumerate() {
        if !labels.contains(&c) {
            return Err(Error::DegenerateLabels(format!("class {name} has no training samples")));
        }
    }
    let positives: Vec<usize> = if classes.len() == 2 { vec![1] } else { (0..classes.len()).collect() };
    let models = positives
        .par_iter()
        .map(|&c| {
            let y: Vec<i8> = labels.iter().map(|&l| if l == c { 1 } else { -1 }).collect();
            smo::train_subset(k, idx, &y, params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OvrModel {
        classes: classes.to_vec(),
        models,
    })
}

/// Trains on a square kernel; `labels[i]` indexes into `classes`.
pub fn ovr_train(k: &KernelMatrix, labels: &[usize], classes: &[String], params: &SvmParams) -> Result<OvrModel> {
    if !k.is_square() || k.row_ids() != k.col_ids() {
        return Err(Error::ManifestMismatch("training kernel must be square with matching manifests".into()));
    }
    if labels.len() != k.rows() {
        return Err(Error::DimMismatch {
            expected: k.rows(),
            got: labels.len(),
        });
    }
    let idx: Vec<usize> = (0..k.rows()).collect();
    ovr_train_subset(k, &idx, labels, classes, params)
}

pub fn ovr_predict(model: &OvrModel, cross: &KernelMatrix) -> Result<Vec<usize>> {
    if cross.col_ids() != model.train_ids() {
        return Err(Error::ManifestMismatch(
            "kernel columns do not match the model's training manifest".into(),
        ));
    }
    Ok((0..cross.rows()).map(|r| model.predict_row(cross.row(r))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    TrainTest,
    KfoldCv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// Correct predictions over all predictions (trace of the confusion
    /// matrix over its sum).
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_fold: Option<Vec<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub labels: Vec<String>,
    pub seed: u64,
}

impl EvalReport {
    fn from_confusion(protocol: Protocol, confusion: Vec<Vec<u64>>, labels: Vec<String>, seed: u64) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        EvalReport {
            protocol,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_fold: None,
            confusion,
            labels,
            seed,
        }
    }

    pub fn mean_fold_accuracy(&self) -> Option<f64> {
        self.per_fold.as_ref().map(|f| f.iter().sum::<f64>() / f.len() as f64)
    }

    pub fn write_confusion_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "true\\predicted")?;
        for l in &self.labels {
            write!(w, ",{l}")?;
        }
        writeln!(w)?;
        for (l, row) in self.labels.iter().zip(&self.confusion) {
            write!(w, "{l}")?;
            for c in row {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn class_count(labels: &[usize], classes: &[String]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(Error::InvalidConfig(format!("label index {bad} out of range")));
    }
    Ok(())
}

/// Train on `k_train`, predict the rows of `k_test` (test x train).
pub fn evaluate_train_test(
    k_train: &KernelMatrix,
    train_labels: &[usize],
    k_test: &KernelMatrix,
    test_labels: &[usize],
    classes: &[String],
    params: &SvmParams,
    seed: u64,
) -> Result<EvalReport> {
    class_count(train_labels, classes)?;
    class_count(test_labels, classes)?;
    if test_labels.len() != k_test.rows() {
        return Err(Error::DimMismatch {
            expected: k_test.rows(),
            got: test_labels.len(),
        });
    }
    let model = ovr_train(k_train, train_labels, classes, params)?;
    let predicted = ovr_predict(&model, k_test)?;
    let mut confusion = vec![vec![0u64; classes.len()]; classes.len()];
    for (&t, &p) in test_labels.iter().zip(&predicted) {
        confusion[t][p] += 1;
    }
    Ok(EvalReport::from_confusion(Protocol::TrainTest, confusion, classes.to_vec(), seed))
}

/// Stratified fold index per sample: each class is shuffled with `seed` and
/// dealt round-robin, continuing the deal across classes so fold sizes
/// differ by at most one.
pub fn stratified_folds(labels: &[usize], n_classes: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {folds}")));
    }
    let mut members = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if m.len() < folds {
            return Err(Error::StratificationImpossible(format!(
                "class {c} has {} samples, fewer than {folds} folds",
                m.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut deal = 0;
    for m in members.iter_mut() {
        m.shuffle(&mut rng);
        for &i in m.iter() {
            fold_of[i] = deal % folds;
            deal += 1;
        }
    }
    Ok(fold_of)
}

/// Stratified k-fold cross-validation on a square kernel. Each fold trains
/// on the other folds' principal submatrix and predicts its own rows from
/// the test x train block.
pub fn kfold_cv(
    k: &KernelMatrix,
    labels: &[usize],
    classes: &[String],
    folds: usize,
    seed: u64,
    params: &SvmParams,
) -> Result<EvalReport> {
    if !k.is_square() || k.row_ids() != k.col_ids() {
        return Err(Error::ManifestMismatch("CV kernel must be square with matching manifests".into()));
    }
    if labels.len() != k.rows() {
        return Err(Error::DimMismatch {
            expected: k.rows(),
            got: labels.len(),
        });
    }
    class_count(labels, classes)?;
    params.validate()?;
    let fold_of = stratified_folds(labels, classes.len(), folds, seed)?;
    let c = classes.len();
    let results = (0..folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<Vec<u64>>> {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
            let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let model = ovr_train_subset(k, &train, &train_labels, classes, params)?;
            let mut confusion = vec![vec![0u64; c]; c];
            let mut row = vec![0.0; train.len()];
            for &t in &test {
                let full = k.row(t);
                for (dst, &j) in row.iter_mut().zip(&train) {
                    *dst = full[j];
                }
                confusion[labels[t]][model.predict_row(&row)] += 1;
            }
            Ok(confusion)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = vec![vec![0u64; c]; c];
    let mut per_fold = Vec::with_capacity(folds);
    for fc in &results {
        let total: u64 = fc.iter().flatten().sum();
        let correct: u64 = (0..c).map(|i| fc[i][i]).sum();
        per_fold.push(correct as f64 / total as f64);
        for (a, b) in confusion.iter_mut().flatten().zip(fc.iter().flatten()) {
            *a += b;
        }
    }
    let mut report = EvalReport::from_confusion(Protocol::KfoldCv, confusion, classes.to_vec(), seed);
    report.per_fold = Some(per_fold);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn classes(c: usize) -> Vec<String> {
        (0..c).map(|i| i.to_string()).collect()
    }

    fn linear_kernel(points: &[Vec<f64>]) -> KernelMatrix {
        let mut v = Vec::new();
        for a in points {
            for b in points {
                v.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
            }
        }
        KernelMatrix::square(ids(points.len()), v).unwrap()
    }

    fn blobs(per_class: usize, centers: &[[f64; 2]], seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * centers.len() {
            let c = i % centers.len();
            pts.push(vec![
                centers[c][0] + rng.random_range(-0.5..0.5),
                centers[c][1] + rng.random_range(-0.5..0.5),
                1.0,
            ]);
            labels.push(c);
        }
        (pts, labels)
    }

    #[test]
    fn fusion() {
        let k = KernelMatrix::identity(ids(3));
        assert_eq!(fuse_kernels(std::slice::from_ref(&k)).unwrap(), k);
        let two = fuse_kernels(&[k.clone(), k.clone()]).unwrap();
        assert_eq!(two.values(), KernelMatrix::square(ids(3), k.values().iter().map(|v| 2.0 * v).collect()).unwrap().values());
        let other = KernelMatrix::identity(vec!["a".into(), "b".into(), "c".into()]);
        assert!(matches!(fuse_kernels(&[k, other]), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn two_class_ovr_matches_binary() {
        let (pts, labels) = blobs(15, &[[0.0, 0.0], [1.0, 0.5]], 3);
        let k = linear_kernel(&pts);
        let ovr = ovr_train(&k, &labels, &classes(2), &SvmParams::default()).unwrap();
        let y: Vec<i8> = labels.iter().map(|&l| if l == 1 { 1 } else { -1 }).collect();
        let bin = svm_train(&k, &y, &SvmParams::default()).unwrap();
        let from_binary: Vec<usize> = svm_predict(&bin, &k).unwrap().0.iter().map(|&v| usize::from(v > 0)).collect();
        assert_eq!(ovr_predict(&ovr, &k).unwrap(), from_binary);
    }

    #[test]
    fn three_blobs_cv_is_perfect() {
        let (pts, labels) = blobs(10, &[[0.0, 5.0], [5.0, -5.0], [-5.0, -5.0]], 4);
        let k = linear_kernel(&pts);
        let r = kfold_cv(&k, &labels, &classes(3), 5, 1, &SvmParams::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_fold.unwrap().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        let template = svm_train(&KernelMatrix::identity(ids(2)), &[1, -1], &SvmParams::default()).unwrap();
        let flat = SvmModel {
            alphas: vec![0.0, 0.0],
            bias: 0.5,
            ..template
        };
        let m = OvrModel {
            classes: classes(3),
            models: vec![flat.clone(), flat.clone(), flat],
        };
        assert_eq!(m.predict_row(&[1.0, 0.0]), 0);
    }

    #[test]
    fn block_diagonal_kernel_is_perfect_every_fold() {
        let n = 20;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let v: Vec<f64> = (0..n * n).map(|x| if labels[x / n] == labels[x % n] { 1.0 } else { 0.0 }).collect();
        let k = KernelMatrix::square(ids(n), v).unwrap();
        let r = kfold_cv(&k, &labels, &classes(2), 5, 9, &SvmParams::default()).unwrap();
        assert_eq!(r.per_fold, Some(vec![1.0; 5]));
        assert_eq!(r.confusion, vec![vec![10, 0], vec![0, 10]]);
    }

    #[test]
    fn folds_partition_and_are_deterministic() {
        let labels: Vec<usize> = (0..53).map(|i| (i * 7) % 3).collect();
        let f = stratified_folds(&labels, 3, 10, 5).unwrap();
        assert_eq!(f, stratified_folds(&labels, 3, 10, 5).unwrap());
        let mut sizes = vec![0; 10];
        for &x in &f {
            sizes[x] += 1;
        }
        assert_eq!(sizes.iter().sum::<usize>(), 53);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for c in 0..3 {
            let mut per = vec![0; 10];
            for (i, &x) in f.iter().enumerate() {
                if labels[i] == c {
                    per[x] += 1;
                }
            }
            assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
        assert_ne!(f, stratified_folds(&labels, 3, 10, 6).unwrap());
    }

    #[test]
    fn cv_is_deterministic() {
        let (pts, labels) = blobs(12, &[[0.0, 0.0], [0.8, 0.3]], 5);
        let k = linear_kernel(&pts);
        let a = kfold_cv(&k, &labels, &classes(2), 4, 3, &SvmParams::default()).unwrap();
        let b = kfold_cv(&k, &labels, &classes(2), 4, 3, &SvmParams::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn leave_one_out_on_two_points_cannot_stratify() {
        let k = KernelMatrix::identity(ids(2));
        let r = kfold_cv(&k, &[0, 1], &classes(2), 2, 0, &SvmParams::default());
        assert!(matches!(r, Err(Error::StratificationImpossible(_))));
    }

    #[test]
    fn train_test_protocol() {
        let (pts, labels) = blobs(10, &[[0.0, 3.0], [0.0, -3.0]], 6);
        let k = linear_kernel(&pts);
        let train: Vec<usize> = (0..14).collect();
        let test: Vec<usize> = (14..20).collect();
        let k_train = k.select(&train, &train);
        let k_test = k.select(&test, &train);
        let r = evaluate_train_test(
            &k_train,
            &labels[..14],
            &k_test,
            &labels[14..],
            &classes(2),
            &SvmParams::default(),
            0,
        )
        .unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.protocol, Protocol::TrainTest);
        let mut csv = Vec::new();
        r.write_confusion_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "true\\predicted,0,1\n0,3,0\n1,0,3\n");
    }

    #[test]
    fn missing_class_is_degenerate() {
        let k = KernelMatrix::identity(ids(4));
        let r = ovr_train(&k, &[0, 0, 1, 1], &classes(3), &SvmParams::default());
        assert!(matches!(r, Err(Error::DegenerateLabels(_))));
    }
}
