//! Linear softmax classifier trained from scratch by full-batch gradient descent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, matmul, matmul_tn, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.1,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("classifier.epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("classifier.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Weights over an explicit class list; output column `j` scores `class_list[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub class_list: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-class validation accuracy after each epoch; empty without validation data.
    pub per_epoch_val_acc: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub final_params: ClassifierParams,
    pub epochs_run: usize,
}

/// Borrowed features with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
}

impl<'a> Labeled<'a> {
    pub fn new(features: &'a Matrix, labels: &'a [usize]) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape("labeled", features.shape(), (labels.len(), 1)));
        }
        Ok(Self { features, labels })
    }
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, class_list: &[usize], rng: &mut R) -> Result<Self> {
        if class_list.is_empty() {
            return Err(Error::Input("classifier needs at least one class".into()));
        }
        let mut sorted = class_list.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != class_list.len() {
            return Err(Error::Input("class list contains duplicates".into()));
        }
        let bound = 1.0 / (feature_dim.max(1) as f64).sqrt();
        let weight = Matrix::from_fn(feature_dim, class_list.len(), |_, _| rng.random_range(-bound..bound));
        Ok(Self {
            weight,
            bias: vec![0.0; class_list.len()],
            class_list: class_list.to_vec(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_list.len()
    }

    fn column_of(&self, label: usize) -> Result<usize> {
        self.class_list
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Input(format!("label {label} is not in the classifier's class list")))
    }

    /// Maps class labels to output columns.
    pub fn columns(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels.iter().map(|&l| self.column_of(l)).collect()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = matmul(features, &self.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    pub fn probabilities(&self, features: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(features)?))
    }

    /// Predicted class labels (not column indices).
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(features)?.argmax_rows().into_iter().map(|j| self.class_list[j]).collect())
    }

    /// Mean cross-entropy and its closed-form gradient `(dW, db)`.
    pub fn loss_and_grad(&self, data: Labeled<'_>) -> Result<(f64, Matrix, Vec<f64>)> {
        let cols = self.columns(data.labels)?;
        let probs = self.probabilities(data.features)?;
        let loss = cross_entropy(&probs, &cols)?;
        let n = cols.len() as f64;
        let mut g = probs;
        for (r, &c) in cols.iter().enumerate() {
            let v = g.get(r, c);
            g.set(r, c, v - 1.0);
        }
        let g = g.scale(1.0 / n);
        let dw = matmul_tn(data.features, &g)?;
        let mut db = vec![0.0; self.n_classes()];
        for r in 0..g.rows() {
            for (acc, v) in db.iter_mut().zip(g.row(r)) {
                *acc += v;
            }
        }
        Ok((loss, dw, db))
    }
}

/// Per-class accuracies over `classes` plus their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    /// `None` where the class has no evaluation samples.
    pub per_class: Vec<(usize, Option<f64>)>,
    pub mean: f64,
}

/// Mean per-class top-1 accuracy of `predicted` against `labels`,
/// restricted to samples whose true class is in `classes`.
pub fn per_class_accuracy(predicted: &[usize], labels: &[usize], classes: &[usize]) -> Result<ClassAccuracy> {
    if predicted.len() != labels.len() {
        return Err(Error::shape("per_class_accuracy", (predicted.len(), 1), (labels.len(), 1)));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    let mut sum = 0.0;
    let mut present = 0usize;
    for &c in classes {
        let (mut hits, mut total) = (0usize, 0usize);
        for (&p, &l) in predicted.iter().zip(labels) {
            if l == c {
                total += 1;
                hits += usize::from(p == c);
            }
        }
        if total == 0 {
            per_class.push((c, None));
        } else {
            let acc = hits as f64 / total as f64;
            sum += acc;
            present += 1;
            per_class.push((c, Some(acc)));
        }
    }
    if present == 0 {
        return Err(Error::Input("no evaluation samples for any requested class".into()));
    }
    Ok(ClassAccuracy {
        per_class,
        mean: sum / present as f64,
    })
}

/// Trains a fresh classifier over `class_list`, evaluating on `val` after
/// every epoch when given.
pub fn train<R: Rng + ?Sized>(
    train: Labeled<'_>,
    val: Option<Labeled<'_>>,
    class_list: &[usize],
    config: &ClassifierConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    config.validate()?;
    if train.labels.is_empty() {
        return Err(Error::Input("classifier training set is empty".into()));
    }
    let mut params = ClassifierParams::init(train.features.cols(), class_list, rng)?;
    params.columns(train.labels)?;
    if let Some(v) = &val {
        if v.features.cols() != train.features.cols() {
            return Err(Error::shape("classifier_val", v.features.shape(), train.features.shape()));
        }
    }
    let mut per_epoch_val_acc = Vec::new();
    let mut train_loss = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (loss, dw, db) = params.loss_and_grad(train)?;
        if !loss.is_finite() || !dw.is_finite() {
            return Err(Error::Numeric("classifier training diverged".into()));
        }
        params.weight = params.weight.sub(&dw.scale(config.learning_rate))?;
        for (b, g) in params.bias.iter_mut().zip(&db) {
            *b -= config.learning_rate * g;
        }
        train_loss.push(loss);
        if let Some(v) = &val {
            let pred = params.predict(v.features)?;
            per_epoch_val_acc.push(per_class_accuracy(&pred, v.labels, class_list)?.mean);
        }
    }
    Ok(TrainReport {
        per_epoch_val_acc,
        train_loss,
        final_params: params,
        epochs_run: config.epochs,
    })
}
