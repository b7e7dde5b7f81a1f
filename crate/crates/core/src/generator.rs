//! Feature-generating network interface and a controllable toy generator.
//!
//! The toy generator emits `a·P + σ·ε` for a class attribute vector `a` and
//! the dataset's attribute→feature projection `P`, so clean synthetic
//! candidates share the manifold of real features. A configurable fraction
//! of candidates is corrupted, and the generator remembers which ones.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};
use crate::selector::CandidatePool;

/// Class semantic embedding, unit Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    class_id: usize,
    attributes: Vec<f64>,
}

impl AttributeVector {
    pub fn new(class_id: usize, attributes: Vec<f64>) -> Result<Self> {
        let norm = attributes.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("attribute vector of class {class_id} has norm {norm}, expected 1")));
        }
        Ok(Self { class_id, attributes })
    }

    /// Rescales `raw` to unit norm.
    pub fn normalized(class_id: usize, raw: Vec<f64>) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!("cannot normalise attribute vector of class {class_id}")));
        }
        Ok(Self {
            class_id,
            attributes: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn attributes(&self) -> &[f64] {
        &self.attributes
    }

    pub fn dim(&self) -> usize {
        self.attributes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionMode {
    /// Clean class mean with much larger isotropic noise.
    OffManifoldNoise,
    /// Centred on a different class's mean while keeping the claimed label.
    WrongClassMean,
}

impl CorruptionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionMode::OffManifoldNoise => "off-manifold-noise",
            CorruptionMode::WrongClassMean => "wrong-class-mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off-manifold-noise" => Some(CorruptionMode::OffManifoldNoise),
            "wrong-class-mean" => Some(CorruptionMode::WrongClassMean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub corruption_rate: f64,
    pub corruption_mode: CorruptionMode,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::config("generator.corruption_rate", "must lie in [0, 1]"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::config("generator.noise_scale", "must be finite and non-negative"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("generator.feature_dim", "must be positive"));
        }
        Ok(())
    }

    /// Noise scale used for off-manifold corruption.
    pub fn off_manifold_scale(&self) -> f64 {
        3.0 * self.noise_scale.max(1.0)
    }
}

/// Anything that turns a class attribute vector into candidate features.
pub trait FeatureGenerator {
    fn generate(&self, attr: &AttributeVector, n: usize, rng: &mut dyn RngCore) -> Result<CandidatePool>;

    /// Generates `per_class` candidates for each class in turn and
    /// concatenates them, numbering generation order globally.
    fn generate_pool(&self, attrs: &[AttributeVector], per_class: usize, rng: &mut dyn RngCore) -> Result<CandidatePool> {
        if attrs.is_empty() {
            return Err(Error::Input("generate_pool needs at least one class".into()));
        }
        let parts = attrs
            .iter()
            .map(|a| self.generate(a, per_class, rng))
            .collect::<Result<Vec<_>>>()?;
        CandidatePool::concat(&parts)
    }
}

/// Desk-scale conditional generator with ground-truth corruption.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    spec: GeneratorSpec,
    projection: Matrix,
    /// Every class the generator knows about, consulted for wrong-class means.
    classes: Vec<AttributeVector>,
}

impl ToyGenerator {
    pub fn new(spec: GeneratorSpec, projection: Matrix, classes: Vec<AttributeVector>) -> Result<Self> {
        spec.validate()?;
        if projection.cols() != spec.feature_dim {
            return Err(Error::shape("toy_generator", projection.shape(), (projection.rows(), spec.feature_dim)));
        }
        if let Some(bad) = classes.iter().find(|a| a.dim() != projection.rows()) {
            return Err(Error::shape("toy_generator", (1, bad.dim()), projection.shape()));
        }
        Ok(Self {
            spec,
            projection,
            classes,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// `a · P` as a `1 × feature_dim` row.
    pub fn class_mean(&self, attr: &AttributeVector) -> Result<Matrix> {
        if attr.dim() != self.projection.rows() {
            return Err(Error::shape("class_mean", (1, attr.dim()), self.projection.shape()));
        }
        matmul(&Matrix::row_vector(attr.attributes()), &self.projection)
    }
}

impl ToyGenerator {
    fn emit(&self, attr: &AttributeVector, n: usize, decoys: &[AttributeVector], rng: &mut dyn RngCore) -> Result<CandidatePool> {
        if n == 0 {
            return Err(Error::Input("generate needs n ≥ 1".into()));
        }
        let mean = self.class_mean(attr)?;
        let decoys: Vec<&AttributeVector> = decoys.iter().filter(|c| c.class_id() != attr.class_id()).collect();
        let d = self.spec.feature_dim;
        let mut features = Matrix::zeros(n, d);
        let mut corrupted = Vec::with_capacity(n);
        for i in 0..n {
            let bad = self.spec.corruption_rate > 0.0 && rng.random::<f64>() < self.spec.corruption_rate;
            let (center, sigma) = match (bad, self.spec.corruption_mode) {
                (false, _) => (mean.clone(), self.spec.noise_scale),
                (true, CorruptionMode::OffManifoldNoise) => (mean.clone(), self.spec.off_manifold_scale()),
                (true, CorruptionMode::WrongClassMean) => {
                    if decoys.is_empty() {
                        return Err(Error::Input("wrong-class-mean corruption needs at least two classes".into()));
                    }
                    let other = decoys[rng.random_range(0..decoys.len())];
                    (self.class_mean(other)?, self.spec.noise_scale)
                }
            };
            for (c, out) in features.row_mut(i).iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *out = center.get(0, c) + sigma * eps;
            }
            corrupted.push(bad);
        }
        let conditioning = Matrix::from_fn(n, attr.dim(), |_, c| attr.attributes()[c]);
        CandidatePool::new(features, conditioning, vec![attr.class_id(); n], (0..n).collect(), corrupted)
    }
}

impl FeatureGenerator for ToyGenerator {
    /// Wrong-class corruption draws from every class the generator knows.
    fn generate(&self, attr: &AttributeVector, n: usize, rng: &mut dyn RngCore) -> Result<CandidatePool> {
        self.emit(attr, n, &self.classes, rng)
    }

    /// Wrong-class corruption stays among the pool's own classes, so a
    /// pool's decoys look like its other members.
    fn generate_pool(&self, attrs: &[AttributeVector], per_class: usize, rng: &mut dyn RngCore) -> Result<CandidatePool> {
        if attrs.is_empty() {
            return Err(Error::Input("generate_pool needs at least one class".into()));
        }
        if attrs.len() == 1 {
            return self.generate(&attrs[0], per_class, rng);
        }
        let parts = attrs
            .iter()
            .map(|a| self.emit(a, per_class, attrs, rng))
            .collect::<Result<Vec<_>>>()?;
        CandidatePool::concat(&parts)
    }
}
