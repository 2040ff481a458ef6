//! Encoder plus sparse classifier, evaluated on single images.

use crate::classifier::{score, SparseClassifier};
use crate::encoder::{Encoder, FeatureGrid};
use crate::error::{Error, Result};
use crate::numerics::softmax;
use crate::par::{self, Exec};
use crate::prototype_head::{channel_softmax, presence_pool, PresenceVector, ProtoGrid};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: SparseClassifier,
    /// Square input side used for inference.
    pub resolution: usize,
}

/// Everything computed for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub features: FeatureGrid,
    pub prototypes: ProtoGrid,
    pub presence: PresenceVector,
    /// `log(e_k^n + 1)` per class.
    pub scores: Vec<f64>,
    /// Softmax of `scores`.
    pub probabilities: Vec<f64>,
}

impl Inference {
    pub fn predicted(&self) -> usize {
        argmax(&self.scores)
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn new(encoder: Encoder, classifier: SparseClassifier, resolution: usize) -> Result<Self> {
        encoder.config.check_resolution(resolution)?;
        if classifier.prototypes() != encoder.config.embed_dim {
            return Err(Error::Config(format!(
                "classifier has {} prototypes but the encoder emits {} channels",
                classifier.prototypes(),
                encoder.config.embed_dim
            )));
        }
        Ok(Model {
            encoder,
            classifier,
            resolution,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.classifier.class_names
    }

    /// Resizes to the inference resolution when needed.
    pub fn prepare(&self, image: &Image) -> Image {
        image.resize(self.resolution, self.resolution)
    }

    pub fn infer(&self, image: &Image) -> Result<Inference> {
        let features = self.encoder.encode(&self.prepare(image))?;
        let prototypes = channel_softmax(&features)?;
        let presence = presence_pool(&prototypes);
        let scores = score(&presence.p, &self.classifier)?;
        let probabilities = class_probabilities(&scores);
        Ok(Inference {
            features,
            prototypes,
            presence,
            scores,
            probabilities,
        })
    }

    /// The same model reading inputs at another resolution; the positional
    /// table is resampled onto the new grid.
    pub fn at_resolution(&self, resolution: usize) -> Result<Model> {
        self.encoder.config.check_resolution(resolution)?;
        let mut m = self.clone();
        m.encoder.set_positional_grid(m.encoder.config.grid(resolution))?;
        m.resolution = resolution;
        Ok(m)
    }

    pub fn infer_all(&self, images: &[&Image], exec: Exec) -> Result<Vec<Inference>> {
        par::map(exec, images, |im| self.infer(im)).into_iter().collect()
    }
}

pub fn class_probabilities(scores: &[f64]) -> Vec<f64> {
    let a = crate::numerics::Array::<f64>::vector(scores.to_vec());
    softmax(&a, 0).expect("vector softmax").into_data()
}
