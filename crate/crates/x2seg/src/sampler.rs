//! Modality-aware batch sampling: dataset choice follows temperature
//! resampling over dataset sizes, image micro-batches carry a size
//! multiplier, and every video batch draws from a single dataset so its
//! temporal length is homogeneous by construction.

use rand::Rng;

use crate::error::{Result, X2Error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub size: usize,
    pub modality: Modality,
    /// Clip length; 1 for image datasets.
    pub t: usize,
}

/// One emitted micro-batch: sample indices within a single dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRef {
    pub dataset: usize,
    pub samples: Vec<usize>,
    pub modality: Modality,
    pub t: usize,
}

/// p_i = n_i^t / sum_j n_j^t.
pub fn resample_weights(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(X2Error::Data("no datasets to sample".into()));
    }
    if temperature <= 0.0 {
        return Err(X2Error::Config {
            key: "schedule.temperature".into(),
            msg: format!("temperature must be > 0, got {temperature}"),
        });
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(X2Error::Data(format!("dataset {i} has size 0")));
    }
    let pow: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(temperature)).collect();
    let z: f64 = pow.iter().sum();
    Ok(pow.into_iter().map(|p| p / z).collect())
}

pub struct Sampler {
    specs: Vec<DatasetSpec>,
    weights: Vec<f64>,
    image_batch: usize,
    video_batch: usize,
}

impl Sampler {
    /// `image_batch` = B x multiplier, `video_batch` = B.
    pub fn new(
        specs: Vec<DatasetSpec>,
        temperature: f64,
        image_batch: usize,
        video_batch: usize,
    ) -> Result<Self> {
        for s in &specs {
            if s.modality == Modality::Image && s.t != 1 {
                return Err(X2Error::Data(format!(
                    "image dataset {} declares T={}, expected 1",
                    s.name, s.t
                )));
            }
            if s.modality == Modality::Video && s.t < 2 {
                return Err(X2Error::Data(format!(
                    "video dataset {} declares T={}, expected >= 2",
                    s.name, s.t
                )));
            }
        }
        let sizes: Vec<usize> = specs.iter().map(|s| s.size).collect();
        let weights = resample_weights(&sizes, temperature)?;
        Ok(Self { specs, weights, image_batch, video_batch })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn pick_dataset<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Draw the next micro-batch. Deterministic given the rng state.
    pub fn next_batch<R: Rng>(&self, rng: &mut R) -> BatchRef {
        let d = self.pick_dataset(rng);
        let spec = &self.specs[d];
        let n = match spec.modality {
            Modality::Image => self.image_batch,
            Modality::Video => self.video_batch,
        };
        let samples = (0..n).map(|_| rng.random_range(0..spec.size)).collect();
        BatchRef { dataset: d, samples, modality: spec.modality, t: spec.t }
    }
}
