use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DatasetBundle;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Width of the latent class prototypes before projection.
const LATENT_DIM: usize = 16;

/// Parameters of the Gaussian-prototype generator.
///
/// Each class owns a shared latent prototype and one private prototype per
/// modality. Modality `i` observes
/// `informativeness[i] · A_iᵀ(shared_factor · s_y + (1 − shared_factor) · p_{y,i}) + σ·ε`
/// through a fixed random projection `A_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub dims: Vec<usize>,
    pub informativeness: Vec<f64>,
    pub shared_factor: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two modalities, the second much weaker than the first.
    pub fn reference() -> Self {
        Self {
            classes: 4,
            samples: 2000,
            dims: vec![32, 32],
            informativeness: vec![1.0, 0.3],
            shared_factor: 0.7,
            noise_sigma: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dims.len();
        if m < 2 {
            return Err(Error::config(format!("need at least 2 modalities, got {m}")));
        }
        if self.informativeness.len() != m {
            return Err(Error::config(format!(
                "{} informativeness values for {m} modalities",
                self.informativeness.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::config("modality dimensions must be positive"));
        }
        if self.classes < 2 || self.samples < self.classes {
            return Err(Error::config(format!(
                "need at least 2 classes and samples >= classes, got {} classes, {} samples",
                self.classes, self.samples
            )));
        }
        if self.classes > usize::from(u16::MAX) {
            return Err(Error::config("too many classes"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.informativeness.iter().all(|&v| unit(v)) || !unit(self.shared_factor) {
            return Err(Error::config(
                "informativeness and shared_factor must lie in [0, 1]",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

fn normal_vec(n: usize, r: &mut impl rand::Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let m = spec.dims.len();
    let mut proto_rng = rng::stream(spec.seed, "data/prototypes");

    let shared: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(LATENT_DIM, &mut proto_rng))
        .collect();
    let mut means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
    for (i, &dim) in spec.dims.iter().enumerate() {
        let private: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| normal_vec(LATENT_DIM, &mut proto_rng))
            .collect();
        // A_i entries ~ N(0, 1/L) keep projected coordinates at unit scale
        let scale = 1.0 / (LATENT_DIM as f64).sqrt();
        let proj: Vec<f64> = normal_vec(LATENT_DIM * dim, &mut proto_rng)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let info = spec.informativeness[i];
        let class_means = (0..spec.classes)
            .map(|c| {
                let latent: Vec<f64> = shared[c]
                    .iter()
                    .zip(&private[c])
                    .map(|(s, p)| spec.shared_factor * s + (1.0 - spec.shared_factor) * p)
                    .collect();
                (0..dim)
                    .map(|d| {
                        info * latent
                            .iter()
                            .enumerate()
                            .map(|(l, z)| z * proj[l * dim + d])
                            .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        means.push(class_means);
    }

    let mut labels: Vec<usize> = (0..spec.samples).map(|s| s % spec.classes).collect();
    labels.shuffle(&mut rng::stream(spec.seed, "data/labels"));

    let mut noise_rng = rng::stream(spec.seed, "data/noise");
    let modalities = spec
        .dims
        .iter()
        .enumerate()
        .map(|(i, &dim)| {
            let mut data = Vec::with_capacity(spec.samples * dim);
            for &y in &labels {
                for d in 0..dim {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    data.push((means[i][y][d] + spec.noise_sigma * e) as f32);
                }
            }
            Tensor::new(vec![spec.samples, dim], data)
        })
        .collect::<Result<Vec<_>>>()?;

    DatasetBundle::new(modalities, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec {
            samples: 103,
            ..SyntheticSpec::reference()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let counts = a.class_counts(&(0..a.samples()).collect::<Vec<_>>());
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        let c = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.modalities[0], c.modalities[0]);
    }

    #[test]
    fn rejects_invalid_specs() {
        let bad = [
            SyntheticSpec { dims: vec![4], informativeness: vec![1.0], ..SyntheticSpec::reference() },
            SyntheticSpec { informativeness: vec![1.0], ..SyntheticSpec::reference() },
            SyntheticSpec { samples: 3, ..SyntheticSpec::reference() },
            SyntheticSpec { shared_factor: 1.5, ..SyntheticSpec::reference() },
            SyntheticSpec { noise_sigma: -1.0, ..SyntheticSpec::reference() },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn zero_informativeness_carries_no_class_signal() {
        let spec = SyntheticSpec {
            informativeness: vec![1.0, 0.0],
            noise_sigma: 0.0,
            samples: 40,
            ..SyntheticSpec::reference()
        };
        let b = generate(&spec).unwrap();
        assert!(b.modalities[1].data().iter().all(|v| *v == 0.0));
    }
}
