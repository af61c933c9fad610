//! Generated sine-mixture classification tasks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, LabelMap, Split, TimeSeriesSample};

/// Each class is a sum of unit-amplitude sines with the listed periods,
/// each with an independent uniform random phase, plus Gaussian noise.
#[derive(Debug, Clone)]
pub struct SineTask {
    pub name: String,
    pub class_periods: Vec<Vec<f64>>,
    pub length: usize,
    pub noise_std: f64,
}

impl SineTask {
    /// Class 0: period 32. Class 1: period 8.
    pub fn two_class(length: usize, noise_std: f64) -> Self {
        SineTask {
            name: "TwoSines".into(),
            class_periods: vec![vec![32.0], vec![8.0]],
            length,
            noise_std,
        }
    }

    /// Long period only, short period only, or both superimposed.
    pub fn multi_scale(length: usize, noise_std: f64) -> Self {
        SineTask {
            name: "MultiScale".into(),
            class_periods: vec![vec![32.0], vec![6.0], vec![32.0, 6.0]],
            length,
            noise_std,
        }
    }

    fn sample(&self, class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> TimeSeriesSample {
        let phases: Vec<f64> = self.class_periods[class]
            .iter()
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let values = (0..self.length)
            .map(|t| {
                let clean: f64 = self.class_periods[class]
                    .iter()
                    .zip(&phases)
                    .map(|(p, phi)| (std::f64::consts::TAU * t as f64 / p + phi).sin())
                    .sum();
                clean + noise.sample(rng)
            })
            .collect();
        TimeSeriesSample { values, label: class }
    }

    fn split(&self, n: usize, split: Split, rng: &mut ChaCha8Rng) -> Dataset {
        let classes = self.class_periods.len();
        let noise = Normal::new(0.0, self.noise_std).expect("non-negative noise");
        Dataset {
            name: self.name.clone(),
            split,
            samples: (0..n).map(|i| self.sample(i % classes, rng, &noise)).collect(),
            num_classes: classes,
            series_length: self.length,
            channels: 1,
            label_map: LabelMap::from_labels((1..=classes).map(|c| c as f64)),
        }
    }

    /// Balanced train and test splits; original labels are `1..=C`.
    pub fn generate(&self, n_train: usize, n_test: usize, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = self.split(n_train, Split::Train, &mut rng);
        let test = self.split(n_test, Split::Test, &mut rng);
        (train, test)
    }
}
