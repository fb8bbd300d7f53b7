#![allow(dead_code)]

pub mod oracles;

use fedens_core::metrics::GroundTruthBox;
use fedens_core::model::{ModelSpec, Sample};
use fedens_core::rng::Prng;

pub fn models() -> Vec<ModelSpec> {
    vec![
        ModelSpec::LinearRegressor { input_dim: 4 },
        ModelSpec::LogisticClassifier { input_dim: 4, classes: 3 },
        ModelSpec::GridDetector {
            image_size: 4,
            grid: 2,
            classes: 2,
            hidden: 6,
        },
    ]
}

pub fn random_samples(spec: &ModelSpec, n: usize, rng: &mut Prng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let input: Vec<f32> = (0..spec.input_dim()).map(|_| rng.unit() as f32).collect();
            match *spec {
                ModelSpec::LinearRegressor { .. } => {
                    let y = input.iter().enumerate().map(|(i, x)| (i as f32 - 1.5) * x).sum::<f32>();
                    Sample::regression(input, y + rng.uniform(-0.1, 0.1) as f32)
                }
                ModelSpec::LogisticClassifier { classes, .. } => Sample::classification(input, rng.index(classes)),
                ModelSpec::GridDetector { classes, .. } => {
                    let boxes = (0..1 + rng.index(2))
                        .map(|_| {
                            GroundTruthBox::new(
                                rng.index(classes),
                                rng.uniform(0.05, 0.95) as f32,
                                rng.uniform(0.05, 0.95) as f32,
                                rng.uniform(0.1, 0.6) as f32,
                                rng.uniform(0.1, 0.6) as f32,
                            )
                            .unwrap()
                        })
                        .collect();
                    Sample::detection(input, boxes)
                }
            }
        })
        .collect()
}

/// Split `data` into `sizes.len()` consecutive shards.
pub fn cut(data: &[Sample], sizes: &[usize]) -> Vec<Vec<Sample>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let s = data[start..start + n].to_vec();
            start += n;
            s
        })
        .collect()
}
