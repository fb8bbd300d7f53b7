//! Model abstraction and the three built-in trainable models.
//!
//! Parameters are stored as `f32`; every forward pass, loss and gradient
//! reduction runs in `f64` and is rounded once on the way out.

mod detector;

use serde::{Deserialize, Serialize};

pub use detector::{CellPrediction, DetectorOutput, BOX_CHANNELS, LAMBDA_COORD, LAMBDA_NOOBJ};

use crate::error::ModelError;
use crate::metrics::GroundTruthBox;
use crate::params::{ParamSet, Tensor};
use crate::rng::Prng;

/// Detector images are RGB.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    LinearRegressor {
        input_dim: usize,
    },
    LogisticClassifier {
        input_dim: usize,
        classes: usize,
    },
    /// Single tanh hidden layer over raw RGB pixels, S×S×(5+C) head.
    GridDetector {
        image_size: usize,
        grid: usize,
        classes: usize,
        hidden: usize,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidSpec(msg.to_string()));
        match *self {
            ModelSpec::LinearRegressor { input_dim } => {
                if input_dim == 0 {
                    return bad("input_dim must be >= 1");
                }
            }
            ModelSpec::LogisticClassifier { input_dim, classes } => {
                if input_dim == 0 {
                    return bad("input_dim must be >= 1");
                }
                if classes == 0 {
                    return bad("classes must be >= 1");
                }
            }
            ModelSpec::GridDetector {
                image_size,
                grid,
                classes,
                hidden,
            } => {
                if image_size == 0 {
                    return bad("image_size must be >= 1");
                }
                if grid == 0 {
                    return bad("grid must be >= 1");
                }
                if classes == 0 {
                    return bad("classes must be >= 1");
                }
                if hidden == 0 {
                    return bad("hidden must be >= 1");
                }
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::LinearRegressor { .. } => "linear_regressor",
            ModelSpec::LogisticClassifier { .. } => "logistic_classifier",
            ModelSpec::GridDetector { .. } => "grid_detector",
        }
    }

    /// Length of a flattened input sample.
    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::LinearRegressor { input_dim } | ModelSpec::LogisticClassifier { input_dim, .. } => input_dim,
            ModelSpec::GridDetector { image_size, .. } => image_size * image_size * IMAGE_CHANNELS,
        }
    }

    /// Length of the raw model output per sample.
    pub fn output_dim(&self) -> usize {
        match *self {
            ModelSpec::LinearRegressor { .. } => 1,
            ModelSpec::LogisticClassifier { classes, .. } => classes,
            ModelSpec::GridDetector { grid, classes, .. } => grid * grid * (BOX_CHANNELS + classes),
        }
    }

    /// `(name, shape)` for every entry, in parameter order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            ModelSpec::LinearRegressor { input_dim } => {
                vec![("weight", vec![input_dim]), ("bias", vec![1])]
            }
            ModelSpec::LogisticClassifier { input_dim, classes } => {
                vec![("weight", vec![classes, input_dim]), ("bias", vec![classes])]
            }
            ModelSpec::GridDetector { hidden, .. } => {
                let (d, o) = (self.input_dim(), self.output_dim());
                vec![
                    ("hidden.weight", vec![hidden, d]),
                    ("hidden.bias", vec![hidden]),
                    ("head.weight", vec![o, hidden]),
                    ("head.bias", vec![o]),
                ]
            }
        }
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<(), ModelError> {
        let layout = self.layout();
        let ok = params.len() == layout.len()
            && params
                .entries()
                .iter()
                .zip(&layout)
                .all(|(t, (name, shape))| t.name() == *name && t.shape() == shape.as_slice());
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidSpec(format!(
                "parameters do not match a {} layout",
                self.kind_name()
            )))
        }
    }
}

/// Supervision attached to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Value(f32),
    Class(usize),
    Boxes(Vec<GroundTruthBox>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f32>,
    pub target: Target,
}

impl Sample {
    pub fn regression(input: Vec<f32>, y: f32) -> Self {
        Self {
            input,
            target: Target::Value(y),
        }
    }

    pub fn classification(input: Vec<f32>, class: usize) -> Self {
        Self {
            input,
            target: Target::Class(class),
        }
    }

    pub fn detection(pixels: Vec<f32>, boxes: Vec<GroundTruthBox>) -> Self {
        Self {
            input: pixels,
            target: Target::Boxes(boxes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Value(f64),
    Probabilities(Vec<f64>),
    Grid(DetectorOutput),
}

/// Glorot-uniform weights, zero biases. Deterministic in `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet, ModelError> {
    spec.validate()?;
    let mut rng = Prng::new(seed);
    let mut params = ParamSet::new();
    for (name, shape) in spec.layout() {
        let len: usize = shape.iter().product();
        let values = if name.ends_with("bias") {
            vec![0.0; len]
        } else {
            let (fan_out, fan_in) = match shape.as_slice() {
                [d] => (1, *d),
                [rows, cols] => (*rows, *cols),
                _ => unreachable!("weights are vectors or matrices"),
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..len).map(|_| rng.uniform(-bound, bound) as f32).collect()
        };
        params.push(name, shape, values)?;
    }
    Ok(params)
}

fn check_input(spec: &ModelSpec, input: &[f32]) -> Result<(), ModelError> {
    if input.len() != spec.input_dim() {
        return Err(ModelError::InputDim {
            expected: spec.input_dim(),
            actual: input.len(),
        });
    }
    Ok(())
}

pub fn forward(spec: &ModelSpec, params: &ParamSet, input: &[f32]) -> Result<Output, ModelError> {
    spec.check_params(params)?;
    check_input(spec, input)?;
    let e = params.entries();
    Ok(match *spec {
        ModelSpec::LinearRegressor { .. } => Output::Value(linear_predict(e[0].values(), e[1].values()[0], input)),
        ModelSpec::LogisticClassifier { classes, .. } => {
            let mut logits = affine(e[0].values(), e[1].values(), input, classes);
            softmax_in_place(&mut logits);
            Output::Probabilities(logits)
        }
        ModelSpec::GridDetector { .. } => Output::Grid(detector::forward(spec, e, input)),
    })
}

/// Mean loss over `batch` and its gradient, with the gradient in the same
/// layout as `params`.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamSet, batch: &[&Sample]) -> Result<(f64, ParamSet), ModelError> {
    let (loss, grads) = loss_and_grad_f64(spec, params, batch)?;
    Ok((loss, params.with_values_f64(&grads)))
}

/// Mean loss only; shares the forward path with [`loss_and_grad`].
pub fn loss(spec: &ModelSpec, params: &ParamSet, batch: &[&Sample]) -> Result<f64, ModelError> {
    loss_and_grad_f64(spec, params, batch).map(|(l, _)| l)
}

/// Same as [`loss_and_grad`] but leaves the gradient as one `f64` buffer
/// per entry.
pub(crate) fn loss_and_grad_f64(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &[&Sample],
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    spec.check_params(params)?;
    let e = params.entries();
    let mut grads: Vec<Vec<f64>> = e.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut total = 0.0;
    for sample in batch {
        check_input(spec, &sample.input)?;
        total += match *spec {
            ModelSpec::LinearRegressor { .. } => linear_sample(e, sample, &mut grads)?,
            ModelSpec::LogisticClassifier { classes, .. } => logistic_sample(e, classes, sample, &mut grads)?,
            ModelSpec::GridDetector { .. } => detector::sample_loss(spec, e, sample, &mut grads)?,
        };
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, grads))
}

fn linear_predict(w: &[f32], b: f32, x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(&w, &x)| w as f64 * x as f64).sum::<f64>() + b as f64
}

fn linear_sample(e: &[Tensor], sample: &Sample, grads: &mut [Vec<f64>]) -> Result<f64, ModelError> {
    let Target::Value(y) = sample.target else {
        return Err(ModelError::TargetMismatch("linear_regressor"));
    };
    let residual = linear_predict(e[0].values(), e[1].values()[0], &sample.input) - y as f64;
    let d = 2.0 * residual;
    for (g, &x) in grads[0].iter_mut().zip(&sample.input) {
        *g += d * x as f64;
    }
    grads[1][0] += d;
    Ok(residual * residual)
}

/// Row-major `W x + b` for a `[rows, x.len()]` weight matrix.
fn affine(w: &[f32], b: &[f32], x: &[f32], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            b[r] as f64 + row.iter().zip(x).map(|(&w, &x)| w as f64 * x as f64).sum::<f64>()
        })
        .collect()
}

/// Replaces logits with probabilities; returns log-sum-exp of the input.
pub(crate) fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn logistic_sample(e: &[Tensor], classes: usize, sample: &Sample, grads: &mut [Vec<f64>]) -> Result<f64, ModelError> {
    let Target::Class(label) = sample.target else {
        return Err(ModelError::TargetMismatch("logistic_classifier"));
    };
    if label >= classes {
        return Err(ModelError::ClassOutOfRange { class: label, classes });
    }
    let mut p = affine(e[0].values(), e[1].values(), &sample.input, classes);
    let z_label = p[label];
    let lse = softmax_in_place(&mut p);
    let cols = sample.input.len();
    for (c, &pc) in p.iter().enumerate() {
        let d = pc - if c == label { 1.0 } else { 0.0 };
        let row = &mut grads[0][c * cols..(c + 1) * cols];
        for (g, &x) in row.iter_mut().zip(&sample.input) {
            *g += d * x as f64;
        }
        grads[1][c] += d;
    }
    Ok(lse - z_label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, Vec<usize>, Vec<f32>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, s, v) in entries {
            p.push(*n, s.clone(), v.clone()).unwrap();
        }
        p
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::LinearRegressor { input_dim: 1 };
        assert!(init_params(&spec, 7).unwrap().bitwise_eq(&init_params(&spec, 7).unwrap()));
        assert!(!init_params(&spec, 7).unwrap().bitwise_eq(&init_params(&spec, 8).unwrap()));
    }

    #[test]
    fn init_zero_biases_and_glorot_bound() {
        let spec = ModelSpec::LogisticClassifier { input_dim: 4, classes: 3 };
        let p = init_params(&spec, 1).unwrap();
        assert!(p.get("bias").unwrap().values().iter().all(|&v| v == 0.0));
        let bound = (6.0f32 / 7.0).sqrt();
        assert!(p.get("weight").unwrap().values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn detector_layout_matches_grid_output() {
        let spec = ModelSpec::GridDetector {
            image_size: 64,
            grid: 4,
            classes: 3,
            hidden: 32,
        };
        let p = init_params(&spec, 3).unwrap();
        assert_eq!(spec.output_dim(), 4 * 4 * (5 + 3));
        assert_eq!(p.get("hidden.weight").unwrap().shape(), &[32, 64 * 64 * 3]);
        assert_eq!(p.get("head.weight").unwrap().shape(), &[128, 32]);
        assert_eq!(p.get("head.bias").unwrap().shape(), &[128]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::LogisticClassifier { input_dim: 2, classes: 0 }.validate().is_err());
        assert!(ModelSpec::GridDetector {
            image_size: 8,
            grid: 0,
            classes: 1,
            hidden: 1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn linear_forward_arithmetic() {
        let spec = ModelSpec::LinearRegressor { input_dim: 1 };
        let p = set(&[("weight", vec![1], vec![2.0]), ("bias", vec![1], vec![1.0])]);
        assert_eq!(forward(&spec, &p, &[3.0]).unwrap(), Output::Value(7.0));
        assert!(matches!(
            forward(&spec, &p, &[3.0, 1.0]),
            Err(ModelError::InputDim { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn logistic_zero_params_uniform() {
        let spec = ModelSpec::LogisticClassifier { input_dim: 2, classes: 3 };
        let p = set(&[("weight", vec![3, 2], vec![0.0; 6]), ("bias", vec![3], vec![0.0; 3])]);
        let Output::Probabilities(probs) = forward(&spec, &p, &[0.3, -2.0]).unwrap() else {
            panic!()
        };
        for v in probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_perfect_fit_has_zero_loss_and_grad() {
        let spec = ModelSpec::LinearRegressor { input_dim: 2 };
        let p = set(&[("weight", vec![2], vec![1.5, -0.5]), ("bias", vec![1], vec![0.25])]);
        let data: Vec<Sample> = [[1.0f32, 2.0], [0.0, -1.0], [4.0, 4.0]]
            .iter()
            .map(|x| Sample::regression(x.to_vec(), 1.5 * x[0] - 0.5 * x[1] + 0.25))
            .collect();
        let batch: Vec<&Sample> = data.iter().collect();
        let (l, g) = loss_and_grad(&spec, &p, &batch).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.values().all(|v| v == 0.0));
    }

    #[test]
    fn logistic_zero_params_loss_is_ln2() {
        let spec = ModelSpec::LogisticClassifier { input_dim: 2, classes: 2 };
        let p = init_params(&spec, 0).unwrap().zeros_like();
        let s = Sample::classification(vec![0.7, -1.2], 1);
        let (l, g) = loss_and_grad(&spec, &p, &[&s]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.same_layout(&p));
    }

    #[test]
    fn empty_batch_and_target_mismatch() {
        let spec = ModelSpec::LinearRegressor { input_dim: 1 };
        let p = init_params(&spec, 0).unwrap();
        assert_eq!(loss_and_grad(&spec, &p, &[]).unwrap_err(), ModelError::EmptyBatch);
        let s = Sample::classification(vec![1.0], 0);
        assert!(matches!(
            loss_and_grad(&spec, &p, &[&s]),
            Err(ModelError::TargetMismatch(_))
        ));
    }

    #[test]
    fn loss_is_mean_over_batch() {
        let spec = ModelSpec::LogisticClassifier { input_dim: 3, classes: 4 };
        let p = init_params(&spec, 11).unwrap();
        let a = Sample::classification(vec![0.1, 0.2, 0.3], 2);
        let b = Sample::classification(vec![-1.0, 0.5, 0.0], 0);
        let la = loss(&spec, &p, &[&a]).unwrap();
        let lb = loss(&spec, &p, &[&b]).unwrap();
        let lab = loss(&spec, &p, &[&a, &b]).unwrap();
        assert!((lab - 0.5 * (la + lb)).abs() < 1e-12);
    }
}
