//! Grid-cell detector: one tanh hidden layer over raw pixels and an S×S
//! head. Each cell predicts `[objectness, cx, cy, w, h, class scores..]`;
//! the first five go through a sigmoid, class scores through a per-cell
//! softmax. A ground-truth box is owned by the cell containing its center.

use super::{softmax_in_place, ModelError, ModelSpec, Sample, Target};
use crate::metrics::GroundTruthBox;
use crate::params::Tensor;

/// Objectness plus four box channels per cell.
pub const BOX_CHANNELS: usize = 5;
pub const LAMBDA_COORD: f64 = 5.0;
pub const LAMBDA_NOOBJ: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    grid: usize,
    classes: usize,
    values: Vec<f32>,
}

/// One cell's decoded prediction. `cx`/`cy` are offsets inside the cell,
/// `w`/`h` fractions of the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPrediction<'a> {
    pub objectness: f32,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub class_probs: &'a [f32],
}

impl DetectorOutput {
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn cell(&self, row: usize, col: usize) -> CellPrediction<'_> {
        let stride = BOX_CHANNELS + self.classes;
        let v = &self.values[(row * self.grid + col) * stride..][..stride];
        CellPrediction {
            objectness: v[0],
            cx: v[1],
            cy: v[2],
            w: v[3],
            h: v[4],
            class_probs: &v[BOX_CHANNELS..],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dot product with eight independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results stay deterministic.
fn dot(w: &[f32], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let wc = w.chunks_exact(8);
    let xc = x.chunks_exact(8);
    let (wr, xr) = (wc.remainder(), xc.remainder());
    for (wv, xv) in wc.zip(xc) {
        for k in 0..8 {
            acc[k] += wv[k] as f64 * xv[k];
        }
    }
    let mut tail = 0.0;
    for (&a, &b) in wr.iter().zip(xr) {
        tail += a as f64 * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

struct Activations {
    input: Vec<f64>,
    hidden: Vec<f64>,
    /// Post-activation head: sigmoid on box channels, softmax on classes.
    head: Vec<f64>,
    /// Per-cell log-sum-exp of the class logits.
    class_lse: Vec<f64>,
    class_logits: Vec<f64>,
}

fn dims(spec: &ModelSpec) -> (usize, usize, usize) {
    match *spec {
        ModelSpec::GridDetector {
            grid, classes, hidden, ..
        } => (grid, classes, hidden),
        _ => unreachable!("detector dispatch"),
    }
}

fn activations(spec: &ModelSpec, e: &[Tensor], input: &[f32]) -> Activations {
    let (grid, classes, hidden) = dims(spec);
    let d = spec.input_dim();
    let o = spec.output_dim();
    let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let (w1, b1, w2, b2) = (e[0].values(), e[1].values(), e[2].values(), e[3].values());

    let h: Vec<f64> = (0..hidden)
        .map(|j| (b1[j] as f64 + dot(&w1[j * d..(j + 1) * d], &x)).tanh())
        .collect();
    let mut z: Vec<f64> = (0..o).map(|k| b2[k] as f64 + dot(&w2[k * hidden..(k + 1) * hidden], &h)).collect();

    let stride = BOX_CHANNELS + classes;
    let mut class_lse = Vec::with_capacity(grid * grid);
    let mut class_logits = Vec::with_capacity(grid * grid * classes);
    for cell in z.chunks_exact_mut(stride) {
        for v in &mut cell[..BOX_CHANNELS] {
            *v = sigmoid(*v);
        }
        class_logits.extend_from_slice(&cell[BOX_CHANNELS..]);
        class_lse.push(softmax_in_place(&mut cell[BOX_CHANNELS..]));
    }
    Activations {
        input: x,
        hidden: h,
        head: z,
        class_lse,
        class_logits,
    }
}

pub(super) fn forward(spec: &ModelSpec, e: &[Tensor], input: &[f32]) -> DetectorOutput {
    let (grid, classes, _) = dims(spec);
    let act = activations(spec, e, input);
    DetectorOutput {
        grid,
        classes,
        values: act.head.iter().map(|&v| v as f32).collect(),
    }
}

/// Grid cell `(row, col)` owning the box center.
pub fn responsible_cell(b: &GroundTruthBox, grid: usize) -> (usize, usize) {
    let cell = |v: f32| ((v as f64 * grid as f64).floor() as usize).min(grid - 1);
    (cell(b.cy), cell(b.cx))
}

/// Per-cell owner: the first box (in annotation order) whose center falls
/// in the cell.
pub(crate) fn assign_cells(boxes: &[GroundTruthBox], grid: usize) -> Vec<Option<&GroundTruthBox>> {
    let mut owners = vec![None; grid * grid];
    for b in boxes {
        let (r, c) = responsible_cell(b, grid);
        owners[r * grid + c].get_or_insert(b);
    }
    owners
}

pub(super) fn sample_loss(
    spec: &ModelSpec,
    e: &[Tensor],
    sample: &Sample,
    grads: &mut [Vec<f64>],
) -> Result<f64, ModelError> {
    let (grid, classes, hidden) = dims(spec);
    let Target::Boxes(boxes) = &sample.target else {
        return Err(ModelError::TargetMismatch("grid_detector"));
    };
    if let Some(b) = boxes.iter().find(|b| b.class_id >= classes) {
        return Err(ModelError::ClassOutOfRange {
            class: b.class_id,
            classes,
        });
    }
    let act = activations(spec, e, &sample.input);
    let owners = assign_cells(boxes, grid);
    let stride = BOX_CHANNELS + classes;
    let o = spec.output_dim();
    let d = spec.input_dim();

    // dL/dz for every head pre-activation.
    let mut dz = vec![0.0f64; o];
    let mut loss = 0.0;
    for (cell, owner) in owners.iter().enumerate() {
        let s = &act.head[cell * stride..(cell + 1) * stride];
        let g = &mut dz[cell * stride..(cell + 1) * stride];
        match owner {
            None => {
                loss += LAMBDA_NOOBJ * s[0] * s[0];
                g[0] = LAMBDA_NOOBJ * 2.0 * s[0] * s[0] * (1.0 - s[0]);
            }
            Some(b) => {
                let (row, col) = (cell / grid, cell % grid);
                let targets = [
                    b.cx as f64 * grid as f64 - col as f64,
                    b.cy as f64 * grid as f64 - row as f64,
                    b.w as f64,
                    b.h as f64,
                ];
                for (k, t) in targets.iter().enumerate() {
                    let v = s[1 + k];
                    let r = v - t;
                    loss += LAMBDA_COORD * r * r;
                    g[1 + k] = LAMBDA_COORD * 2.0 * r * v * (1.0 - v);
                }
                let r = s[0] - 1.0;
                loss += r * r;
                g[0] = 2.0 * r * s[0] * (1.0 - s[0]);

                let label = b.class_id;
                loss += act.class_lse[cell] - act.class_logits[cell * classes + label];
                for c in 0..classes {
                    g[BOX_CHANNELS + c] = s[BOX_CHANNELS + c] - if c == label { 1.0 } else { 0.0 };
                }
            }
        }
    }

    let w2 = e[2].values();
    let mut dh = vec![0.0f64; hidden];
    {
        let (gw2, rest) = grads.split_at_mut(3);
        let gw2 = &mut gw2[2];
        let gb2 = &mut rest[0];
        for k in 0..o {
            let dk = dz[k];
            if dk == 0.0 {
                continue;
            }
            gb2[k] += dk;
            let row = &mut gw2[k * hidden..(k + 1) * hidden];
            let wrow = &w2[k * hidden..(k + 1) * hidden];
            for j in 0..hidden {
                row[j] += dk * act.hidden[j];
                dh[j] += dk * wrow[j] as f64;
            }
        }
    }
    let (gw1, rest) = grads.split_at_mut(1);
    let gw1 = &mut gw1[0];
    let gb1 = &mut rest[0];
    for j in 0..hidden {
        let dj = dh[j] * (1.0 - act.hidden[j] * act.hidden[j]);
        if dj == 0.0 {
            continue;
        }
        gb1[j] += dj;
        for (g, &x) in gw1[j * d..(j + 1) * d].iter_mut().zip(&act.input) {
            *g += dj * x;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward as model_forward, init_params, Output};

    fn spec() -> ModelSpec {
        ModelSpec::GridDetector {
            image_size: 8,
            grid: 2,
            classes: 3,
            hidden: 5,
        }
    }

    fn grid_output(params: &crate::params::ParamSet, input: &[f32]) -> DetectorOutput {
        match model_forward(&spec(), params, input).unwrap() {
            Output::Grid(g) => g,
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_params_give_half_objectness_uniform_classes() {
        let p = init_params(&spec(), 1).unwrap().zeros_like();
        let input = vec![0.3; spec().input_dim()];
        let out = grid_output(&p, &input);
        assert_eq!(out.values().len(), 2 * 2 * (5 + 3));
        for r in 0..2 {
            for c in 0..2 {
                let cell = out.cell(r, c);
                assert_eq!(cell.objectness, 0.5);
                for &p in cell.class_probs {
                    assert!((p - 1.0 / 3.0).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn class_scores_sum_to_one() {
        let p = init_params(&spec(), 5).unwrap();
        let input: Vec<f32> = (0..spec().input_dim()).map(|i| (i % 7) as f32 / 7.0).collect();
        let out = grid_output(&p, &input);
        for r in 0..2 {
            for c in 0..2 {
                let s: f32 = out.cell(r, c).class_probs.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn responsible_cell_clamps_right_edge() {
        let b = GroundTruthBox::new(0, 1.0, 0.49, 0.1, 0.1).unwrap();
        assert_eq!(responsible_cell(&b, 4), (1, 3));
    }

    #[test]
    fn first_box_owns_shared_cell() {
        let a = GroundTruthBox::new(0, 0.1, 0.1, 0.1, 0.1).unwrap();
        let b = GroundTruthBox::new(1, 0.2, 0.2, 0.1, 0.1).unwrap();
        let boxes = [a, b];
        let owners = assign_cells(&boxes, 2);
        assert_eq!(owners[0].unwrap().class_id, 0);
        assert!(owners[1..].iter().all(Option::is_none));
    }

    #[test]
    fn dot_matches_naive_sum() {
        let w: Vec<f32> = (0..37).map(|i| i as f32 * 0.25 - 3.0).collect();
        let x: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = w.iter().zip(&x).map(|(&a, &b)| a as f64 * b).sum();
        assert!((dot(&w, &x) - naive).abs() < 1e-12);
    }
}
