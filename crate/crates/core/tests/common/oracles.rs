//! Reference implementations the library is checked against.

use fedens_core::metrics::{iou, Detection, GroundTruthBox};
use fedens_core::model::{init_params, loss_and_grad, ModelSpec, Sample, Target};
use fedens_core::rng::Prng;
use fedens_core::ParamSet;

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

/// Area by counting sample points on a `res`×`res` grid over `[0, 1]²`.
pub fn raster_iou(a: [f64; 4], b: [f64; 4], res: usize) -> f64 {
    let inside = |r: [f64; 4], x: f64, y: f64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..res {
        for j in 0..res {
            let (x, y) = ((i as f64 + 0.5) / res as f64, (j as f64 + 0.5) / res as f64);
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn lattice_box(rng: &mut Prng, class_id: usize) -> GroundTruthBox {
    // Corners on multiples of 1/10 so rasterization is exact.
    let (x0, x1) = loop {
        let (a, b) = (rng.index(11), rng.index(11));
        if a != b {
            break (a.min(b), a.max(b));
        }
    };
    let (y0, y1) = loop {
        let (a, b) = (rng.index(11), rng.index(11));
        if a != b {
            break (a.min(b), a.max(b));
        }
    };
    let f = |v: usize| v as f32 / 10.0;
    GroundTruthBox::new(class_id, (f(x0) + f(x1)) / 2.0, (f(y0) + f(y1)) / 2.0, f(x1 - x0), f(y1 - y0)).unwrap()
}

/// Lexicographically best assignment over the confidence-sorted detections,
/// found by enumerating every injective partial assignment.
pub fn brute_force_match(dets: &[Detection], gts: &[GroundTruthBox], thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)));

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn search(
        k: usize,
        order: &[usize],
        dets: &[Detection],
        gts: &[GroundTruthBox],
        thresh: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<(f64, i64)>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let key: Vec<(f64, i64)> = current
                .iter()
                .enumerate()
                .map(|(i, m)| m.map_or((-1.0, 0), |g| (iou(&dets[order[i]], &gts[g]), -(g as i64))))
                .collect();
            let better = match best {
                None => true,
                Some((bk, _)) => key.iter().zip(bk.iter()).find(|(a, b)| a != b).is_some_and(|(a, b)| a.partial_cmp(b) == Some(std::cmp::Ordering::Greater)),
            };
            if better {
                *best = Some((key, current.clone()));
            }
            return;
        }
        current.push(None);
        search(k + 1, order, dets, gts, thresh, used, current, best);
        current.pop();
        for g in 0..gts.len() {
            if !used[g] && iou(&dets[order[k]], &gts[g]) >= thresh {
                used[g] = true;
                current.push(Some(g));
                search(k + 1, order, dets, gts, thresh, used, current, best);
                current.pop();
                used[g] = false;
            }
        }
    }

    let mut best = None;
    search(0, &order, dets, gts, thresh, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    let (_, sorted) = best.unwrap();
    let mut result = vec![None; dets.len()];
    for (k, m) in sorted.into_iter().enumerate() {
        result[order[k]] = m;
    }
    result
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// AP as the mean over recall steps `j/G` of the best precision reached at
/// recall ≥ `j/G`.
pub fn oracle_ap(flags: &[bool], gt_count: usize) -> f64 {
    let mut points = Vec::new();
    let (mut tp, mut n) = (0, 0);
    for &f in flags {
        n += 1;
        tp += usize::from(f);
        points.push((tp as f64 / gt_count as f64, tp as f64 / n as f64));
    }
    (1..=gt_count)
        .map(|j| {
            let r = j as f64 / gt_count as f64;
            points.iter().filter(|p| p.0 >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / gt_count as f64
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn log_softmax(z: &[f64], k: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    z[k] - m - z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn matvec(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + (0..cols).map(|c| w[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

/// Mean batch loss from scratch.
pub fn oracle_loss(spec: &ModelSpec, p: &[Vec<f64>], batch: &[Sample]) -> f64 {
    let mut total = 0.0;
    for s in batch {
        let x: Vec<f64> = s.input.iter().map(|&v| v as f64).collect();
        total += match (spec, &s.target) {
            (ModelSpec::LinearRegressor { .. }, Target::Value(y)) => {
                let pred: f64 = p[0].iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + p[1][0];
                (pred - *y as f64).powi(2)
            }
            (ModelSpec::LogisticClassifier { .. }, Target::Class(k)) => -log_softmax(&matvec(&p[0], &p[1], &x), *k),
            (ModelSpec::GridDetector { grid, classes, .. }, Target::Boxes(boxes)) => {
                let h: Vec<f64> = matvec(&p[0], &p[1], &x).into_iter().map(f64::tanh).collect();
                let z = matvec(&p[2], &p[3], &h);
                let stride = 5 + classes;
                let mut loss = 0.0;
                for row in 0..*grid {
                    for col in 0..*grid {
                        let cell = &z[(row * grid + col) * stride..][..stride];
                        let owner = boxes.iter().find(|b| {
                            let r = ((b.cy as f64 * *grid as f64) as usize).min(grid - 1);
                            let c = ((b.cx as f64 * *grid as f64) as usize).min(grid - 1);
                            (r, c) == (row, col)
                        });
                        let obj = sigmoid(cell[0]);
                        match owner {
                            None => loss += 0.5 * obj * obj,
                            Some(b) => {
                                let t = [
                                    b.cx as f64 * *grid as f64 - col as f64,
                                    b.cy as f64 * *grid as f64 - row as f64,
                                    b.w as f64,
                                    b.h as f64,
                                ];
                                for k in 0..4 {
                                    loss += 5.0 * (sigmoid(cell[1 + k]) - t[k]).powi(2);
                                }
                                loss += (obj - 1.0).powi(2);
                                loss -= log_softmax(&cell[5..], b.class_id);
                            }
                        }
                    }
                }
                loss
            }
            _ => unreachable!(),
        };
    }
    total / batch.len() as f64
}

pub fn random_batch(spec: &ModelSpec, rng: &mut Prng) -> Vec<Sample> {
    let n = 1 + rng.index(4);
    (0..n)
        .map(|_| {
            let input: Vec<f32> = (0..spec.input_dim()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            match *spec {
                ModelSpec::LinearRegressor { .. } => Sample::regression(input, rng.uniform(-2.0, 2.0) as f32),
                ModelSpec::LogisticClassifier { classes, .. } => Sample::classification(input, rng.index(classes)),
                ModelSpec::GridDetector { classes, .. } => {
                    let input = input.iter().map(|v| (v + 1.0) / 2.0).collect();
                    let boxes = (0..1 + rng.index(3))
                        .map(|_| {
                            GroundTruthBox::new(
                                rng.index(classes),
                                rng.uniform(0.0, 1.0) as f32,
                                rng.uniform(0.0, 1.0) as f32,
                                rng.uniform(0.05, 1.0) as f32,
                                rng.uniform(0.05, 1.0) as f32,
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

pub fn perturbed(params: &ParamSet, seed: u64) -> ParamSet {
    // Nonzero biases so every path carries gradient.
    let mut rng = Prng::new(seed);
    let mut p = params.clone();
    for t in p.entries_mut() {
        for v in t.values_mut() {
            *v += rng.uniform(-0.3, 0.3) as f32;
        }
    }
    p
}


/// Panics on the first coordinate whose analytic and central-difference
/// gradients disagree.
pub fn check_gradients(spec: &ModelSpec, draws: u64, coords_per_draw: usize) {
    for draw in 0..draws {
        let mut rng = Prng::derive(0xFD, &[draw]);
        let params = perturbed(&init_params(spec, draw).unwrap(), draw + 1000);
        let batch = random_batch(spec, &mut rng);
        let refs: Vec<&Sample> = batch.iter().collect();
        let (loss, grad) = loss_and_grad(spec, &params, &refs).unwrap();
        assert!(grad.same_layout(&params));

        let shadow: Vec<Vec<f64>> = params.entries().iter().map(|t| t.values().iter().map(|&v| v as f64).collect()).collect();
        let base = oracle_loss(spec, &shadow, &batch);
        assert!((loss - base).abs() <= 1e-9 * base.abs().max(1.0), "loss {loss} vs oracle {base}");

        for (e, tensor) in grad.entries().iter().enumerate() {
            let len = tensor.len();
            let picks: Vec<usize> = if len <= coords_per_draw {
                (0..len).collect()
            } else {
                (0..coords_per_draw).map(|_| rng.index(len)).collect()
            };
            for i in picks {
                let mut plus = shadow.clone();
                plus[e][i] += EPS;
                let mut minus = shadow.clone();
                minus[e][i] -= EPS;
                let fd = (oracle_loss(spec, &plus, &batch) - oracle_loss(spec, &minus, &batch)) / (2.0 * EPS);
                let a = tensor.values()[i] as f64;
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
                assert!(rel < TOL, "{} draw {draw} {}[{i}]: analytic {a} fd {fd} rel {rel}", spec.kind_name(), tensor.name());
            }
        }
    }
}

