//! Central-difference gradient checking.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::array::Array;
use crate::attention::build_att_y;
use crate::embedder::{build_embedder, embed_node, EmbedderConfig, Mode};
use crate::error::{Error, Result};
use crate::gru::{gru_cell, init_gru, GruNodes};
use crate::params::{seeded_rng, Bindings, ParamSet, SeededRng};
use crate::tape::{BnMode, Node, Tape};

/// Finite-difference step used at fp64.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// `max|analytic − numeric| / max(|analytic|∞, |numeric|∞)` over all inputs.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences at `point`. `f` receives one variable node per input array.
pub fn grad_check<F>(point: &[Array], f: F, tolerance: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Node]) -> Result<Node>,
{
    if tolerance <= 0.0 {
        return Err(Error::Usage("tolerance must be positive".into()));
    }
    let eval = |inputs: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let nodes: Vec<Node> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        let out = f(&mut tape, &nodes)?;
        scalar_value(&tape, out)
    };

    let mut tape = Tape::new();
    let nodes: Vec<Node> = point.iter().map(|a| tape.variable(a.clone())).collect();
    let out = f(&mut tape, &nodes)?;
    scalar_value(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Array> = nodes.iter().map(|&n| tape.grad(n)).collect();

    let mut work = point.to_vec();
    let mut per_input = Vec::with_capacity(point.len());
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        per_input.push(relative_error(a.data(), &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_err,
        per_input,
        tolerance,
    })
}

fn scalar_value(tape: &Tape<'_>, n: Node) -> Result<f64> {
    let v = tape.value(n);
    if v.len() != 1 {
        return Err(Error::Usage(format!("grad_check needs a scalar function, got shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Infinity-norm relative error; 0 when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-300 {
        return 0.0;
    }
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Every operation covered by [`suite`], in report order.
pub const SUITE_OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "affine",
    "scale",
    "add_row",
    "sigmoid",
    "tanh",
    "relu",
    "sum",
    "reshape",
    "pick",
    "row",
    "stack_rows",
    "softmax",
    "log_softmax",
    "neg_row_dist",
    "conv3x3",
    "conv3x3_batch",
    "maxpool2",
    "batchnorm",
    "batchnorm_spatial",
    "batchnorm_eval",
    "gru_unroll",
    "att_y",
    "embedder_cnn",
];

/// Worst result of one operation over all seeds.
#[derive(Clone, Debug)]
pub struct OpSummary {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub tolerance: f64,
}

impl OpSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

const CHECKED_KERNEL: &str = "embedder.conv1.k";

/// Required clearance from relu and max-pool kinks in composite checks.
const KINK_MARGIN: f64 = 1e-3;

type ScalarFn = Box<dyn for<'t> Fn(&mut Tape<'t>, &[Node]) -> Result<Node>>;

struct Case {
    point: Vec<Array>,
    f: ScalarFn,
}

/// Runs every operation in [`SUITE_OPS`] on randomized small shapes for
/// seeds `0..seeds`.
pub fn suite(seeds: usize, tolerance: f64) -> Result<Vec<OpSummary>> {
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst = (0.0f64, 0u64);
            for seed in 0..seeds as u64 {
                let r = check_op(op, seed, tolerance)?;
                if r.max_rel_err > worst.0 || r.max_rel_err.is_nan() {
                    worst = (r.max_rel_err, seed);
                }
            }
            Ok(OpSummary {
                op,
                seeds,
                max_rel_err: worst.0,
                worst_seed: worst.1,
                tolerance,
            })
        })
        .collect()
}

/// One randomized check of a named operation.
pub fn check_op(op: &str, seed: u64, tolerance: f64) -> Result<GradReport> {
    let case = make_case(op, seed)?;
    grad_check(&case.point, case.f, tolerance)
}

fn uniform(shape: &[usize], rng: &mut SeededRng) -> Array {
    let n = shape.iter().product();
    Array::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values with `|x| ≥ 0.1`, so the check never straddles a kink.
fn off_zero(shape: &[usize], rng: &mut SeededRng) -> Array {
    uniform(shape, rng).map(|v| if v < 0.0 { v * 0.9 - 0.1 } else { v * 0.9 + 0.1 })
}

/// Shuffled, evenly spaced values, so every pooling window has a clear maximum.
fn distinct(shape: &[usize], rng: &mut SeededRng) -> Array {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(rng);
    Array::from_parts(shape.to_vec(), v)
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// `Σ r ⊙ out` with a fixed random `r`.
fn project(tape: &mut Tape<'_>, out: Node, seed: u64) -> Result<Node> {
    let mut rng = seeded_rng(seed);
    let r = uniform(tape.shape(out), &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn case(point: Vec<Array>, cot: u64, body: impl for<'t> Fn(&mut Tape<'t>, &[Node]) -> Result<Node> + 'static) -> Case {
    Case {
        point,
        f: Box::new(move |tape, x| {
            let out = body(tape, x)?;
            project(tape, out, cot)
        }),
    }
}

/// Named parameters turned into checked inputs, in `ParamSet` order.
fn param_inputs(params: &ParamSet) -> (Vec<String>, Vec<Array>) {
    params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).unzip()
}

fn bind_inputs(names: &[String], nodes: &[Node]) -> Bindings {
    names.iter().cloned().zip(nodes.iter().copied()).collect()
}

fn make_case(op: &str, seed: u64) -> Result<Case> {
    let mut rng = seeded_rng(seed);
    let cot = rng.random::<u64>();
    let r = &mut rng;
    let c = match op {
        "matmul" => {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            case(vec![uniform(&[m, k], r), uniform(&[k, n], r)], cot, |t, x| t.matmul(x[0], x[1]))
        }
        "add" | "sub" | "mul" => {
            let shape = [dim(r, 1, 4), dim(r, 1, 4)];
            let point = vec![uniform(&shape, r), uniform(&shape, r)];
            match op {
                "add" => case(point, cot, |t, x| t.add(x[0], x[1])),
                "sub" => case(point, cot, |t, x| t.sub(x[0], x[1])),
                _ => case(point, cot, |t, x| t.mul(x[0], x[1])),
            }
        }
        "affine" => {
            let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            case(vec![uniform(&[dim(r, 1, 6)], r)], cot, move |t, x| Ok(t.affine(x[0], a, b)))
        }
        "scale" => {
            let a = r.random_range(-2.0..2.0);
            case(vec![uniform(&[dim(r, 1, 6)], r)], cot, move |t, x| Ok(t.scale(x[0], a)))
        }
        "add_row" => {
            let (m, n) = (dim(r, 1, 4), dim(r, 1, 4));
            case(vec![uniform(&[m, n], r), uniform(&[n], r)], cot, |t, x| t.add_row(x[0], x[1]))
        }
        "sigmoid" => case(vec![uniform(&[dim(r, 1, 6)], r).map(|v| 3.0 * v)], cot, |t, x| Ok(t.sigmoid(x[0]))),
        "tanh" => case(vec![uniform(&[dim(r, 1, 6)], r).map(|v| 2.0 * v)], cot, |t, x| Ok(t.tanh(x[0]))),
        "relu" => case(vec![off_zero(&[dim(r, 1, 4), dim(r, 1, 4)], r)], cot, |t, x| Ok(t.relu(x[0]))),
        "sum" => case(vec![uniform(&[dim(r, 1, 4), dim(r, 1, 4)], r)], cot, |t, x| Ok(t.sum(x[0]))),
        "reshape" => {
            let (m, n) = (dim(r, 1, 4), dim(r, 1, 4));
            case(vec![uniform(&[m, n], r)], cot, move |t, x| t.reshape(x[0], &[n, m]))
        }
        "pick" => {
            let n = dim(r, 1, 6);
            let i = dim(r, 0, n - 1);
            case(vec![uniform(&[n], r)], cot, move |t, x| t.pick(x[0], i))
        }
        "row" => {
            let (m, n) = (dim(r, 1, 4), dim(r, 1, 4));
            let i = dim(r, 0, m - 1);
            case(vec![uniform(&[m, n], r)], cot, move |t, x| t.row(x[0], i))
        }
        "stack_rows" => {
            let n = dim(r, 1, 4);
            let point = (0..3).map(|_| uniform(&[n], r)).collect();
            // The middle row appears twice, so its gradient must accumulate.
            case(point, cot, |t, x| t.stack_rows(&[x[0], x[1], x[2], x[1]]))
        }
        "softmax" => case(vec![uniform(&[dim(r, 1, 6)], r).map(|v| 3.0 * v)], cot, |t, x| t.softmax(x[0])),
        "log_softmax" => case(vec![uniform(&[dim(r, 1, 6)], r).map(|v| 3.0 * v)], cot, |t, x| t.log_softmax(x[0])),
        "neg_row_dist" => {
            let (l, d) = (dim(r, 1, 4), dim(r, 1, 5));
            case(vec![uniform(&[d], r), uniform(&[l, d], r)], cot, |t, x| t.neg_row_dist(x[0], x[1]))
        }
        "conv3x3" | "conv3x3_batch" => {
            let (ci, co, h, w) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 3, 5), dim(r, 3, 5));
            let input = if op == "conv3x3" {
                uniform(&[ci, h, w], r)
            } else {
                uniform(&[2, ci, h, w], r)
            };
            let point = vec![input, uniform(&[co, ci, 3, 3], r), uniform(&[co], r)];
            case(point, cot, |t, x| t.conv3x3(x[0], x[1], x[2]))
        }
        "maxpool2" => {
            let shape = [dim(r, 1, 2), dim(r, 1, 3), 2 * dim(r, 1, 3), 2 * dim(r, 1, 3)];
            case(vec![distinct(&shape, r)], cot, |t, x| t.maxpool2(x[0]))
        }
        "batchnorm" | "batchnorm_spatial" => {
            let (input, c) = if op == "batchnorm" {
                let f = dim(r, 1, 4);
                (uniform(&[dim(r, 3, 5), f], r), f)
            } else {
                let c = dim(r, 1, 3);
                (uniform(&[2, c, dim(r, 1, 3), dim(r, 2, 3)], r), c)
            };
            let gamma = uniform(&[c], r).map(|v| v + 1.5);
            let point = vec![input, gamma, uniform(&[c], r)];
            case(point, cot, |t, x| Ok(t.batchnorm(x[0], x[1], x[2], BnMode::Train)?.0))
        }
        "batchnorm_eval" => {
            let (b, f) = (dim(r, 1, 4), dim(r, 1, 4));
            let mean = uniform(&[f], r);
            let var = uniform(&[f], r).map(|v| v + 1.5);
            let point = vec![uniform(&[b, f], r), uniform(&[f], r), uniform(&[f], r)];
            case(point, cot, move |t, x| {
                let mode = BnMode::Eval { mean: &mean, var: &var };
                Ok(t.batchnorm(x[0], x[1], x[2], mode)?.0)
            })
        }
        "gru_unroll" => {
            let (b, d_in, d_h) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4));
            let mut params = ParamSet::new(seed);
            init_gru(&mut params, "gru", d_in, d_h, r)?;
            let (names, mut point) = param_inputs(&params);
            // Biases start at zero; move them off it so their gradient is generic.
            for (n, a) in names.iter().zip(point.iter_mut()) {
                if n.contains(".b_") {
                    *a = uniform(a.shape(), r);
                }
            }
            let k = point.len();
            point.push(uniform(&[b, d_h], r));
            point.extend((0..3).map(|_| uniform(&[b, d_in], r)));
            case(point, cot, move |t, x| {
                let gru = GruNodes::bind(t, &bind_inputs(&names, &x[..k]), "gru")?;
                let mut h = x[k];
                for &xs in &x[k + 1..] {
                    h = gru_cell(t, xs, h, &gru)?;
                }
                Ok(h)
            })
        }
        "att_y" => {
            let hidden = dim(r, 1, 4);
            let (names, point) = param_inputs(&build_att_y(hidden, seed)?);
            let (rows, len) = (dim(r, 2, 4), dim(r, 1, 4));
            let mut diffs = uniform(&[rows, len], r).map(f64::round);
            // A repeated row exercises the shared-evaluation path.
            let first = diffs.row(0).to_vec();
            diffs.data_mut()[len..2 * len].copy_from_slice(&first);
            case(point, cot, move |t, x| crate::attention::att_y_scores(t, &bind_inputs(&names, x), &diffs))
        }
        "embedder_cnn" => {
            let config = EmbedderConfig::cnn_reduced();
            let params = build_embedder(&config, seed)?;
            let kernels = params.get(CHECKED_KERNEL)?.clone();
            let forward = move |t: &mut Tape<'_>, x: &[Node]| -> Result<Node> {
                let bindings: Bindings = params
                    .iter()
                    .map(|(n, p)| match n {
                        CHECKED_KERNEL => (n.to_string(), x[1]),
                        _ => (n.to_string(), t.constant(p.value.clone())),
                    })
                    .collect();
                Ok(embed_node(t, &config, &params, &bindings, x[0], Mode::Train)?.embeddings)
            };
            // Redraw the input until every relu and pooling window is well
            // clear of its kink, so central differences never straddle one.
            let mut input = None;
            for _ in 0..100 {
                let candidate = uniform(&[3, 1, 8, 8], r);
                let mut t = Tape::new();
                let nodes = [t.constant(candidate.clone()), t.constant(kernels.clone())];
                forward(&mut t, &nodes)?;
                if t.kink_margin() > KINK_MARGIN {
                    input = Some(candidate);
                    break;
                }
            }
            let input = input.ok_or_else(|| Error::Usage(format!("no kink-free input found for seed {seed}")))?;
            case(vec![input, kernels], cot, forward)
        }
        other => return Err(Error::Usage(format!("unknown operation `{other}`"))),
    };
    Ok(c)
}
