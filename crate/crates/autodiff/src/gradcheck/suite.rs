//! Random-instance finite-difference sweep over every recorded op.
//!
//! Each instance draws small random shapes and values, applies the op, and
//! contracts the output against a random constant so the upstream gradient
//! is generic. Inputs to piecewise-linear ops are kept at least `10 * step`
//! away from their kinks so the central difference never straddles one.

use super::{grad_check_many, GradCheckConfig, GradCheckError, GradCheckReport};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Small deterministic generator so the sweep needs no external RNG.
#[derive(Debug, Clone)]
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }

    /// Values with magnitude in `[gap, 1]` and random sign.
    pub fn away_from_zero(&mut self, shape: &[usize], gap: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.uniform(gap, 1.0);
            if self.unit() < 0.5 {
                -m
            } else {
                m
            }
        })
    }
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "relu",
    "sigmoid",
    "clamp",
    "matmul",
    "affine",
    "conv2d",
    "max_pool2",
    "global_avg_pool",
    "batch_norm",
    "batch_norm_eval",
    "mul_channel_broadcast",
    "concat_cols",
    "softmax_cross_entropy",
    "sq_dist",
    "mean",
    "sum",
    "reshape",
    "slice_rows",
    "gather_rows",
    "gaussian_log_prob",
];

/// Contracts `y` against a fixed random tensor: `sum(y * r)`.
fn project<'t>(y: Var<'t, f64>, r: &Tensor<f64>) -> crate::Result<Var<'t, f64>> {
    let c = y.tape().constant(r.clone().reshape(&y.shape())?);
    y.mul(&c)?.sum()
}

/// Runs one random instance of `op`.
pub fn check_op(op: &str, rng: &mut SplitMix, cfg: &GradCheckConfig) -> Result<GradCheckReport, GradCheckError> {
    let gap = 10.0 * cfg.step;
    match op {
        "add" | "sub" | "mul" => {
            let shape = [rng.range(1, 4), rng.range(1, 5)];
            let pts = vec![rng.tensor(&shape, -1.0, 1.0), rng.tensor(&shape, -1.0, 1.0)];
            let r = rng.tensor(&shape, -1.0, 1.0);
            let which = op.to_string();
            grad_check_many(
                move |_t, v| {
                    let y = match which.as_str() {
                        "add" => v[0].add(&v[1])?,
                        "sub" => v[0].sub(&v[1])?,
                        _ => v[0].mul(&v[1])?,
                    };
                    project(y, &r)
                },
                &pts,
                cfg,
            )
        }
        "scale" | "shift" | "sigmoid" | "mean" | "sum" | "reshape" => {
            let shape = [rng.range(1, 4), rng.range(1, 6)];
            let pts = vec![rng.tensor(&shape, -2.0, 2.0)];
            let r = rng.tensor(&shape, -1.0, 1.0);
            let c = rng.uniform(-2.0, 2.0);
            let offset = rng.tensor(&shape, -1.0, 1.0);
            let which = op.to_string();
            let flat = [shape[0] * shape[1]];
            grad_check_many(
                move |_t, v| match which.as_str() {
                    "scale" => project(v[0].scale(c)?, &r),
                    "shift" => project(v[0].shift(&offset)?, &r),
                    "sigmoid" => project(v[0].sigmoid()?, &r),
                    "mean" => v[0].mean()?.scale(c),
                    "sum" => v[0].sum()?.scale(c),
                    _ => project(v[0].reshape(&flat)?, &r),
                },
                &pts,
                cfg,
            )
        }
        "relu" => {
            let shape = [rng.range(1, 4), rng.range(1, 6)];
            let pts = vec![rng.away_from_zero(&shape, gap)];
            let r = rng.tensor(&shape, -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].relu()?, &r), &pts, cfg)
        }
        "clamp" => {
            let shape = [rng.range(1, 4), rng.range(1, 6)];
            // keep every value at least `gap` from both bounds 0 and 1
            let pts = vec![Tensor::from_fn(&shape, |_| {
                let band = rng.below(3);
                match band {
                    0 => rng.uniform(-1.0, -gap),
                    1 => rng.uniform(gap, 1.0 - gap),
                    _ => rng.uniform(1.0 + gap, 2.0),
                }
            })];
            let r = rng.tensor(&shape, -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].clamp(0.0, 1.0)?, &r), &pts, cfg)
        }
        "matmul" => {
            let (m, k, n) = (rng.range(1, 4), rng.range(1, 5), rng.range(1, 4));
            let pts = vec![rng.tensor(&[m, k], -1.0, 1.0), rng.tensor(&[k, n], -1.0, 1.0)];
            let r = rng.tensor(&[m, n], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].matmul(&v[1])?, &r), &pts, cfg)
        }
        "affine" => {
            let (m, k, n) = (rng.range(1, 4), rng.range(1, 8), rng.range(1, 4));
            let pts = vec![
                rng.tensor(&[m, k], -1.0, 1.0),
                rng.tensor(&[k, n], -1.0, 1.0),
                rng.tensor(&[n], -1.0, 1.0),
            ];
            let r = rng.tensor(&[m, n], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].affine(&v[1], &v[2])?, &r), &pts, cfg)
        }
        "conv2d" => {
            let (b, h, w) = (rng.range(1, 2), rng.range(1, 4), rng.range(1, 4));
            let (ci, co) = (rng.range(1, 3), rng.range(1, 3));
            let pts = vec![rng.tensor(&[b, h, w, ci], -1.0, 1.0), rng.tensor(&[3, 3, ci, co], -1.0, 1.0)];
            let r = rng.tensor(&[b, h, w, co], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].conv2d(&v[1])?, &r), &pts, cfg)
        }
        "max_pool2" => {
            let (b, h, w, c) = (rng.range(1, 2), 2 * rng.range(1, 2), 2 * rng.range(1, 2), rng.range(1, 3));
            let n = b * h * w * c;
            // distinct values spaced well beyond the difference step
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.below(i + 1));
            }
            let spacing = 4.0 * gap;
            let pts = vec![Tensor::from_fn(&[b, h, w, c], |i| order[i] as f64 * spacing - 0.5)];
            let r = rng.tensor(&[b, h / 2, w / 2, c], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].max_pool2()?, &r), &pts, cfg)
        }
        "global_avg_pool" => {
            let (b, h, w, c) = (rng.range(1, 3), rng.range(1, 3), rng.range(1, 3), rng.range(1, 3));
            let pts = vec![rng.tensor(&[b, h, w, c], -1.0, 1.0)];
            let r = rng.tensor(&[b, c], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].global_avg_pool()?, &r), &pts, cfg)
        }
        "batch_norm" | "batch_norm_eval" => {
            // at least 8 values per channel: tiny batches make the normalization so
            // curved that a 1e-3 central difference is no longer an accurate oracle
            let (b, h, w, c) = (rng.range(2, 3), 2, 2, rng.range(1, 3));
            let pts = vec![
                rng.tensor(&[b, h, w, c], -1.0, 1.0),
                rng.tensor(&[c], 0.5, 1.5),
                rng.tensor(&[c], -0.5, 0.5),
            ];
            let r = rng.tensor(&[b, h, w, c], -1.0, 1.0);
            let rm: Vec<f64> = (0..c).map(|_| rng.uniform(-0.5, 0.5)).collect();
            let rv: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 1.5)).collect();
            let train = op == "batch_norm";
            grad_check_many(
                move |_t, v| {
                    let y = if train {
                        v[0].batch_norm(&v[1], &v[2], 1e-5)?.0
                    } else {
                        v[0].batch_norm_eval(&v[1], &v[2], &rm, &rv, 1e-5)?
                    };
                    project(y, &r)
                },
                &pts,
                cfg,
            )
        }
        "mul_channel_broadcast" => {
            let (b, h, w, c) = (rng.range(1, 2), rng.range(1, 3), rng.range(1, 3), rng.range(1, 3));
            let pts = vec![rng.tensor(&[b, h * w], 0.0, 1.0), rng.tensor(&[b, h, w, c], -1.0, 1.0)];
            let r = rng.tensor(&[b, h, w, c], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].mul_channel_broadcast(&v[1])?, &r), &pts, cfg)
        }
        "concat_cols" => {
            let (m, a, b) = (rng.range(1, 3), rng.range(1, 3), rng.range(1, 3));
            let pts = vec![rng.tensor(&[m, a], -1.0, 1.0), rng.tensor(&[m, b], -1.0, 1.0)];
            let r = rng.tensor(&[m, a + b], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].concat_cols(&v[1])?, &r), &pts, cfg)
        }
        "softmax_cross_entropy" => {
            let (rows, classes) = (rng.range(1, 4), rng.range(2, 6));
            let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
            let pts = vec![rng.tensor(&[rows, classes], -3.0, 3.0)];
            grad_check_many(move |_t, v| v[0].softmax_cross_entropy(&labels), &pts, cfg)
        }
        "sq_dist" => {
            let (q, n, d) = (rng.range(1, 4), rng.range(1, 4), rng.range(1, 4));
            let pts = vec![rng.tensor(&[q, d], -1.0, 1.0), rng.tensor(&[n, d], -1.0, 1.0)];
            let r = rng.tensor(&[q, n], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].sq_dist(&v[1])?, &r), &pts, cfg)
        }
        "slice_rows" | "gather_rows" => {
            let (rows, cols) = (rng.range(2, 5), rng.range(1, 3));
            let pts = vec![rng.tensor(&[rows, cols], -1.0, 1.0)];
            let start = rng.below(rows);
            let end = rng.range(start + 1, rows);
            let idx: Vec<usize> = (0..rng.range(1, 6)).map(|_| rng.below(rows)).collect();
            let out_rows = if op == "slice_rows" { end - start } else { idx.len() };
            let r = rng.tensor(&[out_rows, cols], -1.0, 1.0);
            let slice = op == "slice_rows";
            grad_check_many(
                move |_t, v| {
                    let y = if slice {
                        v[0].slice_rows(start, end)?
                    } else {
                        v[0].gather_rows(&idx)?
                    };
                    project(y, &r)
                },
                &pts,
                cfg,
            )
        }
        "gaussian_log_prob" => {
            let (rows, dim) = (rng.range(1, 3), rng.range(1, 5));
            let pts = vec![rng.tensor(&[rows, dim], 0.0, 1.0)];
            let sample = rng.tensor(&[rows, dim], -0.2, 1.2);
            let sigma = rng.uniform(0.1, 1.0);
            let r = rng.tensor(&[rows], -1.0, 1.0);
            grad_check_many(move |_t, v| project(v[0].gaussian_log_prob(&sample, sigma)?, &r), &pts, cfg)
        }
        other => panic!("unknown op {other}"),
    }
}

#[derive(Debug, Clone)]
pub struct OpSummary {
    pub op: &'static str,
    pub instances: usize,
    pub worst_rel_error: f64,
    pub failures: usize,
    pub first_error: Option<String>,
}

impl OpSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.first_error.is_none()
    }
}

/// `instances` random checks for every op in [`OPS`].
pub fn run_suite(instances: usize, seed: u64, cfg: &GradCheckConfig) -> Vec<OpSummary> {
    OPS.iter()
        .enumerate()
        .map(|(k, &op)| {
            let mut rng = SplitMix::new(seed ^ ((k as u64 + 1) << 32));
            let mut summary = OpSummary {
                op,
                instances,
                worst_rel_error: 0.0,
                failures: 0,
                first_error: None,
            };
            for _ in 0..instances {
                match check_op(op, &mut rng, cfg) {
                    Ok(report) => {
                        summary.worst_rel_error = summary.worst_rel_error.max(report.max_rel_error);
                        if !report.passed() {
                            summary.failures += 1;
                        }
                    }
                    Err(e) => {
                        summary.failures += 1;
                        summary.first_error.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            summary
        })
        .collect()
}
