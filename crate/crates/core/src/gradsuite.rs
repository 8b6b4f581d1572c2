//! Finite-difference sweep over every differentiable operation and loss.
//!
//! Each operation runs on several random instances. Non-scalar outputs are
//! projected to a scalar with a random weighting so every output element
//! contributes. Inputs are drawn away from kinks (ReLU/PReLU at 0, max-pool
//! ties, the BCE clamp) so central differences stay on one smooth piece.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::groundtruth::{ConfidenceMask, DensityMap};
use crate::tensor::{grad_check, Graph, Tensor, Var};
use crate::training::{loss_cross_entropy, loss_euclidean, loss_weighted_bce, loss_whole, LossTerms, LossWeights};

/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Minimum random instances per operation.
pub const MIN_INSTANCES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct OpResult {
    pub name: &'static str,
    pub instances: usize,
    /// Worst relative error over all instances and inputs.
    pub worst: f64,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.worst < GRAD_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub ops: Vec<OpResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpResult::passed)
    }

    pub fn worst(&self) -> f64 {
        self.ops.iter().map(|o| o.worst).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.ops {
            let verdict = if o.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<20} n={} max_rel_error={:.3e} {verdict}", o.name, o.instances, o.worst)?;
        }
        write!(
            f,
            "gradcheck {} max_rel_error={:.3e} tolerance={GRAD_TOLERANCE:e}",
            if self.passed() { "passed" } else { "FAILED" },
            self.worst()
        )
    }
}

/// Scalar-valued closure over the graph and one handle per input.
type Body<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Checks `body` with respect to every input in turn; the other inputs are
/// recorded as constants.
fn check_all(inputs: &[Tensor], body: &Body<'_>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let err = grad_check(
            |g, leaf| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { leaf } else { g.constant(t.detached()) })
                    .collect();
                body(g, &vars)
            },
            &inputs[i],
            GRAD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `sum(y * r)` for a fixed random weighting `r`.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.detached());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero by `gap` with random sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, gap, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// A shuffled ladder of distinct values, so no pooling window has a
/// near-tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("valid shape")
}

fn extent(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Runs the sweep with `instances` random cases per operation (at least
/// [`MIN_INSTANCES`]).
pub fn run(seed: u64, instances: usize) -> Result<SuiteReport> {
    let n = instances.max(MIN_INSTANCES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    let mut record = |name: &'static str, rng: &mut ChaCha8Rng, case: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>| {
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            worst = worst.max(case(rng)?);
        }
        ops.push(OpResult { name, instances: n, worst });
        Ok::<(), crate::Error>(())
    };

    record("conv2d", &mut rng, &mut |rng| {
        let (ci, co) = (extent(rng, 1, 3), extent(rng, 1, 3));
        let (h, w) = (extent(rng, 3, 9), extent(rng, 3, 9));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let dilation = extent(rng, 1, 3);
        let inputs = [
            uniform(rng, &[ci, h, w], -1.0, 1.0),
            uniform(rng, &[co, ci, k, k], -1.0, 1.0),
            uniform(rng, &[co], -1.0, 1.0),
        ];
        let r = uniform(rng, &[co, h, w], -1.0, 1.0);
        check_all(&inputs, &|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], dilation)?;
            project(g, y, &r)
        })
    })?;

    record("maxpool2", &mut rng, &mut |rng| {
        let (c, h, w) = (extent(rng, 1, 3), extent(rng, 2, 9), extent(rng, 2, 9));
        let x = distinct(rng, &[c, h, w]);
        let r = uniform(rng, &[c, h.div_ceil(2), w.div_ceil(2)], -1.0, 1.0);
        check_all(&[x], &|g, v| {
            let y = g.maxpool2(v[0])?;
            project(g, y, &r)
        })
    })?;

    record("adaptive_max_pool", &mut rng, &mut |rng| {
        let (c, h, w) = (extent(rng, 1, 3), extent(rng, 4, 11), extent(rng, 4, 11));
        let (oh, ow) = (extent(rng, 1, h.min(4)), extent(rng, 1, w.min(4)));
        let x = distinct(rng, &[c, h, w]);
        let r = uniform(rng, &[c, oh, ow], -1.0, 1.0);
        check_all(&[x], &|g, v| {
            let y = g.adaptive_max_pool(v[0], oh, ow)?;
            project(g, y, &r)
        })
    })?;

    record("avg_pool_all", &mut rng, &mut |rng| {
        let (c, h, w) = (extent(rng, 1, 4), extent(rng, 1, 7), extent(rng, 1, 7));
        let x = uniform(rng, &[c, h, w], -1.0, 1.0);
        let r = uniform(rng, &[c], -1.0, 1.0);
        check_all(&[x], &|g, v| {
            let y = g.avg_pool_all(v[0])?;
            project(g, y, &r)
        })
    })?;

    record("relu", &mut rng, &mut |rng| {
        let shape = [extent(rng, 1, 3), extent(rng, 1, 6), extent(rng, 1, 6)];
        let x = off_zero(rng, &shape, 0.05);
        let r = uniform(rng, &shape, -1.0, 1.0);
        check_all(&[x], &|g, v| {
            let y = g.relu(v[0]);
            project(g, y, &r)
        })
    })?;

    record("prelu", &mut rng, &mut |rng| {
        let shape = [extent(rng, 2, 8)];
        let x = off_zero(rng, &shape, 0.05);
        let slope = uniform(rng, &[1], 0.05, 0.5);
        let r = uniform(rng, &shape, -1.0, 1.0);
        check_all(&[x, slope], &|g, v| {
            let y = g.prelu(v[0], v[1])?;
            project(g, y, &r)
        })
    })?;

    record("sigmoid", &mut rng, &mut |rng| {
        let shape = [1, extent(rng, 1, 6), extent(rng, 1, 6)];
        let x = uniform(rng, &shape, -4.0, 4.0);
        let r = uniform(rng, &shape, -1.0, 1.0);
        check_all(&[x], &|g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, &r)
        })
    })?;

    record("linear", &mut rng, &mut |rng| {
        let (k, c) = (extent(rng, 1, 5), extent(rng, 1, 6));
        let inputs = [
            uniform(rng, &[c], -1.0, 1.0),
            uniform(rng, &[k, c], -1.0, 1.0),
            uniform(rng, &[k], -1.0, 1.0),
        ];
        let r = uniform(rng, &[k], -1.0, 1.0);
        check_all(&inputs, &|g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, &r)
        })
    })?;

    record("concat_channels", &mut rng, &mut |rng| {
        let (ca, cb, h, w) = (extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 5), extent(rng, 1, 5));
        let inputs = [uniform(rng, &[ca, h, w], -1.0, 1.0), uniform(rng, &[cb, h, w], -1.0, 1.0)];
        let r = uniform(rng, &[ca + cb, h, w], -1.0, 1.0);
        check_all(&inputs, &|g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            project(g, y, &r)
        })
    })?;

    record("mul", &mut rng, &mut |rng| {
        let (c, h, w) = (extent(rng, 1, 3), extent(rng, 1, 5), extent(rng, 1, 5));
        let broadcast = rng.random_bool(0.5);
        let inputs = [
            uniform(rng, &[c, h, w], -1.0, 1.0),
            uniform(rng, &[if broadcast { 1 } else { c }, h, w], -1.0, 1.0),
        ];
        let r = uniform(rng, &[c, h, w], -1.0, 1.0);
        check_all(&inputs, &|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, &r)
        })
    })?;

    record("select_row", &mut rng, &mut |rng| {
        let (k, c) = (extent(rng, 1, 5), extent(rng, 1, 6));
        let row = rng.random_range(0..k);
        let m = uniform(rng, &[k, c], -1.0, 1.0);
        let r = uniform(rng, &[c], -1.0, 1.0);
        check_all(&[m], &|g, v| {
            let y = g.select_row(v[0], row)?;
            project(g, y, &r)
        })
    })?;

    record("scale_channels", &mut rng, &mut |rng| {
        let (c, h, w) = (extent(rng, 1, 4), extent(rng, 1, 5), extent(rng, 1, 5));
        let inputs = [uniform(rng, &[c, h, w], -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)];
        let r = uniform(rng, &[c, h, w], -1.0, 1.0);
        check_all(&inputs, &|g, v| {
            let y = g.scale_channels(v[0], v[1])?;
            project(g, y, &r)
        })
    })?;

    record("sum", &mut rng, &mut |rng| {
        let shape = [extent(rng, 1, 3), extent(rng, 1, 5), extent(rng, 1, 5)];
        let x = uniform(rng, &shape, -1.0, 1.0);
        check_all(&[x], &|g, v| Ok(g.sum(v[0])))
    })?;

    record("weighted_sum", &mut rng, &mut |rng| {
        let inputs: Vec<Tensor> = (0..extent(rng, 1, 4)).map(|_| uniform(rng, &[1], -2.0, 2.0)).collect();
        let coefs: Vec<f64> = inputs.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
        check_all(&inputs, &|g, v| {
            let terms: Vec<(Var, f64)> = v.iter().copied().zip(coefs.iter().copied()).collect();
            g.weighted_sum(&terms)
        })
    })?;

    record("loss_cross_entropy", &mut rng, &mut |rng| {
        let k = extent(rng, 2, 6);
        let target = rng.random_range(0..k);
        let logits = uniform(rng, &[k], -3.0, 3.0);
        check_all(&[logits], &|g, v| loss_cross_entropy(g, v[0], target))
    })?;

    record("loss_weighted_bce", &mut rng, &mut |rng| {
        let (h, w) = (extent(rng, 2, 6), extent(rng, 2, 6));
        let mask = random_mask(rng, h, w);
        let conf = uniform(rng, &[1, h, w], 0.05, 0.95);
        check_all(&[conf], &|g, v| loss_weighted_bce(g, v[0], &mask))
    })?;

    record("loss_euclidean", &mut rng, &mut |rng| {
        let (h, w) = (extent(rng, 2, 6), extent(rng, 2, 6));
        let target = DensityMap {
            values: uniform(rng, &[1, h, w], 0.0, 0.2),
            resolution_divisor: 4,
        };
        let pred = uniform(rng, &[1, h, w], -0.5, 0.5);
        check_all(&[pred], &|g, v| loss_euclidean(g, v[0], &target))
    })?;

    record("loss_whole", &mut rng, &mut |rng| {
        let (h, w, k) = (extent(rng, 2, 5), extent(rng, 2, 5), extent(rng, 2, 5));
        let target_class = rng.random_range(0..k);
        let mask = random_mask(rng, h, w);
        let density = DensityMap {
            values: uniform(rng, &[1, h, w], 0.0, 0.2),
            resolution_divisor: 4,
        };
        let inputs = [
            uniform(rng, &[1, h, w], -0.5, 0.5),
            uniform(rng, &[1, h, w], -0.5, 0.5),
            uniform(rng, &[1, h, w], 0.05, 0.95),
            uniform(rng, &[k], -3.0, 3.0),
        ];
        check_all(&inputs, &|g, v| {
            let terms = LossTerms {
                l_fus: loss_euclidean(g, v[0], &density)?,
                l_den: loss_euclidean(g, v[1], &density)?,
                l_con: Some(loss_weighted_bce(g, v[2], &mask)?),
                l_mul: loss_cross_entropy(g, v[3], target_class)?,
            };
            Ok(loss_whole(g, &terms, LossWeights::default())?.0)
        })
    })?;

    Ok(SuiteReport { ops })
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ConfidenceMask {
    let p = rng.random_range(0.0..1.0);
    let values = (0..h * w).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
    ConfidenceMask {
        values: Tensor::new(&[1, h, w], values).expect("valid shape"),
        resolution_divisor: 4,
    }
}
