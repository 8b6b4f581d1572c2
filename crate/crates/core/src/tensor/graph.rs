use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{arg_err, shape_err, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    /// Windowed max; `argmax[j]` is the flat input index feeding output `j`.
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgAll { x: Var },
    Relu { x: Var },
    Prelu { x: Var, slope: Var },
    Sigmoid { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat { a: Var, b: Var },
    Mul { a: Var, b: Var },
    SelectRow { m: Var, row: usize },
    ScaleChannels { x: Var, s: Var },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    CrossEntropy { logits: Var, target: usize },
    WeightedBce {
        x: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    HalfSquaredError { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
///
/// Nodes are only ever appended, so construction order is a topological
/// order and the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Confidence values are clamped into this range before the log terms.
pub const BCE_CLAMP: f64 = 1e-7;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are accumulated into it on backward iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a constant leaf (no gradient is kept).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.detached(), Op::Leaf)
    }

    /// Records a trainable leaf with a zeroed gradient accumulator.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        let t = if tensor.requires_grad() {
            tensor
        } else {
            tensor.with_grad()
        };
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn chw(&self, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [c, h, w] => Ok((*c, *h, *w)),
            s => shape_err(format!("expected [C,H,W], got {s:?}")),
        }
    }

    /// Same-padded 2-D cross-correlation with an odd square kernel. The pad
    /// is `dilation * (k / 2)` on every side, so spatial extent is kept.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return arg_err("dilation must be positive");
        }
        let (c_in, h, wd) = self.chw(x)?;
        let (c_out, wc_in, k) = match self.shape(w) {
            [co, ci, kh, kw] if kh == kw && kh % 2 == 1 => (*co, *ci, *kh),
            s => return shape_err(format!("conv weight must be [Co,Ci,k,k] with odd k, got {s:?}")),
        };
        if wc_in != c_in {
            return shape_err(format!("conv weight expects {wc_in} input channels, input has {c_in}"));
        }
        if self.shape(b) != [c_out] {
            return shape_err(format!("conv bias must be [{c_out}], got {:?}", self.shape(b)));
        }
        let geom = ConvGeom { c_in, c_out, h, w: wd, k, dilation };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), self.data(b));
        let t = Tensor::new(&[c_out, h, wd], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, dilation }))
    }

    /// 2x2 stride-2 max pooling; odd extents keep a 1-wide trailing window.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        let rows = kernels::pair_windows(h);
        let cols = kernels::pair_windows(w);
        let (out, argmax) = kernels::window_max(self.data(x), c, h, w, &rows, &cols);
        let t = Tensor::new(&[c, rows.len(), cols.len()], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    pub fn adaptive_max_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return arg_err(format!("adaptive pool to {out_h}x{out_w} from {h}x{w}"));
        }
        let rows = kernels::adaptive_windows(h, out_h);
        let cols = kernels::adaptive_windows(w, out_w);
        let (out, argmax) = kernels::window_max(self.data(x), c, h, w, &rows, &cols);
        let t = Tensor::new(&[c, out_h, out_w], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// Per-channel mean over all spatial positions: `[C,h,w] -> [C]`.
    pub fn avg_pool_all(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        let plane = h * w;
        let out = self.data(x).chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let t = Tensor::new(&[c], out)?;
        Ok(self.push(t, Op::AvgAll { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu { x })
    }

    /// `x` where positive, `slope * x` otherwise; `slope` is a single scalar.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.shape(slope) != [1] {
            return shape_err(format!("prelu slope must be [1], got {:?}", self.shape(slope)));
        }
        let a = self.data(slope)[0];
        let t = self.value(x).map(|v| if v > 0.0 { v } else { a * v });
        Ok(self.push(t, Op::Prelu { x, slope }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::logistic);
        self.push(t, Op::Sigmoid { x })
    }

    /// `weight . input + bias` for `input: [C]`, `weight: [K,C]`, `bias: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let c = match self.shape(x) {
            [c] => *c,
            s => return shape_err(format!("linear input must be [C], got {s:?}")),
        };
        let k = match self.shape(w) {
            [k, wc] if *wc == c => *k,
            s => return shape_err(format!("linear weight must be [K,{c}], got {s:?}")),
        };
        if self.shape(b) != [k] {
            return shape_err(format!("linear bias must be [{k}], got {:?}", self.shape(b)));
        }
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let out = (0..k)
            .map(|r| bd[r] + wd[r * c..(r + 1) * c].iter().zip(xd).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let t = Tensor::new(&[k], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.chw(a)?;
        let (cb, hb, wb) = self.chw(b)?;
        if (ha, wa) != (hb, wb) {
            return shape_err(format!("concat spatial mismatch {ha}x{wa} vs {hb}x{wb}"));
        }
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let t = Tensor::new(&[ca + cb, ha, wa], out)?;
        Ok(self.push(t, Op::Concat { a, b }))
    }

    /// Hadamard product. `b` may also be a single-channel `[1,H,W]` map,
    /// which is then applied to every channel of a `[C,H,W]` operand `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out: Vec<f64> = if sa == sb {
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect()
        } else if sa.len() == 3 && sb.len() == 3 && sb[0] == 1 && sa[1..] == sb[1..] {
            let plane = sb[1] * sb[2];
            let bd = self.data(b);
            self.data(a).iter().enumerate().map(|(i, x)| x * bd[i % plane]).collect()
        } else {
            return shape_err(format!("cannot multiply {sa:?} by {sb:?}"));
        };
        let t = Tensor::new(&sa, out)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// Row `row` of a `[K,C]` matrix as a `[C]` vector.
    pub fn select_row(&mut self, m: Var, row: usize) -> Result<Var> {
        let (k, c) = match self.shape(m) {
            [k, c] => (*k, *c),
            s => return shape_err(format!("select_row needs [K,C], got {s:?}")),
        };
        if row >= k {
            return arg_err(format!("row {row} out of range for {k} rows"));
        }
        let t = Tensor::new(&[c], self.data(m)[row * c..(row + 1) * c].to_vec())?;
        Ok(self.push(t, Op::SelectRow { m, row }))
    }

    /// Multiplies channel `c` of `x: [C,H,W]` by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        if self.shape(s) != [c] {
            return shape_err(format!("channel scales must be [{c}], got {:?}", self.shape(s)));
        }
        let plane = h * w;
        let sd = self.data(s);
        let out = self.data(x).iter().enumerate().map(|(i, v)| v * sd[i / plane]).collect();
        let t = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(t, Op::ScaleChannels { x, s }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x })
    }

    /// `sum_i coef_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return shape_err("weighted_sum terms must be scalars");
            }
            total += c * self.data(v)[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }))
    }

    /// Softmax cross-entropy `-ln softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.data(logits);
        if self.shape(logits).len() != 1 {
            return shape_err("cross_entropy logits must be [K]");
        }
        if target >= z.len() {
            return arg_err(format!("target class {target} out of range for {} classes", z.len()));
        }
        let loss = log_sum_exp(z) - z[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    /// Mean over pixels of `-w [y ln x + (1-y) ln(1-x)]`, with `x` clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn weighted_bce(&mut self, x: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(x).len();
        if target.len() != n || weights.len() != n {
            return shape_err(format!(
                "bce over {n} values with {} targets and {} weights",
                target.len(),
                weights.len()
            ));
        }
        let total: f64 = self
            .data(x)
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &y), &w)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let op = Op::WeightedBce {
            x,
            target: target.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / n as f64), op))
    }

    /// `0.5 * sum (pred - target)^2`.
    pub fn half_squared_error(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return shape_err(format!(
                "prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let loss = 0.5
            * self
                .data(pred)
                .iter()
                .zip(target.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>();
        let op = Op::HalfSquaredError {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every trainable
    /// leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(up) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, g: Vec<f64>| match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(up);
                }
                Op::Conv { x, w, b, dilation } => {
                    let (c_in, h, wd) = self.chw(*x)?;
                    let ws = self.shape(*w);
                    let geom = ConvGeom {
                        c_in,
                        c_out: ws[0],
                        h,
                        w: wd,
                        k: ws[2],
                        dilation: *dilation,
                    };
                    let (dx, dw, db) =
                        kernels::conv2d_backward(&geom, self.data(*x), self.data(*w), &up);
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (j, &src) in argmax.iter().enumerate() {
                        dx[src] += up[j];
                    }
                    send(*x, dx);
                }
                Op::AvgAll { x } => {
                    let n = self.value(*x).len();
                    let plane = n / up.len();
                    let dx = (0..n).map(|k| up[k / plane] / plane as f64).collect();
                    send(*x, dx);
                }
                Op::Relu { x } => {
                    let dx = self.data(*x).iter().zip(&up).map(|(&v, &u)| if v > 0.0 { u } else { 0.0 }).collect();
                    send(*x, dx);
                }
                Op::Prelu { x, slope } => {
                    let a = self.data(*slope)[0];
                    let xd = self.data(*x);
                    let dx = xd.iter().zip(&up).map(|(&v, &u)| if v > 0.0 { u } else { a * u }).collect();
                    let da = xd.iter().zip(&up).filter(|(&v, _)| v <= 0.0).map(|(v, u)| v * u).sum();
                    send(*x, dx);
                    send(*slope, vec![da]);
                }
                Op::Sigmoid { x } => {
                    let dx = node.value.data().iter().zip(&up).map(|(s, u)| u * s * (1.0 - s)).collect();
                    send(*x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xd = self.data(*x);
                    let wd = self.data(*w);
                    let c = xd.len();
                    let mut dx = vec![0.0; c];
                    let mut dw = vec![0.0; wd.len()];
                    for (r, &u) in up.iter().enumerate() {
                        for j in 0..c {
                            dx[j] += u * wd[r * c + j];
                            dw[r * c + j] = u * xd[j];
                        }
                    }
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, up);
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).len();
                    send(*a, up[..na].to_vec());
                    send(*b, up[na..].to_vec());
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    if ad.len() == bd.len() {
                        send(*a, up.iter().zip(bd).map(|(u, y)| u * y).collect());
                        send(*b, up.iter().zip(ad).map(|(u, x)| u * x).collect());
                    } else {
                        let plane = bd.len();
                        send(*a, up.iter().enumerate().map(|(i, u)| u * bd[i % plane]).collect());
                        let mut db = vec![0.0; plane];
                        for (i, (u, x)) in up.iter().zip(ad).enumerate() {
                            db[i % plane] += u * x;
                        }
                        send(*b, db);
                    }
                }
                Op::SelectRow { m, row } => {
                    let mut dm = vec![0.0; self.value(*m).len()];
                    let c = up.len();
                    dm[row * c..(row + 1) * c].copy_from_slice(&up);
                    send(*m, dm);
                }
                Op::ScaleChannels { x, s } => {
                    let (xd, sd) = (self.data(*x), self.data(*s));
                    let plane = xd.len() / sd.len();
                    let dx = up.iter().enumerate().map(|(i, u)| u * sd[i / plane]).collect();
                    let mut ds = vec![0.0; sd.len()];
                    for (i, (u, v)) in up.iter().zip(xd).enumerate() {
                        ds[i / plane] += u * v;
                    }
                    send(*x, dx);
                    send(*s, ds);
                }
                Op::Sum { x } => {
                    send(*x, vec![up[0]; self.value(*x).len()]);
                }
                Op::WeightedSum { terms } => {
                    for &(v, c) in terms {
                        send(v, vec![c * up[0]]);
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let z = self.data(*logits);
                    let lse = log_sum_exp(z);
                    let mut dz: Vec<f64> = z.iter().map(|v| (v - lse).exp() * up[0]).collect();
                    dz[*target] -= up[0];
                    send(*logits, dz);
                }
                Op::WeightedBce { x, target, weights } => {
                    let n = target.len() as f64;
                    let dx = self
                        .data(*x)
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((&p, &y), &w)| {
                            if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                                0.0
                            } else {
                                -w * (y / p - (1.0 - y) / (1.0 - p)) * up[0] / n
                            }
                        })
                        .collect();
                    send(*x, dx);
                }
                Op::HalfSquaredError { pred, target } => {
                    let dp = self.data(*pred).iter().zip(target).map(|(p, t)| (p - t) * up[0]).collect();
                    send(*pred, dp);
                }
            }
        }

        for (i, g) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if node.value.requires_grad() {
                    node.value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
