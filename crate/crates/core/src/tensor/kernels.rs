//! Raw forward/adjoint loops over channels-first slices.

/// Same-padded cross-correlation with an odd `k x k` kernel.
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.k / 2)) as isize
    }

    /// Row (or column) range `[lo, hi)` of output positions whose tap at
    /// `offset` lands inside an axis of length `n`.
    fn valid(offset: isize, n: usize) -> (usize, usize) {
        let lo = (-offset).max(0) as usize;
        let hi = (n as isize - offset).clamp(0, n as isize) as usize;
        (lo.min(hi), hi)
    }

    /// Invokes `f(co, ci, tap, dy, dx, y0..y1, x0..x1)` for every tap.
    fn for_each_tap(
        &self,
        mut f: impl FnMut(usize, usize, usize, isize, isize, (usize, usize), (usize, usize)),
    ) {
        let pad = self.pad();
        let d = self.dilation as isize;
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for ky in 0..self.k {
                    let dy = ky as isize * d - pad;
                    let rows = Self::valid(dy, self.h);
                    for kx in 0..self.k {
                        let dx = kx as isize * d - pad;
                        let cols = Self::valid(dx, self.w);
                        let tap = ((co * self.c_in + ci) * self.k + ky) * self.k + kx;
                        f(co, ci, tap, dy, dx, rows, cols);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut out = vec![0.0; g.c_out * plane];
    for (co, b) in bias.iter().enumerate() {
        out[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = *b);
    }
    g.for_each_tap(|co, ci, tap, dy, dx, (y0, y1), (x0, x1)| {
        let wv = weight[tap];
        if wv == 0.0 || x0 >= x1 {
            return;
        }
        for y in y0..y1 {
            let src_row = ci * plane + (y as isize + dy) as usize * g.w;
            let src = &input[src_row + (x0 as isize + dx) as usize..][..x1 - x0];
            let dst = &mut out[co * plane + y * g.w + x0..][..x1 - x0];
            for (o, i) in dst.iter_mut().zip(src) {
                *o += wv * i;
            }
        }
    });
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.h * g.w;
    let mut d_in = vec![0.0; input.len()];
    let mut d_w = vec![0.0; weight.len()];
    let d_b = (0..g.c_out)
        .map(|co| upstream[co * plane..(co + 1) * plane].iter().sum())
        .collect();
    g.for_each_tap(|co, ci, tap, dy, dx, (y0, y1), (x0, x1)| {
        if x0 >= x1 {
            return;
        }
        let wv = weight[tap];
        let mut acc = 0.0;
        for y in y0..y1 {
            let src_row = ci * plane + (y as isize + dy) as usize * g.w;
            let off = src_row + (x0 as isize + dx) as usize;
            let up = &upstream[co * plane + y * g.w + x0..][..x1 - x0];
            let src = &input[off..][..x1 - x0];
            for (u, i) in up.iter().zip(src) {
                acc += u * i;
            }
            if wv != 0.0 {
                for (di, u) in d_in[off..][..x1 - x0].iter_mut().zip(up) {
                    *di += wv * u;
                }
            }
        }
        d_w[tap] += acc;
    });
    (d_in, d_w, d_b)
}

/// Half-open window bounds `[floor(i*n/m), floor((i+1)*n/m))`.
pub(crate) fn adaptive_windows(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).map(|i| (i * n / m, (i + 1) * n / m)).collect()
}

/// Stride-2 windows of width 2, the last one possibly 1 wide.
pub(crate) fn pair_windows(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(2)).map(|i| (2 * i, (2 * i + 2).min(n))).collect()
}

/// Max over each (row window, column window) cell per channel. Returns the
/// pooled values and the flat input index that won each cell; ties go to the
/// first element in row-major order.
pub(crate) fn window_max(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) -> (Vec<f64>, Vec<usize>) {
    let n_out = c * rows.len() * cols.len();
    let mut out = Vec::with_capacity(n_out);
    let mut arg = Vec::with_capacity(n_out);
    for ch in 0..c {
        for &(r0, r1) in rows {
            for &(c0, c1) in cols {
                let mut best = ch * h * w + r0 * w + c0;
                for y in r0..r1 {
                    for x in c0..c1 {
                        let idx = ch * h * w + y * w + x;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_windows_cover_axis_without_overlap() {
        for n in 1..20 {
            for m in 1..=n {
                let ws = adaptive_windows(n, m);
                assert_eq!(ws.first().unwrap().0, 0);
                assert_eq!(ws.last().unwrap().1, n);
                for pair in ws.windows(2) {
                    assert_eq!(pair[0].1, pair[1].0);
                }
                assert!(ws.iter().all(|(a, b)| b > a));
            }
        }
    }

    #[test]
    fn pair_windows_odd_extent() {
        assert_eq!(pair_windows(5), vec![(0, 2), (2, 4), (4, 5)]);
        assert_eq!(pair_windows(4), vec![(0, 2), (2, 4)]);
    }

    #[test]
    fn logistic_is_stable_at_extremes() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0);
        assert_eq!(logistic(800.0), 1.0);
    }
}
