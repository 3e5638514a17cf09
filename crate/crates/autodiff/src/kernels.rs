//! Raw forward/backward loops behind the graph ops. Flat row-major slices only.

use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self) -> usize {
        (self.len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Output positions `j` for which input index `j*stride + kk - padding` is in bounds.
    fn valid(&self, kk: usize, out_len: usize) -> (usize, usize) {
        let (s, p, l) = (self.stride, self.padding, self.len);
        let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
        // need j*s + kk < l + p
        let hi = if l + p > kk { (l + p - kk - 1) / s + 1 } else { 0 };
        (lo.min(out_len), hi.min(out_len))
    }
}

pub fn conv1d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Conv1dGeom) -> Vec<T> {
    let lo_len = g.out_len();
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let mut out = vec![T::zero(); g.c_out * lo_len];
    for o in 0..g.c_out {
        let grp = o / cout_g;
        let orow = &mut out[o * lo_len..(o + 1) * lo_len];
        if let Some(b) = bias {
            orow.iter_mut().for_each(|v| *v = b[o]);
        }
        for cl in 0..cin_g {
            let ci = grp * cin_g + cl;
            let xrow = &x[ci * g.len..(ci + 1) * g.len];
            let wrow = &w[(o * cin_g + cl) * g.kernel..(o * cin_g + cl + 1) * g.kernel];
            for (kk, &wv) in wrow.iter().enumerate() {
                let (j0, j1) = g.valid(kk, lo_len);
                if j0 >= j1 {
                    continue;
                }
                if g.stride == 1 {
                    let xs = &xrow[j0 + kk - g.padding..j1 + kk - g.padding];
                    for (o, &xv) in orow[j0..j1].iter_mut().zip(xs) {
                        *o = *o + wv * xv;
                    }
                } else {
                    for j in j0..j1 {
                        let pos = j * g.stride + kk - g.padding;
                        orow[j] = orow[j] + wv * xrow[pos];
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernel, grad_bias).
pub fn conv1d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Conv1dGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let lo_len = g.out_len();
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.c_out];
    for o in 0..g.c_out {
        let grp = o / cout_g;
        let grow = &gout[o * lo_len..(o + 1) * lo_len];
        gb[o] = grow.iter().fold(T::zero(), |a, &v| a + v);
        for cl in 0..cin_g {
            let ci = grp * cin_g + cl;
            let xrow = &x[ci * g.len..(ci + 1) * g.len];
            let widx = (o * cin_g + cl) * g.kernel;
            for kk in 0..g.kernel {
                let wv = w[widx + kk];
                let (j0, j1) = g.valid(kk, lo_len);
                if j0 >= j1 {
                    continue;
                }
                let mut acc = T::zero();
                if g.stride == 1 {
                    let (a, b) = (j0 + kk - g.padding, j1 + kk - g.padding);
                    let gs = &grow[j0..j1];
                    for (&gv, &xv) in gs.iter().zip(&xrow[a..b]) {
                        acc = acc + gv * xv;
                    }
                    for (o, &gv) in gx[ci * g.len + a..ci * g.len + b].iter_mut().zip(gs) {
                        *o = *o + gv * wv;
                    }
                } else {
                    for j in j0..j1 {
                        let pos = j * g.stride + kk - g.padding;
                        acc = acc + grow[j] * xrow[pos];
                        gx[ci * g.len + pos] = gx[ci * g.len + pos] + grow[j] * wv;
                    }
                }
                gw[widx + kk] = gw[widx + kk] + acc;
            }
        }
    }
    (gx, gw, gb)
}

/// Splits `shape` around `axis` into (outer, n, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Element>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let m = (0..n).map(|i| x[idx(i)]).fold(T::neg_infinity(), T::max);
            let z = (0..n).fold(T::zero(), |a, i| a + (x[idx(i)] - m).exp());
            let lz = z.ln();
            for i in 0..n {
                let v = x[idx(i)] - m;
                out[idx(i)] = if log { v - lz } else { v.exp() / z };
            }
        }
    }
    out
}

/// Backward of softmax given its output `y`.
pub fn softmax_backward<T: Element>(y: &[T], gy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let dot = (0..n).fold(T::zero(), |a, i| a + gy[idx(i)] * y[idx(i)]);
            for i in 0..n {
                gx[idx(i)] = y[idx(i)] * (gy[idx(i)] - dot);
            }
        }
    }
    gx
}

/// Backward of log-softmax given its output `ly`.
pub fn log_softmax_backward<T: Element>(ly: &[T], gy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); ly.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let total = (0..n).fold(T::zero(), |a, i| a + gy[idx(i)]);
            for i in 0..n {
                gx[idx(i)] = gy[idx(i)] - ly[idx(i)].exp() * total;
            }
        }
    }
    gx
}

/// Per-group statistics cached by the forward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub inv_std: Vec<T>,
    pub floored: Vec<bool>,
}

/// Normalises each group of `channels/groups` rows to zero mean and unit
/// variance, using `max(var, eps)` as the variance floor.
pub fn group_norm<T: Element>(
    x: &[T],
    channels: usize,
    len: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, GroupStats<T>) {
    let per = channels / groups * len;
    let nf = T::from_usize(per).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    let mut floored = Vec::with_capacity(groups);
    for gi in 0..groups {
        let seg = &x[gi * per..(gi + 1) * per];
        let mean = seg.iter().fold(T::zero(), |a, &v| a + v) / nf;
        let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
        let is_floored = var < eps;
        let inv = T::one() / var.max(eps).sqrt();
        for (o, &v) in out[gi * per..(gi + 1) * per].iter_mut().zip(seg) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
        floored.push(is_floored);
    }
    (out, GroupStats { inv_std, floored })
}

pub fn group_norm_backward<T: Element>(
    xhat: &[T],
    gy: &[T],
    groups: usize,
    stats: &GroupStats<T>,
) -> Vec<T> {
    let per = xhat.len() / groups;
    let nf = T::from_usize(per).unwrap();
    let mut gx = vec![T::zero(); xhat.len()];
    for gi in 0..groups {
        let r = gi * per..(gi + 1) * per;
        let (xs, gs) = (&xhat[r.clone()], &gy[r.clone()]);
        let mean_g = gs.iter().fold(T::zero(), |a, &v| a + v) / nf;
        let mean_gx = if stats.floored[gi] {
            T::zero()
        } else {
            xs.iter().zip(gs).fold(T::zero(), |a, (&x, &g)| a + x * g) / nf
        };
        let inv = stats.inv_std[gi];
        for ((o, &x), &g) in gx[r].iter_mut().zip(xs).zip(gs) {
            *o = inv * (g - mean_g - x * mean_gx);
        }
    }
    gx
}

#[inline]
pub fn gelu<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (T::lit(-0.5) * x * x).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
