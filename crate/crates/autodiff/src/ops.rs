//! Forward and backward kernels on raw slices. The tape calls into these;
//! they know nothing about node bookkeeping.

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// How a loss collapses its per-element terms into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reduction {
    /// Divide by the number of terms.
    Mean,
    /// Plain sum.
    Sum,
    /// Divide by the leading (batch) dimension only: a per-sample sum
    /// averaged over the batch.
    BatchMean,
}

impl Reduction {
    pub(crate) fn divisor(self, terms: usize, batch: usize) -> f64 {
        match self {
            Reduction::Mean => terms as f64,
            Reduction::Sum => 1.0,
            Reduction::BatchMean => batch as f64,
        }
    }
}

pub(crate) struct LinearDims {
    pub batch: usize,
    pub inputs: usize,
    pub outputs: usize,
}

pub(crate) fn linear_forward(d: &LinearDims, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(d.batch * d.outputs);
    for r in 0..d.batch {
        y.extend_from_slice(b);
        let out = &mut y[r * d.outputs..];
        for (k, &xv) in x[r * d.inputs..(r + 1) * d.inputs].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[k * d.outputs..(k + 1) * d.outputs];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    y
}

pub(crate) fn linear_backward_input(d: &LinearDims, g: &[f64], w: &[f64], gx: &mut [f64]) {
    for r in 0..d.batch {
        let grow = &g[r * d.outputs..(r + 1) * d.outputs];
        for k in 0..d.inputs {
            let wrow = &w[k * d.outputs..(k + 1) * d.outputs];
            gx[r * d.inputs + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub(crate) fn linear_backward_weight(d: &LinearDims, g: &[f64], x: &[f64], gw: &mut [f64]) {
    for r in 0..d.batch {
        let grow = &g[r * d.outputs..(r + 1) * d.outputs];
        for k in 0..d.inputs {
            let xv = x[r * d.inputs + k];
            if xv == 0.0 {
                continue;
            }
            let gwrow = &mut gw[k * d.outputs..(k + 1) * d.outputs];
            for (o, &gv) in gwrow.iter_mut().zip(grow) {
                *o += xv * gv;
            }
        }
    }
}

pub(crate) fn linear_backward_bias(d: &LinearDims, g: &[f64], gb: &mut [f64]) {
    for r in 0..d.batch {
        for (o, &gv) in gb.iter_mut().zip(&g[r * d.outputs..(r + 1) * d.outputs]) {
            *o += gv;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    /// Visits every (output index, input index, kernel index) triple that
    /// contributes to the cross-correlation.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let d = self;
        for n in 0..d.batch {
            for o in 0..d.out_ch {
                let out_base = (n * d.out_ch + o) * d.out_h * d.out_w;
                for c in 0..d.in_ch {
                    let in_base = (n * d.in_ch + c) * d.in_h * d.in_w;
                    for ky in 0..d.k_h {
                        for kx in 0..d.k_w {
                            let k_idx = ((o * d.in_ch + c) * d.k_h + ky) * d.k_w + kx;
                            for oy in 0..d.out_h {
                                let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                                if iy < 0 || iy >= d.in_h as isize {
                                    continue;
                                }
                                let row_in = in_base + iy as usize * d.in_w;
                                let row_out = out_base + oy * d.out_w;
                                for ox in 0..d.out_w {
                                    let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                    if ix < 0 || ix >= d.in_w as isize {
                                        continue;
                                    }
                                    f(row_out + ox, row_in + ix as usize, k_idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(d: &ConvDims, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let plane = d.out_h * d.out_w;
    let mut y = vec![0.0; d.batch * d.out_ch * plane];
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        chunk.fill(b[i % d.out_ch]);
    }
    d.for_each_tap(|yo, xi, ki| y[yo] += x[xi] * k[ki]);
    y
}

pub(crate) fn conv_backward(
    d: &ConvDims,
    g: &[f64],
    x: &[f64],
    k: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if gx.is_some() || gk.is_some() {
        d.for_each_tap(|yo, xi, ki| {
            let gv = g[yo];
            if let Some(gx) = gx.as_deref_mut() {
                gx[xi] += gv * k[ki];
            }
            if let Some(gk) = gk.as_deref_mut() {
                gk[ki] += gv * x[xi];
            }
        });
    }
    if let Some(gb) = gb {
        let plane = d.out_h * d.out_w;
        for (i, chunk) in g.chunks(plane).enumerate() {
            gb[i % d.out_ch] += chunk.iter().sum::<f64>();
        }
    }
}

/// Softmax over the middle extent of an (outer, dim, inner) view.
pub(crate) fn softmax(x: &[f64], outer: usize, dim: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |d: usize| (o * dim + d) * inner + i;
            let max = (0..dim).map(|d| x[idx(d)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for d in 0..dim {
                let e = (x[idx(d)] - max).exp();
                y[idx(d)] = e;
                total += e;
            }
            for d in 0..dim {
                y[idx(d)] /= total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[f64],
    g: &[f64],
    gx: &mut [f64],
    outer: usize,
    dim: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |d: usize| (o * dim + d) * inner + i;
            let dot: f64 = (0..dim).map(|d| g[idx(d)] * y[idx(d)]).sum();
            for d in 0..dim {
                gx[idx(d)] += y[idx(d)] * (g[idx(d)] - dot);
            }
        }
    }
}
