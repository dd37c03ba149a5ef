//! Raw loops behind the sequence primitives. Inputs are `(batch, length, channels)`
//! row-major buffers; padding is zero-valued on both sides.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SeqDims {
    pub batch: usize,
    pub length: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub size: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Window {
    /// Output length at stride 1, or `None` when the window never fits.
    pub fn output_length(&self, length: usize) -> Option<usize> {
        let span = self.dilation * (self.size - 1) + 1;
        (length + 2 * self.padding).checked_sub(span).map(|d| d + 1)
    }

    /// Input position read by tap `k` for output position `t`.
    #[inline]
    fn source(&self, t: usize, k: usize, length: usize) -> Option<usize> {
        let s = (t + k * self.dilation).checked_sub(self.padding)?;
        (s < length).then_some(s)
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `kernel` is `(size, in_channels, out_channels)`.
pub(crate) fn conv1d_forward(
    x: &[f64],
    dims: SeqDims,
    kernel: &[f64],
    bias: &[f64],
    out_channels: usize,
    win: Window,
    out_len: usize,
) -> Vec<f64> {
    let (l, cin, cout) = (dims.length, dims.channels, out_channels);
    let mut out = vec![0.0; dims.batch * out_len * cout];
    for b in 0..dims.batch {
        for t in 0..out_len {
            let row = &mut out[(b * out_len + t) * cout..][..cout];
            row.copy_from_slice(bias);
            for k in 0..win.size {
                let Some(s) = win.source(t, k, l) else {
                    continue;
                };
                let xin = &x[(b * l + s) * cin..][..cin];
                let wk = &kernel[k * cin * cout..][..cin * cout];
                for (i, &xv) in xin.iter().enumerate() {
                    axpy(xv, &wk[i * cout..][..cout], row);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    grad_out: &[f64],
    x: &[f64],
    dims: SeqDims,
    kernel: &[f64],
    out_channels: usize,
    win: Window,
    out_len: usize,
    mut grad_x: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
) {
    let (l, cin, cout) = (dims.length, dims.channels, out_channels);
    for b in 0..dims.batch {
        for t in 0..out_len {
            let g = &grad_out[(b * out_len + t) * cout..][..cout];
            for k in 0..win.size {
                let Some(s) = win.source(t, k, l) else {
                    continue;
                };
                let base = (b * l + s) * cin;
                let wk = &kernel[k * cin * cout..][..cin * cout];
                if let Some(gx) = grad_x.as_deref_mut() {
                    let gxs = &mut gx[base..][..cin];
                    for (i, gxi) in gxs.iter_mut().enumerate() {
                        *gxi += dot(&wk[i * cout..][..cout], g);
                    }
                }
                if let Some(gk) = grad_kernel.as_deref_mut() {
                    let gkk = &mut gk[k * cin * cout..][..cin * cout];
                    let xin = &x[base..][..cin];
                    for (i, &xv) in xin.iter().enumerate() {
                        axpy(xv, g, &mut gkk[i * cout..][..cout]);
                    }
                }
            }
        }
    }
}

pub(crate) fn avg_pool1d_forward(
    x: &[f64],
    dims: SeqDims,
    win: Window,
    out_len: usize,
) -> Vec<f64> {
    let (l, c) = (dims.length, dims.channels);
    let scale = 1.0 / win.size as f64;
    let mut out = vec![0.0; dims.batch * out_len * c];
    for b in 0..dims.batch {
        for t in 0..out_len {
            let row = &mut out[(b * out_len + t) * c..][..c];
            for k in 0..win.size {
                if let Some(s) = win.source(t, k, l) {
                    axpy(scale, &x[(b * l + s) * c..][..c], row);
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool1d_backward(
    grad_out: &[f64],
    dims: SeqDims,
    win: Window,
    out_len: usize,
    grad_x: &mut [f64],
) {
    let (l, c) = (dims.length, dims.channels);
    let scale = 1.0 / win.size as f64;
    for b in 0..dims.batch {
        for t in 0..out_len {
            let g = &grad_out[(b * out_len + t) * c..][..c];
            for k in 0..win.size {
                if let Some(s) = win.source(t, k, l) {
                    axpy(scale, g, &mut grad_x[(b * l + s) * c..][..c]);
                }
            }
        }
    }
}

/// Sentinel in the argmax buffer for "the maximum came from padding".
pub(crate) const PAD_ARGMAX: usize = usize::MAX;

/// Returns the pooled values and, per output element, the flat input index that won
/// (first maximal tap on ties, [`PAD_ARGMAX`] when a zero pad won).
pub(crate) fn max_pool1d_forward(
    x: &[f64],
    dims: SeqDims,
    win: Window,
    out_len: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (l, c) = (dims.length, dims.channels);
    let n = dims.batch * out_len * c;
    let mut out = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![PAD_ARGMAX; n];
    for b in 0..dims.batch {
        for t in 0..out_len {
            let o = (b * out_len + t) * c;
            for k in 0..win.size {
                match win.source(t, k, l) {
                    Some(s) => {
                        let base = (b * l + s) * c;
                        for ch in 0..c {
                            let v = x[base + ch];
                            // NaN never wins a comparison; make it win so it propagates.
                            if v > out[o + ch] || (v.is_nan() && !out[o + ch].is_nan()) {
                                out[o + ch] = v;
                                arg[o + ch] = base + ch;
                            }
                        }
                    }
                    None => {
                        for ch in 0..c {
                            if 0.0 > out[o + ch] {
                                out[o + ch] = 0.0;
                                arg[o + ch] = PAD_ARGMAX;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool1d_backward(grad_out: &[f64], argmax: &[usize], grad_x: &mut [f64]) {
    for (&g, &src) in grad_out.iter().zip(argmax) {
        if src != PAD_ARGMAX {
            grad_x[src] += g;
        }
    }
}
