//! Dense and 2-D convolution kernels with hand-written backward passes.
//!
//! Tensors are flat `f64` slices. Convolution activations are laid out
//! channel-major (`c, row, col`); conv weights as `[out][in][k][k]`;
//! dense weights as `[out][in]`. Every layer stores its weights first and
//! its biases second.

use std::cell::RefCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) convolution with stride 1.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        in_height: usize,
        in_width: usize,
    },
}

impl LayerSpec {
    pub fn input_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                in_height,
                in_width,
                ..
            } => in_channels * in_height * in_width,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { out_channels, .. } => {
                let (h, w) = self.out_hw();
                out_channels * h * w
            }
        }
    }

    fn out_hw(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d {
                kernel,
                in_height,
                in_width,
                ..
            } => (in_height + 1 - kernel, in_width + 1 - kernel),
            LayerSpec::Dense { outputs, .. } => (1, outputs),
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
        }
    }

    /// `out = layer(params, x)`, no activation.
    pub fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(params.len(), self.param_len());
        debug_assert_eq!(x.len(), self.input_len());
        debug_assert_eq!(out.len(), self.output_len());
        let (w, b) = params.split_at(self.weight_len());
        match *self {
            LayerSpec::Dense { inputs, .. } => {
                for (o, y) in out.iter_mut().enumerate() {
                    *y = b[o] + dot(&w[o * inputs..(o + 1) * inputs], x);
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                in_height,
                in_width,
            } => {
                let k = self.fan_in();
                let pixels = (in_height + 1 - kernel) * (in_width + 1 - kernel);
                SCRATCH.with_borrow_mut(|sc| {
                    self.im2col(x, &mut sc.patches);
                    for o in 0..out_channels {
                        let wo = &w[o * k..(o + 1) * k];
                        let plane = &mut out[o * pixels..(o + 1) * pixels];
                        for (pix, y) in plane.iter_mut().enumerate() {
                            *y = b[o] + dot(wo, &sc.patches[pix * k..(pix + 1) * k]);
                        }
                    }
                });
                let _ = in_channels;
            }
        }
    }

    /// Backward pass for one layer given the upstream gradient `dout`.
    ///
    /// Parameter gradients go to `grad`; the input gradient is written to
    /// `dx` when requested.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        dout: &[f64],
        grad: ParamGrad<'_>,
        dx: Option<&mut [f64]>,
    ) {
        let (w, _) = params.split_at(self.weight_len());
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                match grad {
                    ParamGrad::Write(g) => {
                        let (gw, gb) = g.split_at_mut(self.weight_len());
                        for o in 0..outputs {
                            let row = &mut gw[o * inputs..(o + 1) * inputs];
                            for (r, xi) in row.iter_mut().zip(x) {
                                *r = dout[o] * xi;
                            }
                        }
                        gb.copy_from_slice(dout);
                    }
                    ParamGrad::SquaredNorm(acc) => {
                        // ||d x^T||_F^2 = ||d||^2 ||x||^2
                        let dd = dot(dout, dout);
                        *acc += dd * dot(x, x) + dd;
                    }
                }
                if let Some(dx) = dx {
                    dx.fill(0.0);
                    for o in 0..outputs {
                        if dout[o] != 0.0 {
                            axpy(dout[o], &w[o * inputs..(o + 1) * inputs], dx);
                        }
                    }
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                in_height,
                in_width,
            } => {
                let k = self.fan_in();
                let pixels = (in_height + 1 - kernel) * (in_width + 1 - kernel);
                SCRATCH.with_borrow_mut(|sc| {
                    self.im2col(x, &mut sc.patches);
                    let patches = &sc.patches;
                    sc.tmp.clear();
                    sc.tmp.resize(self.param_len(), 0.0);
                    let (g, norm): (&mut [f64], _) = match grad {
                        ParamGrad::Write(g) => (g, None),
                        ParamGrad::SquaredNorm(acc) => (&mut sc.tmp, Some(acc)),
                    };
                    let (gw, gb) = g.split_at_mut(self.weight_len());
                    for o in 0..out_channels {
                        let d = &dout[o * pixels..(o + 1) * pixels];
                        let go = &mut gw[o * k..(o + 1) * k];
                        go.fill(0.0);
                        for (pix, &dv) in d.iter().enumerate() {
                            if dv != 0.0 {
                                axpy(dv, &patches[pix * k..(pix + 1) * k], go);
                            }
                        }
                        gb[o] = d.iter().sum();
                    }
                    if let Some(acc) = norm {
                        *acc += dot(&sc.tmp, &sc.tmp);
                    }
                    if let Some(dx) = dx {
                        // Column gradient, then scatter back onto the input.
                        sc.tmp.clear();
                        sc.tmp.resize(k, 0.0);
                        dx.fill(0.0);
                        let (oh, ow) = self.out_hw();
                        for i in 0..oh {
                            for j in 0..ow {
                                let pix = i * ow + j;
                                let col = &mut sc.tmp;
                                col.fill(0.0);
                                for o in 0..out_channels {
                                    let dv = dout[o * pixels + pix];
                                    if dv != 0.0 {
                                        axpy(dv, &w[o * k..(o + 1) * k], col);
                                    }
                                }
                                for c in 0..in_channels {
                                    for ki in 0..kernel {
                                        let at = (c * in_height + i + ki) * in_width + j;
                                        let from = (c * kernel + ki) * kernel;
                                        for (dst, src) in dx[at..at + kernel].iter_mut().zip(&col[from..from + kernel]) {
                                            *dst += src;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    /// Unrolls every receptive field into a row of `patches`, ordered like
    /// the weights (`c, ki, kj`), one row per output pixel.
    fn im2col(&self, x: &[f64], patches: &mut Vec<f64>) {
        let LayerSpec::Conv2d {
            in_channels,
            kernel,
            in_height,
            in_width,
            ..
        } = *self
        else {
            unreachable!("im2col on a dense layer");
        };
        let (oh, ow) = self.out_hw();
        patches.clear();
        patches.reserve(oh * ow * self.fan_in());
        for i in 0..oh {
            for j in 0..ow {
                for c in 0..in_channels {
                    for ki in 0..kernel {
                        let at = (c * in_height + i + ki) * in_width + j;
                        patches.extend_from_slice(&x[at..at + kernel]);
                    }
                }
            }
        }
    }
}

#[derive(Default)]
struct Scratch {
    patches: Vec<f64>,
    tmp: Vec<f64>,
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

/// Destination for a layer's parameter gradient.
pub enum ParamGrad<'a> {
    Write(&'a mut [f64]),
    /// Accumulate only the squared Euclidean norm of the gradient.
    SquaredNorm(&'a mut f64),
}

/// Eight independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
