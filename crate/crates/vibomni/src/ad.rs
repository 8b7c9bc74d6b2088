//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records eager-evaluated operations; [`Graph::backward`]
//! replays them in reverse, accumulating gradients into every node.
//! Values are computed at op-construction time, so the same graph code
//! serves inference (never call backward) and training. The op set is
//! exactly what the enhancement network, the SNR estimator, and the
//! losses need — dilated causal 2-D convolutions, gated recurrences
//! built from matmuls, frequency pooling/upsampling, channel-static
//! normalization, and a mask-to-waveform inverse STFT with an FFT-based
//! adjoint.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { data, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![0.0; n],
            shape,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            data: vec![v],
            shape: vec![1],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reads the output gradient and writes into input gradients.
/// Inputs always precede the output, so the slice split is safe.
type BackwardFn = Box<dyn Fn(&[Tensor], &mut [Vec<f64>])>;

struct Inner {
    values: Vec<Tensor>,
    steps: Vec<BackwardFn>,
}

/// Eager computation graph with reverse-mode gradients.
pub struct Graph {
    inner: RefCell<Inner>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every node of a graph; index with a [`Var`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

/// Splits the gradient store at `out`: everything before it mutably, the
/// output gradient itself immutably.
fn split_out(grads: &mut [Vec<f64>], out: usize) -> (&mut [Vec<f64>], Vec<f64>) {
    let go = std::mem::take(&mut grads[out]);
    (grads, go)
}

fn restore_out(grads: &mut [Vec<f64>], out: usize, go: Vec<f64>) {
    grads[out] = go;
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                steps: Vec::new(),
            }),
        }
    }

    /// Inserts a leaf tensor (input, constant, or parameter).
    pub fn leaf(&self, t: Tensor) -> Var {
        let mut g = self.inner.borrow_mut();
        g.values.push(t);
        Var(g.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().values[v.0].clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.0].shape.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.inner.borrow().values[v.0].item()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().values.len()
    }

    fn push(&self, t: Tensor, make_back: impl FnOnce(usize) -> BackwardFn) -> Var {
        let mut g = self.inner.borrow_mut();
        g.values.push(t);
        let out = g.values.len() - 1;
        let back = make_back(out);
        g.steps.push(back);
        Var(out)
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        let g = self.inner.borrow();
        let mut grads: Vec<Vec<f64>> = g.values.iter().map(|v| vec![0.0; v.numel()]).collect();
        assert_eq!(g.values[loss.0].numel(), 1, "backward needs a scalar loss");
        grads[loss.0][0] = 1.0;
        for step in g.steps.iter().rev() {
            step(&g.values, &mut grads);
        }
        Gradients { grads }
    }

    // ---------------- elementwise binary ----------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        self.push(Tensor::new(ta.shape, data), |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for (d, s) in g[a.0].iter_mut().zip(&go) {
                    *d += s;
                }
                for (d, s) in g[b.0].iter_mut().zip(&go) {
                    *d += s;
                }
                restore_out(g, out, go);
            })
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        self.push(Tensor::new(ta.shape, data), |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for (d, s) in g[a.0].iter_mut().zip(&go) {
                    *d += s;
                }
                for (d, s) in g[b.0].iter_mut().zip(&go) {
                    *d -= s;
                }
                restore_out(g, out, go);
            })
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        self.push(Tensor::new(ta.shape, data), |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                for i in 0..go.len() {
                    g[a.0][i] += go[i] * v[b.0].data[i];
                    g[b.0][i] += go[i] * v[a.0].data[i];
                }
                restore_out(g, out, go);
            })
        })
    }

    // ---------------- elementwise unary ----------------

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data.iter().map(|x| f(*x)).collect();
        self.push(Tensor::new(ta.shape, data), |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                for i in 0..go.len() {
                    g[a.0][i] += go[i] * df(v[a.0].data[i], v[out].data[i]);
                }
                restore_out(g, out, go);
            })
        })
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, move |_x, _y| c)
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, |_x, _y| 1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _y| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_x, y| y * (1.0 - y),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_x, y| 1.0 - y * y)
    }

    pub fn softplus(&self, a: Var) -> Var {
        // ln(1 + e^x), computed stably
        self.unary(
            a,
            |x| {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _y| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _y| 1.0 / x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |_x, y| 0.5 / y)
    }

    pub fn clamp_max(&self, a: Var, cap: f64) -> Var {
        self.unary(
            a,
            |x| x.min(cap),
            move |x, _y| if x < cap { 1.0 } else { 0.0 },
        )
    }

    // ---------------- scalar broadcast ----------------

    /// Elementwise `a * s` where `s` is a scalar variable.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let ta = self.value(a);
        let sv = self.item(s);
        let data = ta.data.iter().map(|x| x * sv).collect();
        self.push(Tensor::new(ta.shape, data), |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                let sv = v[s.0].data[0];
                let mut gs = 0.0;
                for i in 0..go.len() {
                    g[a.0][i] += go[i] * sv;
                    gs += go[i] * v[a.0].data[i];
                }
                g[s.0][0] += gs;
                restore_out(g, out, go);
            })
        })
    }

    /// Elementwise `a - s` where `s` is a scalar variable.
    pub fn sub_scalar(&self, a: Var, s: Var) -> Var {
        let ta = self.value(a);
        let sv = self.item(s);
        let data = ta.data.iter().map(|x| x - sv).collect();
        self.push(Tensor::new(ta.shape, data), |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                let mut gs = 0.0;
                for i in 0..go.len() {
                    g[a.0][i] += go[i];
                    gs -= go[i];
                }
                g[s.0][0] += gs;
                restore_out(g, out, go);
            })
        })
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let ta = self.value(a);
        assert_eq!(
            ta.numel(),
            shape.iter().product::<usize>(),
            "reshape element count"
        );
        self.push(Tensor::new(shape, ta.data), |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for (d, s) in g[a.0].iter_mut().zip(&go) {
                    *d += s;
                }
                restore_out(g, out, go);
            })
        })
    }

    // ---------------- reductions ----------------

    pub fn sum_all(&self, a: Var) -> Var {
        let ta = self.value(a);
        let s: f64 = ta.data.iter().sum();
        self.push(Tensor::scalar(s), |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for d in g[a.0].iter_mut() {
                    *d += go[0];
                }
                restore_out(g, out, go);
            })
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.numel(), tb.numel(), "dot length mismatch");
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                for i in 0..v[a.0].numel() {
                    g[a.0][i] += go[0] * v[b.0].data[i];
                    g[b.0][i] += go[0] * v[a.0].data[i];
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Column means of a `[rows, cols]` matrix.
    pub fn mean_rows(&self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape.len(), 2);
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        let mut m = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                m[c] += ta.data[r * cols + c];
            }
        }
        for v in &mut m {
            *v /= rows as f64;
        }
        self.push(Tensor::new(vec![cols], m), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for r in 0..rows {
                    for c in 0..cols {
                        g[a.0][r * cols + c] += go[c] / rows as f64;
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    // ---------------- matrix ops ----------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape.len(), 2);
        assert_eq!(tb.shape.len(), 2);
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = ta.data[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[l * n..(l + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        self.push(Tensor::new(vec![m, n], data), move |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                // accumulate into fresh buffers, then add back: fast (no
                // per-element re-borrow) and safe if a and b alias
                let mut da = vec![0.0f64; m * k];
                let mut db = vec![0.0f64; k * n];
                let vb = &v[b.0].data;
                let va = &v[a.0].data;
                for i in 0..m {
                    let gorow = &go[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for l in 0..k {
                        // dA = dO * B^T
                        let brow = &vb[l * n..(l + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gorow[j] * brow[j];
                        }
                        darow[l] += acc;
                        // dB = A^T * dO
                        let av = va[i * k + l];
                        if av != 0.0 {
                            let dbrow = &mut db[l * n..(l + 1) * n];
                            for j in 0..n {
                                dbrow[j] += av * gorow[j];
                            }
                        }
                    }
                }
                axpy(&mut g[a.0], &da);
                axpy(&mut g[b.0], &db);
                restore_out(g, out, go);
            })
        })
    }

    /// Adds a bias row vector to every row of a `[rows, cols]` matrix.
    pub fn add_bias_rows(&self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        assert_eq!(tb.numel(), cols, "bias length");
        let mut data = ta.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += tb.data[c];
            }
        }
        self.push(Tensor::new(ta.shape, data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for (d, s) in g[a.0].iter_mut().zip(&go) {
                    *d += s;
                }
                for r in 0..rows {
                    for c in 0..cols {
                        g[bias.0][c] += go[r * cols + c];
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Columns `[start, start+len)` of a `[rows, cols]` matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        assert!(start + len <= cols);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::new(vec![rows, len], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for r in 0..rows {
                    for c in 0..len {
                        g[a.0][r * cols + start + c] += go[r * len + c];
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Concatenates two matrices along columns.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape[0], tb.shape[0]);
        let rows = ta.shape[0];
        let (ca, cb) = (ta.shape[1], tb.shape[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.data[r * cb..(r + 1) * cb]);
        }
        self.push(Tensor::new(vec![rows, ca + cb], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                let cols = ca + cb;
                for r in 0..rows {
                    for c in 0..ca {
                        g[a.0][r * ca + c] += go[r * cols + c];
                    }
                    for c in 0..cb {
                        g[b.0][r * cb + c] += go[r * cols + ca + c];
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    // ---------------- conv / pool over [C, T, F] maps ----------------

    /// Dilated 2-D convolution over a `[C_in, T, F]` map: causal
    /// (left-padded) along time, zero same-padding along frequency.
    /// Weight is `[C_out, C_in, KT, KF]`, bias `[C_out]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.shape.len(), 3, "conv2d input must be [C,T,F]");
        assert_eq!(tw.shape.len(), 4, "conv2d weight must be [O,C,KT,KF]");
        let (ci, t, f) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (co, ci2, kt, kf) = (tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]);
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert_eq!(tb.numel(), co, "conv2d bias");
        assert!(kf % 2 == 1, "freq kernel must be odd for same padding");
        let fpad = kf / 2;

        let mut data = vec![0.0; co * t * f];
        for o in 0..co {
            for tt in 0..t {
                let orow = &mut data[(o * t + tt) * f..(o * t + tt + 1) * f];
                for ic in 0..ci {
                    for dt in 0..kt {
                        // causal: tap dt reaches (kt-1-dt)*dilation frames back
                        let back = (kt - 1 - dt) * dilation;
                        if back > tt {
                            continue;
                        }
                        let ti = tt - back;
                        let xrow = &tx.data[(ic * t + ti) * f..(ic * t + ti + 1) * f];
                        for dk in 0..kf {
                            let wv = tw.data[((o * ci + ic) * kt + dt) * kf + dk];
                            if wv == 0.0 {
                                continue;
                            }
                            // freq index xf = ff + dk - fpad
                            let lo = fpad.saturating_sub(dk);
                            let hi = (f + fpad - dk).min(f);
                            for ff in lo..hi {
                                orow[ff] += wv * xrow[ff + dk - fpad];
                            }
                        }
                    }
                }
                for val in orow.iter_mut() {
                    *val += tb.data[o];
                }
            }
        }

        self.push(Tensor::new(vec![co, t, f], data), move |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                let tx = &v[x.0].data;
                let tw = &v[w.0].data;
                let mut db = vec![0.0f64; co];
                let mut dw = vec![0.0f64; tw.len()];
                let mut dx = vec![0.0f64; tx.len()];
                for o in 0..co {
                    let mut s = 0.0;
                    for i in 0..t * f {
                        s += go[o * t * f + i];
                    }
                    db[o] += s;
                    for tt in 0..t {
                        let gorow = &go[(o * t + tt) * f..(o * t + tt + 1) * f];
                        for ic in 0..ci {
                            for dt in 0..kt {
                                let back = (kt - 1 - dt) * dilation;
                                if back > tt {
                                    continue;
                                }
                                let ti = tt - back;
                                let xrow = &tx[(ic * t + ti) * f..(ic * t + ti + 1) * f];
                                let dxrow = &mut dx[(ic * t + ti) * f..(ic * t + ti + 1) * f];
                                let wbase = ((o * ci + ic) * kt + dt) * kf;
                                for dk in 0..kf {
                                    let wv = tw[wbase + dk];
                                    let mut wg = 0.0;
                                    let lo = fpad.saturating_sub(dk);
                                    let hi = (f + fpad - dk).min(f);
                                    let shift = dk as isize - fpad as isize;
                                    for ff in lo..hi {
                                        let xi = (ff as isize + shift) as usize;
                                        wg += gorow[ff] * xrow[xi];
                                        dxrow[xi] += gorow[ff] * wv;
                                    }
                                    dw[wbase + dk] += wg;
                                }
                            }
                        }
                    }
                }
                axpy(&mut g[b.0], &db);
                axpy(&mut g[w.0], &dw);
                axpy(&mut g[x.0], &dx);
                restore_out(g, out, go);
            })
        })
    }

    /// Causal 1-D convolution over time for `[T, D_in]` feature rows.
    /// Weight is `[D_out, D_in, K]`, bias `[D_out]`; output `[T, D_out]`.
    pub fn conv1d_time(&self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.shape.len(), 2);
        let (t, di) = (tx.shape[0], tx.shape[1]);
        let (dout, di2, k) = (tw.shape[0], tw.shape[1], tw.shape[2]);
        assert_eq!(di, di2, "conv1d channel mismatch");
        assert_eq!(tb.numel(), dout);

        let mut data = vec![0.0; t * dout];
        for tt in 0..t {
            for o in 0..dout {
                let mut acc = tb.data[o];
                for dt in 0..k {
                    let back = k - 1 - dt;
                    if back > tt {
                        continue;
                    }
                    let ti = tt - back;
                    let xrow = &tx.data[ti * di..(ti + 1) * di];
                    for (ic, xv) in xrow.iter().enumerate() {
                        acc += xv * tw.data[(o * di + ic) * k + dt];
                    }
                }
                data[tt * dout + o] = acc;
            }
        }

        self.push(Tensor::new(vec![t, dout], data), move |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                let tx = &v[x.0].data;
                let tw = &v[w.0].data;
                for tt in 0..t {
                    for o in 0..dout {
                        let gov = go[tt * dout + o];
                        if gov == 0.0 {
                            continue;
                        }
                        g[b.0][o] += gov;
                        for dt in 0..k {
                            let back = k - 1 - dt;
                            if back > tt {
                                continue;
                            }
                            let ti = tt - back;
                            for ic in 0..di {
                                g[w.0][(o * di + ic) * k + dt] += gov * tx[ti * di + ic];
                                g[x.0][ti * di + ic] += gov * tw[(o * di + ic) * k + dt];
                            }
                        }
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Max-pool along frequency with stride 2 and ceil semantics:
    /// `[C, T, F] -> [C, T, ceil(F/2)]`.
    pub fn maxpool_freq(&self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, t, f) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let fo = f.div_ceil(2);
        let mut data = vec![0.0; c * t * fo];
        let mut arg = vec![0usize; c * t * fo];
        for cc in 0..c {
            for tt in 0..t {
                for j in 0..fo {
                    let i0 = 2 * j;
                    let i1 = (2 * j + 1).min(f - 1);
                    let base = (cc * t + tt) * f;
                    let (v0, v1) = (tx.data[base + i0], tx.data[base + i1]);
                    let (v, idx) = if v1 > v0 { (v1, i1) } else { (v0, i0) };
                    data[(cc * t + tt) * fo + j] = v;
                    arg[(cc * t + tt) * fo + j] = base + idx;
                }
            }
        }
        self.push(Tensor::new(vec![c, t, fo], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for (i, &src) in arg.iter().enumerate() {
                    g[x.0][src] += go[i];
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Nearest-neighbor upsampling along frequency to an explicit size.
    pub fn upsample_freq(&self, x: Var, f_out: usize) -> Var {
        let tx = self.value(x);
        let (c, t, f) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let mut data = vec![0.0; c * t * f_out];
        let mut src_of = vec![0usize; f_out];
        for (j, s) in src_of.iter_mut().enumerate() {
            *s = (j * f) / f_out;
        }
        for cc in 0..c {
            for tt in 0..t {
                let ibase = (cc * t + tt) * f;
                let obase = (cc * t + tt) * f_out;
                for j in 0..f_out {
                    data[obase + j] = tx.data[ibase + src_of[j]];
                }
            }
        }
        self.push(Tensor::new(vec![c, t, f_out], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                let src_of: Vec<usize> = (0..f_out).map(|j| (j * f) / f_out).collect();
                for cc in 0..c {
                    for tt in 0..t {
                        let ibase = (cc * t + tt) * f;
                        let obase = (cc * t + tt) * f_out;
                        for j in 0..f_out {
                            g[x.0][ibase + src_of[j]] += go[obase + j];
                        }
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Concatenates `[C1,T,F]` and `[C2,T,F]` along channels.
    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(&ta.shape[1..], &tb.shape[1..], "concat_channels T/F mismatch");
        let (c1, t, f) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let c2 = tb.shape[0];
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        self.push(Tensor::new(vec![c1 + c2, t, f], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                let na = c1 * t * f;
                for (d, s) in g[a.0].iter_mut().zip(&go[..na]) {
                    *d += s;
                }
                for (d, s) in g[b.0].iter_mut().zip(&go[na..]) {
                    *d += s;
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Concatenates `[C,T1,F]` and `[C,T2,F]` along time (used to prepend
    /// streaming left context).
    pub fn concat_time(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape[0], tb.shape[0]);
        assert_eq!(ta.shape[2], tb.shape[2]);
        let (c, t1, f) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let t2 = tb.shape[1];
        let mut data = vec![0.0; c * (t1 + t2) * f];
        for cc in 0..c {
            let o = cc * (t1 + t2) * f;
            data[o..o + t1 * f].copy_from_slice(&ta.data[cc * t1 * f..(cc + 1) * t1 * f]);
            data[o + t1 * f..o + (t1 + t2) * f]
                .copy_from_slice(&tb.data[cc * t2 * f..(cc + 1) * t2 * f]);
        }
        self.push(Tensor::new(vec![c, t1 + t2, f], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for cc in 0..c {
                    let o = cc * (t1 + t2) * f;
                    for i in 0..t1 * f {
                        g[a.0][cc * t1 * f + i] += go[o + i];
                    }
                    for i in 0..t2 * f {
                        g[b.0][cc * t2 * f + i] += go[o + t1 * f + i];
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Time slice `[C, T, F] -> [C, len, F]` starting at `start`.
    pub fn slice_time(&self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let (c, t, f) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert!(start + len <= t);
        let mut data = vec![0.0; c * len * f];
        for cc in 0..c {
            for tt in 0..len {
                let src = (cc * t + start + tt) * f;
                let dst = (cc * len + tt) * f;
                data[dst..dst + f].copy_from_slice(&tx.data[src..src + f]);
            }
        }
        self.push(Tensor::new(vec![c, len, f], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for cc in 0..c {
                    for tt in 0..len {
                        let src = (cc * t + start + tt) * f;
                        let dst = (cc * len + tt) * f;
                        for i in 0..f {
                            g[x.0][src + i] += go[dst + i];
                        }
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Extracts frequency position `f_idx` of a `[C,T,F]` map as a
    /// `[T, C]` matrix (rows are time steps).
    pub fn slice_freq_mat(&self, x: Var, f_idx: usize) -> Var {
        let tx = self.value(x);
        let (c, t, f) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert!(f_idx < f);
        let mut data = vec![0.0; t * c];
        for tt in 0..t {
            for cc in 0..c {
                data[tt * c + cc] = tx.data[(cc * t + tt) * f + f_idx];
            }
        }
        self.push(Tensor::new(vec![t, c], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for tt in 0..t {
                    for cc in 0..c {
                        g[x.0][(cc * t + tt) * f + f_idx] += go[tt * c + cc];
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Extracts time position `t_idx` of a `[C,T,F]` map as a `[F, C]`
    /// matrix (rows are frequency positions).
    pub fn slice_time_mat(&self, x: Var, t_idx: usize) -> Var {
        let tx = self.value(x);
        let (c, t, f) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert!(t_idx < t);
        let mut data = vec![0.0; f * c];
        for ff in 0..f {
            for cc in 0..c {
                data[ff * c + cc] = tx.data[(cc * t + t_idx) * f + ff];
            }
        }
        self.push(Tensor::new(vec![f, c], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for ff in 0..f {
                    for cc in 0..c {
                        g[x.0][(cc * t + t_idx) * f + ff] += go[ff * c + cc];
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Rebuilds a `[C,T,F]` map from one `[T, C]` matrix per frequency
    /// position (inverse of [`Graph::slice_freq_mat`]).
    pub fn assemble_freq(&self, mats: &[Var]) -> Var {
        let f = mats.len();
        let first = self.value(mats[0]);
        let (t, c) = (first.shape[0], first.shape[1]);
        let mut data = vec![0.0; c * t * f];
        for (ff, &m) in mats.iter().enumerate() {
            let tm = self.value(m);
            assert_eq!(tm.shape, vec![t, c]);
            for tt in 0..t {
                for cc in 0..c {
                    data[(cc * t + tt) * f + ff] = tm.data[tt * c + cc];
                }
            }
        }
        let ids: Vec<usize> = mats.iter().map(|m| m.0).collect();
        self.push(Tensor::new(vec![c, t, f], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for (ff, &id) in ids.iter().enumerate() {
                    for tt in 0..t {
                        for cc in 0..c {
                            g[id][tt * c + cc] += go[(cc * t + tt) * f + ff];
                        }
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Rebuilds a `[C,T,F]` map from one `[F, C]` matrix per time step
    /// (inverse of [`Graph::slice_time_mat`]).
    pub fn assemble_time(&self, mats: &[Var]) -> Var {
        let t = mats.len();
        let first = self.value(mats[0]);
        let (f, c) = (first.shape[0], first.shape[1]);
        let mut data = vec![0.0; c * t * f];
        for (tt, &m) in mats.iter().enumerate() {
            let tm = self.value(m);
            assert_eq!(tm.shape, vec![f, c]);
            for ff in 0..f {
                for cc in 0..c {
                    data[(cc * t + tt) * f + ff] = tm.data[ff * c + cc];
                }
            }
        }
        let ids: Vec<usize> = mats.iter().map(|m| m.0).collect();
        self.push(Tensor::new(vec![c, t, f], data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                for (tt, &id) in ids.iter().enumerate() {
                    for ff in 0..f {
                        for cc in 0..c {
                            g[id][ff * c + cc] += go[(cc * t + tt) * f + ff];
                        }
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Linear map over the frequency axis of a `[C,T,F]` map:
    /// `out[c,t,f2] = sum_f w[f2,f] * x[c,t,f] + b[f2]`, shared across
    /// channels and time.
    pub fn freq_linear(&self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (c, t, f) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (f2, fin) = (tw.shape[0], tw.shape[1]);
        assert_eq!(f, fin, "freq_linear input dim");
        assert_eq!(tb.numel(), f2);
        let mut data = vec![0.0; c * t * f2];
        for ct in 0..c * t {
            let xrow = &tx.data[ct * f..(ct + 1) * f];
            let orow = &mut data[ct * f2..(ct + 1) * f2];
            for (j, o) in orow.iter_mut().enumerate() {
                let wrow = &tw.data[j * f..(j + 1) * f];
                let mut acc = tb.data[j];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                *o = acc;
            }
        }
        self.push(Tensor::new(vec![c, t, f2], data), move |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                let tx = &v[x.0].data;
                let tw = &v[w.0].data;
                for ct in 0..c * t {
                    for j in 0..f2 {
                        let gov = go[ct * f2 + j];
                        if gov == 0.0 {
                            continue;
                        }
                        g[b.0][j] += gov;
                        for ff in 0..f {
                            g[w.0][j * f + ff] += gov * tx[ct * f + ff];
                            g[x.0][ct * f + ff] += gov * tw[j * f + ff];
                        }
                    }
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Per-channel static normalization with learned statistics:
    /// `gain[c] * (x - mean[c]) * inv_std[c] + bias[c]`.
    ///
    /// The statistics are ordinary parameters, identical in training and
    /// inference, so streaming sees the exact same transform as offline.
    pub fn channel_norm(&self, x: Var, gain: Var, bias: Var, mean: Var, inv_std: Var) -> Var {
        let tx = self.value(x);
        let (c, t, f) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (tg, tb, tm, ti) = (
            self.value(gain),
            self.value(bias),
            self.value(mean),
            self.value(inv_std),
        );
        assert!(tg.numel() == c && tb.numel() == c && tm.numel() == c && ti.numel() == c);
        let mut data = vec![0.0; c * t * f];
        for cc in 0..c {
            let (gv, bv, mv, iv) = (tg.data[cc], tb.data[cc], tm.data[cc], ti.data[cc]);
            for i in 0..t * f {
                data[cc * t * f + i] = gv * (tx.data[cc * t * f + i] - mv) * iv + bv;
            }
        }
        self.push(Tensor::new(vec![c, t, f], data), move |out| {
            Box::new(move |v, g| {
                let (g, go) = split_out(g, out);
                let tx = &v[x.0].data;
                for cc in 0..c {
                    let gv = v[gain.0].data[cc];
                    let mv = v[mean.0].data[cc];
                    let iv = v[inv_std.0].data[cc];
                    let (mut sg, mut sb, mut sm, mut si) = (0.0, 0.0, 0.0, 0.0);
                    for i in 0..t * f {
                        let idx = cc * t * f + i;
                        let xo = tx[idx] - mv;
                        let gov = go[idx];
                        g[x.0][idx] += gov * gv * iv;
                        sg += gov * xo * iv;
                        sb += gov;
                        sm -= gov * gv * iv;
                        si += gov * gv * xo;
                    }
                    g[gain.0][cc] += sg;
                    g[bias.0][cc] += sb;
                    g[mean.0][cc] += sm;
                    g[inv_std.0][cc] += si;
                }
                restore_out(g, out, go);
            })
        })
    }

    /// Inverse STFT of a magnitude matrix under a fixed phase, as one
    /// differentiable op: `[T, K] -> [signal_len]` waveform.
    ///
    /// Forward mirrors `signal::istft` (Hann analysis, plain overlap-add,
    /// padding trimmed); the backward pass is its adjoint, one forward
    /// FFT of the sliced output gradient per frame.
    pub fn istft_fixed_phase(
        &self,
        mag: Var,
        phase: &[f64],
        window_size: usize,
        hop: usize,
        signal_len: usize,
    ) -> Var {
        let tm = self.value(mag);
        assert_eq!(tm.shape.len(), 2);
        let (frames, bins) = (tm.shape[0], tm.shape[1]);
        assert_eq!(bins, window_size / 2 + 1);
        assert_eq!(phase.len(), frames * bins);

        let left = window_size - hop;
        let padded_len = (frames.max(1) - 1) * hop + window_size;
        let cos_phase: Vec<f64> = phase.iter().map(|p| p.cos()).collect();
        let sin_phase: Vec<f64> = phase.iter().map(|p| p.sin()).collect();

        let mut planner = FftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(window_size);
        let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
        let mut wave = vec![0.0f64; padded_len];
        for t in 0..frames {
            for k in 0..bins {
                let m = tm.data[t * bins + k];
                buf[k] = Complex64::new(m * cos_phase[t * bins + k], m * sin_phase[t * bins + k]);
            }
            for k in bins..window_size {
                buf[k] = buf[window_size - k].conj();
            }
            ifft.process(&mut buf);
            for (i, b) in buf.iter().enumerate() {
                wave[t * hop + i] += b.re / window_size as f64;
            }
        }
        let out_data = wave[left..(left + signal_len).min(padded_len)].to_vec();
        assert_eq!(out_data.len(), signal_len, "signal_len exceeds frame coverage");

        self.push(Tensor::new(vec![signal_len], out_data), move |out| {
            Box::new(move |_v, g| {
                let (g, go) = split_out(g, out);
                // adjoint: slice the output grad per frame, forward-FFT it,
                // and project onto the phase direction of each bin
                let mut planner = FftPlanner::<f64>::new();
                let fft = planner.plan_fft_forward(window_size);
                let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
                for t in 0..frames {
                    for (i, b) in buf.iter_mut().enumerate() {
                        let p = t * hop + i; // padded position
                        let v = if p >= left && p - left < signal_len {
                            go[p - left]
                        } else {
                            0.0
                        };
                        *b = Complex64::new(v, 0.0);
                    }
                    fft.process(&mut buf);
                    for k in 0..bins {
                        // sum_n g[n] cos(phase + 2 pi k n / W)
                        //   = Re(e^{i phase} conj(FFT(g)[k]))
                        let c = buf[k].conj();
                        let cp = cos_phase[t * bins + k];
                        let sp = sin_phase[t * bins + k];
                        let proj = cp * c.re - sp * c.im;
                        let weight = if k == 0 || k == window_size / 2 {
                            1.0
                        } else {
                            2.0
                        };
                        g[mag.0][t * bins + k] += weight * proj / window_size as f64;
                    }
                }
                restore_out(g, out, go);
            })
        })
    }
}
