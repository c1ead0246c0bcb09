//! A small network engine: dense and LSTM layers over a flat parameter
//! vector, exact reverse-mode gradients, MSE and Adam.
//!
//! Every network keeps all of its parameters in one `Vec<f64>`; layers are
//! views described by offsets into it. Gradients use the same layout, so
//! optimizers, soft target updates and checkpoints work on plain slices.
//!
//! Training follows a record/replay pattern: `forward_train` records the
//! intermediate values of one sample, and `backward` consumes that record,
//! accumulating parameter gradients and returning the input gradient.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A fully connected layer `activation(W x + b)`, `W` stored row-major
/// `output x input` followed by `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    offset: usize,
}

impl Dense {
    pub fn param_count(&self) -> usize {
        self.output * (self.input + 1)
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.output * self.input]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.output * self.input;
        &params[start..start + self.output]
    }

    /// Pre-activation `W x + b` written into `out`.
    fn affine(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let w = self.weights(params);
        let b = self.bias(params);
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[j * self.input..(j + 1) * self.input];
            *o = b[j] + dot(row, x);
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.input,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.output];
        self.forward_into(params, x, &mut y);
        Ok(y)
    }

    pub fn forward_into(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        self.affine(params, x, y);
        if self.activation != Activation::Linear {
            for v in y.iter_mut() {
                *v = self.activation.apply(*v);
            }
        }
    }

    /// Given the layer's input `x`, output `y` and `dL/dy`, accumulates
    /// parameter gradients into `grads` and writes `dL/dx` into `dx`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        grads: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let mut dpre = vec![0.0; self.output];
        for j in 0..self.output {
            dpre[j] = dy[j] * self.activation.derivative_from_output(y[j]);
        }
        let (gw, gb) = grads[self.offset..self.offset + self.param_count()]
            .split_at_mut(self.output * self.input);
        for (j, &d) in dpre.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, x, &mut gw[j * self.input..(j + 1) * self.input]);
            gb[j] += d;
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            let w = self.weights(params);
            for (j, &d) in dpre.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &w[j * self.input..(j + 1) * self.input], dx);
                }
            }
        }
    }
}

impl Dense {
    /// Forward pass over a row-major `batch x input` matrix into a
    /// `batch x output` matrix.
    pub fn forward_batch(&self, params: &[f64], xs: &[f64], ys: &mut [f64], batch: usize) {
        let (n_in, n_out) = (self.input, self.output);
        let b = self.bias(params);
        for row in ys[..batch * n_out].chunks_exact_mut(n_out) {
            row.copy_from_slice(b);
        }
        // Y += X W^T, with W^T read through strides.
        gemm(
            (batch, n_in, n_out),
            1.0,
            (xs, n_in, 1),
            (self.weights(params), 1, n_in),
            1.0,
            (ys, n_out),
        );
        if self.activation != Activation::Linear {
            for v in ys[..batch * n_out].iter_mut() {
                *v = self.activation.apply(*v);
            }
        }
    }

    /// Batched [`Dense::backward`]: parameter gradients are summed over the
    /// batch, input gradients are per sample.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_batch(
        &self,
        params: &[f64],
        xs: &[f64],
        ys: &[f64],
        dys: &[f64],
        grads: &mut [f64],
        dxs: Option<&mut [f64]>,
        batch: usize,
    ) {
        let (n_in, n_out) = (self.input, self.output);
        let mut dpre = vec![0.0; batch * n_out];
        for (i, d) in dpre.iter_mut().enumerate() {
            *d = dys[i] * self.activation.derivative_from_output(ys[i]);
        }
        let (gw, gb) =
            grads[self.offset..self.offset + self.param_count()].split_at_mut(n_out * n_in);
        // dW += dZ^T X
        gemm(
            (n_out, batch, n_in),
            1.0,
            (&dpre, 1, n_out),
            (xs, n_in, 1),
            1.0,
            (gw, n_in),
        );
        for row in dpre.chunks_exact(n_out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if let Some(dxs) = dxs {
            // dX = dZ W
            gemm(
                (batch, n_out, n_in),
                1.0,
                (&dpre, n_out, 1),
                (self.weights(params), n_in, 1),
                0.0,
                (dxs, n_in),
            );
        }
    }
}

/// `C = alpha A B + beta C` for an `m x k` by `k x n` product. `A` and `B`
/// carry (data, row stride, column stride); `C` is row-major with the given
/// row stride.
fn gemm(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    beta: f64,
    (c, rsc): (&mut [f64], usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, 1) < c.len());
    // SAFETY: the asserts above keep every strided access inside the
    // slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// An LSTM layer without peepholes.
///
/// Gates are stacked `[input, forget, output, candidate]`; parameters are
/// `W (4h x input)`, `U (4h x h)` and `b (4h)`, so a layer holds
/// `4h (input + h + 1)` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    offset: usize,
}

/// Values of one LSTM layer over one sequence, kept for backpropagation.
#[derive(Debug, Clone)]
struct LstmTrace {
    /// Per step: activated gates `[i, f, o, z]`, each `hidden` long.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
}

impl Lstm {
    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let g = 4 * self.hidden;
        let p = &params[self.offset..self.offset + self.param_count()];
        let (w, rest) = p.split_at(g * self.input);
        let (u, b) = rest.split_at(g * self.hidden);
        (w, u, b)
    }

    /// Runs one sequence from a zero state, returning `h_t` for each step.
    pub fn forward(&self, params: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(bad) = inputs.iter().find(|x| x.len() != self.input) {
            return Err(Error::Shape(format!(
                "LSTM expects {} inputs per step, got {}",
                self.input,
                bad.len()
            )));
        }
        Ok(self.run(params, inputs).hiddens)
    }

    fn run(&self, params: &[f64], inputs: &[Vec<f64>]) -> LstmTrace {
        let h = self.hidden;
        let (w, u, b) = self.split(params);
        let mut trace = LstmTrace {
            gates: Vec::with_capacity(inputs.len()),
            cells: Vec::with_capacity(inputs.len()),
            hiddens: Vec::with_capacity(inputs.len()),
        };
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for x in inputs {
            let mut pre = b.to_vec();
            for (r, p) in pre.iter_mut().enumerate() {
                *p += dot(&w[r * self.input..(r + 1) * self.input], x)
                    + dot(&u[r * h..(r + 1) * h], &h_prev);
            }
            let mut c = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for j in 0..h {
                pre[j] = sigmoid(pre[j]);
                pre[h + j] = sigmoid(pre[h + j]);
                pre[2 * h + j] = sigmoid(pre[2 * h + j]);
                pre[3 * h + j] = pre[3 * h + j].tanh();
                c[j] = pre[h + j] * c_prev[j] + pre[j] * pre[3 * h + j];
                hn[j] = pre[2 * h + j] * c[j].tanh();
            }
            trace.gates.push(pre);
            c_prev.clone_from(&c);
            h_prev.clone_from(&hn);
            trace.cells.push(c);
            trace.hiddens.push(hn);
        }
        trace
    }

    /// Backpropagation through time. `dh_out[t]` is `dL/dh_t` coming from
    /// above; returns `dL/dx_t` per step.
    fn backward(
        &self,
        params: &[f64],
        inputs: &[Vec<f64>],
        trace: &LstmTrace,
        dh_out: &[Vec<f64>],
        grads: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let g4 = 4 * h;
        let steps = inputs.len();
        let (w, u, _) = self.split(params);
        let gslice = &mut grads[self.offset..self.offset + self.param_count()];
        let (gw, rest) = gslice.split_at_mut(g4 * self.input);
        let (gu, gb) = rest.split_at_mut(g4 * h);

        let zeros = vec![0.0; h];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dx_all = vec![vec![0.0; self.input]; steps];
        let mut dpre = vec![0.0; g4];
        for t in (0..steps).rev() {
            let gates = &trace.gates[t];
            let c = &trace.cells[t];
            let c_prev = if t > 0 { &trace.cells[t - 1] } else { &zeros };
            let h_prev = if t > 0 { &trace.hiddens[t - 1] } else { &zeros };
            for j in 0..h {
                let (i, f, o, z) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let tc = c[j].tanh();
                let dh = dh_out[t][j] + dh_next[j];
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                dpre[j] = dc * z * i * (1.0 - i);
                dpre[h + j] = dc * c_prev[j] * f * (1.0 - f);
                dpre[2 * h + j] = dh * tc * o * (1.0 - o);
                dpre[3 * h + j] = dc * i * (1.0 - z * z);
                dc_next[j] = dc * f;
            }
            let x = &inputs[t];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let dx = &mut dx_all[t];
            for (r, &d) in dpre.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                axpy(d, x, &mut gw[r * self.input..(r + 1) * self.input]);
                axpy(d, h_prev, &mut gu[r * h..(r + 1) * h]);
                gb[r] += d;
                axpy(d, &w[r * self.input..(r + 1) * self.input], dx);
                axpy(d, &u[r * h..(r + 1) * h], &mut dh_next);
            }
        }
        dx_all
    }
}

/// [`LstmTrace`] for a batch: every entry is a row-major `batch x width`
/// matrix per step.
#[derive(Debug, Clone)]
struct LstmBatchTrace {
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
}

impl Lstm {
    /// Runs `batch` sequences of equal length from zero states. `inputs[t]`
    /// is the `batch x input` matrix of step `t`.
    fn run_batch(&self, params: &[f64], inputs: &[Vec<f64>], batch: usize) -> LstmBatchTrace {
        let (h, n_in) = (self.hidden, self.input);
        let g4 = 4 * h;
        let steps = inputs.len();
        let (w, u, b) = self.split(params);
        // The input projection does not depend on the recurrence, so all
        // steps go through one product.
        let mut pre_all = vec![0.0; steps * batch * g4];
        for row in pre_all.chunks_exact_mut(g4) {
            row.copy_from_slice(b);
        }
        let x_all = inputs.concat();
        gemm(
            (steps * batch, n_in, g4),
            1.0,
            (&x_all, n_in, 1),
            (w, 1, n_in),
            1.0,
            (&mut pre_all, g4),
        );

        let mut trace = LstmBatchTrace {
            gates: Vec::with_capacity(steps),
            cells: Vec::with_capacity(steps),
            hiddens: Vec::with_capacity(steps),
        };
        let mut h_prev = vec![0.0; batch * h];
        let mut c_prev = vec![0.0; batch * h];
        for (t, pre) in pre_all.chunks_exact(batch * g4).enumerate() {
            let mut pre = pre.to_vec();
            if t > 0 {
                gemm(
                    (batch, h, g4),
                    1.0,
                    (&h_prev, h, 1),
                    (u, 1, h),
                    1.0,
                    (&mut pre, g4),
                );
            }
            let mut c = vec![0.0; batch * h];
            let mut hn = vec![0.0; batch * h];
            for s in 0..batch {
                let g = &mut pre[s * g4..(s + 1) * g4];
                for j in 0..h {
                    g[j] = sigmoid(g[j]);
                    g[h + j] = sigmoid(g[h + j]);
                    g[2 * h + j] = sigmoid(g[2 * h + j]);
                    g[3 * h + j] = g[3 * h + j].tanh();
                    let k = s * h + j;
                    c[k] = g[h + j] * c_prev[k] + g[j] * g[3 * h + j];
                    hn[k] = g[2 * h + j] * c[k].tanh();
                }
            }
            trace.gates.push(pre);
            c_prev.clone_from(&c);
            h_prev.clone_from(&hn);
            trace.cells.push(c);
            trace.hiddens.push(hn);
        }
        trace
    }

    /// Batched BPTT; `dh_out[t]` is `batch x hidden`. Returns `dL/dx_t` as
    /// `batch x input` matrices.
    fn backward_batch(
        &self,
        params: &[f64],
        inputs: &[Vec<f64>],
        trace: &LstmBatchTrace,
        dh_out: &[Vec<f64>],
        grads: &mut [f64],
        batch: usize,
    ) -> Vec<Vec<f64>> {
        let (h, n_in) = (self.hidden, self.input);
        let g4 = 4 * h;
        let steps = inputs.len();
        let (w, u, _) = self.split(params);
        let gslice = &mut grads[self.offset..self.offset + self.param_count()];
        let (gw, rest) = gslice.split_at_mut(g4 * n_in);
        let (gu, gb) = rest.split_at_mut(g4 * h);

        let mut dpre_all = vec![0.0; steps * batch * g4];
        let mut dh_next = vec![0.0; batch * h];
        let mut dc_next = vec![0.0; batch * h];
        for t in (0..steps).rev() {
            let gates = &trace.gates[t];
            let c = &trace.cells[t];
            let dpre = &mut dpre_all[t * batch * g4..(t + 1) * batch * g4];
            for s in 0..batch {
                let g = &gates[s * g4..(s + 1) * g4];
                let d = &mut dpre[s * g4..(s + 1) * g4];
                for j in 0..h {
                    let k = s * h + j;
                    let (i, f, o, z) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let c_prev = if t > 0 { trace.cells[t - 1][k] } else { 0.0 };
                    let tc = c[k].tanh();
                    let dh = dh_out[t][k] + dh_next[k];
                    let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                    d[j] = dc * z * i * (1.0 - i);
                    d[h + j] = dc * c_prev * f * (1.0 - f);
                    d[2 * h + j] = dh * tc * o * (1.0 - o);
                    d[3 * h + j] = dc * i * (1.0 - z * z);
                    dc_next[k] = dc * f;
                }
            }
            if t > 0 {
                // dh_{t-1} = dpre_t U; gU += dpre_t^T h_{t-1}
                gemm(
                    (batch, g4, h),
                    1.0,
                    (dpre, g4, 1),
                    (u, h, 1),
                    0.0,
                    (&mut dh_next, h),
                );
                gemm(
                    (g4, batch, h),
                    1.0,
                    (dpre, 1, g4),
                    (&trace.hiddens[t - 1], h, 1),
                    1.0,
                    (gu, h),
                );
            }
        }
        let rows = steps * batch;
        let x_all = inputs.concat();
        gemm(
            (g4, rows, n_in),
            1.0,
            (&dpre_all, 1, g4),
            (&x_all, n_in, 1),
            1.0,
            (gw, n_in),
        );
        for row in dpre_all.chunks_exact(g4) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx_all = vec![0.0; rows * n_in];
        gemm(
            (rows, g4, n_in),
            1.0,
            (&dpre_all, g4, 1),
            (w, n_in, 1),
            0.0,
            (&mut dx_all, n_in),
        );
        dx_all
            .chunks_exact(batch * n_in)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// Description of one layer, used in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        activation: Activation,
    },
    Lstm {
        input: usize,
        hidden: usize,
    },
}

/// Allocates layers in a flat parameter vector and initializes them.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    len: usize,
    specs: Vec<LayerSpec>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dense(&mut self, input: usize, output: usize, activation: Activation) -> Dense {
        let layer = Dense {
            input,
            output,
            activation,
            offset: self.len,
        };
        self.len += layer.param_count();
        self.specs.push(LayerSpec::Dense {
            input,
            output,
            activation,
        });
        layer
    }

    pub fn lstm(&mut self, input: usize, hidden: usize) -> Lstm {
        let layer = Lstm {
            input,
            hidden,
            offset: self.len,
        };
        self.len += layer.param_count();
        self.specs.push(LayerSpec::Lstm { input, hidden });
        layer
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every weight and
    /// bias; LSTM forget-gate biases start at 1.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.len];
        let mut offset = 0;
        for spec in &self.specs {
            match *spec {
                LayerSpec::Dense { input, output, .. } => {
                    let bound = 1.0 / (input.max(1) as f64).sqrt();
                    let n = output * (input + 1);
                    for p in &mut params[offset..offset + n] {
                        *p = rng.gen_range(-bound..=bound);
                    }
                    offset += n;
                }
                LayerSpec::Lstm { input, hidden } => {
                    let bound = 1.0 / ((input + hidden).max(1) as f64).sqrt();
                    let n = 4 * hidden * (input + hidden + 1);
                    for p in &mut params[offset..offset + n] {
                        *p = rng.gen_range(-bound..=bound);
                    }
                    let bias = offset + n - 4 * hidden;
                    for p in &mut params[bias + hidden..bias + 2 * hidden] {
                        *p = 1.0;
                    }
                    offset += n;
                }
            }
        }
        params
    }
}

/// Anything with a flat parameter vector.
pub trait Parameterized {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn layer_specs(&self) -> Vec<LayerSpec>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.num_params()]
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    params: Vec<f64>,
    /// Batch size and per-layer activations of the last training pass.
    tape: Option<(usize, Vec<Vec<f64>>)>,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`; hidden layers use `hidden`,
    /// the last layer `output`.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut b = LayoutBuilder::new();
        let layers: Vec<Dense> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                b.dense(
                    w[0],
                    w[1],
                    if i + 2 == sizes.len() { output } else { hidden },
                )
            })
            .collect();
        let params = b.init(rng);
        Self {
            layers,
            params,
            tape: None,
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(x, 1)
    }

    /// Forward pass that records activations for [`Mlp::backward`].
    pub fn forward_train(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_train_batch(x, 1)
    }

    /// Accumulates `dL/dθ` into `grads` for the recorded sample and returns
    /// `dL/dx`.
    pub fn backward(&mut self, dy: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        self.backward_batch(dy, grads)
    }

    fn batch_activations(&self, xs: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        if xs.len() != batch * self.input_size() {
            return Err(Error::Shape(format!(
                "batch of {batch} needs {} inputs, got {}",
                batch * self.input_size(),
                xs.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(xs.to_vec());
        for layer in &self.layers {
            let mut y = vec![0.0; batch * layer.output];
            layer.forward_batch(&self.params, acts.last().unwrap(), &mut y, batch);
            acts.push(y);
        }
        Ok(acts)
    }

    /// Forward pass over a row-major `batch x input` matrix.
    pub fn forward_batch(&self, xs: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.batch_activations(xs, batch)?.pop().unwrap_or_default())
    }

    /// Batched [`Mlp::forward_train`]; pair with [`Mlp::backward_batch`].
    pub fn forward_train_batch(&mut self, xs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let acts = self.batch_activations(xs, batch)?;
        let y = acts.last().cloned().unwrap_or_default();
        self.tape = Some((batch, acts));
        Ok(y)
    }

    /// Accumulates the summed parameter gradients of the recorded batch
    /// and returns the per-sample input gradients, row-major.
    pub fn backward_batch(&mut self, dys: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        let (batch, acts) = self.tape.take().ok_or(Error::NoForwardPass)?;
        if dys.len() != batch * self.output_size() || grads.len() != self.params.len() {
            return Err(Error::Shape(
                "gradient buffers do not match the network".into(),
            ));
        }
        let mut delta = dys.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let mut dx = vec![0.0; batch * layer.input];
            layer.backward_batch(
                &self.params,
                &acts[i],
                &acts[i + 1],
                &delta,
                grads,
                Some(&mut dx),
                batch,
            );
            delta = dx;
        }
        Ok(delta)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec::Dense {
                input: l.input,
                output: l.output,
                activation: l.activation,
            })
            .collect()
    }
}

/// Stacked LSTM layers reading a sequence, with a dense head applied to
/// the last step's top-layer output.
#[derive(Debug, Clone)]
pub struct LstmNet {
    layers: Vec<Lstm>,
    head: Dense,
    params: Vec<f64>,
    tape: Option<LstmTape>,
    batch_tape: Option<LstmBatchTape>,
}

#[derive(Debug, Clone)]
struct LstmBatchTape {
    batch: usize,
    inputs: Vec<Vec<Vec<f64>>>,
    traces: Vec<LstmBatchTrace>,
    output: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LstmTape {
    /// Input sequence of each layer (the last entry feeds the head).
    inputs: Vec<Vec<Vec<f64>>>,
    traces: Vec<LstmTrace>,
    output: Vec<f64>,
}

impl LstmNet {
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        head: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!hidden.is_empty(), "need at least one LSTM layer");
        let mut b = LayoutBuilder::new();
        let mut prev = input;
        let layers = hidden
            .iter()
            .map(|&h| {
                let l = b.lstm(prev, h);
                prev = h;
                l
            })
            .collect();
        let head = b.dense(prev, output, head);
        let params = b.init(rng);
        Self {
            layers,
            head,
            params,
            tape: None,
            batch_tape: None,
        }
    }

    pub fn layers(&self) -> &[Lstm] {
        &self.layers
    }

    fn run(&self, seq: &[Vec<f64>]) -> Result<LstmTape> {
        if seq.is_empty() {
            return Err(Error::Shape("empty input sequence".into()));
        }
        let mut inputs = vec![seq.to_vec()];
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let current = inputs.last().unwrap();
            if let Some(bad) = current.iter().find(|x| x.len() != layer.input) {
                return Err(Error::Shape(format!(
                    "LSTM expects {} inputs per step, got {}",
                    layer.input,
                    bad.len()
                )));
            }
            let trace = layer.run(&self.params, current);
            inputs.push(trace.hiddens.clone());
            traces.push(trace);
        }
        let last = inputs
            .last()
            .and_then(|s| s.last())
            .cloned()
            .unwrap_or_default();
        let mut output = vec![0.0; self.head.output];
        self.head.forward_into(&self.params, &last, &mut output);
        Ok(LstmTape {
            inputs,
            traces,
            output,
        })
    }

    pub fn forward(&self, seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.run(seq)?.output)
    }

    /// Scalar-per-step convenience: feeds `values[t]` at step `t`.
    pub fn forward_scalar(&self, values: &[f64]) -> Result<f64> {
        let seq: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        Ok(self.forward(&seq)?[0])
    }

    pub fn forward_train(&mut self, seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        let tape = self.run(seq)?;
        let out = tape.output.clone();
        self.tape = Some(tape);
        Ok(out)
    }

    /// Backpropagates `dL/d output` through the head and all layers;
    /// returns `dL/dx_t` per input step.
    pub fn backward(&mut self, dy: &[f64], grads: &mut [f64]) -> Result<Vec<Vec<f64>>> {
        let tape = self.tape.take().ok_or(Error::NoForwardPass)?;
        if dy.len() != self.head.output || grads.len() != self.params.len() {
            return Err(Error::Shape(
                "gradient buffers do not match the network".into(),
            ));
        }
        let top = tape.inputs.last().unwrap();
        let steps = top.len();
        let last = &top[steps - 1];
        let mut dlast = vec![0.0; self.head.input];
        self.head.backward(
            &self.params,
            last,
            &tape.output,
            dy,
            grads,
            Some(&mut dlast),
        );
        let mut dh: Vec<Vec<f64>> = (0..steps)
            .map(|t| {
                if t + 1 == steps {
                    dlast.clone()
                } else {
                    vec![0.0; self.head.input]
                }
            })
            .collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            dh = layer.backward(&self.params, &tape.inputs[i], &tape.traces[i], &dh, grads);
        }
        Ok(dh)
    }
}

impl LstmNet {
    fn run_batch(&self, seqs: &[Vec<f64>], batch: usize) -> Result<LstmBatchTape> {
        if seqs.is_empty() || batch == 0 {
            return Err(Error::Shape("empty input batch".into()));
        }
        let n_in = self.layers[0].input;
        if let Some(bad) = seqs.iter().find(|x| x.len() != batch * n_in) {
            return Err(Error::Shape(format!(
                "each step needs {batch} x {n_in} inputs, got {}",
                bad.len()
            )));
        }
        let mut inputs = vec![seqs.to_vec()];
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let trace = layer.run_batch(&self.params, inputs.last().unwrap(), batch);
            inputs.push(trace.hiddens.clone());
            traces.push(trace);
        }
        let last = inputs.last().and_then(|s| s.last()).unwrap();
        let mut output = vec![0.0; batch * self.head.output];
        self.head
            .forward_batch(&self.params, last, &mut output, batch);
        Ok(LstmBatchTape {
            batch,
            inputs,
            traces,
            output,
        })
    }

    /// Runs `batch` equal-length sequences; `seqs[t]` is the row-major
    /// `batch x input` matrix of step `t`. Returns `batch x output`.
    pub fn forward_batch(&self, seqs: &[Vec<f64>], batch: usize) -> Result<Vec<f64>> {
        Ok(self.run_batch(seqs, batch)?.output)
    }

    /// Batched [`LstmNet::forward_train`]; pair with [`LstmNet::backward_batch`].
    pub fn forward_train_batch(&mut self, seqs: &[Vec<f64>], batch: usize) -> Result<Vec<f64>> {
        let tape = self.run_batch(seqs, batch)?;
        let out = tape.output.clone();
        self.batch_tape = Some(tape);
        Ok(out)
    }

    /// Accumulates the batch's summed parameter gradients; returns
    /// `dL/dx_t` per step as `batch x input` matrices.
    pub fn backward_batch(&mut self, dys: &[f64], grads: &mut [f64]) -> Result<Vec<Vec<f64>>> {
        let tape = self.batch_tape.take().ok_or(Error::NoForwardPass)?;
        let batch = tape.batch;
        if dys.len() != batch * self.head.output || grads.len() != self.params.len() {
            return Err(Error::Shape(
                "gradient buffers do not match the network".into(),
            ));
        }
        let top = tape.inputs.last().unwrap();
        let steps = top.len();
        let width = self.head.input;
        let mut dlast = vec![0.0; batch * width];
        self.head.backward_batch(
            &self.params,
            &top[steps - 1],
            &tape.output,
            dys,
            grads,
            Some(&mut dlast),
            batch,
        );
        let mut dh: Vec<Vec<f64>> = vec![vec![0.0; batch * width]; steps];
        dh[steps - 1] = dlast;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            dh = layer.backward_batch(
                &self.params,
                &tape.inputs[i],
                &tape.traces[i],
                &dh,
                grads,
                batch,
            );
        }
        Ok(dh)
    }
}

impl Parameterized for LstmNet {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = self
            .layers
            .iter()
            .map(|l| LayerSpec::Lstm {
                input: l.input,
                hidden: l.hidden,
            })
            .collect();
        specs.push(LayerSpec::Dense {
            input: self.head.input,
            output: self.head.output,
            activation: self.head.activation,
        });
        specs
    }
}

/// Mean squared error over the vector.
pub fn mse_loss(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(Error::Shape(format!(
            "MSE of {} predictions against {} targets",
            prediction.len(),
            target.len()
        )));
    }
    let n = prediction.len() as f64;
    Ok(prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n)
}

/// `d mse / d prediction`.
pub fn mse_grad(prediction: &[f64], target: &[f64]) -> Vec<f64> {
    let n = prediction.len() as f64;
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam state for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / c1;
        let c2_sqrt = c2.sqrt();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step_size * self.m[i] / (self.v[i].sqrt() / c2_sqrt + self.eps);
        }
        Ok(())
    }

    /// [`Adam::step`] on a network's own parameter vector.
    pub fn apply(&mut self, net: &mut impl Parameterized, grads: &[f64]) -> Result<()> {
        self.step(net.params_mut(), grads)
    }
}

/// `target <- tau * learned + (1 - tau) * target`.
pub fn soft_update(target: &mut [f64], learned: &[f64], tau: f64) -> Result<()> {
    if target.len() != learned.len() {
        return Err(Error::Shape(format!(
            "{} target vs {} learned parameters",
            target.len(),
            learned.len()
        )));
    }
    for (t, &l) in target.iter_mut().zip(learned) {
        *t = tau * l + (1.0 - tau) * *t;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCNN";
const CHECKPOINT_VERSION: u32 = 1;

/// JSON manifest stored next to a binary parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    pub param_count: usize,
    pub layers: Vec<LayerSpec>,
}

/// Writes `<stem>.bin` (magic, version, count, little-endian f64s) and
/// `<stem>.json` (shape manifest).
pub fn save_checkpoint(net: &impl Parameterized, name: &str, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        name: name.to_string(),
        param_count: net.num_params(),
        layers: net.layer_specs(),
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("bin"))?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(net.num_params() as u64).to_le_bytes())?;
    for p in net.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Loads parameters saved by [`save_checkpoint`] into `net`, checking the
/// manifest against the network's own layout.
pub fn load_checkpoint(net: &mut impl Parameterized, stem: impl AsRef<Path>) -> Result<Manifest> {
    let stem = stem.as_ref();
    let read = |ext: &str| {
        let path = stem.with_extension(ext);
        std::fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    };
    let manifest: Manifest = serde_json::from_slice(&read("json")?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    if manifest.layers != net.layer_specs() || manifest.param_count != net.num_params() {
        return Err(Error::Checkpoint(
            "layer layout does not match the network".into(),
        ));
    }
    let raw = read("bin")?;
    if raw.len() < 16 || &raw[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    let count = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if version != CHECKPOINT_VERSION || count != net.num_params() || raw.len() != 16 + 8 * count {
        return Err(Error::Checkpoint(
            "blob header does not match the manifest".into(),
        ));
    }
    for (p, chunk) in net.params_mut().iter_mut().zip(raw[16..].chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(manifest)
}
