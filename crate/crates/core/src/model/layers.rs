//! Graph convolution, dense and LSTM layers with their reverse passes.
//!
//! Backward functions accumulate (`+=`) into the supplied gradient buffers.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative at pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn shape_err(layer: &'static str, detail: String) -> HintError {
    HintError::Shape { layer, detail }
}

/// `sigma(A H W)` for one `[n, d_in]` block `H`.
pub fn gc_forward(h_prev: &Array2<f64>, a: &Array2<f64>, w: &Array2<f64>, act: Activation) -> Result<Array2<f64>> {
    Ok(gc_forward_cached(h_prev.view(), a, w, act)?.0)
}

/// Values kept from the forward pass of a graph convolution.
#[derive(Debug, Clone)]
pub struct GcCache {
    /// `A H` per block.
    pub ah: Array2<f64>,
    /// Pre-activation `A H W`.
    pub z: Array2<f64>,
}

/// Graph convolution over a stack of `[n, d_in]` blocks sharing one
/// adjacency: `h_prev` is `[k n, d_in]`, each block propagated by `A`.
pub fn gc_forward_cached(
    h_prev: ArrayView2<f64>,
    a: &Array2<f64>,
    w: &Array2<f64>,
    act: Activation,
) -> Result<(Array2<f64>, GcCache)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(shape_err("graph convolution", format!("adjacency is {}x{}", a.nrows(), a.ncols())));
    }
    if n == 0 || h_prev.nrows() % n != 0 || h_prev.ncols() != w.nrows() {
        return Err(shape_err(
            "graph convolution",
            format!("H {:?}, A {n}x{n}, W {:?}", h_prev.shape(), w.shape()),
        ));
    }
    let mut ah = Array2::<f64>::zeros(h_prev.raw_dim());
    for b in 0..h_prev.nrows() / n {
        let rows = s![b * n..(b + 1) * n, ..];
        ah.slice_mut(rows).assign(&a.dot(&h_prev.slice(rows)));
    }
    let z = ah.dot(w);
    let out = z.mapv(|v| act.apply(v));
    Ok((out, GcCache { ah, z }))
}

/// Reverse pass of [`gc_forward_cached`]. Adds `dL/dW` into `dw` and returns
/// `dL/dH_prev` when requested.
pub fn gc_backward(
    a: &Array2<f64>,
    w: &Array2<f64>,
    cache: &GcCache,
    dout: &Array2<f64>,
    act: Activation,
    dw: &mut Array2<f64>,
    want_input_grad: bool,
) -> Option<Array2<f64>> {
    let mut dz = dout.clone();
    dz.zip_mut_with(&cache.z, |g, &z| *g *= act.derivative(z));
    ndarray::linalg::general_mat_mul(1.0, &cache.ah.t(), &dz, 1.0, dw);
    if !want_input_grad {
        return None;
    }
    let dah = dz.dot(&w.t());
    let n = a.nrows();
    let mut dh = Array2::<f64>::zeros(dah.raw_dim());
    for b in 0..dah.nrows() / n {
        let rows = s![b * n..(b + 1) * n, ..];
        dh.slice_mut(rows).assign(&a.t().dot(&dah.slice(rows)));
    }
    Some(dh)
}

/// Row-wise dense layer: `Z = X W^T + b`, output `sigma(Z)`; `X` is `[k, in]`.
pub fn dense_forward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    act: Activation,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x.ncols() != w.ncols() || b.len() != w.nrows() {
        return Err(shape_err("dense", format!("X {:?}, W {:?}, b {}", x.shape(), w.shape(), b.len())));
    }
    let mut z = x.dot(&w.t());
    z += b;
    let y = z.mapv(|v| act.apply(v));
    Ok((y, z))
}

/// Reverse pass of [`dense_forward`]; returns `dL/dX`.
pub fn dense_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    z: &Array2<f64>,
    dy: &Array2<f64>,
    act: Activation,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let mut dz = dy.clone();
    dz.zip_mut_with(z, |g, &zv| *g *= act.derivative(zv));
    ndarray::linalg::general_mat_mul(1.0, &dz.t(), &x, 1.0, dw);
    *db += &dz.sum_axis(Axis(0));
    dz.dot(w)
}

/// LSTM parameters: `w [4 h_l, m]`, `u [4 h_l, h_l]`, `b [4 h_l]`, gate
/// blocks ordered input, forget, output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a> {
    pub w: &'a Array2<f64>,
    pub u: &'a Array2<f64>,
    pub b: &'a Array1<f64>,
}

impl LstmWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub c_prev: Array1<f64>,
    /// Activated gates `[i, f, o, g]`.
    pub gates: Array1<f64>,
    pub tanh_c: Array1<f64>,
}

/// One LSTM step; returns `(h, c)`.
pub fn lstm_step(
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
    p: LstmWeights,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (h, c, _) = lstm_step_cached(x, h_prev, c_prev, p)?;
    Ok((h, c))
}

pub fn lstm_step_cached(
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
    p: LstmWeights,
) -> Result<(Array1<f64>, Array1<f64>, LstmStepCache)> {
    let hl = p.hidden();
    if p.w.nrows() != 4 * hl || p.u.shape() != [4 * hl, hl] || x.len() != p.w.ncols() || h_prev.len() != hl || c_prev.len() != hl {
        return Err(shape_err(
            "lstm",
            format!("x {}, h {}, c {}, W {:?}, U {:?}, b {}", x.len(), h_prev.len(), c_prev.len(), p.w.shape(), p.u.shape(), p.b.len()),
        ));
    }
    let mut gates = p.w.dot(&x) + p.u.dot(&h_prev) + p.b;
    for (k, g) in gates.iter_mut().enumerate() {
        *g = if k < 3 * hl { sigmoid(*g) } else { g.tanh() };
    }
    let mut c = Array1::<f64>::zeros(hl);
    let mut h = Array1::<f64>::zeros(hl);
    let mut tanh_c = Array1::<f64>::zeros(hl);
    for j in 0..hl {
        let (i, f, o, g) = (gates[j], gates[hl + j], gates[2 * hl + j], gates[3 * hl + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    let cache = LstmStepCache { x: x.to_owned(), h_prev: h_prev.to_owned(), c_prev: c_prev.to_owned(), gates, tanh_c };
    Ok((h, c, cache))
}

/// Gradient buffers for [`LstmWeights`].
#[derive(Debug)]
pub struct LstmGrads<'a> {
    pub w: &'a mut Array2<f64>,
    pub u: &'a mut Array2<f64>,
    pub b: &'a mut Array1<f64>,
}

/// Reverse pass of one step given `dL/dh` and `dL/dc` flowing into it.
/// Returns `(dL/dx, dL/dh_prev, dL/dc_prev)`.
pub fn lstm_step_backward(
    cache: &LstmStepCache,
    p: LstmWeights,
    dh: ArrayView1<f64>,
    dc: ArrayView1<f64>,
    grads: &mut LstmGrads,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let hl = p.hidden();
    let gt = &cache.gates;
    let mut da = Array1::<f64>::zeros(4 * hl);
    let mut dc_prev = Array1::<f64>::zeros(hl);
    for j in 0..hl {
        let (i, f, o, g) = (gt[j], gt[hl + j], gt[2 * hl + j], gt[3 * hl + j]);
        let tc = cache.tanh_c[j];
        let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
        da[j] = dcj * g * i * (1.0 - i);
        da[hl + j] = dcj * cache.c_prev[j] * f * (1.0 - f);
        da[2 * hl + j] = dh[j] * tc * o * (1.0 - o);
        da[3 * hl + j] = dcj * i * (1.0 - g * g);
        dc_prev[j] = dcj * f;
    }
    let da_col = da.view().insert_axis(Axis(1));
    ndarray::linalg::general_mat_mul(1.0, &da_col, &cache.x.view().insert_axis(Axis(0)), 1.0, grads.w);
    ndarray::linalg::general_mat_mul(1.0, &da_col, &cache.h_prev.view().insert_axis(Axis(0)), 1.0, grads.u);
    *grads.b += &da;
    let dx = p.w.t().dot(&da);
    let dh_prev = p.u.t().dot(&da);
    (dx, dh_prev, dc_prev)
}
