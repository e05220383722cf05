//! Full forward and reverse pass of the per-level predictor.
//!
//! Per history day: two graph convolutions over the ST window, flatten,
//! append the day's temporal vector, dense layer, LSTM step. Spatial branch:
//! one graph convolution, flatten, dense layer. Output: a linear layer on the
//! last LSTM state concatenated with the spatial embedding.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::layers::{
    dense_backward, dense_forward, gc_backward, gc_forward_cached, lstm_step_backward, lstm_step_cached, Activation,
    GcCache, LstmGrads, LstmStepCache, LstmWeights,
};
use super::params::{ModelDims, ModelParams};
use crate::error::{HintError, Result};
use crate::sample::{SubregionSample, HISTORY_DAYS};

/// Intermediate values needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    gc1: GcCache,
    gc2: GcCache,
    fc_in_x: Array2<f64>,
    fc_in_z: Array2<f64>,
    lstm: Vec<LstmStepCache>,
    gc_sp: GcCache,
    fc_sp_x: Array2<f64>,
    fc_sp_z: Array2<f64>,
    head_x: Array2<f64>,
}

fn check_finite(layer: &'static str, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HintError::NonFinite(format!("non-finite values after {layer}")))
    }
}

/// Verifies that a sample has the shapes the model expects.
pub fn check_sample(sample: &SubregionSample, d: &ModelDims) -> Result<()> {
    let w2 = d.w2();
    let ok = sample.st.dim() == (HISTORY_DAYS, w2, d.n_st)
        && sample.temporal.dim() == (HISTORY_DAYS, d.n_t)
        && sample.spatial.dim() == (w2, d.n_s)
        && sample.adjacency.dim() == (w2, w2);
    if ok {
        Ok(())
    } else {
        Err(HintError::Shape {
            layer: "input",
            detail: format!(
                "sample st {:?} temporal {:?} spatial {:?} adjacency {:?} vs w={} n_st={} n_t={} n_s={}",
                sample.st.dim(),
                sample.temporal.dim(),
                sample.spatial.dim(),
                sample.adjacency.dim(),
                d.w,
                d.n_st,
                d.n_t,
                d.n_s
            ),
        })
    }
}

/// Predicts the target count of one sample.
pub fn forward(sample: &SubregionSample, p: &ModelParams) -> Result<(f64, ForwardCache)> {
    let d = p.dims;
    check_sample(sample, &d)?;
    let act = d.activation;
    let w2 = d.w2();
    let a = &sample.adjacency;

    let st = sample
        .st
        .view()
        .into_shape_with_order((HISTORY_DAYS * w2, d.n_st))
        .map_err(|e| HintError::Shape { layer: "input", detail: e.to_string() })?;
    let (h1, gc1) = gc_forward_cached(st, a, &p.gc_st_1, act)?;
    check_finite("graph convolution 1", &h1)?;
    let (h2, gc2) = gc_forward_cached(h1.view(), a, &p.gc_st_2, act)?;
    check_finite("graph convolution 2", &h2)?;

    let flat = h2.into_shape_with_order((HISTORY_DAYS, w2 * d.h)).expect("contiguous");
    let fc_in_x = concatenate(Axis(1), &[flat.view(), sample.temporal.view()]).expect("equal rows");
    let (lstm_in, fc_in_z) = dense_forward(fc_in_x.view(), &p.fc_in_w, &p.fc_in_b, act)?;
    check_finite("fc-in", &lstm_in)?;

    let lw = LstmWeights { w: &p.lstm_w, u: &p.lstm_u, b: &p.lstm_b };
    let mut h = Array1::<f64>::zeros(d.h_l);
    let mut c = Array1::<f64>::zeros(d.h_l);
    let mut lstm = Vec::with_capacity(HISTORY_DAYS);
    for t in 0..HISTORY_DAYS {
        let (hn, cn, cache) = lstm_step_cached(lstm_in.row(t), h.view(), c.view(), lw)?;
        h = hn;
        c = cn;
        lstm.push(cache);
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(HintError::NonFinite("non-finite values after lstm".into()));
    }

    let (g, gc_sp) = gc_forward_cached(sample.spatial.view(), a, &p.gc_spatial, act)?;
    check_finite("spatial graph convolution", &g)?;
    let fc_sp_x = g.into_shape_with_order((1, w2 * d.h)).expect("contiguous");
    let (s_emb, fc_sp_z) = dense_forward(fc_sp_x.view(), &p.fc_spatial_w, &p.fc_spatial_b, act)?;
    check_finite("fc-spatial", &s_emb)?;

    let head_x = concatenate(Axis(1), &[h.view().insert_axis(Axis(0)), s_emb.view()]).expect("one row");
    let (y, _) = dense_forward(head_x.view(), &p.fc_out_w, &p.fc_out_b, Activation::Identity)?;
    let y = y[[0, 0]];
    if !y.is_finite() {
        return Err(HintError::NonFinite("non-finite values after fc-out".into()));
    }
    Ok((y, ForwardCache { gc1, gc2, fc_in_x, fc_in_z, lstm, gc_sp, fc_sp_x, fc_sp_z, head_x }))
}

/// Prediction without keeping the cache.
pub fn predict(sample: &SubregionSample, p: &ModelParams) -> Result<f64> {
    forward(sample, p).map(|r| r.0)
}

/// Adds `dy * d(y_hat)/d(theta)` for one sample into `grads`.
pub fn backward(sample: &SubregionSample, p: &ModelParams, cache: &ForwardCache, dy: f64, grads: &mut ModelParams) {
    let d = p.dims;
    let act = d.activation;
    let w2 = d.w2();
    let a = &sample.adjacency;

    let dhead = Array2::from_elem((1, 1), dy);
    let head_z = Array2::zeros((1, 1));
    let dhead_x = dense_backward(
        cache.head_x.view(),
        &p.fc_out_w,
        &head_z,
        &dhead,
        Activation::Identity,
        &mut grads.fc_out_w,
        &mut grads.fc_out_b,
    );
    let dh_last = dhead_x.slice(s![0, ..d.h_l]).to_owned();
    let ds = dhead_x.slice(s![.., d.h_l..]).to_owned();

    let dfc_sp_x = dense_backward(
        cache.fc_sp_x.view(),
        &p.fc_spatial_w,
        &cache.fc_sp_z,
        &ds,
        act,
        &mut grads.fc_spatial_w,
        &mut grads.fc_spatial_b,
    );
    let dg = dfc_sp_x.into_shape_with_order((w2, d.h)).expect("contiguous");
    gc_backward(a, &p.gc_spatial, &cache.gc_sp, &dg, act, &mut grads.gc_spatial, false);

    let lw = LstmWeights { w: &p.lstm_w, u: &p.lstm_u, b: &p.lstm_b };
    let mut lg = LstmGrads { w: &mut grads.lstm_w, u: &mut grads.lstm_u, b: &mut grads.lstm_b };
    let mut dlstm_in = Array2::<f64>::zeros((HISTORY_DAYS, d.m));
    let mut dh = dh_last;
    let mut dc = Array1::<f64>::zeros(d.h_l);
    for t in (0..HISTORY_DAYS).rev() {
        let (dx, dh_prev, dc_prev) = lstm_step_backward(&cache.lstm[t], lw, dh.view(), dc.view(), &mut lg);
        dlstm_in.row_mut(t).assign(&dx);
        dh = dh_prev;
        dc = dc_prev;
    }

    let dfc_in_x = dense_backward(
        cache.fc_in_x.view(),
        &p.fc_in_w,
        &cache.fc_in_z,
        &dlstm_in,
        act,
        &mut grads.fc_in_w,
        &mut grads.fc_in_b,
    );
    let dh2 = dfc_in_x
        .slice(s![.., ..w2 * d.h])
        .to_owned()
        .into_shape_with_order((HISTORY_DAYS * w2, d.h))
        .expect("contiguous");
    let dh1 = gc_backward(a, &p.gc_st_2, &cache.gc2, &dh2, act, &mut grads.gc_st_2, true).expect("requested");
    gc_backward(a, &p.gc_st_1, &cache.gc1, &dh1, act, &mut grads.gc_st_1, false);
}

/// `(1/T) sum (y - y_hat)^2`.
pub fn loss_mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(HintError::InvalidInput(format!(
            "loss needs equal nonempty inputs, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions.iter().zip(targets).map(|(p, y)| (y - p).powi(2)).sum::<f64>() / predictions.len() as f64)
}

/// Batch MSE and its exact gradient, accumulated in batch order.
pub fn gradients(batch: &[SubregionSample], p: &ModelParams) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(HintError::InvalidInput("gradient of an empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads = ModelParams::zeros(p.dims);
    let mut loss = 0.0;
    for sample in batch {
        let (y, cache) = forward(sample, p)?;
        let r = y - sample.target;
        loss += r * r;
        backward(sample, p, &cache, 2.0 * r / n, &mut grads);
    }
    if !grads.is_finite() {
        return Err(HintError::NonFinite("non-finite gradient".into()));
    }
    Ok((loss / n, grads))
}

/// Mean squared error of the model over samples.
pub fn evaluate_mse<'a>(samples: impl IntoIterator<Item = &'a SubregionSample>, p: &ModelParams) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let y = predict(s, p)?;
        sum += (y - s.target).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(HintError::InvalidInput("mse over zero samples".into()));
    }
    Ok(sum / n as f64)
}
