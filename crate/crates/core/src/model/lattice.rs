//! Joint-network evaluation over a set of lattice rows and its backward pass.

use crate::band::{BandWindow, BandedLattice};
use crate::error::{Error, Result};
use crate::numeric::log_softmax_into;
use crate::rnnt::{LabelSeq, LogitLattice, BLANK};
use crate::tensor::Tensor;

use super::{matvec_add, matvec_t_add, outer_add, ToyModel};

/// A materialized lattice plus the number of joint evaluations it took.
#[derive(Clone, Debug)]
pub struct LatticeOutput<L> {
    pub lattice: L,
    pub joint_evals: usize,
}

/// Activations kept for the backward pass. Rows are in lattice order.
pub(crate) struct JointCache {
    /// Predictor input token per label position: blank, then `y_1 .. y_U`.
    pred_tokens: Vec<usize>,
    pub rows: Vec<(usize, usize)>,
    /// `rows x joint_dim` tanh outputs.
    hidden: Vec<f64>,
    /// `rows x (V+1)`.
    pub log_probs: Vec<f64>,
}

pub(crate) fn pred_tokens(y: &LabelSeq) -> Vec<usize> {
    std::iter::once(BLANK)
        .chain(y.tokens().iter().copied())
        .collect()
}

fn check_labels(model: &ToyModel, y: &LabelSeq) -> Result<()> {
    let v = model.config.vocab;
    if let Some(&token) = y.tokens().iter().find(|&&k| k == BLANK || k > v) {
        return Err(Error::InvalidLabel { token, vocab: v });
    }
    Ok(())
}

/// Evaluates the joint network on `rows` only.
pub(crate) fn eval_rows(
    model: &ToyModel,
    h: &Tensor<f64>,
    y: &LabelSeq,
    rows: Vec<(usize, usize)>,
) -> Result<JointCache> {
    check_labels(model, y)?;
    let jp = &model.joint;
    let (dj, d, v1) = (jp.joint_dim, jp.enc_dim, jp.out_dim);
    let t_len = h.dims()[0];
    let mut enc_proj = vec![0.0; t_len * dj];
    for (t, out) in enc_proj.chunks_exact_mut(dj).enumerate() {
        out.copy_from_slice(&jp.b);
        matvec_add(&jp.w_enc, &h.data()[t * d..(t + 1) * d], out);
    }
    let pred_tokens = pred_tokens(y);
    let mut pred_proj = vec![0.0; pred_tokens.len() * dj];
    for (out, &tok) in pred_proj.chunks_exact_mut(dj).zip(&pred_tokens) {
        matvec_add(&jp.w_pred, model.predictor_embedding(tok), out);
    }
    let mut hidden = vec![0.0; rows.len() * dj];
    let mut log_probs = vec![0.0; rows.len() * v1];
    let mut z = vec![0.0; v1];
    for (r, &(t, u)) in rows.iter().enumerate() {
        let hid = &mut hidden[r * dj..(r + 1) * dj];
        let (a, b) = (
            &enc_proj[t * dj..(t + 1) * dj],
            &pred_proj[u * dj..(u + 1) * dj],
        );
        for ((o, x), y) in hid.iter_mut().zip(a).zip(b) {
            *o = (x + y).tanh();
        }
        z.fill(0.0);
        matvec_add(&jp.w_out, hid, &mut z);
        log_softmax_into(&z, &mut log_probs[r * v1..(r + 1) * v1])?;
    }
    Ok(JointCache {
        pred_tokens,
        rows,
        hidden,
        log_probs,
    })
}

pub(crate) fn full_rows(t_len: usize, u: usize) -> Vec<(usize, usize)> {
    (0..t_len)
        .flat_map(|t| (0..=u).map(move |u| (t, u)))
        .collect()
}

pub(crate) fn band_rows(window: &BandWindow) -> Vec<(usize, usize)> {
    let w = window.width();
    window
        .starts()
        .iter()
        .enumerate()
        .flat_map(|(t, &o)| (o..o + w).map(move |u| (t, u)))
        .collect()
}

/// Full `(T, U+1, V+1)` lattice.
pub fn forward_full(
    model: &ToyModel,
    x: &Tensor<f64>,
    y: &LabelSeq,
) -> Result<LatticeOutput<LogitLattice<f64>>> {
    let h = model.encode(x)?;
    let t_len = h.dims()[0];
    let cache = eval_rows(model, &h, y, full_rows(t_len, y.len()))?;
    let joint_evals = cache.rows.len();
    let dims = vec![t_len, y.len() + 1, model.joint.out_dim];
    Ok(LatticeOutput {
        lattice: LogitLattice::new(Tensor::new(dims, cache.log_probs)?)?,
        joint_evals,
    })
}

/// Banded `(T, S, V+1)` lattice; the joint runs only on in-band rows.
pub fn forward_banded(
    model: &ToyModel,
    x: &Tensor<f64>,
    y: &LabelSeq,
    window: &BandWindow,
) -> Result<LatticeOutput<BandedLattice<f64>>> {
    let h = model.encode(x)?;
    let t_len = h.dims()[0];
    if window.t_len() != t_len || window.u_len() != y.len() {
        return Err(Error::DimMismatch(format!(
            "window for T={} U={}, input T={t_len} U={}",
            window.t_len(),
            window.u_len(),
            y.len()
        )));
    }
    let cache = eval_rows(model, &h, y, band_rows(window))?;
    let joint_evals = cache.rows.len();
    let dims = vec![t_len, window.width(), model.joint.out_dim];
    Ok(LatticeOutput {
        lattice: BandedLattice::new(window.clone(), Tensor::new(dims, cache.log_probs)?)?,
        joint_evals,
    })
}

/// Backpropagates `grad_lp` (gradient w.r.t. the cached log-probabilities,
/// scaled by `scale`) into the joint, embedding and `grad_h`.
pub(crate) fn joint_backward(
    model: &ToyModel,
    h: &Tensor<f64>,
    cache: &JointCache,
    grad_lp: &[f64],
    scale: f64,
    grads: &mut ToyModel,
    grad_h: &mut [f64],
) {
    let jp = &model.joint;
    let (dj, d, dp, v1) = (jp.joint_dim, jp.enc_dim, jp.pred_dim, jp.out_dim);
    let t_len = h.dims()[0];
    let mut d_enc = vec![0.0; t_len * dj];
    let mut d_pred = vec![0.0; cache.pred_tokens.len() * dj];
    let mut dz = vec![0.0; v1];
    let mut dhid = vec![0.0; dj];
    for (r, &(t, u)) in cache.rows.iter().enumerate() {
        let g = &grad_lp[r * v1..(r + 1) * v1];
        let total: f64 = g.iter().sum();
        if total == 0.0 && g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let lp = &cache.log_probs[r * v1..(r + 1) * v1];
        for ((o, gk), l) in dz.iter_mut().zip(g).zip(lp) {
            *o = scale * (gk - l.exp() * total);
        }
        let hid = &cache.hidden[r * dj..(r + 1) * dj];
        outer_add(&mut grads.joint.w_out, &dz, hid);
        dhid.fill(0.0);
        matvec_t_add(&jp.w_out, &dz, &mut dhid);
        for ((dh, hv), (de, dpv)) in dhid.iter_mut().zip(hid).zip(
            d_enc[t * dj..(t + 1) * dj]
                .iter_mut()
                .zip(d_pred[u * dj..(u + 1) * dj].iter_mut()),
        ) {
            *dh *= 1.0 - hv * hv;
            *de += *dh;
            *dpv += *dh;
        }
    }
    for t in 0..t_len {
        let de = &d_enc[t * dj..(t + 1) * dj];
        outer_add(&mut grads.joint.w_enc, de, &h.data()[t * d..(t + 1) * d]);
        grads.joint.b.iter_mut().zip(de).for_each(|(b, x)| *b += x);
        matvec_t_add(&jp.w_enc, de, &mut grad_h[t * d..(t + 1) * d]);
    }
    let mut dg = vec![0.0; dp];
    for (u, &tok) in cache.pred_tokens.iter().enumerate() {
        let dpu = &d_pred[u * dj..(u + 1) * dj];
        outer_add(&mut grads.joint.w_pred, dpu, model.predictor_embedding(tok));
        dg.fill(0.0);
        matvec_t_add(&jp.w_pred, dpu, &mut dg);
        grads.embed[tok * dp..(tok + 1) * dp]
            .iter_mut()
            .zip(&dg)
            .for_each(|(e, x)| *e += x);
    }
}
