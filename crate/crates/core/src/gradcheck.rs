//! Central finite differences for gradient verification.
//!
//! Everything here evaluates the loss as a black box; nothing reuses the
//! analytic backward passes it is used to check.

use crate::band::{bat_loss, BandedLattice};
use crate::cif::{cif_backward, cif_ce_loss, cif_fire, cif_scale, Classifier, FiredEmbeddings};
use crate::error::Result;
use crate::model::{backward_total, ToyModel, TrainConfig};
use crate::numeric::log_softmax;
use crate::rng::{self, DetRng};
use crate::rnnt::{rnnt_loss, LabelSeq, LogitLattice};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central difference of `f` at `x` along every coordinate.
pub fn central_diff<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Normalizes every row of a `(.., V+1)` score buffer.
pub fn normalize_rows(scores: &[f64], v1: usize) -> Vec<f64> {
    scores
        .chunks_exact(v1)
        .flat_map(|row| log_softmax(row).expect("finite scores"))
        .collect()
}

/// Projects a gradient w.r.t. log-probabilities onto perturbations that
/// keep every row normalized: `g_k - p_k * sum_j g_j`.
pub fn project_row_normalized(grad: &[f64], log_probs: &[f64], v1: usize) -> Vec<f64> {
    grad.chunks_exact(v1)
        .zip(log_probs.chunks_exact(v1))
        .flat_map(|(g, lp)| {
            let total: f64 = g.iter().sum();
            g.iter()
                .zip(lp)
                .map(move |(gk, l)| gk - l.exp() * total)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Random normalized lattice of shape `(T, U+1, V+1)` and labels in `1..=V`.
pub fn random_instance(
    rng: &mut DetRng,
    t_len: usize,
    u: usize,
    v: usize,
) -> (LogitLattice<f64>, LabelSeq) {
    let n = t_len * (u + 1) * (v + 1);
    let scores: Vec<f64> = (0..n).map(|_| 1.5 * rng::normal(rng)).collect();
    let lat = LogitLattice::new(
        Tensor::new(vec![t_len, u + 1, v + 1], normalize_rows(&scores, v + 1)).unwrap(),
    )
    .unwrap();
    let labels = (0..u)
        .map(|_| 1 + (rng::uniform(rng, 0.0, v as f64) as usize).min(v - 1))
        .collect();
    (lat, LabelSeq::new(labels, v).unwrap())
}

/// Maximum relative error between the analytic gradient of the full loss
/// and central differences, with each perturbed row renormalized.
pub fn check_rnnt_grad(lat: &LogitLattice<f64>, y: &LabelSeq, step: f64) -> Result<f64> {
    let v1 = lat.vocab();
    let dims = lat.log_probs().dims().to_vec();
    let base = lat.log_probs().data().to_vec();
    let analytic = rnnt_loss(lat, y)?.grad.into_data();
    let projected = project_row_normalized(&analytic, &base, v1);
    let numeric = central_diff(&base, step, |x| {
        let renorm = normalize_rows(x, v1);
        let lat = LogitLattice::new(Tensor::new(dims.clone(), renorm).unwrap()).unwrap();
        rnnt_loss(&lat, y).unwrap().loss
    });
    Ok(max_rel_err(&projected, &numeric))
}

/// Same check as [`check_rnnt_grad`] for the banded loss.
pub fn check_bat_grad(lat: &BandedLattice<f64>, y: &LabelSeq, step: f64) -> Result<f64> {
    let v1 = lat.vocab();
    let dims = lat.log_probs().dims().to_vec();
    let base = lat.log_probs().data().to_vec();
    let analytic = bat_loss(lat, y)?.grad.into_data();
    let projected = project_row_normalized(&analytic, &base, v1);
    let window = lat.window().clone();
    let numeric = central_diff(&base, step, |x| {
        let renorm = normalize_rows(x, v1);
        let lat =
            BandedLattice::new(window.clone(), Tensor::new(dims.clone(), renorm).unwrap()).unwrap();
        bat_loss(&lat, y).unwrap().loss
    });
    Ok(max_rel_err(&projected, &numeric))
}

/// Distance from the nearest integer over all prefix sums of `weights`,
/// excluding the final total. Finite differences are only meaningful when
/// this is well above the step.
pub fn crossing_margin(weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    let n = weights.len();
    weights[..n.saturating_sub(1)]
        .iter()
        .map(|w| {
            acc += w;
            (acc - acc.round()).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Checks the CIF backward pass on `L = <upstream, fire(scale(raw), h)>`,
/// w.r.t. both `raw` and `h`.
pub fn check_cif_backward(
    raw: &[f64],
    h: &Tensor<f64>,
    u: usize,
    upstream: &[f64],
    step: f64,
) -> Result<f64> {
    let weights = cif_scale(raw, u)?;
    let fired = cif_fire(&weights.scaled, h, u, 1.0)?;
    let g = cif_backward(upstream, &fired, h, &weights)?;
    let objective = |raw: &[f64], hd: &[f64]| -> f64 {
        let h = Tensor::new(h.dims().to_vec(), hd.to_vec()).unwrap();
        let w = cif_scale(raw, u).unwrap();
        let e = cif_fire(&w.scaled, &h, u, 1.0).unwrap();
        e.integrated
            .data()
            .iter()
            .zip(upstream)
            .map(|(a, b)| a * b)
            .sum()
    };
    let num_raw = central_diff(raw, step, |r| objective(r, h.data()));
    let num_h = central_diff(h.data(), step, |hd| objective(raw, hd));
    Ok(max_rel_err(&g.raw, &num_raw).max(max_rel_err(&g.h, &num_h)))
}

/// Checks the classifier cross-entropy w.r.t. its weights, biases and the
/// integrated embeddings.
pub fn check_cif_ce(
    fired: &FiredEmbeddings<f64>,
    y: &LabelSeq,
    clf: &Classifier,
    step: f64,
) -> Result<f64> {
    let out = cif_ce_loss(fired, y, clf)?;
    let with_e = |e: &[f64], clf: &Classifier| -> f64 {
        let mut f = fired.clone();
        f.integrated = Tensor::new(fired.integrated.dims().to_vec(), e.to_vec()).unwrap();
        cif_ce_loss(&f, y, clf).unwrap().loss
    };
    let e0 = fired.integrated.data();
    let num_w = central_diff(&clf.w, step, |w| {
        with_e(
            e0,
            &Classifier {
                w: w.to_vec(),
                ..clf.clone()
            },
        )
    });
    let num_b = central_diff(&clf.b, step, |b| {
        with_e(
            e0,
            &Classifier {
                b: b.to_vec(),
                ..clf.clone()
            },
        )
    });
    let num_e = central_diff(e0, step, |e| with_e(e, clf));
    Ok(max_rel_err(&out.grad_w, &num_w)
        .max(max_rel_err(&out.grad_b, &num_b))
        .max(max_rel_err(&out.grad_e, &num_e)))
}

/// Checks every parameter gradient of the total loss of one utterance.
pub fn check_model_grad(
    model: &ToyModel,
    x: &Tensor<f64>,
    y: &LabelSeq,
    cfg: &TrainConfig,
    step: f64,
) -> Result<f64> {
    let analytic = backward_total(model, x, y, cfg)?.grads;
    let flat_analytic: Vec<f64> = analytic.params().concat();
    let base: Vec<f64> = model.params().concat();
    let numeric = central_diff(&base, step, |p| {
        let mut m = model.clone();
        let mut off = 0;
        for buf in m.params_mut() {
            let n = buf.len();
            buf.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        backward_total(&m, x, y, cfg).unwrap().losses.total
    });
    Ok(max_rel_err(&flat_analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic() {
        let g = central_diff(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(rel_err(1e-12, 2e-12) < 1e-6);
    }

    #[test]
    fn small_rnnt_check_passes() {
        let mut rng = rng::split(7, rng::stream::CHECK);
        let (lat, y) = random_instance(&mut rng, 3, 2, 3);
        assert!(check_rnnt_grad(&lat, &y, FD_STEP).unwrap() < 1e-4);
    }
}
