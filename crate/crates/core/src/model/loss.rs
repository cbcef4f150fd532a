//! Total loss for one utterance and its gradient w.r.t. every parameter.

use crate::band::{bat_loss, build_window, BandWindow, BandedLattice};
use crate::cif::{
    cif_backward, cif_boundary, cif_ce_loss, cif_fire, cif_predict_backward, cif_predict_weights,
    cif_quantity_loss, cif_scale, clamp_weights, DEFAULT_THRESHOLD,
};
use crate::error::Result;
use crate::rnnt::{rnnt_loss, LabelSeq, LogitLattice};
use crate::tensor::Tensor;

use super::lattice::{band_rows, eval_rows, full_rows, joint_backward};
use super::train::{Mode, TrainConfig};
use super::ToyModel;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    /// Weighted sum of the three terms below.
    pub total: f64,
    /// Transducer loss, full or banded by mode.
    pub trans: f64,
    pub ce: f64,
    pub qua: f64,
}

impl Losses {
    pub(crate) fn accumulate(&mut self, other: &Losses, scale: f64) {
        self.total += scale * other.total;
        self.trans += scale * other.trans;
        self.ce += scale * other.ce;
        self.qua += scale * other.qua;
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Same layout as the model.
    pub grads: ToyModel,
    pub losses: Losses,
    /// Joint-network evaluations spent on the transducer lattice.
    pub joint_evals: usize,
    /// Window used for the transducer term (full cover in full mode).
    pub window: BandWindow,
}

/// Loss terms and gradients for one utterance under `cfg`'s mode and
/// coefficients. In bat mode the window is rebuilt from the current CIF
/// weights.
pub fn backward_total(
    model: &ToyModel,
    x: &Tensor<f64>,
    y: &LabelSeq,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let u = y.len();
    let h = model.encode(x)?;
    let t_len = h.dims()[0];
    let d = model.config.enc_dim;
    let mut grads = model.zeros_like();
    let mut grad_h = vec![0.0; t_len * d];

    let pred = cif_predict_weights(&h, &model.cif)?;
    let weights = cif_scale(&pred.raw, u)?;
    let window = match cfg.mode {
        Mode::Full => BandWindow::full(t_len, u),
        Mode::Bat => {
            let c = cif_boundary(&clamp_weights(&weights.scaled));
            build_window(&c, u, cfg.r_d, cfg.r_u, t_len)?
        }
    };

    let (trans, joint_evals) = {
        let rows = match cfg.mode {
            Mode::Full => full_rows(t_len, u),
            Mode::Bat => band_rows(&window),
        };
        let cache = eval_rows(model, &h, y, rows)?;
        let evals = cache.rows.len();
        let v1 = model.joint.out_dim;
        let lp = Tensor::new(vec![t_len, window.width(), v1], cache.log_probs.clone())?;
        let res = match cfg.mode {
            Mode::Full => rnnt_loss(&LogitLattice::new(lp)?, y)?,
            Mode::Bat => bat_loss(&BandedLattice::new(window.clone(), lp)?, y)?,
        };
        if cfg.lambda_trans != 0.0 && !res.infeasible {
            joint_backward(
                model,
                &h,
                &cache,
                res.grad.data(),
                cfg.lambda_trans,
                &mut grads,
                &mut grad_h,
            );
        }
        (res.loss, evals)
    };

    let fired = cif_fire(&weights.scaled, &h, u, DEFAULT_THRESHOLD)?;
    let ce = cif_ce_loss(&fired, y, &model.classifier)?;
    let (qua, qua_grad) = cif_quantity_loss(&pred.raw, u);

    let mut grad_raw = vec![0.0; t_len];
    if cfg.lambda_ce != 0.0 {
        let s = cfg.lambda_ce;
        grads
            .classifier
            .w
            .iter_mut()
            .zip(&ce.grad_w)
            .for_each(|(g, x)| *g += s * x);
        grads
            .classifier
            .b
            .iter_mut()
            .zip(&ce.grad_b)
            .for_each(|(g, x)| *g += s * x);
        let grad_e: Vec<f64> = ce.grad_e.iter().map(|g| s * g).collect();
        let cg = cif_backward(&grad_e, &fired, &h, &weights)?;
        grad_raw.iter_mut().zip(&cg.raw).for_each(|(g, x)| *g += x);
        grad_h.iter_mut().zip(&cg.h).for_each(|(g, x)| *g += x);
    }
    if cfg.lambda_qua != 0.0 {
        grad_raw
            .iter_mut()
            .zip(&qua_grad)
            .for_each(|(g, x)| *g += cfg.lambda_qua * x);
    }
    let (pg, gh) = cif_predict_backward(&grad_raw, &h, &model.cif, &pred)?;
    grads
        .cif
        .conv_w
        .iter_mut()
        .zip(&pg.conv_w)
        .for_each(|(g, x)| *g += x);
    grads
        .cif
        .conv_b
        .iter_mut()
        .zip(&pg.conv_b)
        .for_each(|(g, x)| *g += x);
    grads
        .cif
        .lin_w
        .iter_mut()
        .zip(&pg.lin_w)
        .for_each(|(g, x)| *g += x);
    grads.cif.lin_b += pg.lin_b;
    grad_h.iter_mut().zip(&gh).for_each(|(g, x)| *g += x);

    model.encoder_backward(x, &h, &grad_h, &mut grads);

    let losses = Losses {
        total: cfg.lambda_trans * trans + cfg.lambda_ce * ce.loss + cfg.lambda_qua * qua,
        trans,
        ce: ce.loss,
        qua,
    };
    Ok(StepOutput {
        grads,
        losses,
        joint_evals,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (ToyModel, Tensor<f64>, LabelSeq) {
        let cfg = ModelConfig {
            input_dim: 3,
            context: 2,
            enc_dim: 4,
            pred_dim: 3,
            joint_dim: 4,
            vocab: 3,
            cif_kernel: 3,
        };
        let m = ToyModel::new(cfg, 3).unwrap();
        let x = Tensor::new(
            vec![5, 3],
            (0..15).map(|i| ((i * 5) % 7) as f64 * 0.2 - 0.5).collect(),
        )
        .unwrap();
        (m, x, LabelSeq::new(vec![1, 3], 3).unwrap())
    }

    #[test]
    fn zero_coefficients_give_zero_gradients() {
        let (m, x, y) = setup();
        let cfg = TrainConfig {
            lambda_trans: 0.0,
            lambda_ce: 0.0,
            lambda_qua: 0.0,
            ..TrainConfig::default()
        };
        let out = backward_total(&m, &x, &y, &cfg).unwrap();
        assert!(out
            .grads
            .params()
            .iter()
            .all(|p| p.iter().all(|&g| g == 0.0)));
        assert_eq!(out.losses.total, 0.0);
        assert!(out.losses.trans > 0.0);
    }

    #[test]
    fn full_cover_band_matches_full_mode() {
        let (m, x, y) = setup();
        let full = backward_total(&m, &x, &y, &TrainConfig::default()).unwrap();
        let bat_cfg = TrainConfig {
            mode: Mode::Bat,
            r_d: 2,
            r_u: 2,
            ..TrainConfig::default()
        };
        let bat = backward_total(&m, &x, &y, &bat_cfg).unwrap();
        assert!((full.losses.total - bat.losses.total).abs() < 1e-12);
        for (a, b) in full.grads.params().iter().zip(bat.grads.params()) {
            for (ga, gb) in a.iter().zip(b) {
                assert!((ga - gb).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn bat_mode_counts_band_rows() {
        let (m, x, _) = setup();
        let y = LabelSeq::new(vec![1, 3, 2, 2], 3).unwrap();
        let cfg = TrainConfig {
            mode: Mode::Bat,
            r_d: 1,
            r_u: 0,
            ..TrainConfig::default()
        };
        let out = backward_total(&m, &x, &y, &cfg).unwrap();
        assert_eq!(out.window.width(), 3);
        assert_eq!(out.joint_evals, 5 * 3);
    }
}
