//! Toy transducer: causal frame-stacking encoder, previous-token embedding
//! predictor, tanh joint network and a CIF weight predictor with a token
//! classifier. All parameters are f64.

mod data;
mod lattice;
mod loss;
mod train;

use serde::{Deserialize, Serialize};

use crate::cif::{CifParams, Classifier, DEFAULT_KERNEL};
use crate::error::{Error, Result};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

pub use data::{synth_task, Dataset, SynthSpec, Utterance};
pub use lattice::{forward_banded, forward_full, LatticeOutput};
pub use loss::{backward_total, Losses, StepOutput};
pub use train::{train, Adam, Mode, TrainConfig, TrainLog, TrainLogRow, TRAIN_LOG_HEADER};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Features per input frame.
    pub input_dim: usize,
    /// Input frames stacked per encoder step: `x_{t-context+1} .. x_t`.
    pub context: usize,
    pub enc_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    /// Non-blank symbols `V`.
    pub vocab: usize,
    pub cif_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            context: 3,
            enc_dim: 32,
            pred_dim: 16,
            joint_dim: 128,
            vocab: 20,
            cif_kernel: DEFAULT_KERNEL,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("context", self.context),
            ("enc_dim", self.enc_dim),
            ("pred_dim", self.pred_dim),
            ("joint_dim", self.joint_dim),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.cif_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "cif_kernel must be odd, got {}",
                self.cif_kernel
            )));
        }
        Ok(())
    }
}

/// `softmax(W_out tanh(W_enc h_t + W_pred g_u + b))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointParams {
    pub enc_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    /// `V + 1`.
    pub out_dim: usize,
    /// `joint_dim x enc_dim`.
    pub w_enc: Vec<f64>,
    /// `joint_dim x pred_dim`.
    pub w_pred: Vec<f64>,
    /// `out_dim x joint_dim`.
    pub w_out: Vec<f64>,
    pub b: Vec<f64>,
}

impl JointParams {
    pub fn zeros(enc_dim: usize, pred_dim: usize, joint_dim: usize, out_dim: usize) -> Self {
        Self {
            enc_dim,
            pred_dim,
            joint_dim,
            out_dim,
            w_enc: vec![0.0; joint_dim * enc_dim],
            w_pred: vec![0.0; joint_dim * pred_dim],
            w_out: vec![0.0; out_dim * joint_dim],
            b: vec![0.0; joint_dim],
        }
    }
}

/// Pre-softmax joint scores for one `(h_t, g_u)` pair.
pub fn joint_logits(h_t: &[f64], g_u: &[f64], p: &JointParams) -> Result<Vec<f64>> {
    if h_t.len() != p.enc_dim || g_u.len() != p.pred_dim {
        return Err(Error::DimMismatch(format!(
            "joint expects h of {} and g of {}, got {} and {}",
            p.enc_dim,
            p.pred_dim,
            h_t.len(),
            g_u.len()
        )));
    }
    let mut hidden = p.b.clone();
    matvec_add(&p.w_enc, h_t, &mut hidden);
    matvec_add(&p.w_pred, g_u, &mut hidden);
    hidden.iter_mut().for_each(|x| *x = x.tanh());
    let mut z = vec![0.0; p.out_dim];
    matvec_add(&p.w_out, &hidden, &mut z);
    Ok(z)
}

/// `out += W x` with `W` row-major `out.len() x x.len()`.
#[inline]
pub(crate) fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T y` with `W` row-major `y.len() x out.len()`.
#[inline]
pub(crate) fn matvec_t_add(w: &[f64], y: &[f64], out: &mut [f64]) {
    for (yi, row) in y.iter().zip(w.chunks_exact(out.len())) {
        if *yi != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += yi * a);
        }
    }
}

/// `W += y x^T`.
#[inline]
pub(crate) fn outer_add(w: &mut [f64], y: &[f64], x: &[f64]) {
    for (yi, row) in y.iter().zip(w.chunks_exact_mut(x.len())) {
        if *yi != 0.0 {
            row.iter_mut().zip(x).for_each(|(a, b)| *a += yi * b);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// `enc_dim x (context * input_dim)`.
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// `(V + 1) x pred_dim`; row 0 is the blank (start) embedding.
    pub embed: Vec<f64>,
    pub joint: JointParams,
    pub cif: CifParams,
    pub classifier: Classifier,
}

impl ToyModel {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            enc_w: vec![0.0; c.enc_dim * c.context * c.input_dim],
            enc_b: vec![0.0; c.enc_dim],
            embed: vec![0.0; (c.vocab + 1) * c.pred_dim],
            joint: JointParams::zeros(c.enc_dim, c.pred_dim, c.joint_dim, c.vocab + 1),
            cif: CifParams::zeros(c.enc_dim, c.cif_kernel)?,
            classifier: Classifier::zeros(c.vocab, c.enc_dim),
            config,
        })
    }

    /// Uniform fan-in initialization from the `INIT` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut r = rng::split(seed, rng::stream::INIT);
        let c = m.config.clone();
        fill(&mut m.enc_w, c.context * c.input_dim, &mut r);
        fill(&mut m.embed, 1, &mut r);
        fill(&mut m.joint.w_enc, c.enc_dim, &mut r);
        fill(&mut m.joint.w_pred, c.pred_dim, &mut r);
        fill(&mut m.joint.w_out, c.joint_dim, &mut r);
        m.cif = CifParams::random(c.enc_dim, c.cif_kernel, &mut r)?;
        m.classifier = Classifier::random(c.vocab, c.enc_dim, &mut r);
        Ok(m)
    }

    /// Same shapes, all zeros. Used as the gradient container.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    /// Every parameter buffer in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        vec![
            &self.enc_w,
            &self.enc_b,
            &self.embed,
            &self.joint.w_enc,
            &self.joint.w_pred,
            &self.joint.w_out,
            &self.joint.b,
            &self.cif.conv_w,
            &self.cif.conv_b,
            &self.cif.lin_w,
            std::slice::from_ref(&self.cif.lin_b),
            &self.classifier.w,
            &self.classifier.b,
        ]
    }

    /// Mutable counterpart of [`ToyModel::params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.embed,
            &mut self.joint.w_enc,
            &mut self.joint.w_pred,
            &mut self.joint.w_out,
            &mut self.joint.b,
            &mut self.cif.conv_w,
            &mut self.cif.conv_b,
            &mut self.cif.lin_w,
            std::slice::from_mut(&mut self.cif.lin_b),
            &mut self.classifier.w,
            &mut self.classifier.b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// `self += scale * other`, buffer by buffer.
    pub fn add_scaled(&mut self, other: &ToyModel, scale: f64) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn predictor_embedding(&self, token: usize) -> &[f64] {
        let dp = self.config.pred_dim;
        &self.embed[token * dp..(token + 1) * dp]
    }

    /// Encoder output `h`, shape `T x enc_dim`. Frame `t` sees inputs up to `t` only.
    pub fn encode(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let c = &self.config;
        let t_len = match x.dims() {
            [t, d] if *d == c.input_dim && *t >= 1 => *t,
            dims => {
                return Err(Error::DimMismatch(format!(
                    "input must be T x {} with T >= 1, got {dims:?}",
                    c.input_dim
                )))
            }
        };
        let mut h = vec![0.0; t_len * c.enc_dim];
        let mut stacked = vec![0.0; c.context * c.input_dim];
        for t in 0..t_len {
            self.stack_frames(x, t, &mut stacked);
            let out = &mut h[t * c.enc_dim..(t + 1) * c.enc_dim];
            out.copy_from_slice(&self.enc_b);
            matvec_add(&self.enc_w, &stacked, out);
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        Tensor::new(vec![t_len, c.enc_dim], h)
    }

    fn stack_frames(&self, x: &Tensor<f64>, t: usize, out: &mut [f64]) {
        let (ctx, d) = (self.config.context, self.config.input_dim);
        let xd = x.data();
        for c in 0..ctx {
            let dst = &mut out[c * d..(c + 1) * d];
            match (t + c + 1).checked_sub(ctx) {
                Some(src) => dst.copy_from_slice(&xd[src * d..(src + 1) * d]),
                None => dst.fill(0.0),
            }
        }
    }

    pub(crate) fn encoder_backward(
        &self,
        x: &Tensor<f64>,
        h: &Tensor<f64>,
        grad_h: &[f64],
        grads: &mut ToyModel,
    ) {
        let c = &self.config;
        let mut stacked = vec![0.0; c.context * c.input_dim];
        let mut dpre = vec![0.0; c.enc_dim];
        for t in 0..h.dims()[0] {
            let ht = &h.data()[t * c.enc_dim..(t + 1) * c.enc_dim];
            let gt = &grad_h[t * c.enc_dim..(t + 1) * c.enc_dim];
            for ((d, g), hv) in dpre.iter_mut().zip(gt).zip(ht) {
                *d = g * (1.0 - hv * hv);
            }
            self.stack_frames(x, t, &mut stacked);
            outer_add(&mut grads.enc_w, &dpre, &stacked);
            grads.enc_b.iter_mut().zip(&dpre).for_each(|(b, d)| *b += d);
        }
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: Self = serde_json::from_reader(f)?;
        m.config.validate()?;
        let expected = Self::zeros(m.config.clone())?;
        for (a, b) in m.params().iter().zip(expected.params()) {
            if a.len() != b.len() {
                return Err(Error::DimMismatch(
                    "model parameter shapes do not match its config".into(),
                ));
            }
        }
        Ok(m)
    }
}

fn fill(w: &mut [f64], fan_in: usize, r: &mut DetRng) {
    let s = 1.0 / (fan_in as f64).sqrt();
    w.iter_mut().for_each(|v| *v = rng::uniform(r, -s, s));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::softmax;

    fn tiny() -> ToyModel {
        ToyModel::new(
            ModelConfig {
                input_dim: 3,
                context: 2,
                enc_dim: 4,
                pred_dim: 3,
                joint_dim: 5,
                vocab: 3,
                cif_kernel: 3,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn zero_joint_is_uniform() {
        let p = JointParams::zeros(4, 3, 5, 4);
        let z = joint_logits(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 1.0], &p).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        for q in softmax(&z) {
            assert!((q - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_pred_weights_ignore_label_position() {
        let mut m = tiny();
        m.joint.w_pred.fill(0.0);
        let h = [0.3, -0.2, 0.5, 0.1];
        let a = joint_logits(&h, m.predictor_embedding(1), &m.joint).unwrap();
        let b = joint_logits(&h, m.predictor_embedding(3), &m.joint).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_matches_naive_matmul() {
        let m = tiny();
        let p = &m.joint;
        let h = [0.3, -0.2, 0.5, 0.1];
        let g = m.predictor_embedding(2).to_vec();
        let z = joint_logits(&h, &g, p).unwrap();
        for k in 0..p.out_dim {
            let mut s = 0.0;
            for j in 0..p.joint_dim {
                let mut pre = p.b[j];
                for i in 0..p.enc_dim {
                    pre += p.w_enc[j * p.enc_dim + i] * h[i];
                }
                for i in 0..p.pred_dim {
                    pre += p.w_pred[j * p.pred_dim + i] * g[i];
                }
                s += p.w_out[k * p.joint_dim + j] * pre.tanh();
            }
            assert!((z[k] - s).abs() < 1e-13);
        }
    }

    #[test]
    fn joint_rejects_bad_dims() {
        let p = JointParams::zeros(4, 3, 5, 4);
        assert!(matches!(
            joint_logits(&[0.0; 3], &[0.0; 3], &p),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn encoder_is_causal() {
        let m = tiny();
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let h = m.encode(&x).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[9..].fill(5.0);
        let h2 = m.encode(&x2).unwrap();
        assert_eq!(h.data()[..12], h2.data()[..12]);
        assert_ne!(h.data()[12..], h2.data()[12..]);
    }

    #[test]
    fn json_round_trip() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save_json(&path).unwrap();
        assert_eq!(ToyModel::load_json(&path).unwrap(), m);
    }

    #[test]
    fn params_cover_every_buffer() {
        let m = tiny();
        let c = &m.config;
        let expected = c.enc_dim * c.context * c.input_dim
            + c.enc_dim
            + (c.vocab + 1) * c.pred_dim
            + c.joint_dim * (c.enc_dim + c.pred_dim + 1)
            + (c.vocab + 1) * c.joint_dim
            + c.enc_dim * c.enc_dim * c.cif_kernel
            + 2 * c.enc_dim
            + 1
            + c.vocab * (c.enc_dim + 1);
        assert_eq!(m.num_params(), expected);
    }
}
