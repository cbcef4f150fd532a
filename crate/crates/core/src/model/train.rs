//! Deterministic mini-batch training with Adam.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decode::{edit_distance, greedy_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::rng;

use super::data::Dataset;
use super::loss::{backward_total, Losses};
use super::ToyModel;

pub const TRAIN_LOG_HEADER: &str = "step,loss_total,loss_trans,loss_ce,loss_qua,token_err";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Transducer loss over the whole lattice.
    Full,
    /// Transducer loss restricted to the CIF-guided band.
    Bat,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "bat" => Ok(Self::Bat),
            other => Err(Error::InvalidConfig(format!(
                "mode must be full or bat, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub r_d: usize,
    pub r_u: usize,
    pub lambda_trans: f64,
    pub lambda_ce: f64,
    pub lambda_qua: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled L2 decay applied by the optimizer, per unit of learning rate.
    pub weight_decay: f64,
    /// Linearly anneal the learning rate to zero over `max_steps`.
    pub lr_decay: bool,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early once this many updates have run.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            r_d: 2,
            r_u: 2,
            lambda_trans: 1.0,
            lambda_ce: 1.0,
            lambda_qua: 1.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_decay: false,
            seed: 0,
            epochs: 1,
            batch_size: 8,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_trans, self.lambda_ce, self.lambda_qua];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig(
                "loss coefficients must be finite and >= 0".into(),
            ));
        }
        if !(self.lr >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::InvalidConfig(
                "need lr >= 0 and betas in [0, 1)".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.lr_decay && self.max_steps.is_none() {
            return Err(Error::InvalidConfig("lr_decay needs max_steps".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: ToyModel,
    v: ToyModel,
}

impl Adam {
    pub fn new(model: &ToyModel, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn update(&mut self, model: &mut ToyModel, grads: &ToyModel) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let params = model.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.params()).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= self.lr
                    * ((m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub losses: Losses,
    /// Greedy-decoding token error on the step's batch, before the update.
    pub token_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    /// Joint evaluations per step, summed over the batch.
    pub joint_evals: Vec<usize>,
    /// `sum(T * S)` over each step's batch.
    pub band_cells: Vec<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                r.step, r.losses.total, r.losses.trans, r.losses.ce, r.losses.qua, r.token_err
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Trains `model` in place. Batches are drawn by a per-epoch shuffle from
/// the `SHUFFLE` stream of `cfg.seed`; gradients are averaged over the
/// batch in index order.
pub fn train(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    if data.vocab != model.config.vocab || data.input_dim != model.config.input_dim {
        return Err(Error::DimMismatch(format!(
            "dataset V={} D_in={}, model V={} D_in={}",
            data.vocab, data.input_dim, model.config.vocab, model.config.input_dim
        )));
    }
    let mut shuffle = rng::split(cfg.seed, rng::stream::SHUFFLE);
    let mut adam = Adam::new(model, cfg);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let decode_cfg = DecodeConfig::default();
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = model.zeros_like();
            let mut losses = Losses::default();
            let (mut errs, mut ref_len, mut evals, mut cells) = (0, 0, 0, 0);
            for &i in batch {
                let utt = &data.utts[i];
                let out = backward_total(model, &utt.x, &utt.labels, cfg)?;
                grads.add_scaled(&out.grads, scale);
                losses.accumulate(&out.losses, scale);
                evals += out.joint_evals;
                cells += out.window.t_len() * out.window.width();
                let (hyp, _) = greedy_decode(model, &utt.x, &decode_cfg)?;
                errs += edit_distance(hyp.tokens(), utt.labels.tokens());
                ref_len += utt.labels.len();
            }
            log.rows.push(TrainLogRow {
                step,
                losses,
                token_err: errs as f64 / ref_len.max(1) as f64,
            });
            log.joint_evals.push(evals);
            log.band_cells.push(cells);
            if let (true, Some(total)) = (cfg.lr_decay, cfg.max_steps) {
                adam.lr = cfg.lr * (1.0 - step as f64 / total as f64);
            }
            adam.update(model, &grads);
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_task, ModelConfig, SynthSpec};

    fn small() -> (ToyModel, Dataset) {
        let spec = SynthSpec {
            vocab: 4,
            input_dim: 4,
            tokens_min: 2,
            tokens_max: 3,
            ..SynthSpec::default()
        };
        let data = synth_task(2, 12, &spec).unwrap();
        let cfg = ModelConfig {
            input_dim: 4,
            vocab: 4,
            enc_dim: 8,
            pred_dim: 4,
            joint_dim: 8,
            ..ModelConfig::default()
        };
        (ToyModel::new(cfg, 1).unwrap(), data)
    }

    #[test]
    fn zero_lr_keeps_losses_constant() {
        let (mut m, data) = small();
        let single = Dataset {
            utts: data.utts[..1].to_vec(),
            ..data
        };
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        let before = m.clone();
        let log = train(&mut m, &single, &cfg).unwrap();
        assert_eq!(log.rows.len(), 5);
        assert!(log.rows.iter().all(|r| r.losses == log.rows[0].losses));
        assert_eq!(m, before);
    }

    #[test]
    fn overfits_one_utterance() {
        let (mut m, data) = small();
        let single = Dataset {
            utts: data.utts[..1].to_vec(),
            ..data
        };
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &single, &cfg).unwrap();
        for w in log.rows.windows(2) {
            assert!(w[1].losses.total < w[0].losses.total);
        }
    }

    #[test]
    fn deterministic_logs() {
        let (m, data) = small();
        let cfg = TrainConfig {
            mode: Mode::Bat,
            r_d: 1,
            r_u: 0,
            epochs: 2,
            batch_size: 4,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (m.clone(), m);
        let la = train(&mut a, &data, &cfg).unwrap();
        let lb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(la.joint_evals, la.band_cells);
        assert_eq!(a, b);
    }

    #[test]
    fn csv_header() {
        assert!(TrainLog::default().to_csv().starts_with(TRAIN_LOG_HEADER));
    }

    #[test]
    fn rejects_negative_coefficient() {
        let (mut m, data) = small();
        let cfg = TrainConfig {
            lambda_ce: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut m, &data, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }
}
