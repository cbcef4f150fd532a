//! Full-lattice transducer loss.
//!
//! Lattices are indexed from zero: frame `t` in `0..T`, label position `u`
//! in `0..=U`, symbol `k` in `0..=V` with `k == 0` the blank. The forward
//! variable `alpha[t][u]` is the log-probability of emitting the first `u`
//! labels and arriving at frame `t`; `beta[t][u]` is the log-probability of
//! finishing from `(t, u)`, including the final blank at `(T-1, U)`.

use crate::error::{Error, Result};
use crate::memory::{track, MemTracker};
use crate::numeric::{log_softmax_into, log_sum_exp, NEG_INF};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Target label ids, each in `1..=V`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LabelSeq {
    tokens: Vec<usize>,
}

impl LabelSeq {
    /// `vocab` is the number of non-blank symbols `V`.
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&token) = tokens.iter().find(|&&k| k == BLANK || k > vocab) {
            return Err(Error::InvalidLabel { token, vocab });
        }
        Ok(Self { tokens })
    }

    pub fn from_i64(tokens: &[i64], vocab: usize) -> Result<Self> {
        let tokens = tokens
            .iter()
            .map(|&k| {
                usize::try_from(k).map_err(|_| Error::InvalidLabel {
                    token: usize::MAX,
                    vocab,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens, vocab)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-(t, u) log-probabilities over the blank-augmented vocabulary,
/// shape `(T, U+1, V+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitLattice<S> {
    log_probs: Tensor<S>,
}

impl<S: Scalar> LogitLattice<S> {
    /// Wraps already-normalized log-probabilities.
    pub fn new(log_probs: Tensor<S>) -> Result<Self> {
        match log_probs.dims() {
            [t, u, v] if *t >= 1 && *u >= 1 && *v >= 2 => {}
            dims => {
                return Err(Error::DimMismatch(format!(
                    "lattice must be (T>=1, U+1>=1, V+1>=2), got {dims:?}"
                )))
            }
        }
        if log_probs.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("NaN in lattice".into()));
        }
        Ok(Self { log_probs })
    }

    /// Normalizes raw scores of shape `(T, U+1, V+1)` row by row.
    pub fn from_scores(scores: Tensor<S>) -> Result<Self> {
        let v1 = *scores.dims().last().unwrap_or(&0);
        let mut out = Tensor::zeros(scores.dims().to_vec())?;
        if v1 > 0 {
            for (row, dst) in scores
                .data()
                .chunks_exact(v1)
                .zip(out.data_mut().chunks_exact_mut(v1))
            {
                log_softmax_into(row, dst)?;
            }
        }
        Self::new(out)
    }

    pub fn t_len(&self) -> usize {
        self.log_probs.dims()[0]
    }

    /// Number of label positions, `U + 1`.
    pub fn u_len(&self) -> usize {
        self.log_probs.dims()[1]
    }

    /// Number of symbols including blank, `V + 1`.
    pub fn vocab(&self) -> usize {
        self.log_probs.dims()[2]
    }

    pub fn log_probs(&self) -> &Tensor<S> {
        &self.log_probs
    }

    pub fn into_inner(self) -> Tensor<S> {
        self.log_probs
    }

    #[inline]
    pub fn row(&self, t: usize, u: usize) -> &[S] {
        let v1 = self.vocab();
        let start = (t * self.u_len() + u) * v1;
        &self.log_probs.data()[start..start + v1]
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.row(t, u)[k].to_acc()
    }

    /// Largest deviation of any row's probability mass from one.
    pub fn max_row_deviation(&self) -> f64 {
        self.log_probs
            .data()
            .chunks_exact(self.vocab())
            .map(|row| (row.iter().map(|x| x.to_acc().exp()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn check_labels(&self, y: &LabelSeq) -> Result<()> {
        if y.len() + 1 != self.u_len() {
            return Err(Error::DimMismatch(format!(
                "label length {} does not match lattice U+1 = {}",
                y.len(),
                self.u_len()
            )));
        }
        if let Some(&token) = y.tokens().iter().find(|&&k| k >= self.vocab()) {
            return Err(Error::InvalidLabel {
                token,
                vocab: self.vocab() - 1,
            });
        }
        Ok(())
    }
}

/// Negative log-likelihood and its gradient w.r.t. the input log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LossResult<S> {
    /// Nats. `+inf` when no path has nonzero probability.
    pub loss: f64,
    /// Same layout as the input lattice.
    pub grad: Tensor<S>,
    /// Set when the total probability is zero; `grad` is then all zeros.
    pub infeasible: bool,
}

/// Forward variables, shape `(T, U+1)`, log domain.
pub fn rnnt_forward<S: Scalar>(lat: &LogitLattice<S>, y: &LabelSeq) -> Result<Tensor<f64>> {
    lat.check_labels(y)?;
    let (t_len, u_len) = (lat.t_len(), lat.u_len());
    let labels = y.tokens();
    let mut alpha = vec![NEG_INF; t_len * u_len];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = NEG_INF;
            if t > 0 {
                a = alpha[(t - 1) * u_len + u] + lat.get(t - 1, u, BLANK);
            }
            if u > 0 {
                a = log_sum_exp(
                    a,
                    alpha[t * u_len + u - 1] + lat.get(t, u - 1, labels[u - 1]),
                );
            }
            alpha[t * u_len + u] = a;
        }
    }
    Tensor::new(vec![t_len, u_len], alpha)
}

/// Backward variables, shape `(T, U+1)`, log domain. `beta[0][0]` is the
/// total log-probability.
pub fn rnnt_backward<S: Scalar>(lat: &LogitLattice<S>, y: &LabelSeq) -> Result<Tensor<f64>> {
    lat.check_labels(y)?;
    let (t_len, u_len) = (lat.t_len(), lat.u_len());
    let labels = y.tokens();
    let mut beta = vec![NEG_INF; t_len * u_len];
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            let b = if t == t_len - 1 && u == u_len - 1 {
                lat.get(t, u, BLANK)
            } else {
                let mut b = NEG_INF;
                if t + 1 < t_len {
                    b = beta[(t + 1) * u_len + u] + lat.get(t, u, BLANK);
                }
                if u + 1 < u_len {
                    b = log_sum_exp(b, beta[t * u_len + u + 1] + lat.get(t, u, labels[u]));
                }
                b
            };
            beta[t * u_len + u] = b;
        }
    }
    Tensor::new(vec![t_len, u_len], beta)
}

/// Transducer loss `-log Pr(y|x)` with the gradient w.r.t. every lattice entry.
pub fn rnnt_loss<S: Scalar>(lat: &LogitLattice<S>, y: &LabelSeq) -> Result<LossResult<S>> {
    rnnt_loss_tracked(lat, y, None)
}

/// [`rnnt_loss`] registering its forward, backward and gradient buffers
/// with `tracker`.
pub fn rnnt_loss_tracked<S: Scalar>(
    lat: &LogitLattice<S>,
    y: &LabelSeq,
    tracker: Option<&MemTracker>,
) -> Result<LossResult<S>> {
    let alpha = rnnt_forward(lat, y)?;
    let _alpha_mem = track(tracker, alpha.nbytes());
    let beta = rnnt_backward(lat, y)?;
    let _beta_mem = track(tracker, beta.nbytes());
    let (t_len, u_len, v1) = (lat.t_len(), lat.u_len(), lat.vocab());
    let (alpha, beta) = (alpha.data(), beta.data());
    let log_z = alpha[t_len * u_len - 1] + lat.get(t_len - 1, u_len - 1, BLANK);
    let mut grad = Tensor::<S>::zeros(vec![t_len, u_len, v1])?;
    let _grad_mem = track(tracker, grad.nbytes());
    if log_z == NEG_INF {
        return Ok(LossResult {
            loss: f64::INFINITY,
            grad,
            infeasible: true,
        });
    }
    let labels = y.tokens();
    let g = grad.data_mut();
    for t in 0..t_len {
        for u in 0..u_len {
            let a = alpha[t * u_len + u];
            if a == NEG_INF {
                continue;
            }
            let base = (t * u_len + u) * v1;
            let next_blank = if t + 1 < t_len {
                beta[(t + 1) * u_len + u]
            } else if u == u_len - 1 {
                0.0
            } else {
                NEG_INF
            };
            g[base + BLANK] = S::from_acc(-(a + lat.get(t, u, BLANK) + next_blank - log_z).exp());
            if u + 1 < u_len {
                let k = labels[u];
                let occ = a + lat.get(t, u, k) + beta[t * u_len + u + 1] - log_z;
                g[base + k] = S::from_acc(-occ.exp());
            }
        }
    }
    Ok(LossResult {
        loss: -log_z,
        grad,
        infeasible: false,
    })
}

/// Guard for [`rnnt_loss_bruteforce`].
pub const BRUTEFORCE_MAX_STEPS: usize = 20;

/// Reference loss by explicit enumeration of every alignment path,
/// accumulated in the probability domain. Test oracle only.
pub fn rnnt_loss_bruteforce<S: Scalar>(lat: &LogitLattice<S>, y: &LabelSeq) -> Result<f64> {
    lat.check_labels(y)?;
    let (t_len, u_len) = (lat.t_len(), lat.u_len());
    let steps = t_len + u_len - 1;
    if steps > BRUTEFORCE_MAX_STEPS {
        return Err(Error::TooLarge(steps));
    }
    let labels = y.tokens();
    let prob = |t: usize, u: usize, k: usize| lat.get(t, u, k).exp();

    fn walk(
        t: usize,
        u: usize,
        acc: f64,
        end: (usize, usize),
        prob: &dyn Fn(usize, usize, usize) -> f64,
        labels: &[usize],
    ) -> f64 {
        if (t, u) == end {
            return acc * prob(t, u, BLANK);
        }
        let mut total = 0.0;
        if t < end.0 {
            total += walk(t + 1, u, acc * prob(t, u, BLANK), end, prob, labels);
        }
        if u < end.1 {
            total += walk(t, u + 1, acc * prob(t, u, labels[u]), end, prob, labels);
        }
        total
    }

    let total = walk(0, 0, 1.0, (t_len - 1, u_len - 1), &prob, labels);
    Ok(-total.ln())
}
