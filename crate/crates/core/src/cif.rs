//! Continuous integrate-and-fire.
//!
//! Per-frame weights are predicted from the encoder output, rescaled during
//! training so they sum to the target length, turned into a monotonic
//! frame-to-token alignment with `ceil(cumsum(w))`, and used to integrate
//! encoder frames into one embedding per token.
//!
//! The alignment helpers ([`cif_scale`], [`clamp_weights`], [`cif_boundary`],
//! [`cif_fire`]) are generic over the payload scalar. The learned parts
//! (weight predictor, classifier, gradients) work in f64.

use crate::error::{Error, Result};
use crate::numeric::{fmt_sig, log_softmax_into, sigmoid};
use crate::rng::{self, DetRng};
use crate::rnnt::LabelSeq;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Firing threshold.
pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Upper bound applied to scaled weights before boundary generation.
pub const CLAMP_MAX: f64 = 1.0 - 1e-6;

/// Default temporal kernel width of the weight predictor.
pub const DEFAULT_KERNEL: usize = 3;

/// Tolerance on accumulated weight for payload type `S` with `u` tokens.
fn accumulation_tol<S: Scalar>(u: usize) -> f64 {
    (16.0 * S::epsilon().to_acc() * u.max(1) as f64).max(1e-9)
}

fn fire_tol<S: Scalar>(u: usize) -> f64 {
    accumulation_tol::<S>(u).max(1e-6)
}

/// Raw and length-normalized per-frame weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CifWeights<S> {
    pub raw: Vec<S>,
    pub scaled: Vec<S>,
    /// `U / sum(raw)`.
    pub scale_factor: f64,
}

/// Token index per frame, `C_t = ceil(cumsum(w)_t / threshold)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifAlignment {
    pub boundary: Vec<usize>,
}

impl CifAlignment {
    pub fn len(&self) -> usize {
        self.boundary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundary.is_empty()
    }

    pub fn is_monotone_continuous(&self) -> bool {
        self.boundary
            .windows(2)
            .all(|w| w[1] >= w[0] && w[1] - w[0] <= 1)
    }
}

/// The slice of frame `t`'s weight that is integrated into token `u`
/// (zero-based token index).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Portion {
    pub t: usize,
    pub u: usize,
    pub weight: f64,
    /// Token `u` starts inside frame `t` (the previous token fired with overshoot).
    pub opens: bool,
    /// Token `u` fires inside frame `t` with weight left over.
    pub closes: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiredEmbeddings<S> {
    /// `U x D` integrated embeddings.
    pub integrated: Tensor<S>,
    /// Ordered by frame, then token.
    pub allocation: Vec<Portion>,
    pub threshold: f64,
}

impl<S: Scalar> FiredEmbeddings<S> {
    pub fn u_len(&self) -> usize {
        self.integrated.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.integrated.dims()[1]
    }

    /// Total weight integrated into each token.
    pub fn token_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.u_len()];
        for p in &self.allocation {
            w[p.u] += p.weight;
        }
        w
    }
}

/// Rescales `raw` so it sums to `u`.
///
/// `u == 0` yields all-zero scaled weights with a zero scale factor.
pub fn cif_scale<S: Scalar>(raw: &[S], u: usize) -> Result<CifWeights<S>> {
    let sum: f64 = raw.iter().map(|w| w.to_acc()).sum();
    if u == 0 {
        return Ok(CifWeights {
            raw: raw.to_vec(),
            scaled: vec![S::zero(); raw.len()],
            scale_factor: 0.0,
        });
    }
    if !(sum >= 1e-8) {
        return Err(Error::DegenerateWeights(sum));
    }
    let scale_factor = u as f64 / sum;
    Ok(CifWeights {
        raw: raw.to_vec(),
        scaled: raw
            .iter()
            .map(|w| S::from_acc(w.to_acc() * scale_factor))
            .collect(),
        scale_factor,
    })
}

/// Caps every weight at [`CLAMP_MAX`], carrying the excess forward into the
/// following frames and, if it runs off the end, backward into earlier ones.
/// The total is preserved whenever `sum <= T * CLAMP_MAX`; otherwise the cap
/// is relaxed to 1 and any remainder beyond `T` is dropped.
pub fn clamp_weights<S: Scalar>(weights: &[S]) -> Vec<S> {
    let sum: f64 = weights.iter().map(|w| w.to_acc()).sum();
    let cap = if sum <= weights.len() as f64 * CLAMP_MAX {
        CLAMP_MAX
    } else {
        1.0
    };
    let mut out: Vec<f64> = weights.iter().map(|w| w.to_acc()).collect();
    let mut carry = 0.0;
    for w in out.iter_mut() {
        let v = *w + carry;
        *w = v.min(cap);
        carry = v - *w;
    }
    for w in out.iter_mut().rev() {
        if carry <= 0.0 {
            break;
        }
        let room = cap - *w;
        let take = room.min(carry);
        *w += take;
        carry -= take;
    }
    out.into_iter().map(S::from_acc).collect()
}

/// `C_t = ceil(sum_{s<=t} w_s / threshold)`, with a rounding tolerance so an
/// exact multiple of the threshold is not pushed up by accumulation error.
pub fn cif_boundary<S: Scalar>(weights: &[S]) -> CifAlignment {
    cif_boundary_with_threshold(weights, DEFAULT_THRESHOLD)
}

pub fn cif_boundary_with_threshold<S: Scalar>(weights: &[S], threshold: f64) -> CifAlignment {
    let total: f64 = weights.iter().map(|w| w.to_acc()).sum();
    let tol = accumulation_tol::<S>((total / threshold).ceil() as usize);
    let mut acc = 0.0;
    let boundary = weights
        .iter()
        .map(|w| {
            acc += w.to_acc();
            ((acc / threshold - tol).ceil()).max(0.0) as usize
        })
        .collect();
    CifAlignment { boundary }
}

/// Integrates encoder frames `h` (`T x D`) into `u` token embeddings.
///
/// `weights` must sum to `u * threshold`. Whenever the accumulator reaches the
/// threshold the current token takes exactly what it still needs from the
/// frame and the remainder starts the next token.
pub fn cif_fire<S: Scalar>(
    weights: &[S],
    h: &Tensor<S>,
    u: usize,
    threshold: f64,
) -> Result<FiredEmbeddings<S>> {
    let (t_len, dim) = match h.dims() {
        [t, d] => (*t, *d),
        dims => return Err(Error::DimMismatch(format!("h must be T x D, got {dims:?}"))),
    };
    if weights.len() != t_len {
        return Err(Error::DimMismatch(format!(
            "{} weights for {t_len} frames",
            weights.len()
        )));
    }
    let tol = fire_tol::<S>(u);
    let total: f64 = weights.iter().map(|w| w.to_acc()).sum();
    if (total - u as f64 * threshold).abs() > tol * threshold {
        return Err(Error::FireCountMismatch {
            expected: u,
            got: (total / threshold + tol).floor() as usize,
        });
    }

    let mut allocation = Vec::with_capacity(t_len + u);
    let mut fired = 0usize;
    let mut acc = 0.0;
    for (t, w) in weights.iter().enumerate() {
        let mut rem = w.to_acc();
        let mut opens = false;
        while fired < u && acc + rem >= threshold {
            let need = threshold - acc;
            let closes = acc + rem > threshold;
            allocation.push(Portion {
                t,
                u: fired,
                weight: need,
                opens,
                closes,
            });
            rem -= need;
            fired += 1;
            acc = 0.0;
            opens = closes;
        }
        if fired < u && rem > 0.0 {
            allocation.push(Portion {
                t,
                u: fired,
                weight: rem,
                opens,
                closes: false,
            });
            acc += rem;
        }
    }
    // Accumulation error can leave the last token a hair short of the threshold.
    if fired + 1 == u && acc >= threshold * (1.0 - tol) {
        fired += 1;
    }
    if fired != u {
        return Err(Error::FireCountMismatch {
            expected: u,
            got: fired,
        });
    }

    let mut integrated = vec![0.0f64; u * dim];
    let hd = h.data();
    for p in &allocation {
        let row = &mut integrated[p.u * dim..(p.u + 1) * dim];
        for (e, x) in row.iter_mut().zip(&hd[p.t * dim..(p.t + 1) * dim]) {
            *e += p.weight * x.to_acc();
        }
    }
    Ok(FiredEmbeddings {
        integrated: Tensor::new(
            vec![u, dim],
            integrated.into_iter().map(S::from_acc).collect(),
        )?,
        allocation,
        threshold,
    })
}

/// `|sum(raw) - U|` and its subgradient, zero at the tie.
pub fn cif_quantity_loss<S: Scalar>(raw: &[S], u: usize) -> (f64, Vec<f64>) {
    let diff = raw.iter().map(|w| w.to_acc()).sum::<f64>() - u as f64;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    (diff.abs(), vec![sign; raw.len()])
}

/// Weight predictor `sigmoid(linear(conv(h)))`.
///
/// The convolution runs over time with odd kernel width `K`, `D` input and
/// `D` output channels and zero padding, keeping the sequence length.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CifParams {
    pub dim: usize,
    pub kernel: usize,
    /// `[out][in][k]`, `D x D x K`.
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub lin_w: Vec<f64>,
    pub lin_b: f64,
}

impl CifParams {
    pub fn zeros(dim: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "CIF kernel width must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            dim,
            kernel,
            conv_w: vec![0.0; dim * dim * kernel],
            conv_b: vec![0.0; dim],
            lin_w: vec![0.0; dim],
            lin_b: 0.0,
        })
    }

    pub fn random(dim: usize, kernel: usize, rng: &mut DetRng) -> Result<Self> {
        let mut p = Self::zeros(dim, kernel)?;
        let conv_scale = 1.0 / ((dim * kernel) as f64).sqrt();
        p.conv_w
            .iter_mut()
            .for_each(|w| *w = rng::uniform(rng, -conv_scale, conv_scale));
        let lin_scale = 1.0 / (dim as f64).sqrt();
        p.lin_w
            .iter_mut()
            .for_each(|w| *w = rng::uniform(rng, -lin_scale, lin_scale));
        Ok(p)
    }

    fn check(&self, h: &Tensor<f64>) -> Result<(usize, usize)> {
        match h.dims() {
            [t, d] if *d == self.dim => Ok((*t, *d)),
            dims => Err(Error::DimMismatch(format!(
                "CIF expects T x {}, got {dims:?}",
                self.dim
            ))),
        }
    }
}

/// Forward values kept for [`cif_predict_backward`].
#[derive(Clone, Debug)]
pub struct WeightPrediction {
    /// `T x D` convolution output.
    pub conv_out: Vec<f64>,
    pub raw: Vec<f64>,
}

pub fn cif_predict_weights(h: &Tensor<f64>, params: &CifParams) -> Result<WeightPrediction> {
    let (t_len, dim) = params.check(h)?;
    let k_len = params.kernel;
    let half = k_len / 2;
    let hd = h.data();
    let mut conv_out = vec![0.0; t_len * dim];
    for t in 0..t_len {
        let out = &mut conv_out[t * dim..(t + 1) * dim];
        out.copy_from_slice(&params.conv_b);
        for k in 0..k_len {
            let Some(src) = (t + k).checked_sub(half).filter(|&s| s < t_len) else {
                continue;
            };
            let x = &hd[src * dim..(src + 1) * dim];
            for (o, acc) in out.iter_mut().enumerate() {
                let w = &params.conv_w[o * dim * k_len..(o + 1) * dim * k_len];
                *acc += x
                    .iter()
                    .enumerate()
                    .map(|(i, xi)| w[i * k_len + k] * xi)
                    .sum::<f64>();
            }
        }
    }
    let raw = (0..t_len)
        .map(|t| {
            let c = &conv_out[t * dim..(t + 1) * dim];
            sigmoid(params.lin_b + c.iter().zip(&params.lin_w).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect();
    Ok(WeightPrediction { conv_out, raw })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CifParamGrads {
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub lin_w: Vec<f64>,
    pub lin_b: f64,
}

/// Back-propagates `d loss / d raw` through the sigmoid, linear and
/// convolution layers. Returns parameter gradients and `d loss / d h`.
pub fn cif_predict_backward(
    grad_raw: &[f64],
    h: &Tensor<f64>,
    params: &CifParams,
    pred: &WeightPrediction,
) -> Result<(CifParamGrads, Vec<f64>)> {
    let (t_len, dim) = params.check(h)?;
    let k_len = params.kernel;
    let half = k_len / 2;
    let hd = h.data();
    let mut g = CifParamGrads {
        conv_w: vec![0.0; params.conv_w.len()],
        conv_b: vec![0.0; dim],
        lin_w: vec![0.0; dim],
        lin_b: 0.0,
    };
    let mut grad_h = vec![0.0; t_len * dim];
    let mut dc = vec![0.0; dim];
    for t in 0..t_len {
        let w = pred.raw[t];
        let dz = grad_raw[t] * w * (1.0 - w);
        if dz == 0.0 {
            continue;
        }
        g.lin_b += dz;
        let c = &pred.conv_out[t * dim..(t + 1) * dim];
        for o in 0..dim {
            g.lin_w[o] += dz * c[o];
            dc[o] = dz * params.lin_w[o];
            g.conv_b[o] += dc[o];
        }
        for k in 0..k_len {
            let Some(src) = (t + k).checked_sub(half).filter(|&s| s < t_len) else {
                continue;
            };
            let x = &hd[src * dim..(src + 1) * dim];
            for o in 0..dim {
                let base = o * dim * k_len;
                for i in 0..dim {
                    g.conv_w[base + i * k_len + k] += dc[o] * x[i];
                    grad_h[src * dim + i] += dc[o] * params.conv_w[base + i * k_len + k];
                }
            }
        }
    }
    Ok((g, grad_h))
}

/// Gradients of a loss on the fired embeddings w.r.t. the raw weights and `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct CifGrad {
    pub raw: Vec<f64>,
    /// `T x D`, row-major.
    pub h: Vec<f64>,
}

/// Derivative of the firing map with the allocation pattern held fixed.
///
/// Each portion is `min(cumsum_t, (u+1)b) - max(cumsum_{t-1}, u b)`, so it
/// depends on `w_s` for `s <= t` through its upper end unless it `closes`,
/// and on `s <= t-1` through its lower end unless it `opens`.
pub fn cif_fire_backward(
    grad_e: &[f64],
    fired: &FiredEmbeddings<f64>,
    h: &Tensor<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (t_len, dim) = match h.dims() {
        [t, d] => (*t, *d),
        dims => return Err(Error::DimMismatch(format!("h must be T x D, got {dims:?}"))),
    };
    if grad_e.len() != fired.u_len() * dim {
        return Err(Error::DimMismatch(format!(
            "grad_e has {} entries, expected {} x {dim}",
            grad_e.len(),
            fired.u_len()
        )));
    }
    let hd = h.data();
    let mut upper = vec![0.0; t_len];
    let mut lower = vec![0.0; t_len];
    let mut grad_h = vec![0.0; t_len * dim];
    for p in &fired.allocation {
        let ge = &grad_e[p.u * dim..(p.u + 1) * dim];
        let x = &hd[p.t * dim..(p.t + 1) * dim];
        let dot: f64 = ge.iter().zip(x).map(|(a, b)| a * b).sum();
        if !p.closes {
            upper[p.t] += dot;
        }
        if !p.opens {
            lower[p.t] += dot;
        }
        for (gh, g) in grad_h[p.t * dim..(p.t + 1) * dim].iter_mut().zip(ge) {
            *gh += p.weight * g;
        }
    }
    // grad_s = sum_{t>=s} upper[t] - sum_{t>=s+1} lower[t]
    let mut grad_w = vec![0.0; t_len];
    let (mut su, mut sl) = (0.0, 0.0);
    for s in (0..t_len).rev() {
        su += upper[s];
        grad_w[s] = su - sl;
        sl += lower[s];
    }
    Ok((grad_w, grad_h))
}

/// Chain rule through `scaled = raw * U / sum(raw)`.
pub fn cif_scale_backward(grad_scaled: &[f64], weights: &CifWeights<f64>) -> Vec<f64> {
    if weights.scale_factor == 0.0 {
        return vec![0.0; grad_scaled.len()];
    }
    let sum: f64 = weights.raw.iter().sum();
    let coupling: f64 = grad_scaled
        .iter()
        .zip(&weights.scaled)
        .map(|(g, s)| g * s)
        .sum::<f64>()
        / sum;
    grad_scaled
        .iter()
        .map(|g| weights.scale_factor * g - coupling)
        .collect()
}

/// Gradient of a loss on the fired embeddings w.r.t. the raw (pre-scaling)
/// weights and the encoder frames.
pub fn cif_backward(
    grad_e: &[f64],
    fired: &FiredEmbeddings<f64>,
    h: &Tensor<f64>,
    weights: &CifWeights<f64>,
) -> Result<CifGrad> {
    let (grad_scaled, grad_h) = cif_fire_backward(grad_e, fired, h)?;
    Ok(CifGrad {
        raw: cif_scale_backward(&grad_scaled, weights),
        h: grad_h,
    })
}

/// Linear token classifier on fired embeddings. Row `k-1` scores token `k`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Classifier {
    pub vocab: usize,
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Classifier {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            vocab,
            dim,
            w: vec![0.0; vocab * dim],
            b: vec![0.0; vocab],
        }
    }

    pub fn random(vocab: usize, dim: usize, rng: &mut DetRng) -> Self {
        let mut c = Self::zeros(vocab, dim);
        let s = 1.0 / (dim as f64).sqrt();
        c.w.iter_mut().for_each(|w| *w = rng::uniform(rng, -s, s));
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CeOutput {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
    /// `U x D`.
    pub grad_e: Vec<f64>,
}

/// Mean token cross-entropy of the classifier on the fired embeddings.
pub fn cif_ce_loss(e: &FiredEmbeddings<f64>, y: &LabelSeq, clf: &Classifier) -> Result<CeOutput> {
    let (u_len, dim) = (e.u_len(), e.dim());
    if u_len != y.len() || dim != clf.dim {
        return Err(Error::DimMismatch(format!(
            "fired {u_len} x {dim}, labels {}, classifier dim {}",
            y.len(),
            clf.dim
        )));
    }
    if let Some(&token) = y.tokens().iter().find(|&&k| k > clf.vocab) {
        return Err(Error::InvalidLabel {
            token,
            vocab: clf.vocab,
        });
    }
    let mut out = CeOutput {
        loss: 0.0,
        grad_w: vec![0.0; clf.w.len()],
        grad_b: vec![0.0; clf.vocab],
        grad_e: vec![0.0; u_len * dim],
    };
    if u_len == 0 {
        return Ok(out);
    }
    let scale = 1.0 / u_len as f64;
    let ed = e.integrated.data();
    let mut logits = vec![0.0; clf.vocab];
    let mut logp = vec![0.0; clf.vocab];
    for (u, &token) in y.tokens().iter().enumerate() {
        let eu = &ed[u * dim..(u + 1) * dim];
        for (k, z) in logits.iter_mut().enumerate() {
            let w = &clf.w[k * dim..(k + 1) * dim];
            *z = clf.b[k] + w.iter().zip(eu).map(|(a, b)| a * b).sum::<f64>();
        }
        log_softmax_into(&logits, &mut logp)?;
        out.loss -= scale * logp[token - 1];
        for k in 0..clf.vocab {
            let dz = scale * (logp[k].exp() - if k + 1 == token { 1.0 } else { 0.0 });
            out.grad_b[k] += dz;
            let w = &clf.w[k * dim..(k + 1) * dim];
            for i in 0..dim {
                out.grad_w[k * dim + i] += dz * eu[i];
                out.grad_e[u * dim + i] += dz * w[i];
            }
        }
    }
    Ok(out)
}

/// Writes `t,omega_raw,omega_scaled,c_t` rows for raw weights scaled to
/// `u`; `c_t` is the boundary of the clamped scaled weights.
pub fn write_cif_csv(raw: &[f64], u: usize, path: &std::path::Path) -> Result<CifAlignment> {
    let scaled = cif_scale(raw, u)?.scaled;
    let c = cif_boundary(&clamp_weights(&scaled));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "omega_raw", "omega_scaled", "c_t"])?;
    for (t, ((r, s), b)) in raw.iter().zip(&scaled).zip(&c.boundary).enumerate() {
        w.write_record([t.to_string(), fmt_sig(*r), fmt_sig(*s), b.to_string()])?;
    }
    w.flush()?;
    Ok(c)
}
