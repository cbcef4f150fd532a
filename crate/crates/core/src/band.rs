//! Band-restricted transducer loss.
//!
//! Each frame `t` keeps only the label positions `u` in
//! `[o_t, o_t + S - 1]` with `S = R_d + R_u + 2`, chosen around the CIF
//! alignment `C_t`. Cells outside the band have probability zero and are
//! never read or stored, so the lattice, the forward/backward variables and
//! the gradient all have `T x S` rows instead of `T x (U + 1)`.

use crate::cif::CifAlignment;
use crate::error::{Error, Result};
use crate::memory::{track, MemTracker};
use crate::numeric::{log_sum_exp, NEG_INF};
use crate::rnnt::{LabelSeq, LogitLattice, LossResult, BLANK};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-frame window of stored label positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandWindow {
    starts: Vec<usize>,
    width: usize,
    u_max: usize,
}

impl BandWindow {
    /// Validates explicit window starts for a label sequence of length `u`.
    pub fn from_starts(starts: Vec<usize>, width: usize, u: usize) -> Result<Self> {
        let bad = |msg: String| Err(Error::DimMismatch(format!("invalid band window: {msg}")));
        if starts.is_empty() {
            return bad("no frames".into());
        }
        if width == 0 || width > u + 1 {
            return bad(format!("width {width} outside 1..={}", u + 1));
        }
        if starts[0] != 0 {
            return bad(format!("first start is {}, must be 0", starts[0]));
        }
        if *starts.last().unwrap() != u + 1 - width {
            return bad(format!(
                "last start is {}, must be U+1-S = {}",
                starts.last().unwrap(),
                u + 1 - width
            ));
        }
        if let Some(w) = starts.windows(2).find(|w| w[1] < w[0] || w[1] - w[0] > 1) {
            return bad(format!("start step {} -> {} not in {{0, 1}}", w[0], w[1]));
        }
        Ok(Self {
            starts,
            width,
            u_max: u,
        })
    }

    /// Full lattice expressed as a window: every frame stores `0..=U`.
    pub fn full(t_len: usize, u: usize) -> Self {
        Self {
            starts: vec![0; t_len],
            width: u + 1,
            u_max: u,
        }
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Stored rows per frame: `min(R_d + R_u + 2, U + 1)`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn t_len(&self) -> usize {
        self.starts.len()
    }

    /// Target length `U`.
    pub fn u_len(&self) -> usize {
        self.u_max
    }

    #[inline]
    pub fn contains(&self, t: usize, u: usize) -> bool {
        let o = self.starts[t];
        u >= o && u < o + self.width
    }
}

/// Chooses per-frame windows around the alignment `c`.
///
/// Starts begin at `clamp(C_t - R_d, 0, U+1-S)`. The first start is then
/// forced to 0 and a forward sweep limits each step to `{0, 1}`; the last
/// start is forced to `U+1-S` and a backward sweep raises starts that would
/// otherwise fall more than one row behind their successor. The result
/// always admits at least one complete path.
pub fn build_window(
    c: &CifAlignment,
    u: usize,
    r_d: usize,
    r_u: usize,
    t_len: usize,
) -> Result<BandWindow> {
    if c.len() != t_len || t_len == 0 {
        return Err(Error::DimMismatch(format!(
            "alignment has {} frames, lattice has {t_len}",
            c.len()
        )));
    }
    let s = r_d + r_u + 2;
    if s >= u + 1 {
        return Ok(BandWindow::full(t_len, u));
    }
    if u > t_len + r_d + r_u {
        return Err(Error::BandInfeasible {
            u,
            t: t_len,
            r_d,
            r_u,
        });
    }
    let top = u + 1 - s;
    let mut starts: Vec<usize> = c
        .boundary
        .iter()
        .map(|&ct| ct.saturating_sub(r_d).min(top))
        .collect();
    starts[0] = 0;
    for t in 1..t_len {
        let prev = starts[t - 1];
        starts[t] = starts[t].clamp(prev, prev + 1);
    }
    starts[t_len - 1] = top;
    for t in (0..t_len - 1).rev() {
        starts[t] = starts[t].max(starts[t + 1].saturating_sub(1));
    }
    debug_assert_eq!(starts[0], 0);
    Ok(BandWindow {
        starts,
        width: s,
        u_max: u,
    })
}

/// Log-probabilities stored only inside the band, shape `(T, S, V+1)`;
/// row `(t, j)` holds label position `u = o_t + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandedLattice<S> {
    window: BandWindow,
    log_probs: Tensor<S>,
}

impl<S: Scalar> BandedLattice<S> {
    pub fn new(window: BandWindow, log_probs: Tensor<S>) -> Result<Self> {
        match log_probs.dims() {
            [t, s, v] if *t == window.t_len() && *s == window.width() && *v >= 2 => {}
            dims => {
                return Err(Error::DimMismatch(format!(
                    "banded lattice must be ({}, {}, V+1), got {dims:?}",
                    window.t_len(),
                    window.width()
                )))
            }
        }
        if log_probs.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("NaN in banded lattice".into()));
        }
        Ok(Self { window, log_probs })
    }

    pub fn window(&self) -> &BandWindow {
        &self.window
    }

    pub fn log_probs(&self) -> &Tensor<S> {
        &self.log_probs
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.dims()[2]
    }

    pub fn nbytes(&self) -> usize {
        self.log_probs.nbytes()
    }

    #[inline]
    fn get(&self, t: usize, j: usize, k: usize) -> f64 {
        let (w, v1) = (self.window.width, self.vocab());
        self.log_probs.data()[(t * w + j) * v1 + k].to_acc()
    }

    fn check_labels(&self, y: &LabelSeq) -> Result<()> {
        if y.len() != self.window.u_max {
            return Err(Error::DimMismatch(format!(
                "label length {} does not match window U = {}",
                y.len(),
                self.window.u_max
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

/// Forward variables on the band, shape `(T, S)`.
pub fn bat_forward<S: Scalar>(lat: &BandedLattice<S>, y: &LabelSeq) -> Result<Tensor<f64>> {
    lat.check_labels(y)?;
    let win = &lat.window;
    let (t_len, w) = (win.t_len(), win.width);
    let labels = y.tokens();
    let mut alpha = vec![NEG_INF; t_len * w];
    alpha[0] = 0.0;
    for t in 0..t_len {
        let o = win.starts[t];
        for j in 0..w {
            if t == 0 && j == 0 {
                continue;
            }
            let u = o + j;
            let mut a = NEG_INF;
            if t > 0 {
                let jp = u - win.starts[t - 1];
                if jp < w {
                    a = alpha[(t - 1) * w + jp] + lat.get(t - 1, jp, BLANK);
                }
            }
            if j > 0 {
                a = log_sum_exp(a, alpha[t * w + j - 1] + lat.get(t, j - 1, labels[u - 1]));
            }
            alpha[t * w + j] = a;
        }
    }
    Tensor::new(vec![t_len, w], alpha)
}

/// Backward variables on the band, shape `(T, S)`.
pub fn bat_backward<S: Scalar>(lat: &BandedLattice<S>, y: &LabelSeq) -> Result<Tensor<f64>> {
    lat.check_labels(y)?;
    let win = &lat.window;
    let (t_len, w) = (win.t_len(), win.width);
    let labels = y.tokens();
    let mut beta = vec![NEG_INF; t_len * w];
    for t in (0..t_len).rev() {
        let o = win.starts[t];
        for j in (0..w).rev() {
            let u = o + j;
            let b = if t == t_len - 1 && j == w - 1 {
                lat.get(t, j, BLANK)
            } else {
                let mut b = NEG_INF;
                if t + 1 < t_len {
                    // starts are nondecreasing, so u - o_{t+1} <= j < w
                    if let Some(jn) = u.checked_sub(win.starts[t + 1]) {
                        b = beta[(t + 1) * w + jn] + lat.get(t, j, BLANK);
                    }
                }
                if j + 1 < w {
                    b = log_sum_exp(b, beta[t * w + j + 1] + lat.get(t, j, labels[u]));
                }
                b
            };
            beta[t * w + j] = b;
        }
    }
    Tensor::new(vec![t_len, w], beta)
}

/// Transducer loss restricted to the band. The gradient has the banded
/// layout `(T, S, V+1)`.
pub fn bat_loss<S: Scalar>(lat: &BandedLattice<S>, y: &LabelSeq) -> Result<LossResult<S>> {
    bat_loss_tracked(lat, y, None)
}

/// [`bat_loss`] registering its forward, backward and gradient buffers
/// with `tracker`.
pub fn bat_loss_tracked<S: Scalar>(
    lat: &BandedLattice<S>,
    y: &LabelSeq,
    tracker: Option<&MemTracker>,
) -> Result<LossResult<S>> {
    let alpha = bat_forward(lat, y)?;
    let _alpha_mem = track(tracker, alpha.nbytes());
    let beta = bat_backward(lat, y)?;
    let _beta_mem = track(tracker, beta.nbytes());
    let win = &lat.window;
    let (t_len, w, v1) = (win.t_len(), win.width, lat.vocab());
    let (alpha, beta) = (alpha.data(), beta.data());
    let log_z = alpha[t_len * w - 1] + lat.get(t_len - 1, w - 1, BLANK);
    let mut grad = Tensor::<S>::zeros(vec![t_len, w, v1])?;
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
        let o = win.starts[t];
        for j in 0..w {
            let a = alpha[t * w + j];
            if a == NEG_INF {
                continue;
            }
            let u = o + j;
            let base = (t * w + j) * v1;
            let next_blank = if t + 1 < t_len {
                match u.checked_sub(win.starts[t + 1]) {
                    Some(jn) => beta[(t + 1) * w + jn],
                    None => NEG_INF,
                }
            } else if j == w - 1 {
                0.0
            } else {
                NEG_INF
            };
            g[base + BLANK] = S::from_acc(-(a + lat.get(t, j, BLANK) + next_blank - log_z).exp());
            if j + 1 < w {
                let k = labels[u];
                let occ = a + lat.get(t, j, k) + beta[t * w + j + 1] - log_z;
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

/// Copies the in-band rows of a full lattice.
pub fn gather_band<S: Scalar>(
    full: &LogitLattice<S>,
    window: &BandWindow,
) -> Result<BandedLattice<S>> {
    if full.t_len() != window.t_len() || full.u_len() != window.u_len() + 1 {
        return Err(Error::DimMismatch(format!(
            "lattice ({}, {}) vs window for T={} U={}",
            full.t_len(),
            full.u_len(),
            window.t_len(),
            window.u_len()
        )));
    }
    let (v1, w) = (full.vocab(), window.width);
    let mut data = Vec::with_capacity(window.t_len() * w * v1);
    for (t, &o) in window.starts.iter().enumerate() {
        for j in 0..w {
            data.extend_from_slice(full.row(t, o + j));
        }
    }
    BandedLattice::new(
        window.clone(),
        Tensor::new(vec![window.t_len(), w, v1], data)?,
    )
}

/// Writes a banded tensor `(T, S, V+1)` into a zero tensor of full layout
/// `(T, U+1, V+1)`.
pub fn scatter_band<S: Scalar>(banded: &Tensor<S>, window: &BandWindow) -> Result<Tensor<S>> {
    let (t_len, w) = (window.t_len(), window.width);
    let v1 = match banded.dims() {
        [t, s, v] if *t == t_len && *s == w => *v,
        dims => {
            return Err(Error::DimMismatch(format!(
                "banded tensor must be ({t_len}, {w}, V+1), got {dims:?}"
            )))
        }
    };
    let u1 = window.u_len() + 1;
    let mut full = Tensor::<S>::zeros(vec![t_len, u1, v1])?;
    let (src, dst) = (banded.data(), full.data_mut());
    for (t, &o) in window.starts.iter().enumerate() {
        let from = t * w * v1;
        let to = (t * u1 + o) * v1;
        dst[to..to + w * v1].copy_from_slice(&src[from..from + w * v1]);
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnnt::rnnt_loss;

    fn align(c: &[usize]) -> CifAlignment {
        CifAlignment {
            boundary: c.to_vec(),
        }
    }

    #[test]
    fn worked_alignment_window() {
        let c = align(&[1, 1, 1, 2, 2, 3, 3, 4, 4, 4]);
        let w = build_window(&c, 4, 1, 1, 10).unwrap();
        assert_eq!(w.width(), 4);
        assert_eq!(w.starts(), &[0, 0, 0, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn degenerate_windows() {
        let w = build_window(&align(&[0, 0, 0]), 0, 1, 1, 3).unwrap();
        assert_eq!(w.width(), 1);
        assert_eq!(w.starts(), &[0, 0, 0]);
        let w = build_window(&align(&[1, 2, 3]), 3, 1, 1, 3).unwrap();
        assert_eq!(w, BandWindow::full(3, 3));
    }

    #[test]
    fn infeasible_band() {
        let err = build_window(&align(&[3, 5]), 5, 1, 1, 2).unwrap_err();
        assert!(matches!(
            err,
            Error::BandInfeasible {
                u: 5,
                t: 2,
                r_d: 1,
                r_u: 1
            }
        ));
    }

    #[test]
    fn endpoint_forcing() {
        // C_1 = 1 with R_d = 0 would start at 1; forced to 0 and chained.
        let w = build_window(&align(&[1, 1, 2, 3, 4, 5, 5]), 5, 0, 0, 7).unwrap();
        assert_eq!(w.starts(), &[0, 1, 2, 3, 4, 4, 4]);
        // Lagging alignment gets raised near the end.
        let w = build_window(&align(&[1, 1, 1, 1, 1, 2]), 6, 0, 1, 6).unwrap();
        assert_eq!(w.starts()[5], 4);
        assert!(w.starts().windows(2).all(|p| p[1] - p[0] <= 1));
        assert_eq!(w.starts()[0], 0);
    }

    #[test]
    fn from_starts_validation() {
        assert!(BandWindow::from_starts(vec![0, 0, 1], 2, 2).is_ok());
        assert!(BandWindow::from_starts(vec![1, 1, 1], 2, 2).is_err());
        assert!(BandWindow::from_starts(vec![0, 0, 0], 2, 2).is_err());
        assert!(BandWindow::from_starts(vec![0, 2, 1], 2, 2).is_err());
        assert!(BandWindow::from_starts(vec![0, 0], 4, 2).is_err());
    }

    fn uniform_half(t: usize, u: usize) -> LogitLattice<f64> {
        let half = 0.5f64.ln();
        LogitLattice::new(Tensor::new(vec![t, u + 1, 2], vec![half; t * (u + 1) * 2]).unwrap())
            .unwrap()
    }

    #[test]
    fn tiny_band_equals_full() {
        let full = uniform_half(2, 1);
        let y = LabelSeq::new(vec![1], 1).unwrap();
        let w = build_window(&align(&[1, 1]), 1, 0, 0, 2).unwrap();
        assert_eq!(w.starts(), &[0, 0]);
        let banded = gather_band(&full, &w).unwrap();
        let res = bat_loss(&banded, &y).unwrap();
        assert!((res.loss - 4f64.ln()).abs() < 1e-12);
        let full_res = rnnt_loss(&full, &y).unwrap();
        assert!((res.loss - full_res.loss).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_indicator() {
        let t_len = 5;
        let u = 4;
        let c = align(&[1, 1, 2, 3, 4]);
        let w = build_window(&c, u, 0, 1, t_len).unwrap();
        let v1 = 3;
        let full = LogitLattice::new(
            Tensor::new(
                vec![t_len, u + 1, v1],
                (0..t_len * (u + 1) * v1).map(|i| -(i as f64)).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let banded = gather_band(&full, &w).unwrap();
        let back = scatter_band(banded.log_probs(), &w).unwrap();
        for t in 0..t_len {
            for uu in 0..=u {
                for k in 0..v1 {
                    let i = (t * (u + 1) + uu) * v1 + k;
                    let expect = if w.contains(t, uu) {
                        full.log_probs().data()[i]
                    } else {
                        0.0
                    };
                    assert_eq!(back.data()[i], expect);
                }
            }
        }
    }

    #[test]
    fn full_cover_gather_is_identity() {
        let full = uniform_half(3, 2);
        let w = BandWindow::full(3, 2);
        let banded = gather_band(&full, &w).unwrap();
        assert_eq!(banded.log_probs(), full.log_probs());
    }

    #[test]
    fn shape_errors() {
        let full = uniform_half(3, 2);
        let w = BandWindow::full(4, 2);
        assert!(gather_band(&full, &w).is_err());
        let w = BandWindow::full(3, 2);
        let banded = gather_band(&full, &w).unwrap();
        assert!(matches!(
            bat_loss(&banded, &LabelSeq::new(vec![1], 1).unwrap()),
            Err(Error::DimMismatch(_))
        ));
        let bad = Tensor::<f64>::zeros(vec![3, 2, 2]).unwrap();
        assert!(scatter_band(&bad, &w).is_err());
        assert!(BandedLattice::new(w, bad).is_err());
    }
}
