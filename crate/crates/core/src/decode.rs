//! Streaming greedy decoding and emission-latency metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{joint_logits, ToyModel};
pub use crate::numeric::fmt_sig;
use crate::rnnt::{LabelSeq, BLANK};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    /// At least 1. Caps non-blank emissions per frame.
    pub max_symbols_per_frame: usize,
    pub frame_ms: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_symbols_per_frame: 10,
            frame_ms: 40.0,
        }
    }
}

/// Time at the end of zero-based frame `t`.
pub fn frame_end_ms(t: usize, frame_ms: f64) -> f64 {
    (t + 1) as f64 * frame_ms
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub token: usize,
    /// Zero-based frame index.
    pub frame: usize,
    pub time_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmissionTrace {
    pub events: Vec<Emission>,
    pub frame_ms: f64,
}

impl EmissionTrace {
    pub fn new(frame_ms: f64) -> Self {
        Self {
            events: Vec::new(),
            frame_ms,
        }
    }

    pub fn push(&mut self, token: usize, frame: usize) {
        self.events.push(Emission {
            token,
            frame,
            time_ms: frame_end_ms(frame, self.frame_ms),
        });
    }

    pub fn last_time_ms(&self) -> Option<f64> {
        self.events.last().map(|e| e.time_ms)
    }
}

/// Index of the largest score; ties resolve to the lowest index, so blank
/// (index 0) wins any tie it takes part in.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Frame-synchronous greedy search. At each frame the joint is applied
/// repeatedly: a non-blank argmax is emitted and the predictor advances; a
/// blank argmax, or `max_symbols_per_frame` emissions, moves to the next
/// frame.
pub fn greedy_decode(
    model: &ToyModel,
    x: &Tensor<f64>,
    cfg: &DecodeConfig,
) -> Result<(LabelSeq, EmissionTrace)> {
    if cfg.max_symbols_per_frame == 0 {
        return Err(Error::InvalidConfig(
            "max_symbols_per_frame must be >= 1".into(),
        ));
    }
    let h = model.encode(x)?;
    let d = model.config.enc_dim;
    let mut trace = EmissionTrace::new(cfg.frame_ms);
    let mut tokens = Vec::new();
    let mut prev = BLANK;
    for t in 0..h.dims()[0] {
        let ht = &h.data()[t * d..(t + 1) * d];
        for _ in 0..cfg.max_symbols_per_frame {
            let z = joint_logits(ht, model.predictor_embedding(prev), &model.joint)?;
            let k = argmax(&z);
            if k == BLANK {
                break;
            }
            tokens.push(k);
            trace.push(k, t);
            prev = k;
        }
    }
    Ok((LabelSeq::new(tokens, model.config.vocab)?, trace))
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttLatency {
    /// Position in the input trace list.
    pub index: usize,
    pub last_emit_ms: f64,
    pub ref_end_ms: f64,
    /// `last_emit_ms - ref_end_ms`; negative when emitted early.
    pub pr_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub avg_et_ms: f64,
    pub pr50_ms: f64,
    pub pr90_ms: f64,
    pub per_utt: Vec<UttLatency>,
    /// Traces with no emissions; excluded from every statistic.
    pub empty: usize,
}

/// Nearest-rank percentile of a sorted slice: element `ceil(p * n)`, one-based.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn latency_metrics(traces: &[EmissionTrace], ref_end_ms: &[f64]) -> Result<LatencyReport> {
    if traces.len() != ref_end_ms.len() {
        return Err(Error::DimMismatch(format!(
            "{} traces, {} reference ends",
            traces.len(),
            ref_end_ms.len()
        )));
    }
    let per_utt: Vec<UttLatency> = traces
        .iter()
        .zip(ref_end_ms)
        .enumerate()
        .filter_map(|(index, (tr, &end))| {
            tr.last_time_ms().map(|last| UttLatency {
                index,
                last_emit_ms: last,
                ref_end_ms: end,
                pr_ms: last - end,
            })
        })
        .collect();
    if per_utt.is_empty() {
        return Err(Error::EmptySet);
    }
    let avg_et_ms = per_utt.iter().map(|u| u.last_emit_ms).sum::<f64>() / per_utt.len() as f64;
    let mut pr: Vec<f64> = per_utt.iter().map(|u| u.pr_ms).collect();
    pr.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        avg_et_ms,
        pr50_ms: nearest_rank(&pr, 0.5),
        pr90_ms: nearest_rank(&pr, 0.9),
        empty: traces.len() - per_utt.len(),
        per_utt,
    })
}

impl LatencyReport {
    /// Summary as `metric,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        for (k, v) in [
            ("avg_et_ms", self.avg_et_ms),
            ("pr50_ms", self.pr50_ms),
            ("pr90_ms", self.pr90_ms),
            ("decoded", self.per_utt.len() as f64),
            ("empty", self.empty as f64),
        ] {
            w.write_record([k, &fmt_sig(v)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_per_utt_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["utt", "last_emit_ms", "ref_end_ms", "pr_ms"])?;
        for u in &self.per_utt {
            w.write_record([
                u.index.to_string(),
                fmt_sig(u.last_emit_ms),
                fmt_sig(u.ref_end_ms),
                fmt_sig(u.pr_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

const TRACE_HEADER: [&str; 3] = ["frame", "token_index", "token_id"];

/// One row per emission: zero-based frame, position in the hypothesis, token id.
pub fn dump_alignment_csv(trace: &EmissionTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for (i, e) in trace.events.iter().enumerate() {
        w.write_record([e.frame.to_string(), i.to_string(), e.token.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_alignment_csv(path: &Path, frame_ms: f64) -> Result<EmissionTrace> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(TRACE_HEADER) {
        return Err(Error::Parse(format!(
            "alignment CSV header must be {TRACE_HEADER:?}"
        )));
    }
    let mut trace = EmissionTrace::new(frame_ms);
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| -> Result<usize> {
            rec[j]
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: {}: {e}", i + 1, TRACE_HEADER[j])))
        };
        if field(1)? != i {
            return Err(Error::Parse(format!(
                "row {}: token_index out of order",
                i + 1
            )));
        }
        trace.push(field(2)?, field(0)?);
    }
    Ok(trace)
}

/// Several traces in one CSV with a leading `utt` column and emission time.
pub fn write_traces_csv(traces: &[EmissionTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["utt", "frame", "token_index", "token_id", "time_ms"])?;
    for (u, tr) in traces.iter().enumerate() {
        for (i, e) in tr.events.iter().enumerate() {
            w.write_record([
                u.to_string(),
                e.frame.to_string(),
                i.to_string(),
                e.token.to_string(),
                fmt_sig(e.time_ms),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a [`write_traces_csv`] file back into `n_utts` traces; utterances
/// without rows come back empty. `time_ms` is recomputed from `frame`.
pub fn read_traces_csv(path: &Path, frame_ms: f64, n_utts: usize) -> Result<Vec<EmissionTrace>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = ["utt", "frame", "token_index", "token_id", "time_ms"];
    if r.headers()?.iter().ne(header) {
        return Err(Error::Parse(format!(
            "traces CSV header must be {header:?}"
        )));
    }
    let mut traces = vec![EmissionTrace::new(frame_ms); n_utts];
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| -> Result<usize> {
            rec[j]
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: {}: {e}", i + 1, header[j])))
        };
        let utt = field(0)?;
        let trace = traces.get_mut(utt).ok_or_else(|| {
            Error::DimMismatch(format!(
                "row {}: utt {utt} but only {n_utts} utterances",
                i + 1
            ))
        })?;
        if field(2)? != trace.events.len() {
            return Err(Error::Parse(format!(
                "row {}: token_index out of order",
                i + 1
            )));
        }
        trace.push(field(3)?, field(1)?);
    }
    Ok(traces)
}
