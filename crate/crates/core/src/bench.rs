//! Time and memory comparison of the full and banded loss kernels on
//! identical synthetic lattices.
//!
//! Memory is the peak of tracked buffers (lattices, forward/backward
//! variables, gradients), not process RSS, so it is exact and repeatable.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::band::{bat_loss_tracked, build_window, gather_band, BandWindow};
use crate::cif::CifAlignment;
use crate::decode::fmt_sig;
use crate::error::{Error, Result};
use crate::memory::MemTracker;
use crate::numeric::log_softmax_into;
use crate::rng;
use crate::rnnt::{rnnt_loss_tracked, LabelSeq, LogitLattice};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Batch size: independent lattices per timed run.
    pub n: usize,
    pub t: usize,
    pub u: usize,
    pub v: usize,
    pub r_d: usize,
    pub r_u: usize,
    pub dtype: DType,
    /// At least 3.
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 1,
            t: 200,
            u: 50,
            v: 500,
            r_d: 2,
            r_u: 2,
            dtype: DType::F32,
            repeats: 9,
            warmup: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 || self.u == 0 || self.v == 0 {
            return Err(Error::InvalidConfig("n, t, u and v must be >= 1".into()));
        }
        if self.repeats < 3 {
            return Err(Error::InvalidConfig(format!(
                "repeats must be >= 3, got {}",
                self.repeats
            )));
        }
        if self.dtype == DType::I64 {
            return Err(Error::InvalidConfig(
                "bench dtype must be f32 or f64".into(),
            ));
        }
        Ok(())
    }

    /// Stored rows per frame in the banded layout.
    pub fn width(&self) -> usize {
        (self.r_d + self.r_u + 2).min(self.u + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub kernel: String,
    /// Rows per frame: `U+1` or `S`.
    pub width: usize,
    pub median_ms: f64,
    /// Input lattices for the whole batch.
    pub lattice_bytes: usize,
    /// Highest simultaneously live tracked bytes.
    pub peak_bytes: usize,
    /// Sum of losses over the batch; identical across runs.
    pub loss_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub full: KernelStats,
    pub banded: KernelStats,
}

impl BenchReport {
    /// Full over banded; larger means the band is cheaper.
    pub fn time_ratio(&self) -> f64 {
        self.full.median_ms / self.banded.median_ms
    }

    pub fn memory_ratio(&self) -> f64 {
        self.full.peak_bytes as f64 / self.banded.peak_bytes as f64
    }

    pub fn lattice_ratio(&self) -> f64 {
        self.full.lattice_bytes as f64 / self.banded.lattice_bytes as f64
    }
}

/// Evenly spread alignment: `C_t = ceil((t+1) U / T)`.
fn linear_alignment(t_len: usize, u: usize) -> CifAlignment {
    CifAlignment {
        boundary: (0..t_len).map(|t| ((t + 1) * u).div_ceil(t_len)).collect(),
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

struct Item<S> {
    full: LogitLattice<S>,
    labels: LabelSeq,
}

fn make_items<S: Scalar>(cfg: &BenchConfig) -> Result<Vec<Item<S>>> {
    let mut r = rng::split(cfg.seed, rng::stream::BENCH);
    let v1 = cfg.v + 1;
    (0..cfg.n)
        .map(|_| {
            let rows = cfg.t * (cfg.u + 1);
            let mut lp = vec![S::zero(); rows * v1];
            let mut scores = vec![S::zero(); v1];
            for dst in lp.chunks_exact_mut(v1) {
                scores
                    .iter_mut()
                    .for_each(|s| *s = S::from_acc(rng::normal(&mut r)));
                log_softmax_into(&scores, dst)?;
            }
            let labels = (0..cfg.u)
                .map(|_| 1 + (rng::uniform(&mut r, 0.0, cfg.v as f64) as usize).min(cfg.v - 1))
                .collect();
            Ok(Item {
                full: LogitLattice::new(Tensor::new(vec![cfg.t, cfg.u + 1, v1], lp)?)?,
                labels: LabelSeq::new(labels, cfg.v)?,
            })
        })
        .collect()
}

fn run_typed<S: Scalar>(cfg: &BenchConfig) -> Result<BenchReport> {
    let window = build_window(
        &linear_alignment(cfg.t, cfg.u),
        cfg.u,
        cfg.r_d,
        cfg.r_u,
        cfg.t,
    )?;
    let items = make_items::<S>(cfg)?;
    let banded = items
        .iter()
        .map(|it| gather_band(&it.full, &window))
        .collect::<Result<Vec<_>>>()?;

    let full_stats = measure(cfg, "full", cfg.u + 1, |tracker| {
        let lattices: usize = items.iter().map(|it| it.full.log_probs().nbytes()).sum();
        let _lat = tracker.track(lattices);
        let mut grads = Vec::with_capacity(items.len());
        let mut loss = 0.0;
        for it in &items {
            let res = rnnt_loss_tracked(&it.full, &it.labels, Some(tracker))?;
            grads.push(tracker.track(res.grad.nbytes()));
            loss += res.loss;
        }
        Ok((lattices, loss))
    })?;
    let band_stats = measure(cfg, "banded", window.width(), |tracker| {
        let lattices: usize = banded.iter().map(|b| b.nbytes()).sum();
        let _lat = tracker.track(lattices);
        let mut grads = Vec::with_capacity(items.len());
        let mut loss = 0.0;
        for (b, it) in banded.iter().zip(&items) {
            let res = bat_loss_tracked(b, &it.labels, Some(tracker))?;
            grads.push(tracker.track(res.grad.nbytes()));
            loss += res.loss;
        }
        Ok((lattices, loss))
    })?;
    Ok(BenchReport {
        config: cfg.clone(),
        full: full_stats,
        banded: band_stats,
    })
}

/// Runs `f` `warmup + repeats` times; `f` returns (lattice bytes, loss sum).
fn measure<F>(cfg: &BenchConfig, kernel: &str, width: usize, mut f: F) -> Result<KernelStats>
where
    F: FnMut(&MemTracker) -> Result<(usize, f64)>,
{
    let tracker = MemTracker::new();
    for _ in 0..cfg.warmup {
        f(&tracker)?;
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut last = (0, 0.0);
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        last = f(&tracker)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(KernelStats {
        kernel: kernel.to_string(),
        width,
        median_ms: median(&mut times),
        lattice_bytes: last.0,
        peak_bytes: tracker.peak(),
        loss_sum: last.1,
    })
}

/// Benchmarks both kernels. The band follows an evenly spread alignment.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    match cfg.dtype {
        DType::F32 => run_typed::<f32>(cfg),
        DType::F64 => run_typed::<f64>(cfg),
        DType::I64 => unreachable!("rejected by validate"),
    }
}

/// Window the benchmark uses for `cfg`.
pub fn bench_window(cfg: &BenchConfig) -> Result<BandWindow> {
    build_window(
        &linear_alignment(cfg.t, cfg.u),
        cfg.u,
        cfg.r_d,
        cfg.r_u,
        cfg.t,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "text" => Ok(Self::Text),
            other => Err(Error::InvalidConfig(format!(
                "format must be csv or text, got {other}"
            ))),
        }
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "kernel",
    "n",
    "t",
    "u",
    "v",
    "width",
    "dtype",
    "repeats",
    "seed",
    "median_ms",
    "lattice_bytes",
    "peak_bytes",
    "loss_sum",
];

/// Columns whose values depend on wall-clock time.
pub const TIMING_COLUMNS: [&str; 1] = ["median_ms"];

pub fn report_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    let c = &report.config;
    for k in [&report.full, &report.banded] {
        w.write_record([
            k.kernel.clone(),
            c.n.to_string(),
            c.t.to_string(),
            c.u.to_string(),
            c.v.to_string(),
            k.width.to_string(),
            c.dtype.name().to_string(),
            c.repeats.to_string(),
            c.seed.to_string(),
            fmt_sig(k.median_ms),
            k.lattice_bytes.to_string(),
            k.peak_bytes.to_string(),
            fmt_sig(k.loss_sum),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .map_err(|e| Error::Parse(e.to_string()))
}

pub fn report_text(report: &BenchReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "config: n={} t={} u={} v={} r_d={} r_u={} dtype={} repeats={} warmup={} seed={}",
        c.n,
        c.t,
        c.u,
        c.v,
        c.r_d,
        c.r_u,
        c.dtype.name(),
        c.repeats,
        c.warmup,
        c.seed
    );
    for k in [&report.full, &report.banded] {
        let _ = writeln!(
            s,
            "{:<7} width={:<4} median_ms={:<12} lattice_bytes={:<12} peak_bytes={:<12} loss_sum={}",
            k.kernel,
            k.width,
            fmt_sig(k.median_ms),
            k.lattice_bytes,
            k.peak_bytes,
            fmt_sig(k.loss_sum)
        );
    }
    let _ = writeln!(
        s,
        "ratio full/banded: time={} memory={} lattice={}",
        fmt_sig(report.time_ratio()),
        fmt_sig(report.memory_ratio()),
        fmt_sig(report.lattice_ratio())
    );
    s
}

pub fn emit_report(report: &BenchReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => report_csv(report)?,
        ReportFormat::Text => report_text(report),
    };
    std::fs::write(path, body)?;
    Ok(())
}

/// One parsed CSV row of a bench report.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct BenchRow {
    pub kernel: String,
    pub n: usize,
    pub t: usize,
    pub u: usize,
    pub v: usize,
    pub width: usize,
    pub dtype: String,
    pub repeats: usize,
    pub seed: u64,
    pub median_ms: f64,
    pub lattice_bytes: usize,
    pub peak_bytes: usize,
    pub loss_sum: f64,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::Parse("unexpected bench CSV header".into()));
    }
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<BenchRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            n: 2,
            t: 20,
            u: 9,
            v: 7,
            r_d: 1,
            r_u: 1,
            dtype: DType::F64,
            repeats: 3,
            warmup: 0,
            seed: 4,
        }
    }

    #[test]
    fn bytes_follow_formulas() {
        let cfg = small();
        let rep = run_bench(&cfg).unwrap();
        let sz = 8;
        assert_eq!(rep.full.lattice_bytes, 2 * 20 * 10 * 8 * sz);
        assert_eq!(rep.banded.lattice_bytes, 2 * 20 * 4 * 8 * sz);
        // lattices + gradients for the batch, plus one item's alpha and beta
        assert_eq!(
            rep.full.peak_bytes,
            2 * 2 * 20 * 10 * 8 * sz + 2 * 20 * 10 * 8
        );
        assert_eq!(rep.banded.peak_bytes * 10, rep.full.peak_bytes * 4);
        assert_eq!(rep.lattice_ratio(), 2.5);
    }

    #[test]
    fn f32_halves_lattice_bytes() {
        let cfg = BenchConfig {
            dtype: DType::F32,
            ..small()
        };
        assert_eq!(
            run_bench(&cfg).unwrap().full.lattice_bytes,
            2 * 20 * 10 * 8 * 4
        );
    }

    #[test]
    fn csv_round_trip_and_ratios() {
        let rep = run_bench(&small()).unwrap();
        let text = report_csv(&rep).unwrap();
        let rows = parse_report_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].kernel, "full");
        assert_eq!(rows[0].peak_bytes, rep.full.peak_bytes);
        assert_eq!(rows[1].lattice_bytes, rep.banded.lattice_bytes);
        let ratio = rows[0].lattice_bytes as f64 / rows[1].lattice_bytes as f64;
        assert_eq!(ratio, (rows[0].width as f64) / rows[1].width as f64);
    }

    #[test]
    fn text_echoes_config() {
        let rep = run_bench(&small()).unwrap();
        let text = report_text(&rep);
        assert!(text.contains("n=2 t=20 u=9 v=7 r_d=1 r_u=1 dtype=f64 repeats=3"));
        assert!(text.contains("ratio full/banded"));
    }

    #[test]
    fn validates_config() {
        let bad = BenchConfig {
            repeats: 2,
            ..small()
        };
        assert!(matches!(run_bench(&bad), Err(Error::InvalidConfig(_))));
        let infeasible = BenchConfig { t: 3, ..small() };
        assert!(matches!(
            run_bench(&infeasible),
            Err(Error::BandInfeasible { .. })
        ));
    }

    #[test]
    fn loss_sum_is_reproducible() {
        let a = run_bench(&small()).unwrap();
        let b = run_bench(&small()).unwrap();
        assert_eq!(a.full.loss_sum.to_bits(), b.full.loss_sum.to_bits());
        assert!(a.banded.loss_sum >= a.full.loss_sum);
    }
}
