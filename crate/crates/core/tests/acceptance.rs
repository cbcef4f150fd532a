//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and fails if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use bat_core::bench::{self, BenchConfig, TIMING_COLUMNS};
use bat_core::cif::{cif_boundary, cif_fire, cif_scale, clamp_weights, CifAlignment};
use bat_core::decode::{edit_distance, frame_end_ms, greedy_decode, latency_metrics, DecodeConfig};
use bat_core::gradcheck::{
    check_bat_grad, check_cif_backward, check_cif_ce, check_model_grad, check_rnnt_grad,
    crossing_margin, random_instance, FD_STEP,
};
use bat_core::model::{synth_task, Mode, ModelConfig, SynthSpec, ToyModel, TrainConfig};
use bat_core::numeric::log_sum_exp_slice;
use bat_core::rng::{self, DetRng};
use bat_core::rnnt::{rnnt_backward, rnnt_forward, rnnt_loss_bruteforce};
use bat_core::{
    bat_loss, build_window, gather_band, rnnt_loss, scatter_band, Error, LabelSeq, Tensor,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Writes past the test harness capture so the summary always shows.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn alignment(r: &mut DetRng, t: usize, u: usize) -> CifAlignment {
    let raw: Vec<f64> = (0..t).map(|_| rng::uniform(r, 0.05, 1.0)).collect();
    cif_boundary(&clamp_weights(&cif_scale(&raw, u).unwrap().scaled))
}

fn dims(r: &mut DetRng, t_max: usize, u_max: usize, v_max: usize) -> (usize, usize, usize) {
    let t = 1 + (rng::uniform(r, 0.0, t_max as f64) as usize).min(t_max - 1);
    let u = (rng::uniform(r, 0.0, (u_max + 1) as f64) as usize).min(u_max);
    let v = 1 + (rng::uniform(r, 0.0, v_max as f64) as usize).min(v_max - 1);
    (t, u, v)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng::split(1, rng::stream::CHECK);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (t, u, v) = dims(&mut r, 4, 3, 3);
        let (lat, y) = random_instance(&mut r, t, u, v);
        let fast = rnnt_loss(&lat, &y).unwrap().loss;
        worst = worst.max((fast - rnnt_loss_bruteforce(&lat, &y).unwrap()).abs());
    }
    let el = start.elapsed();
    Outcome::new(
        worst < 1e-9 && el < Duration::from_secs(10),
        format!("max |diff| {worst:.2e}, {el:.2?}"),
    )
}

fn diagonal_identity() -> Outcome {
    let mut r = rng::split(2, rng::stream::CHECK);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (t, u, v) = dims(&mut r, 10, 8, 6);
        let (lat, y) = random_instance(&mut r, t, u, v);
        let a = rnnt_forward(&lat, &y).unwrap();
        let b = rnnt_backward(&lat, &y).unwrap();
        let log_z = b.data()[0];
        for n in 0..t + u {
            let terms: Vec<f64> = (0..t)
                .filter(|&ti| n >= ti && n - ti <= u)
                .map(|ti| {
                    let k = ti * (u + 1) + n - ti;
                    a.data()[k] + b.data()[k]
                })
                .collect();
            worst = worst.max((log_sum_exp_slice(&terms) - log_z).abs());
        }
    }
    Outcome::new(worst < 1e-9, format!("max |diff| {worst:.2e}"))
}

fn raw_with_margin(r: &mut DetRng, t: usize, u: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..t).map(|_| rng::uniform(r, 0.1, 0.95)).collect();
        if crossing_margin(&cif_scale(&raw, u).unwrap().scaled) > 1e-3 {
            return raw;
        }
    }
}

fn normal_vec(r: &mut DetRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng::normal(r)).collect()
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut r = rng::split(3, rng::stream::CHECK);
    let mut errs = [0.0f64; 5];
    for _ in 0..10 {
        let (t, u, v) = dims(&mut r, 6, 4, 4);
        let (lat, y) = random_instance(&mut r, t, u, v);
        errs[0] = errs[0].max(check_rnnt_grad(&lat, &y, FD_STEP).unwrap());
    }
    for (t, u, rd, ru) in [(6, 4, 1, 0), (8, 5, 1, 1), (7, 6, 0, 0), (9, 7, 1, 0)] {
        let (lat, y) = random_instance(&mut r, t, u, 3);
        let c = cif_boundary(&clamp_weights(
            &cif_scale(&raw_with_margin(&mut r, t, u), u).unwrap().scaled,
        ));
        let w = build_window(&c, u, rd, ru, t).unwrap();
        let err = check_bat_grad(&gather_band(&lat, &w).unwrap(), &y, FD_STEP).unwrap();
        errs[1] = errs[1].max(err);
    }
    for (t, u, d, v) in [(6, 3, 4, 5), (8, 4, 3, 6)] {
        let raw = raw_with_margin(&mut r, t, u);
        let h = Tensor::new(vec![t, d], normal_vec(&mut r, t * d)).unwrap();
        let fired = cif_fire(&cif_scale(&raw, u).unwrap().scaled, &h, u, 1.0).unwrap();
        let clf = bat_core::cif::Classifier::random(v, d, &mut r);
        let y = LabelSeq::new((0..u).map(|i| 1 + i % v).collect(), v).unwrap();
        errs[2] = errs[2].max(check_cif_ce(&fired, &y, &clf, FD_STEP).unwrap());
        let upstream = normal_vec(&mut r, u * d);
        errs[3] = errs[3].max(check_cif_backward(&raw, &h, u, &upstream, FD_STEP).unwrap());
    }
    let cfg = ModelConfig {
        input_dim: 3,
        context: 2,
        enc_dim: 4,
        pred_dim: 3,
        joint_dim: 4,
        vocab: 3,
        cif_kernel: 3,
    };
    let y = LabelSeq::new(vec![3, 1], 3).unwrap();
    let mut checked = 0;
    while checked < 4 {
        let m = ToyModel::new(cfg.clone(), rand::RngCore::next_u64(&mut r)).unwrap();
        let x = Tensor::new(vec![5, 3], normal_vec(&mut r, 15)).unwrap();
        let h = m.encode(&x).unwrap();
        let raw = bat_core::cif::cif_predict_weights(&h, &m.cif).unwrap().raw;
        let total: f64 = raw.iter().sum();
        if crossing_margin(&cif_scale(&raw, 2).unwrap().scaled) <= 1e-3
            || (total - 2.0).abs() <= 1e-3
        {
            continue;
        }
        let mode = if checked % 2 == 0 {
            Mode::Full
        } else {
            Mode::Bat
        };
        let tc = TrainConfig {
            mode,
            r_d: 0,
            r_u: 0,
            ..TrainConfig::default()
        };
        errs[4] = errs[4].max(check_model_grad(&m, &x, &y, &tc, FD_STEP).unwrap());
        checked += 1;
    }
    let el = start.elapsed();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Outcome::new(
        worst < 1e-4 && el < Duration::from_secs(60),
        format!(
            "rnnt {:.1e} bat {:.1e} ce {:.1e} cif {:.1e} total {:.1e}, {el:.2?}",
            errs[0], errs[1], errs[2], errs[3], errs[4]
        ),
    )
}

fn band_equivalence() -> Outcome {
    let mut r = rng::split(4, rng::stream::CHECK);
    let (mut loss_diff, mut grad_diff) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (t, u, v) = dims(&mut r, 10, 6, 5);
        let (lat, y) = random_instance(&mut r, t, u, v);
        let c = alignment(&mut r, t, u);
        let rd = (rng::uniform(&mut r, 0.0, 3.0) as usize).min(2);
        let ru = u.saturating_sub(1 + rd);
        let w = build_window(&c, u, rd, ru, t).unwrap();
        assert!(w.width() >= u + 1);
        let band = bat_loss(&gather_band(&lat, &w).unwrap(), &y).unwrap();
        let full = rnnt_loss(&lat, &y).unwrap();
        loss_diff = loss_diff.max((band.loss - full.loss).abs());
        let scattered = scatter_band(&band.grad, &w).unwrap();
        for (a, b) in scattered.data().iter().zip(full.grad.data()) {
            grad_diff = grad_diff.max((a - b).abs());
        }
    }
    Outcome::new(
        loss_diff < 1e-9 && grad_diff < 1e-9,
        format!("max loss diff {loss_diff:.2e}, max grad diff {grad_diff:.2e}"),
    )
}

fn band_monotonicity() -> Outcome {
    let mut r = rng::split(5, rng::stream::CHECK);
    let mut violations = 0;
    for _ in 0..50 {
        let t = 8 + (rng::uniform(&mut r, 0.0, 8.0) as usize);
        let u = 4 + (rng::uniform(&mut r, 0.0, (t - 3) as f64) as usize).min(t - 4);
        let (lat, y) = random_instance(&mut r, t, u, 4);
        let c = alignment(&mut r, t, u);
        let mut prev = f64::INFINITY;
        for (rd, ru) in [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (3, 3), (u, u)] {
            let w = build_window(&c, u, rd, ru, t).unwrap();
            let loss = bat_loss(&gather_band(&lat, &w).unwrap(), &y).unwrap().loss;
            if loss > prev + 1e-12 {
                violations += 1;
            }
            prev = loss;
        }
    }
    Outcome::new(violations == 0, format!("{violations} increases"))
}

fn cif_invariants() -> Outcome {
    let mut r = rng::split(6, rng::stream::CHECK);
    let mut failures = Vec::new();
    for i in 0..500 {
        let t = 1 + (rng::uniform(&mut r, 0.0, 40.0) as usize).min(39);
        let u = (rng::uniform(&mut r, 0.0, (t + 1) as f64) as usize).min(t);
        let raw: Vec<f64> = (0..t).map(|_| rng::uniform(&mut r, 0.01, 1.0)).collect();
        let scaled = cif_scale(&raw, u).unwrap().scaled;
        let c = cif_boundary(&clamp_weights(&scaled));
        let h = Tensor::new(vec![t, 2], normal_vec(&mut r, 2 * t)).unwrap();
        let fired = cif_fire(&scaled, &h, u, 1.0).unwrap();
        let ok = c.is_monotone_continuous()
            && c.boundary.last() == Some(&u)
            && fired.u_len() == u
            && fired
                .token_weights()
                .iter()
                .all(|w| (w - 1.0).abs() <= 1e-6);
        if !ok {
            failures.push(i);
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!("{} of 500 vectors failed", failures.len()),
    )
}

fn window_construction() -> Outcome {
    let mut r = rng::split(7, rng::stream::CHECK);
    let mut shape_ok = true;
    for _ in 0..200 {
        let (t, _, _) = dims(&mut r, 20, 0, 1);
        let (rd, ru) = (
            rng::uniform(&mut r, 0.0, 3.0) as usize,
            rng::uniform(&mut r, 0.0, 3.0) as usize,
        );
        let u = (rng::uniform(&mut r, 0.0, (t + 1) as f64) as usize).min(t);
        let w = build_window(&alignment(&mut r, t, u), u, rd, ru, t).unwrap();
        let o = w.starts();
        shape_ok &= o[0] == 0
            && o[t - 1] == u + 1 - w.width()
            && o.windows(2).all(|p| p[1] == p[0] || p[1] == p[0] + 1);
    }
    let example = CifAlignment {
        boundary: vec![1, 1, 1, 2, 2, 3, 3, 4, 4, 4],
    };
    let got = build_window(&example, 4, 1, 1, 10).unwrap();
    let example_ok = got.starts() == [0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
    let mut iff_ok = true;
    for t in 1usize..=8 {
        for u in 0..=16 {
            for rd in 0..=2 {
                for ru in 0..=2 {
                    let c = CifAlignment {
                        boundary: (0..t).map(|i| ((i + 1) * u).div_ceil(t)).collect(),
                    };
                    let infeasible = matches!(
                        build_window(&c, u, rd, ru, t),
                        Err(Error::BandInfeasible { .. })
                    );
                    iff_ok &= infeasible == (u > t + rd + ru);
                }
            }
        }
    }
    Outcome::new(
        shape_ok && example_ok && iff_ok,
        format!(
            "shape {shape_ok}, example {:?}, infeasible iff {iff_ok}",
            got.starts()
        ),
    )
}

fn bench_config() -> BenchConfig {
    BenchConfig {
        t: 200,
        u: 50,
        v: 500,
        r_d: 2,
        r_u: 2,
        ..BenchConfig::default()
    }
}

fn memory_and_time(first_csv: &mut Option<String>) -> Outcome {
    let start = Instant::now();
    let report = bench::run_bench(&bench_config()).unwrap();
    let el = start.elapsed();
    *first_csv = Some(bench::report_csv(&report).unwrap());
    let exact = report.banded.peak_bytes * 51 == report.full.peak_bytes * 6;
    let banded_over_full = report.banded.median_ms / report.full.median_ms;
    Outcome::new(
        exact && banded_over_full <= 0.5 && el < Duration::from_secs(120),
        format!(
            "peak {} / {} bytes (= 6/51: {exact}), banded/full time {banded_over_full:.3}, {el:.2?}",
            report.banded.peak_bytes, report.full.peak_bytes
        ),
    )
}

struct RunResult {
    mode: Mode,
    seed: u64,
    held_out_ter: f64,
    avg_et_ms: f64,
    pr50_ms: f64,
    pr90_ms: f64,
    evals_match: bool,
    elapsed: Duration,
}

fn acceptance_train_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        lr: 3e-3,
        weight_decay: 1e-2,
        seed,
        epochs: 1000,
        batch_size: 8,
        max_steps: Some(3000),
        ..TrainConfig::default()
    }
}

fn train_and_evaluate(mode: Mode, seed: u64) -> RunResult {
    let spec = SynthSpec::default();
    let data = synth_task(seed, 2000, &spec).unwrap();
    let held_out = synth_task(1000 + seed, 200, &spec).unwrap();
    let start = Instant::now();
    let mut model = ToyModel::new(ModelConfig::default(), seed).unwrap();
    let log =
        bat_core::model::train(&mut model, &data, &acceptance_train_config(mode, seed)).unwrap();
    let elapsed = start.elapsed();
    let decode = DecodeConfig::default();
    let (mut errs, mut total) = (0, 0);
    let mut traces = Vec::new();
    let mut ends = Vec::new();
    for utt in &held_out.utts {
        let (hyp, trace) = greedy_decode(&model, &utt.x, &decode).unwrap();
        errs += edit_distance(hyp.tokens(), utt.labels.tokens());
        total += utt.labels.len();
        traces.push(trace);
        ends.push(frame_end_ms(*utt.ends.last().unwrap(), decode.frame_ms));
    }
    let lat = latency_metrics(&traces, &ends).unwrap();
    RunResult {
        mode,
        seed,
        held_out_ter: errs as f64 / total as f64,
        avg_et_ms: lat.avg_et_ms,
        pr50_ms: lat.pr50_ms,
        pr90_ms: lat.pr90_ms,
        evals_match: mode == Mode::Full || log.joint_evals == log.band_cells,
        elapsed,
    }
}

fn toy_training(runs: &[RunResult]) -> Outcome {
    let seed0: Vec<&RunResult> = runs.iter().filter(|r| r.seed == 0).collect();
    let pass = seed0.len() == 2
        && seed0.iter().all(|r| {
            r.held_out_ter <= 0.05 && r.evals_match && r.elapsed < Duration::from_secs(600)
        });
    let detail: Vec<String> = seed0
        .iter()
        .map(|r| {
            format!(
                "{:?}: TER {:.2}% in {:.1?}, evals==T*S {}",
                r.mode,
                100.0 * r.held_out_ter,
                r.elapsed,
                r.evals_match
            )
        })
        .collect();
    Outcome::new(pass, detail.join("; "))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn latency_direction(runs: &[RunResult]) -> Outcome {
    let et = |m: Mode| {
        median(
            runs.iter()
                .filter(|r| r.mode == m)
                .map(|r| r.avg_et_ms)
                .collect(),
        )
    };
    let (bat, full) = (et(Mode::Bat), et(Mode::Full));
    let ordered = runs.iter().all(|r| r.pr50_ms <= r.pr90_ms);
    Outcome::new(
        bat <= full && ordered,
        format!("median avg ET bat {bat:.1} ms, full {full:.1} ms; PR50<=PR90 {ordered}"),
    )
}

fn determinism(first_bench: &str) -> Outcome {
    let spec = SynthSpec::default();
    let data = synth_task(11, 200, &spec).unwrap();
    let run = |mode| {
        let mut model = ToyModel::new(ModelConfig::default(), 11).unwrap();
        let cfg = TrainConfig {
            max_steps: Some(100),
            ..acceptance_train_config(mode, 11)
        };
        bat_core::model::train(&mut model, &data, &cfg)
            .unwrap()
            .to_csv()
    };
    let logs_equal = [Mode::Full, Mode::Bat]
        .into_iter()
        .all(|m| run(m) == run(m));
    let second = bench::report_csv(&bench::run_bench(&bench_config()).unwrap()).unwrap();
    let strip = |csv: &str| -> Vec<Vec<String>> {
        let mut lines = csv.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        lines
            .map(|l| {
                l.split(',')
                    .zip(&header)
                    .filter(|(_, h)| !TIMING_COLUMNS.contains(h))
                    .map(|(f, _)| f.to_string())
                    .collect()
            })
            .collect()
    };
    let bench_equal = strip(first_bench) == strip(&second);
    Outcome::new(
        logs_equal && bench_equal,
        format!("training logs identical {logs_equal}, bench rows identical {bench_equal}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        emit(&format!("{tag} criterion {n} ({name}): {}", o.detail));
        outcomes.push((n, name, o));
    };
    record(1, "oracle equivalence", oracle_equivalence());
    record(2, "diagonal identity", diagonal_identity());
    record(3, "gradient checks", gradient_checks());
    record(4, "band equivalence", band_equivalence());
    record(5, "band monotonicity", band_monotonicity());
    record(6, "cif invariants", cif_invariants());
    record(7, "window construction", window_construction());
    let mut first_bench = None;
    record(8, "memory and time", memory_and_time(&mut first_bench));

    let mut runs = Vec::new();
    for seed in 0..5 {
        for mode in [Mode::Full, Mode::Bat] {
            let r = train_and_evaluate(mode, seed);
            emit(&format!(
                "  run seed {seed} {mode:?}: TER {:.2}%, avg ET {:.1} ms, PR50 {} ms, PR90 {} ms, {:.1?}",
                100.0 * r.held_out_ter,
                r.avg_et_ms,
                r.pr50_ms,
                r.pr90_ms,
                r.elapsed
            ));
            runs.push(r);
        }
    }
    record(9, "toy training", toy_training(&runs));
    record(10, "latency direction", latency_direction(&runs));
    record(
        11,
        "determinism",
        determinism(first_bench.as_deref().unwrap()),
    );

    let failed: Vec<usize> = outcomes
        .iter()
        .filter(|(_, _, o)| !o.pass)
        .map(|(n, _, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
