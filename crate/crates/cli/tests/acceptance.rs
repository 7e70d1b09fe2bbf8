//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line
//! straight to stderr so the verdicts show up even when output is captured.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lambdarc::budget::{effective_target, open_minigop, record_p_frame, BudgetConfig, BudgetState};
use lambdarc::controller::{compose_lambda, ControllerState, ControllerWeights, DEFAULT_DELTA_MAX, PARAMETER_COUNT};
use lambdarc::features::{build_budget_features, build_coding_stats, BudgetFeatures, CodingStats};
use lambdarc::metrics::{alignment_report, bd_rate, delta_r, RdPoint};
use lambdarc::pi::{log_error, pi_step, PiBounds, PiGains, PiState};
use lambdarc::pipeline::{encode_sequence, mean_p_rate, sequence_quality, write_frames_csv, ControlSetup, Mode, SequenceConfig};
use lambdarc::plant::{CodecPlant, SyntheticCodecParams, SyntheticSequence, TracePlant, TraceTable};
use lambdarc::train::{
    adam_step, build_target_budget, gradient_check, episode_targets, lr_at_epoch, record_episode, train, trajectory_loss,
    AdamState, Episode, EpisodeTarget, GradCheckConfig, LossWeights, TrainConfig, TrainOutcome, TrainSetup,
};

fn verdict(n: u32, title: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {n:>2} {:<4} {title}: {detail} [{:.2}s]\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn held_out(seed: u64, frames: usize) -> SyntheticSequence {
    SyntheticSequence::generate(SyntheticCodecParams { seed, ..Default::default() }, frames).unwrap()
}

fn desk_targets() -> Vec<f64> {
    let p = SyntheticCodecParams::default();
    [256.0, 512.0, 1024.0, 2048.0].iter().map(|&l| p.nominal_rate(l)).collect()
}

const HELD_OUT: std::ops::Range<u64> = 1000..1010;

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_equation_oracles() {
    let t0 = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        if !((got - want).abs() <= tol) {
            failures.push(format!("{name}: got {got}, want {want} ± {tol}"));
        }
    };
    let p = SyntheticCodecParams::default();

    // Plant: closed-form rate, log-log interpolation.
    let flat = SyntheticSequence::generate(
        SyntheticCodecParams { ar_coeff: 0.0, log_noise_sigma: 0.0, ..p },
        5,
    )
    .unwrap();
    let c0 = flat.frames()[0].complexity;
    check("rate at λ=1024", flat.encode_frame(1, 1024.0).unwrap().bpp_total, c0 * 0.001 * 128.0, 1e-15);
    let s = |lambda: f64, total: f64| lambdarc::plant::TraceSample {
        lambda,
        bpp_mv: 0.2 * total,
        bpp_res: 0.8 * total,
        distortion: 1.0 / lambda,
        motion_sparsity: 0.5,
        warp_error: 1.0,
    };
    let trace = TracePlant::new(TraceTable::new(vec![vec![s(100.0, 0.05), s(400.0, 0.20)]]).unwrap());
    check("trace midpoint", trace.encode_frame(0, 200.0).unwrap().bpp_total, 0.10, 1e-15);

    // Lag-1 autocorrelation of log complexity, Monte Carlo over 100 seeds.
    let mut rho = 0.0;
    for seed in 0..100 {
        let x: Vec<f64> = held_out(seed, 96).frames().iter().map(|f| f.complexity.ln()).collect();
        let m = x.iter().sum::<f64>() / 96.0;
        let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        rho += x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / var;
    }
    check("AR(1) lag-1 autocorrelation", rho / 100.0, 0.9, 0.15);

    // PI law.
    check("log error 1.2", log_error(0.12, 0.10).unwrap(), 1.2f64.ln(), 1e-15);
    check("log error 0.5", log_error(0.05, 0.10).unwrap(), -(2f64.ln()), 1e-15);
    let (g, b) = (PiGains::default(), PiBounds::default());
    let s0 = PiState::new(1024.0, &b);
    let (s1, d1) = pi_step(&s0, &g, &b, 1.2f64.ln());
    check("PI integral", s1.integral, 1.2f64.ln(), 1e-15);
    check("PI increment", d1, -0.95 * 1.2f64.ln(), 1e-15);
    check("PI λ", s1.lambda_base, 1024.0 * (-0.95 * 1.2f64.ln()).exp(), 1e-9);
    check("PI λ quoted", s1.lambda_base, 861.13, 861.13 * 5e-5);
    let (s2, d2) = pi_step(&s0, &g, &b, 2.0);
    check("PI clipped increment", d2, -0.30, 1e-15);
    check("PI clipped λ", s2.lambda_base, 1024.0 * (-0.30f64).exp(), 1e-9);

    // Budget: mini-GOP budget and effective target.
    let cfg = BudgetConfig::with_defaults(0.1);
    let st = BudgetState {
        coded_p_frames: 8,
        accumulated_bits: 0.9,
        ..Default::default()
    };
    let opened = open_minigop(&cfg, &st);
    check("mini-GOP budget", opened.minigop_budget, (4.8 - 0.9) / 40.0 * 4.0, 1e-12);
    let mid = BudgetState {
        minigop_budget: 0.4,
        spent_in_minigop: 0.35,
        frames_left_in_minigop: 1,
        ..Default::default()
    };
    check("effective target", effective_target(&BudgetConfig { r_min: 0.01, ..cfg }, &mid), 0.05, 1e-15);
    let a = record_p_frame(&cfg, &open_minigop(&cfg, &BudgetState::default()), 0.12, 0.10);
    let z = record_p_frame(&cfg, &a, 0.08, 0.10);
    check("signed deviation", z.deviation, 0.0, 1e-15);

    // Features.
    let bf: BudgetFeatures = build_budget_features(0.1, 0.1, &BudgetState::default(), 1024.0, 4096.0);
    check("log r_eff", bf.0[0], 0.1f64.ln(), 1e-15);
    check("λ headroom", bf.0[4], 0.25f64.ln(), 1e-15);
    let mut prev = flat.encode_frame(1, 1024.0).unwrap();
    prev.bpp_mv = 0.02;
    prev.bpp_res = 0.08;
    let cs: CodingStats = build_coding_stats(&prev, 0.1);
    check("mv share", cs.0[0], 0.2, 1e-15);
    check("res share", cs.0[1], 0.8, 1e-15);

    // Controller: zero cell, composition.
    check("compose", compose_lambda(1024.0, 0.1, &b), 1024.0 * 0.1f64.exp(), 1e-9);
    let zero = ControllerWeights::zeros(DEFAULT_DELTA_MAX);
    let out = zero.forward(&ControllerState::zeros(), &bf, &cs);
    check("zero controller Δ", out.delta, 0.0, 0.0);
    check("zero controller gate", out.gate[0], 0.5, 0.0);

    // Trainer: pre-encoded budget, smoothness, schedule, Adam.
    let pre = build_target_budget(&flat, &[1, 2, 3, 4], 1024.0).unwrap();
    check("pre-encoded mini-GOP budget", pre.minigop_budgets(4)[0], 4.0 * c0 * 0.128, 1e-14);
    let target = EpisodeTarget {
        mean_rate: 0.1,
        distortion_ref: 1e-3,
    };
    let smooth_only = LossWeights {
        w_dist: 0.0,
        w_budget: 0.0,
        w_smooth: 1.0,
    };
    let l = trajectory_loss(&[0.1, 0.1], &[1e-3, 1e-3], &[0.1, -0.1], &target, &smooth_only);
    check("smoothness loss", l.smooth, 0.05, 1e-15);
    check("lr at epoch 10", lr_at_epoch(&TrainConfig::default(), 10), 2.5e-5, 1e-20);
    let mut adam = AdamState::new(2);
    let mut params = [0.0, 0.0];
    adam_step(&mut adam, &mut params, &[0.5, -2.0], 1e-3);
    check("Adam first step", params[0], -1e-3 * 0.5 / (0.5 + 1e-8), 1e-15);
    check("Adam first step (neg)", params[1], 1e-3 * 2.0 / (2.0 + 1e-8), 1e-15);

    // Metrics.
    let anchor: Vec<RdPoint> = (0..4)
        .map(|i| RdPoint {
            rate: 0.05 * 1.5f64.powi(i),
            quality: 30.0 + 2.0 * i as f64,
        })
        .collect();
    let doubled: Vec<RdPoint> = anchor.iter().map(|p| RdPoint { rate: 2.0 * p.rate, ..*p }).collect();
    let halved: Vec<RdPoint> = anchor.iter().map(|p| RdPoint { rate: 0.5 * p.rate, ..*p }).collect();
    check("BD-rate 2x", bd_rate(&anchor, &doubled).unwrap(), 100.0, 1e-9);
    check("BD-rate 0.5x", bd_rate(&anchor, &halved).unwrap(), -50.0, 1e-9);

    let elapsed = t0.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(10);
    verdict(1, "equation oracles", pass, &format!("{} mismatches", failures.len()), elapsed);
    assert!(pass, "{failures:#?} in {elapsed:?}");
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_pi_fixed_point() {
    let t0 = Instant::now();
    let (g, b) = (PiGains::default(), PiBounds::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut settled = 0;
    for _ in 0..20 {
        let seed: u64 = rng.gen_range(0..10_000);
        // Reachable: the λ that hits the target lies inside the bounds.
        let lambda_star = (rng.gen_range(b.lambda_min.ln()..b.lambda_max.ln())).exp();
        let params = SyntheticCodecParams {
            seed,
            ar_coeff: 0.0,
            log_noise_sigma: 0.0,
            ..Default::default()
        };
        let plant = SyntheticSequence::generate(params, 1).unwrap();
        let target = plant.encode_frame(0, lambda_star).unwrap().bpp_total;
        let mut s = PiState::new(1024.0, &b);
        let mut tail: f64 = 0.0;
        for t in 0..96 {
            let rate = plant.encode_frame(0, s.lambda_base).unwrap().bpp_total;
            let e = log_error(rate, target).unwrap();
            if t >= 30 {
                tail = tail.max(e.abs());
            }
            s = pi_step(&s, &g, &b, e).0;
        }
        worst = worst.max(tail);
        settled += usize::from(tail < 1e-3);
    }
    let elapsed = t0.elapsed();
    let pass = settled == 20 && elapsed < Duration::from_secs(5);
    verdict(
        2,
        "PI fixed point",
        pass,
        &format!("{settled}/20 pairs with |e_t| < 1e-3 for t >= 30; worst tail |e_t| = {worst:.3e}"),
        elapsed,
    );
    assert!(pass, "{settled}/20 settled, worst {worst}");
}

// ---------------------------------------------------------------- 3

fn run_mode(plant: &SyntheticSequence, mode: Mode, target: f64, weights: Option<&ControllerWeights>) -> Vec<lambdarc::pipeline::FrameRecord> {
    let mut seq = SequenceConfig::new(mode, target);
    if mode == Mode::FixedLambda {
        seq.fixed_lambda_value = Some(plant.plant().params().nominal_lambda_for_rate(target));
    }
    encode_sequence(plant, &seq, &ControlSetup::default(), weights).unwrap()
}

#[test]
fn criterion_03_desk_scale_rate_accuracy() {
    let t0 = Instant::now();
    let (mut pi, mut open) = (Vec::new(), Vec::new());
    for seed in HELD_OUT {
        let plant = held_out(seed, 96);
        for &t in &desk_targets() {
            pi.push(delta_r(mean_p_rate(&run_mode(&plant, Mode::PiOnly, t, None)).unwrap(), t).unwrap());
            open.push(delta_r(mean_p_rate(&run_mode(&plant, Mode::FixedLambda, t, None)).unwrap(), t).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (pi, open) = (mean(&pi), mean(&open));
    let elapsed = t0.elapsed();
    let pass = pi <= 5.0 && pi <= 0.5 * open && elapsed < Duration::from_secs(30);
    verdict(
        3,
        "desk-scale ΔR",
        pass,
        &format!("pi_only ΔR {pi:.3}%, fixed_lambda ΔR {open:.3}%, ratio {:.3}", pi / open),
        elapsed,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_clip_and_bound_invariants() {
    let t0 = Instant::now();
    let (g, b) = (PiGains::default(), PiBounds::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0usize;
    for _ in 0..100_000 {
        let s = PiState {
            lambda_base: (rng.gen_range(b.lambda_min.ln()..b.lambda_max.ln())).exp(),
            integral: rng.gen_range(-b.i_max..b.i_max),
            prev_error: rng.gen_range(-3.0..3.0),
        };
        let gains = PiGains {
            kp: rng.gen_range(0.0..2.0),
            ki: rng.gen_range(0.0..0.5),
            kd: rng.gen_range(0.0..0.5),
        };
        let gains = if rng.gen_bool(0.5) { g } else { gains };
        let (n, d) = pi_step(&s, &gains, &b, rng.gen_range(-5.0..5.0));
        let ok = n.lambda_base >= b.lambda_min
            && n.lambda_base <= b.lambda_max
            && d.abs() <= b.delta_max
            && n.integral.abs() <= b.i_max;
        violations += usize::from(!ok);
    }
    let weights: Vec<ControllerWeights> = (0..20).map(|s| ControllerWeights::init_random_head(s, DEFAULT_DELTA_MAX)).collect();
    let mut state = ControllerState::zeros();
    for i in 0..100_000 {
        let w = &weights[i % weights.len()];
        if i % 50 == 0 {
            state = ControllerState::zeros();
        }
        let bf = BudgetFeatures([
            rng.gen_range(-6.0..1.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(-5.0..0.0),
        ]);
        let cs = CodingStats([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0)]);
        let out = w.forward(&state, &bf, &cs);
        let lambda = compose_lambda(rng.gen_range(b.lambda_min..b.lambda_max), out.delta, &b);
        let ok = out.delta.abs() < w.delta_max
            && out.gate.iter().all(|&x| x > 0.0 && x < 1.0)
            && lambda >= b.lambda_min
            && lambda <= b.lambda_max;
        violations += usize::from(!ok);
        state = out.state;
    }
    let elapsed = t0.elapsed();
    let pass = violations == 0 && elapsed < Duration::from_secs(10);
    verdict(4, "clip/bound invariants", pass, &format!("{violations} violations in 2×10^5 calls"), elapsed);
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_gradient_check() {
    let t0 = Instant::now();
    let setup = ControlSetup::default();
    let lw = LossWeights::default();
    let mut worst = (0.0f64, "");
    for seed in 0..5u64 {
        let plant = held_out(500 + seed, 96);
        let seq = SequenceConfig::new(Mode::PiGru, 0.1);
        let weights = ControllerWeights::init_random_head(seed, DEFAULT_DELTA_MAX);
        let ep = Episode {
            sequence: 0,
            start: 1 + 3 * seed as usize,
            len: 8,
            lambda_pre: [256.0, 512.0, 1024.0, 2048.0, 512.0][seed as usize],
        };
        let (rate, target) = episode_targets(&plant, &seq, &ep).unwrap();
        let tape = record_episode(&plant, &seq, &setup, &weights, rate, ep.start, ep.len).unwrap();
        let cfg = GradCheckConfig { seed, ..Default::default() };
        for r in gradient_check(&plant, &weights, &tape, &target, &lw, &setup.bounds, &cfg).unwrap() {
            if r.max_rel_error.is_nan() || r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, r.group);
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst.0 < 1e-4 && elapsed < Duration::from_secs(30);
    verdict(
        5,
        "gradient check",
        pass,
        &format!("max relative error {:.3e} (group {}) over 5 seeds, 8-frame episodes", worst.0, worst.1),
        elapsed,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6 & 8

struct Trained {
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let corpus: Vec<SyntheticSequence> = (0..40).map(|s| held_out(s, 96)).collect();
        let config = TrainConfig::default();
        let setup = TrainSetup {
            corpus: &corpus,
            sequence: SequenceConfig::new(Mode::PiGru, 0.1),
            control: ControlSetup::default(),
            config: &config,
            loss: LossWeights::default(),
        };
        let outcome = train(&setup, ControllerWeights::init(0, DEFAULT_DELTA_MAX)).unwrap();
        Trained {
            outcome,
            elapsed: t0.elapsed(),
        }
    })
}

#[test]
fn criterion_06_training_efficacy() {
    let tr = trained();
    let t0 = Instant::now();
    let weights = &tr.outcome.weights;

    let held: Vec<SyntheticSequence> = HELD_OUT.map(|s| held_out(s, 96)).collect();
    let config = TrainConfig::default();
    let setup = TrainSetup {
        corpus: &held,
        sequence: SequenceConfig::new(Mode::PiGru, 0.1),
        control: ControlSetup::default(),
        config: &config,
        loss: LossWeights::default(),
    };
    let trained_loss = setup.held_out_loss(weights).unwrap().total;
    let baseline_loss = setup.held_out_loss(&ControllerWeights::init(0, DEFAULT_DELTA_MAX)).unwrap().total;

    let (mut bd, mut dr_pi, mut dr_gru) = (Vec::new(), Vec::new(), Vec::new());
    for plant in &held {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &t in &desk_targets() {
            let pi = run_mode(plant, Mode::PiOnly, t, None);
            let gru = run_mode(plant, Mode::PiGru, t, Some(weights));
            a.push(RdPoint { rate: mean_p_rate(&pi).unwrap(), quality: sequence_quality(&pi).unwrap() });
            b.push(RdPoint { rate: mean_p_rate(&gru).unwrap(), quality: sequence_quality(&gru).unwrap() });
            dr_pi.push(delta_r(a.last().unwrap().rate, t).unwrap());
            dr_gru.push(delta_r(b.last().unwrap().rate, t).unwrap());
        }
        bd.push(bd_rate(&a, &b).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (bd, dr_pi, dr_gru) = (mean(&bd), mean(&dr_pi), mean(&dr_gru));
    let elapsed = tr.elapsed + t0.elapsed();
    let pass = trained_loss < baseline_loss
        && bd <= -1.0
        && dr_gru - dr_pi <= 0.5
        && elapsed < Duration::from_secs(600);
    verdict(
        6,
        "training efficacy",
        pass,
        &format!(
            "held-out loss {trained_loss:.5} vs Δ≡0 {baseline_loss:.5}; BD-rate {bd:.3}%; ΔR pi_gru {dr_gru:.3}% vs pi_only {dr_pi:.3}% (best epoch {})",
            tr.outcome.best_epoch
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_08_budget_alignment() {
    let t0 = Instant::now();
    let weights = &trained().outcome.weights;
    let mut devs = Vec::new();
    let mut skipped = 0;
    for seed in HELD_OUT {
        let plant = held_out(seed, 96);
        for &t in &desk_targets() {
            let rep = alignment_report(&run_mode(&plant, Mode::PiGru, t, Some(weights)));
            devs.push(rep.mean_abs_deviation);
            skipped += rep.skipped_nonpositive;
        }
    }
    let mean = devs.iter().sum::<f64>() / devs.len() as f64;
    let pass = mean <= 0.15;
    verdict(
        8,
        "budget alignment",
        pass,
        &format!("mean per-mini-GOP |spent-budget|/budget {:.2}% ({skipped} nonpositive budgets skipped)", 100.0 * mean),
        t0.elapsed(),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_anchor_preservation() {
    let t0 = Instant::now();
    let zero_head = ControllerWeights::init(7, DEFAULT_DELTA_MAX);
    let mut mismatches = 0;
    let mut runs = 0;
    for seed in HELD_OUT {
        let plant = held_out(seed, 96);
        for &t in &desk_targets() {
            let pi = run_mode(&plant, Mode::PiOnly, t, None);
            let gru = run_mode(&plant, Mode::PiGru, t, Some(&zero_head));
            let csv = |r: &[lambdarc::pipeline::FrameRecord]| {
                let mut buf = Vec::new();
                write_frames_csv(r, &mut buf).unwrap();
                buf
            };
            let zero_delta = gru.iter().all(|r| r.delta_gru.to_bits() == 0);
            mismatches += usize::from(csv(&pi) != csv(&gru) || !zero_delta);
            runs += 1;
        }
    }
    let pass = mismatches == 0;
    verdict(
        7,
        "anchor preservation",
        pass,
        &format!("{mismatches}/{runs} runs differ from pi_only byte-for-byte"),
        t0.elapsed(),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_09_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        "schema_version = 1\nname = \"det\"\nseed = 5\ntargets = [0.05, 0.08, 0.12, 0.18]\n\
         modes = [\"fixed_lambda\", \"pi_only\", \"pi_gru\"]\n\
         [sequence]\nnum_frames = 48\ngop_size = 16\ncount = 2\n\
         [control]\nweights = \"weights.json\"\n\
         [train]\ncorpus_size = 6\nepochs = 2\n\
         [gradcheck]\nsequences = 2\ncoords_per_tensor = 4\nepisode_len = 8\n",
    )
    .unwrap();
    // Controller for the pi_gru runs.
    let seed_weights = ControllerWeights::init_random_head(5, DEFAULT_DELTA_MAX);
    lambdarc::controller::save_weights(&seed_weights, &dir.path().join("weights.json")).unwrap();

    let bin = env!("CARGO_BIN_EXE_lambdarc");
    let mut differing = Vec::new();
    for cmd in ["gen-trace", "simulate", "eval", "train", "gradcheck"] {
        let mut trees = Vec::new();
        let mut stdouts = Vec::new();
        for rep in 0..2 {
            let out_dir = dir.path().join(format!("{cmd}_{rep}"));
            let mut args = vec![cmd.to_string(), "--config".into(), config.display().to_string()];
            args.extend(["--out".into(), out_dir.display().to_string()]);
            if cmd == "eval" {
                // Evaluate a simulate output copied into place.
                let src = dir.path().join("simulate_0");
                copy_tree(&src, &out_dir);
            }
            let out = Command::new(bin).args(&args).output().unwrap();
            assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
            trees.push(snapshot(&out_dir));
            stdouts.push(String::from_utf8_lossy(&out.stdout).replace(&out_dir.display().to_string(), "<out>"));
        }
        if trees[0] != trees[1] || trees[0].is_empty() || stdouts[0] != stdouts[1] {
            differing.push(cmd);
        }
    }
    let pass = differing.is_empty();
    verdict(
        9,
        "determinism",
        pass,
        &format!("5 commands run twice; differing: {differing:?}"),
        t0.elapsed(),
    );
    assert!(pass);
}

fn copy_tree(src: &Path, dst: &Path) {
    for (rel, bytes) in snapshot(src) {
        let p = dst.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, bytes).unwrap();
    }
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_controller_cost() {
    let t0 = Instant::now();
    let w = ControllerWeights::init_random_head(10, DEFAULT_DELTA_MAX);
    let bf = BudgetFeatures([-2.3, 0.0, 0.0, 0.0, -1.39]);
    let cs = CodingStats([0.2, 0.8, 0.5, 0.0]);
    let mut state = ControllerState::zeros();
    for _ in 0..100 {
        state = w.forward(&state, &bf, &cs).state;
    }
    let n = 2000;
    let start = Instant::now();
    for _ in 0..n {
        state = std::hint::black_box(w.forward(&state, &bf, &cs)).state;
    }
    let per_call = start.elapsed() / n;
    let count = w.parameter_count();
    let pass = per_call < Duration::from_millis(1) && (60_000..=120_000).contains(&count) && count == PARAMETER_COUNT;
    verdict(
        10,
        "controller cost",
        pass,
        &format!("{:.1} µs per forward step, {count} parameters", per_call.as_secs_f64() * 1e6),
        t0.elapsed(),
    );
    assert!(pass);
}
