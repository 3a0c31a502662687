//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 and 11 are deterministic and always asserted. The learning
//! outcomes (6-10) are always run and reported; they fail the process only
//! when `SEGPLAY_ACCEPTANCE_STRICT=1` is set.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segplay::experiment::{self, ExperimentConfig, SeedResult, Variant};
use segplay::pipeline::{self, EvalOptions};
use segplay_core::detector::{CountingScorer, Head};
use segplay_core::env::StepRecord;
use segplay_core::inference::{self, InferenceMode};
use segplay_core::metrics;
use segplay_core::nn::{max_relative_error, Pool};
use segplay_core::policy::{self, Trajectory, TrajectoryStep};
use segplay_core::selfplay::{competitor_pmf, SnapshotStore};
use segplay_core::{
    Action, Agent, CompetitorMode, Detector, DetectorArch, EnvConfig, GameState, Image, Mask,
    OracleDetector, Policy, PolicyArch, Rect,
};

struct Outcome {
    id: u8,
    pass: bool,
    hard: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: u8, hard: bool, pass: bool, detail: String) {
    println!(
        "criterion {id:>2}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    out.push(Outcome {
        id,
        pass,
        hard,
        detail,
    });
}

// ------------------------------------------------------------------ 1

fn pmf_criterion() -> (bool, String) {
    let start = Instant::now();
    let want = [0.0545, 0.2442, 0.4026, 0.2442, 0.0545];
    let pmf = competitor_pmf(4, CompetitorMode::Prioritized);
    let closed = pmf.iter().zip(want).all(|(p, q)| (p - q).abs() < 1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tiny = PolicyArch {
        input_size: 8,
        conv1: 1,
        conv2: 1,
        patch_hidden: 1,
        term_hidden: 1,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for head in [1usize, 4, 16, 100] {
        let mut store = SnapshotStore::new(1).unwrap();
        for _ in 0..=head {
            store.push(Policy::init(tiny, &mut rng).unwrap());
        }
        for mode in [
            CompetitorMode::Vanilla,
            CompetitorMode::Fictitious,
            CompetitorMode::Prioritized,
        ] {
            let n = 100_000;
            let mut counts = vec![0usize; head + 1];
            for _ in 0..n {
                counts[store.sample(mode, &mut rng).unwrap().0] += 1;
            }
            let pmf = competitor_pmf(head, mode);
            for (c, p) in counts.iter().zip(&pmf) {
                worst = worst.max((*c as f64 / n as f64 - p).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        closed && worst < 0.01 && secs < 10.0,
        format!("H=4 pmf {pmf:.4?}, max empirical deviation {worst:.4}, {secs:.1} s"),
    )
}

// ------------------------------------------------------------------ 2

const T_MIN: usize = 1;
const T_MAX: usize = 4;

/// Straight transcription of the game's reward cases, kept independent of
/// the environment code.
#[derive(Debug, PartialEq)]
struct Brute {
    a: [i32; 4],
    b: [i32; 4],
    done: bool,
}

fn brute_rewards(
    mask: &Mask,
    prefix: &[(usize, usize)],
    t: usize,
    (pa, ta): (usize, bool),
    (pb, tb): (usize, bool),
) -> Brute {
    let mut erased = [false; 9];
    let score = |erased: &[bool; 9], p: usize| -> f64 {
        if erased[p] {
            return 0.0;
        }
        let r = Rect::new((p % 3) * 4, (p / 3) * 4, 4, 4);
        mask.count_in(r) as f64 / 16.0
    };
    for &(x, y) in prefix {
        erased[x] = true;
        erased[y] = true;
    }
    let fa = score(&erased, pa);
    let rep_a = if erased[pa] { -1 } else { 0 };
    erased[pa] = true;
    let fb = score(&erased, pb);
    let rep_b = if erased[pb] { -1 } else { 0 };

    let patch_a = if fa >= fb { 1 } else { -1 };
    let patch_b = if fb > fa { 1 } else { -1 };
    let (term_a, term_b) = if ta {
        (patch_a, -patch_a)
    } else if tb {
        (-patch_b, patch_b)
    } else {
        (0, 0)
    };
    let in_range = T_MIN < t && t < T_MAX;
    let iter_a = if ta && !in_range { -1 } else { 0 };
    let iter_b = if tb && !in_range { -1 } else { 0 };
    Brute {
        a: [patch_a, term_a, rep_a, iter_a],
        b: [patch_b, term_b, rep_b, iter_b],
        done: ta || tb || t + 1 >= T_MAX,
    }
}

fn parts(r: &segplay_core::RewardBreakdown) -> [i32; 4] {
    [r.patch, r.term, r.rep, r.iter]
}

fn reward_oracle_criterion() -> (bool, String) {
    let start = Instant::now();
    let mut mask = Mask::empty(12, 12);
    mask.fill_rect(Rect::new(2, 3, 7, 6), true);
    let image = Image::filled(12, 12, 1, 0.5).unwrap();
    let cfg = EnvConfig {
        patch_size: 4,
        t_min: T_MIN,
        t_max: T_MAX,
        ..Default::default()
    };
    // non-terminating history used to reach step t
    let history = [(4, 0), (8, 4), (1, 7)];
    let mut cases = 0;
    let mut mismatches = 0;
    for t in 0..T_MAX {
        for pa in 0..9 {
            for ta in [false, true] {
                for pb in 0..9 {
                    for tb in [false, true] {
                        let mut env = GameState::reset(&image, OracleDetector::new(mask.clone()), &cfg).unwrap();
                        for &(x, y) in &history[..t] {
                            env.step_pair(Action::select(x), Action::select(y)).unwrap();
                        }
                        let rec: StepRecord = env
                            .step_pair(Action { patch: pa, terminate: ta }, Action { patch: pb, terminate: tb })
                            .unwrap();
                        let want = brute_rewards(&mask, &history[..t], t, (pa, ta), (pb, tb));
                        let got = Brute {
                            a: parts(&rec.reward_a),
                            b: parts(&rec.reward_b),
                            done: rec.done,
                        };
                        cases += 1;
                        if got != want {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        mismatches == 0 && secs < 30.0,
        format!("{cases} cases, {mismatches} mismatches, {secs:.1} s"),
    )
}

// ------------------------------------------------------------------ 3

fn zero_sum_criterion() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let det = Detector::init(
        DetectorArch {
            input_size: 16,
            conv1: 2,
            conv2: 2,
            hidden: 4,
            ..Default::default()
        },
        &mut rng,
    )
    .unwrap();
    let cfg = EnvConfig {
        patch_size: 4,
        t_min: 2,
        t_max: 12,
        ..Default::default()
    };
    let mut steps = 0;
    let mut bad = 0;
    while steps < 10_000 {
        let image = Image::new(16, 16, 1, (0..256).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut env = GameState::reset(&image, &det, &cfg).unwrap();
        while !env.is_done() && steps < 10_000 {
            let act = |rng: &mut ChaCha8Rng| Action {
                patch: rng.random_range(0..16),
                terminate: rng.random_bool(0.1),
            };
            let (a, b) = (act(&mut rng), act(&mut rng));
            let r = env.step_pair(a, b).unwrap();
            steps += 1;
            let (ra, rb) = (r.reward_a, r.reward_b);
            let identity = |x: &segplay_core::RewardBreakdown| {
                let want = f64::from(x.patch) + 100.0 * f64::from(x.term) + f64::from(x.rep) + f64::from(x.iter);
                x.total.to_bits() == want.to_bits()
            };
            if ra.patch + rb.patch != 0 || ra.term + rb.term != 0 || !identity(&ra) || !identity(&rb) {
                bad += 1;
            }
        }
    }
    (bad == 0, format!("{steps} steps, {bad} violations"))
}

// ------------------------------------------------------------------ 4

fn jitter(rng: &mut ChaCha8Rng) -> f64 {
    0.05 * (rng.random::<f64>() - 0.5)
}

fn gradient_criterion() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for i in 0..12 {
        let arch = DetectorArch {
            input_size: 8,
            channels: 1,
            conv1: 2,
            conv2: 3,
            hidden: 4,
            pool: if i % 2 == 0 { Pool::Max } else { Pool::Avg },
            head: if i % 3 == 0 { Head::Flatten } else { Head::GlobalAvg },
        };
        // jitter keeps pre-activations off the ReLU kink at exactly zero
        let d = Detector::init(arch, &mut rng).unwrap();
        let d = Detector::from_params(arch, d.params().iter().map(|w| w + jitter(&mut rng)).collect()).unwrap();
        let input: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let label = f64::from(i % 2);
        let mut grad = vec![0.0; d.params().len()];
        d.loss_and_grad(&input, label, &mut grad);
        let numeric: Vec<f64> = (0..grad.len())
            .map(|k| {
                let at = |delta: f64| {
                    let mut p = d.params().to_vec();
                    p[k] += delta;
                    Detector::from_params(arch, p).unwrap().loss(&input, label)
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(max_relative_error(&grad, &numeric, 1e-6));
        instances += 1;
    }
    let parch = PolicyArch {
        input_size: 8,
        channels: 1,
        conv1: 2,
        conv2: 3,
        patch_hidden: 4,
        term_hidden: 3,
        pool: Pool::Avg,
    };
    for _ in 0..12 {
        let mut pol = Policy::init(parch, &mut rng).unwrap();
        for w in pol.params_mut() {
            *w += jitter(&mut rng);
        }
        let rects: Vec<Rect> = (0..4).map(|p| Rect::new((p % 2) * 4, (p / 2) * 4, 4, 4)).collect();
        let mut traj = Trajectory::new(Agent::A);
        for _ in 0..3 {
            let canvas = Image::new(8, 8, 1, (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
            let erased: Vec<bool> = (0..4).map(|_| rng.random_bool(0.3)).collect();
            let enc = pol.encode_parts(&canvas, &rects, &erased);
            let (action, log_prob) = pol.sample_action(&enc, &mut rng, None).unwrap();
            traj.steps.push(TrajectoryStep {
                encoding: enc,
                action,
                log_prob,
                reward: rng.random::<f64>() * 4.0 - 2.0,
            });
        }
        let trajs = [traj];
        let (adv, _) = policy::advantages(&trajs, 0.96, false);
        let (grad, _) = policy::surrogate_gradient(&pol, &trajs, &adv).unwrap();
        let base = pol.params().to_vec();
        let mut numeric = Vec::with_capacity(grad.len());
        for (k, &b) in base.iter().enumerate() {
            pol.params_mut()[k] = b + h;
            let up = policy::surrogate(&pol, &trajs, &adv).unwrap();
            pol.params_mut()[k] = b - h;
            let down = policy::surrogate(&pol, &trajs, &adv).unwrap();
            pol.params_mut()[k] = b;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(max_relative_error(&grad, &numeric, 1e-6));
        instances += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    (
        instances >= 20 && worst < 1e-4 && secs < 60.0,
        format!("{instances} instances, max relative error {worst:.2e}, {secs:.1} s"),
    )
}

// ------------------------------------------------------------------ 5

fn mask3(bits: u16) -> Mask {
    Mask::new(3, 3, (0..9).map(|i| bits >> i & 1 == 1).collect()).unwrap()
}

fn metric_criterion() -> (bool, String) {
    let mut bad = 0;
    let mut worst_sum: f64 = 0.0;
    for p in 0..512u16 {
        for g in 0..512u16 {
            let inter = (p & g).count_ones() as f64;
            let union = (p | g).count_ones() as f64;
            let (np, ng) = (p.count_ones() as f64, g.count_ones() as f64);
            let iou = if union == 0.0 { 1.0 } else { inter / union };
            let dice = if np + ng == 0.0 { 1.0 } else { 2.0 * inter / (np + ng) };
            let (pm, gm) = (mask3(p), mask3(g));
            if metrics::iou(&pm, &gm).unwrap() != iou || metrics::dice(&pm, &gm).unwrap() != dice {
                bad += 1;
            }
            let r = metrics::confusion_ratios(&pm, &gm).unwrap();
            worst_sum = worst_sum.max((r.tp + r.tn + r.fp + r.fn_ - 100.0).abs());
        }
    }
    (
        bad == 0 && worst_sum < 1e-9,
        format!("262144 pairs, {bad} mismatches, max |ratio sum - 100| {worst_sum:.1e}"),
    )
}

// ------------------------------------------------------------- 6 to 10

struct Suite {
    rlsp: Vec<SeedResult>,
    sp_plain: Vec<SeedResult>,
    non_sp_plain: Vec<SeedResult>,
    non_sp_08: Vec<SeedResult>,
    sliding: Vec<SeedResult>,
    policy: Policy,
    detector: Detector,
    test: Vec<segplay_core::synth::Sample>,
    env: EnvConfig,
    secs: f64,
}

fn run_suite() -> Suite {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let sp_plain = Variant::SelfPlay { rep: false, iter: false };
    let non_sp = |shaping| Variant::NonSelfPlay {
        threshold: 0.8,
        rep: shaping,
        iter: shaping,
    };
    let mut s = Suite {
        rlsp: Vec::new(),
        sp_plain: Vec::new(),
        non_sp_plain: Vec::new(),
        non_sp_08: Vec::new(),
        sliding: Vec::new(),
        policy: Policy::init(PolicyArch::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
        detector: Detector::init(DetectorArch::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
        test: Vec::new(),
        env: cfg.selfplay.env.clone(),
        secs: 0.0,
    };
    for &seed in &cfg.seeds {
        let ctx = experiment::prepare(&cfg, seed).unwrap();
        let (r, policy) = experiment::run_variant_with_policy(&cfg, &ctx, Variant::RLSP).unwrap();
        eprintln!("  seed {seed}: RLSP mIoU {:.2}", 100.0 * r.aggregate.miou);
        s.rlsp.push(r);
        for (variant, slot) in [
            (sp_plain, &mut s.sp_plain),
            (non_sp(false), &mut s.non_sp_plain),
            (non_sp(true), &mut s.non_sp_08),
            (Variant::SlidingWindow, &mut s.sliding),
        ] {
            let r = experiment::run_variant(&cfg, &ctx, variant).unwrap();
            eprintln!("  seed {seed}: {} mIoU {:.2}", variant.label(), 100.0 * r.aggregate.miou);
            slot.push(r);
        }
        if seed == cfg.seeds[0] {
            s.policy = policy.unwrap();
            s.detector = ctx.detector;
            s.test = ctx.test;
        }
    }
    s.secs = start.elapsed().as_secs_f64();
    s
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn miou(rows: &[SeedResult]) -> f64 {
    100.0 * mean(rows.iter().map(|r| r.aggregate.miou))
}

fn fp_fn(rows: &[SeedResult]) -> f64 {
    mean(rows.iter().map(|r| r.aggregate.fp + r.aggregate.fn_))
}

// ------------------------------------------------------------------ 11

fn call_count_criterion(s: &Suite) -> (bool, String) {
    let mut opts = EvalOptions::new(s.env.clone());
    opts.presence_gate = false;
    let unopposed = pipeline::evaluate_policy(&s.policy, &s.detector, &s.test, &opts).unwrap();
    let unopposed_calls: usize = unopposed.per_image.iter().map(|e| e.detector_calls).sum();

    let mut traced_ok = true;
    let mut traced_checked = 0;
    let mut max_traced = 0;
    for sample in &s.test {
        let counting = CountingScorer::new(&s.detector);
        let run = inference::segment_patchlevel(
            &s.policy,
            &counting,
            &sample.image,
            &s.env,
            InferenceMode::DummyOpponent,
        )
        .unwrap();
        let p = run.grid.len();
        if run.terminated && run.selected.len() < p {
            traced_checked += 1;
            max_traced = max_traced.max(counting.calls());
            traced_ok &= counting.calls() < p;
        }
    }
    // a policy that always terminates at once exercises the traced counter
    // even when the trained policy runs to exhaustion
    let eager = Policy::init_with(PolicyArch::default(), 0.999, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for sample in s.test.iter().take(10) {
        let counting = CountingScorer::new(&s.detector);
        let run = inference::segment_patchlevel(&eager, &counting, &sample.image, &s.env, InferenceMode::DummyOpponent)
            .unwrap();
        if run.terminated && run.selected.len() < run.grid.len() {
            traced_checked += 1;
            max_traced = max_traced.max(counting.calls());
            traced_ok &= counting.calls() < run.grid.len();
        }
    }

    let mut sliding_ok = true;
    for sample in s.test.iter().take(20) {
        let counting = CountingScorer::new(&s.detector);
        let (_, windows) = inference::sliding_window_segment(
            &counting,
            &sample.image,
            s.env.patch_size,
            s.env.patch_size,
            0.5,
        )
        .unwrap();
        let (w, h) = sample.image.dims();
        let expected = (w / s.env.patch_size) * (h / s.env.patch_size);
        sliding_ok &= counting.calls() == windows && windows == expected;
    }
    (
        unopposed_calls == 0 && traced_checked > 0 && traced_ok && sliding_ok,
        format!(
            "unopposed calls {unopposed_calls}, traced max {max_traced} over {traced_checked} early-terminated runs, sliding = windows: {sliding_ok}"
        ),
    )
}

fn main() -> ExitCode {
    let strict = std::env::var("SEGPLAY_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut out = Vec::new();

    let (ok, d) = pmf_criterion();
    report(&mut out, 1, true, ok, d);
    let (ok, d) = reward_oracle_criterion();
    report(&mut out, 2, true, ok, d);
    let (ok, d) = zero_sum_criterion();
    report(&mut out, 3, true, ok, d);
    let (ok, d) = gradient_criterion();
    report(&mut out, 4, true, ok, d);
    let (ok, d) = metric_criterion();
    report(&mut out, 5, true, ok, d);

    eprintln!("running the seeded learning suite (3 seeds)...");
    let s = run_suite();
    let (rl, nsp, sw) = (miou(&s.rlsp), miou(&s.non_sp_08), miou(&s.sliding));
    report(
        &mut out,
        6,
        strict,
        rl > nsp && nsp > sw && rl - sw >= 5.0 && s.secs <= 3600.0,
        format!("mIoU RLSP {rl:.2}, non-SP@0.8 {nsp:.2}, sliding {sw:.2}; suite {:.0} s", s.secs),
    );

    let (spp, nspp) = (miou(&s.sp_plain), miou(&s.non_sp_plain));
    report(
        &mut out,
        7,
        strict,
        rl >= spp - 1.0 && spp >= nspp,
        format!("mIoU RLSP {rl:.2}, SP without shaping {spp:.2}, non-SP without shaping {nspp:.2}"),
    );

    let (e_rl, e_sw) = (fp_fn(&s.rlsp), fp_fn(&s.sliding));
    report(
        &mut out,
        8,
        strict,
        e_rl < e_sw,
        format!("FP+FN RLSP {e_rl:.2}, sliding {e_sw:.2}"),
    );

    let per_seed: Vec<f64> = s.rlsp.iter().map(|r| 100.0 * r.aggregate.miou).collect();
    let m = mean(per_seed.iter().copied());
    let std = (per_seed.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (per_seed.len() - 1) as f64).sqrt();
    report(
        &mut out,
        9,
        strict,
        std < 3.0,
        format!("RLSP mIoU per seed {per_seed:.2?}, std {std:.2}"),
    );

    let in_range = mean(s.rlsp.iter().map(|r| r.termination_in_range.unwrap_or(0.0)));
    let counts: Vec<(f64, f64)> = s.rlsp.iter().filter_map(|r| r.patch_counts).collect();
    let (sel, gt) = if counts.is_empty() {
        (0.0, f64::NAN)
    } else {
        (mean(counts.iter().map(|c| c.0)), mean(counts.iter().map(|c| c.1)))
    };
    let within = (sel - gt).abs() <= 0.25 * gt;
    report(
        &mut out,
        10,
        strict,
        in_range >= 0.95 && within,
        format!("terminated in (t_min, t_max) {:.1}%, selected patches {sel:.2} vs ground truth {gt:.2}", 100.0 * in_range),
    );

    let (ok, d) = call_count_criterion(&s);
    report(&mut out, 11, true, ok, d);

    let passed = out.iter().filter(|o| o.pass).count();
    let blocking: Vec<u8> = out.iter().filter(|o| o.hard && !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {passed}/{} criteria pass{}",
        out.len(),
        if strict { " (strict)" } else { "" }
    );
    for o in out.iter().filter(|o| !o.pass && !o.hard) {
        println!("  reported, not enforced: criterion {} ({})", o.id, o.detail);
    }
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: blocking failures {blocking:?}");
        ExitCode::FAILURE
    }
}
