//! Reference implementations used as test oracles. They share no code with
//! the library and favour obviousness over speed.

#![allow(dead_code)]

use crfix_core::funnel::{EventKind, FunnelEvent};
use crfix_core::patch::{Hunk, LineDiffPatch, SourceFile};
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};

fn binomial(n: u64, k: u64) -> BigUint {
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Two-sided Fisher p-value by enumerating every table with the observed
/// margins, in exact integer arithmetic. Tables count as "at most as likely"
/// when their weight is within a relative 1e-7 of the observed one.
pub fn fisher_oracle(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let row1 = a + b;
    let row2 = c + d;
    let col1 = a + c;
    let weight = |x: u64| binomial(row1, x) * binomial(row2, col1 - x);
    let observed = weight(a);
    let scale = BigUint::from(10_000_000u64);
    let limit = &observed * (&scale + BigUint::one());
    let lo = col1.saturating_sub(row2);
    let hi = row1.min(col1);
    let mut included = BigUint::zero();
    let mut total = BigUint::zero();
    for x in lo..=hi {
        let w = weight(x);
        if &w * &scale <= limit {
            included += &w;
        }
        total += w;
    }
    ratio(&included, &total)
}

/// `num / den` rounded to f64 via a 128-bit fixed-point quotient.
fn ratio(num: &BigUint, den: &BigUint) -> f64 {
    let shifted: BigUint = (num << 128u32) / den;
    shifted.to_f64().unwrap() / 2f64.powi(128)
}

#[allow(clippy::too_many_arguments)]
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Two-sided Student t tail for `df ≥ 1`: with `t = √ν·tan θ` the density
/// becomes proportional to `cos^{ν−1} θ` on `(−π/2, π/2)`.
pub fn t_two_sided_oracle(t: f64, df: f64) -> f64 {
    assert!(df >= 1.0);
    let f = |theta: f64| theta.cos().max(0.0).powf(df - 1.0);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let theta_t = (t.abs() / df.sqrt()).atan();
    let total = integrate(&f, 0.0, half_pi, 1e-13);
    // Integrate the smaller side for accuracy.
    if theta_t > half_pi / 2.0 {
        integrate(&f, theta_t, half_pi, 1e-13) / total
    } else {
        1.0 - integrate(&f, 0.0, theta_t, 1e-13) / total
    }
}

/// Welch statistic, Satterthwaite df and two-sided p for `test − control`.
pub fn welch_oracle(control: &[f64], test: &[f64]) -> (f64, f64, f64) {
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (n1, m1, v1) = stats(control);
    let (n2, m2, v2) = stats(test);
    let q1 = v1 / n1;
    let q2 = v2 / n2;
    let t = (m2 - m1) / (q1 + q2).sqrt();
    let df = (q1 + q2) * (q1 + q2) / (q1 * q1 / (n1 - 1.0) + q2 * q2 / (n2 - 1.0));
    (t, df, t_two_sided_oracle(t, df))
}

/// Applies a patch by walking original positions and emitting, at each, any
/// hunk that starts there followed by the line itself unless a hunk covers it.
pub fn apply_oracle(lines: &[String], hunks: &[Hunk]) -> Vec<String> {
    let mut out = Vec::new();
    for pos in 1..=lines.len() + 1 {
        for h in hunks.iter().filter(|h| h.start == pos) {
            out.extend(h.replacement.iter().cloned());
        }
        let covered = hunks.iter().any(|h| h.start <= pos && pos <= h.end);
        if pos <= lines.len() && !covered {
            out.push(lines[pos - 1].clone());
        }
    }
    out
}

const WORDS: [&str; 8] = ["let", "x", "= 1;", "fn f()", "}", "", "  return y", "// note"];

pub fn random_line<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(0..3);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_file<R: Rng>(rng: &mut R, max_lines: usize) -> SourceFile {
    let n = rng.gen_range(0..=max_lines);
    let content: Vec<String> = (0..n).map(|i| format!("{i}: {}", random_line(rng))).collect();
    let mut text = content.join("\n");
    if n > 0 && rng.gen_bool(0.7) {
        text.push('\n');
    }
    SourceFile::from_content("gen.txt", &text).unwrap()
}

/// A random valid patch for a file of `n` lines: replacements, deletions
/// and insertions, ordered and non-overlapping.
pub fn random_patch<R: Rng>(rng: &mut R, n: usize) -> LineDiffPatch {
    let mut hunks = Vec::new();
    let mut cursor = 1;
    let wanted = rng.gen_range(0..6);
    while hunks.len() < wanted && cursor <= n + 1 {
        let start = rng.gen_range(cursor..=(cursor + 5).min(n + 1));
        let insertion = start > n || rng.gen_bool(0.3);
        let end = if insertion {
            start - 1
        } else {
            rng.gen_range(start..=(start + 4).min(n))
        };
        let len = if insertion { rng.gen_range(1..4) } else { rng.gen_range(0..4) };
        let replacement = (0..len).map(|_| format!("+ {}", random_line(rng))).collect();
        hunks.push(Hunk::new(start, end, replacement));
        cursor = (end + 1).max(start + 1);
    }
    LineDiffPatch::new(hunks).unwrap()
}

/// Synthetic benchmark: random files with a random patch applied as the
/// ground truth.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<crfix_core::eval::BenchmarkCase> {
    use crfix_core::patch::{apply_patch, exact_match};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n);
    while cases.len() < n {
        let file = random_file(&mut rng, 80);
        if file.is_empty() {
            continue;
        }
        let patch = random_patch(&mut rng, file.len());
        let truth = apply_patch(&file, &patch).unwrap();
        let line_start = rng.gen_range(1..=file.len());
        let line_end = rng.gen_range(line_start..=file.len());
        let i = cases.len();
        cases.push(crfix_core::eval::BenchmarkCase {
            id: format!("case-{i:03}"),
            file_path: format!("src/m{i}.rs"),
            original_content: file.content(),
            comment_text: format!("Please restructure this block ({i})."),
            line_start,
            line_end,
            ground_truth_content: truth.content(),
            identity_case: exact_match(&file, &truth),
        });
    }
    cases
}

pub const TRIAL_SALT: &str = "safety-trial-1";

pub fn safety_spec() -> crfix_core::experiment::ExperimentSpec {
    use crfix_core::experiment::{ExperimentKind, ExperimentSpec, SafetyMetric};
    ExperimentSpec {
        name: "expt-1".into(),
        kind: ExperimentKind::SafetyTrial,
        salt: TRIAL_SALT.into(),
        split_fraction: 0.5,
        goal_metrics: vec![],
        safety_metrics: vec![SafetyMetric::TimeInReview],
        regression_threshold_pct: 0.0,
        alpha: 0.05,
        eras: vec![],
    }
}

/// TimeInReview samples for `units` diffs: normal around 100 with sd
/// `sigma`, the test arm's mean scaled by `1 + shift_pct / 100`.
pub fn safety_samples(seed: u64, units: usize, shift_pct: f64, sigma: f64) -> Vec<crfix_core::experiment::MetricSample> {
    use crfix_core::experiment::{MetricSample, SafetyMetric};
    use crfix_core::stats::{assign_arm, Arm};
    use rand_distr::{Distribution, Normal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    (0..units)
        .map(|i| {
            let unit_id = format!("D{i}");
            let arm = assign_arm(&unit_id, TRIAL_SALT, 0.5).unwrap();
            let mean = if arm == Arm::Test { 100.0 * (1.0 + shift_pct / 100.0) } else { 100.0 };
            MetricSample {
                unit_id,
                metric: SafetyMetric::TimeInReview,
                value: (mean + noise.sample(&mut rng)).max(0.0),
                arm,
            }
        })
        .collect()
}

const EVENT_KINDS: [EventKind; 7] = [
    EventKind::ClassifiedActionable,
    EventKind::ClassifiedNonActionable,
    EventKind::Shown,
    EventKind::Accepted,
    EventKind::AppliedDetected,
    EventKind::Discarded,
    EventKind::Archived,
];

/// Random, not necessarily well-formed, event log sorted by ts.
pub fn random_log(seed: u64) -> Vec<FunnelEvent> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let comments = rng.gen_range(0..40);
    let mut events = Vec::new();
    for c in 0..comments {
        let id = format!("c{c}");
        let t0 = rng.gen_range(0..1000);
        events.push(FunnelEvent::new(t0, EventKind::CommentReceived, &id));
        if rng.gen_bool(0.1) {
            events.push(FunnelEvent::new(t0 + rng.gen_range(0..500), EventKind::CommentReceived, &id));
        }
        for _ in 0..rng.gen_range(0..6) {
            let kind = EVENT_KINDS[rng.gen_range(0..EVENT_KINDS.len())];
            events.push(FunnelEvent::new(t0 + rng.gen_range(0..500), kind, &id).with_suggestion(format!("{id}.1")));
        }
    }
    for _ in 0..rng.gen_range(0..5) {
        events.push(FunnelEvent::new(rng.gen_range(0..1500), EventKind::Shown, "orphan"));
    }
    events.sort_by_key(|e| e.ts);
    events
}
