//! Significance tests and deterministic arm assignment.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("contingency table has a zero margin")]
    DegenerateMargins,
    #[error("need at least two observations per sample (got {control} control, {test} test)")]
    InsufficientSample { control: usize, test: usize },
    #[error("both samples have zero variance")]
    DegenerateVariance,
    #[error("control mean is zero; percent change is undefined")]
    ZeroControlMean,
    #[error("sample value {0} is not a finite non-negative number")]
    InvalidValue(f64),
    #[error("degrees of freedom must be positive (got {0})")]
    InvalidDf(f64),
    #[error("continued fraction did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("unit {unit_id} is tagged {tagged:?} but hashes to {expected:?}")]
    InconsistentAssignment { unit_id: String, tagged: Arm, expected: Arm },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Test,
}

/// 2×2 counts. Row one (`a`, `b`) is the test arm, row two (`c`, `d`) the
/// control arm; the first column counts the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        ContingencyTable { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    fn has_zero_margin(&self) -> bool {
        self.a + self.b == 0 || self.c + self.d == 0 || self.a + self.c == 0 || self.b + self.d == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Fisher,
    WelchT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    /// Odds ratio for Fisher (may be infinite), t for Welch.
    #[serde(with = "extended_f64")]
    pub statistic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    pub p_value: f64,
    /// Percent change of the test arm over control; `None` when the control
    /// rate is zero.
    pub delta_pct: Option<f64>,
    pub n_control: u64,
    pub n_test: u64,
}

/// JSON has no infinities; they travel as the strings `"inf"`/`"-inf"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("not a number: {s}"))),
        }
    }
}

/// `ln(k!)` for `k` in `0..=n`, accumulated as running sums of `ln i`.
fn ln_factorials(n: u64) -> Vec<f64> {
    let mut table = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0f64;
    table.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        table.push(acc);
    }
    table
}

/// Relative slack when comparing table probabilities against the observed one.
const FISHER_TIE_TOLERANCE: f64 = 1e-7;

/// Two-sided Fisher exact test: sums the probability of every table with the
/// observed margins that is no more likely than the observed table.
pub fn fisher_exact_two_sided(t: &ContingencyTable) -> Result<TestResult, StatsError> {
    if t.has_zero_margin() {
        return Err(StatsError::DegenerateMargins);
    }
    let row1 = t.a + t.b;
    let row2 = t.c + t.d;
    let col1 = t.a + t.c;
    let n = t.total();
    let lf = ln_factorials(n);
    let ln_choose = |n: u64, k: u64| lf[n as usize] - lf[k as usize] - lf[(n - k) as usize];
    let ln_denominator = ln_choose(n, col1);
    let ln_prob = |k: u64| ln_choose(row1, k) + ln_choose(row2, col1 - k) - ln_denominator;

    let lo = col1.saturating_sub(row2);
    let hi = row1.min(col1);
    let threshold = ln_prob(t.a) + FISHER_TIE_TOLERANCE.ln_1p();
    let p: f64 = (lo..=hi)
        .map(ln_prob)
        .filter(|&lp| lp <= threshold)
        .map(f64::exp)
        .sum();

    let odds_ratio = if t.b * t.c == 0 {
        f64::INFINITY
    } else {
        (t.a as f64 * t.d as f64) / (t.b as f64 * t.c as f64)
    };
    let test_rate = t.a as f64 / row1 as f64;
    let control_rate = t.c as f64 / row2 as f64;
    let delta_pct = (control_rate > 0.0).then(|| 100.0 * (test_rate - control_rate) / control_rate);

    Ok(TestResult {
        kind: TestKind::Fisher,
        statistic: odds_ratio,
        df: None,
        p_value: p.min(1.0),
        delta_pct,
        n_control: row2,
        n_test: row1,
    })
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

const CF_TOLERANCE: f64 = 1e-14;
const CF_MAX_ITER: usize = 300;

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64, StatsError> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    // The continued fraction converges fast below the mean; use symmetry above it.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(ln_front.exp() * beta_continued_fraction(x, a, b)? / a)
    } else {
        Ok(1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a)? / b)
    }
}

/// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> Result<f64, StatsError> {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_TOLERANCE {
            return Ok(h);
        }
    }
    Err(StatsError::NoConvergence(CF_MAX_ITER))
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> Result<f64, StatsError> {
    if !df.is_finite() || df <= 0.0 {
        return Err(StatsError::InvalidDf(df));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5)
}

/// `P(T ≤ t)` for Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> Result<f64, StatsError> {
    let tail = 0.5 * student_t_two_sided_p(t, df)?;
    Ok(if t < 0.0 { tail } else { 1.0 - tail })
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Welch's unequal-variance two-sample t-test, `test` minus `control`.
pub fn welch_t_test(control: &[f64], test: &[f64]) -> Result<TestResult, StatsError> {
    if control.len() < 2 || test.len() < 2 {
        return Err(StatsError::InsufficientSample {
            control: control.len(),
            test: test.len(),
        });
    }
    if let Some(&bad) = control.iter().chain(test).find(|v| !v.is_finite()) {
        return Err(StatsError::InvalidValue(bad));
    }
    let (mc, vc) = mean_and_variance(control);
    let (mt, vt) = mean_and_variance(test);
    if vc == 0.0 && vt == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    if mc == 0.0 {
        return Err(StatsError::ZeroControlMean);
    }
    let nc = control.len() as f64;
    let nt = test.len() as f64;
    let se_c = vc / nc;
    let se_t = vt / nt;
    let t = (mt - mc) / (se_c + se_t).sqrt();
    let df = (se_c + se_t).powi(2) / (se_c * se_c / (nc - 1.0) + se_t * se_t / (nt - 1.0));
    let p = student_t_two_sided_p(t, df)?;
    Ok(TestResult {
        kind: TestKind::WelchT,
        statistic: t,
        df: Some(df),
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        delta_pct: Some(100.0 * (mt - mc) / mc),
        n_control: control.len() as u64,
        n_test: test.len() as u64,
    })
}

const BUCKETS: u64 = 1_000_000;

/// Hash bucket of a unit: first 8 bytes (big-endian) of
/// `SHA-256(salt ":" unit_id)` modulo one million.
pub fn bucket(salt: &str, unit_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{salt}:{unit_id}").as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head) % BUCKETS
}

/// Test iff the unit's bucket falls below `split_fraction` of the range.
pub fn assign_arm(unit_id: &str, salt: &str, split_fraction: f64) -> Result<Arm, StatsError> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(StatsError::InvalidSpec(format!(
            "split_fraction must be in (0, 1), got {split_fraction}"
        )));
    }
    let cutoff = (split_fraction * BUCKETS as f64).round() as u64;
    Ok(if bucket(salt, unit_id) < cutoff { Arm::Test } else { Arm::Control })
}
