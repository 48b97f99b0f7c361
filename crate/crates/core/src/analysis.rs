//! Post-processing of trained models and surprisal records: embedding
//! similarity, frequency binning, surprisal deltas, power-law fits and
//! Welch's t-test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::eval::{GroupTag, SurprisalRecord};
use crate::lm::{EmbeddingSide, LmError, Model, Scalar};
use crate::rng::{counter_u64, streams};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("records are misaligned at index {index}: {detail}")]
    Misaligned { index: usize, detail: String },
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("non-positive or non-finite input: {0}")]
    NonPositive(String),
    #[error("duplicate n value {0} in fit points")]
    DuplicateN(f64),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("vocabulary needs at least 2 entries for a random-pair baseline")]
    VocabTooSmall,
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine<S: Scalar>(u: &[S], v: &[S]) -> f64 {
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    dot / (uu.sqrt() * vv.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCosine {
    pub a: u32,
    pub b: u32,
    pub cosine: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub pairs: Vec<PairCosine>,
    /// Equally many uniformly drawn pairs of distinct ids.
    pub baseline: Vec<PairCosine>,
}

impl PairSimilarity {
    pub fn pair_mean(&self) -> f64 {
        mean(self.pairs.iter().map(|p| p.cosine))
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(self.baseline.iter().map(|p| p.cosine))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in it {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Cosine of each given pair plus a seeded random-pair baseline of the same
/// size. Pairs usually come from `DedupMap::duplicate_pairs` or
/// `DupScheme::twin_pairs`; an empty list gives an empty result.
pub fn duplicate_pair_similarity<S: Scalar>(
    model: &Model<S>,
    pairs: &[(u32, u32)],
    side: EmbeddingSide,
    seed: u64,
) -> Result<PairSimilarity, AnalysisError> {
    if pairs.is_empty() {
        return Ok(PairSimilarity::default());
    }
    let v = model.config().vocab_size as u64;
    if v < 2 {
        return Err(AnalysisError::VocabTooSmall);
    }
    let score = |a: u32, b: u32| -> Result<PairCosine, AnalysisError> {
        let cos = cosine(model.embedding(side, a)?, model.embedding(side, b)?);
        Ok(PairCosine { a, b, cosine: cos })
    };
    let out = pairs.iter().map(|&(a, b)| score(a, b)).collect::<Result<Vec<_>, _>>()?;
    let mut baseline = Vec::with_capacity(pairs.len());
    let mut k = 0u64;
    while baseline.len() < pairs.len() {
        let a = counter_u64(seed, streams::PAIRS, 2 * k) % v;
        let b = counter_u64(seed, streams::PAIRS, 2 * k + 1) % v;
        k += 1;
        if a != b {
            baseline.push(score(a as u32, b as u32)?);
        }
    }
    Ok(PairSimilarity { pairs: out, baseline })
}

/// Filtering applied before binning by frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinPolicy {
    /// Keys seen fewer times are excluded.
    pub min_count: u64,
    /// Bins with fewer keys are dropped.
    pub min_members: usize,
}

impl Default for BinPolicy {
    fn default() -> Self {
        Self {
            min_count: 10,
            min_members: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Inclusive lower edge.
    pub lo: f64,
    /// Exclusive upper edge.
    pub hi: f64,
    pub mean: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinnedSeries {
    pub bins: Vec<Bin>,
    /// Keys under the count floor.
    pub excluded_keys: usize,
    /// Keys that landed in bins under the membership floor.
    pub dropped_keys: usize,
}

impl BinnedSeries {
    pub fn total_support(&self) -> usize {
        self.bins.iter().map(|b| b.support).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,mean,support\n");
        for b in &self.bins {
            s.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, b.mean, b.support));
        }
        s
    }
}

fn log2_bin(count: u64) -> u32 {
    63 - count.leading_zeros()
}

/// Averages `values` in bins `[2^k, 2^(k+1))` of the key's count. Keys
/// missing from `counts` count as zero.
pub fn bin_by_frequency(values: &[(u32, f64)], counts: &[u64], policy: BinPolicy) -> BinnedSeries {
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut excluded = 0;
    for &(key, value) in values {
        let c = counts.get(key as usize).copied().unwrap_or(0);
        if c == 0 || c < policy.min_count {
            excluded += 1;
            continue;
        }
        groups.entry(log2_bin(c)).or_default().push(value);
    }
    let mut out = BinnedSeries {
        excluded_keys: excluded,
        ..Default::default()
    };
    for (k, vals) in groups {
        if vals.len() < policy.min_members {
            out.dropped_keys += vals.len();
            continue;
        }
        out.bins.push(Bin {
            lo: (1u128 << k) as f64,
            hi: (1u128 << (k + 1)) as f64,
            mean: mean(vals.iter().copied()),
            support: vals.len(),
        });
    }
    out
}

/// Mean value within each count quartile, lowest counts first. Ties in count
/// keep input order.
pub fn quartile_means(values: &[(f64, u64)]) -> Option<[f64; 4]> {
    if values.len() < 4 {
        return None;
    }
    let mut sorted: Vec<&(f64, u64)> = values.iter().collect();
    sorted.sort_by_key(|p| p.1);
    let n = sorted.len();
    let mut out = [0.0; 4];
    for (q, slot) in out.iter_mut().enumerate() {
        let (lo, hi) = (q * n / 4, (q + 1) * n / 4);
        *slot = mean(sorted[lo..hi].iter().map(|p| p.0));
    }
    Some(out)
}

/// How per-position deltas are grouped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Grouping {
    /// By the group tag of `records_a`.
    TreatmentControl,
    /// By log2 bin of the canonical target's count.
    FrequencyBin { counts: Vec<u64> },
    /// By duplicated fraction of the context, in `bins` equal-width bins over
    /// `[0, 1]`; bins with fewer than `min_support` records are dropped.
    ContextFraction {
        bins: usize,
        local: bool,
        min_support: usize,
    },
}

impl Grouping {
    pub fn context_fraction(local: bool) -> Self {
        Grouping::ContextFraction {
            bins: 10,
            local,
            min_support: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub label: String,
    pub mean: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub groups: Vec<GroupDelta>,
    /// Mean over every record kept in some group.
    pub overall_mean: f64,
    pub total: usize,
    /// Records removed by a support floor.
    pub dropped: usize,
}

impl DeltaReport {
    pub fn group(&self, label: &str) -> Option<&GroupDelta> {
        self.groups.iter().find(|g| g.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,mean_delta,support\n");
        for g in &self.groups {
            s.push_str(&format!("{},{},{}\n", g.label, g.mean, g.support));
        }
        s
    }
}

fn check_aligned(a: &[SurprisalRecord], b: &[SurprisalRecord]) -> Result<(), AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Misaligned {
            index: a.len().min(b.len()),
            detail: format!("lengths {} and {}", a.len(), b.len()),
        });
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.position != y.position || x.canonical_id != y.canonical_id {
            return Err(AnalysisError::Misaligned {
                index: i,
                detail: format!(
                    "(position {}, canonical {}) vs (position {}, canonical {})",
                    x.position, x.canonical_id, y.position, y.canonical_id
                ),
            });
        }
    }
    Ok(())
}

/// Mean of `surprisal_a - surprisal_b` per group.
pub fn surprisal_delta(
    a: &[SurprisalRecord],
    b: &[SurprisalRecord],
    grouping: &Grouping,
) -> Result<DeltaReport, AnalysisError> {
    check_aligned(a, b)?;
    // label -> (sort key, sum, count)
    let mut acc: BTreeMap<(u64, String), (f64, usize)> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        let d = x.surprisal - y.surprisal;
        let key = match grouping {
            Grouping::TreatmentControl => {
                let (k, l) = match x.group_tag {
                    GroupTag::Treatment => (0, "treatment"),
                    GroupTag::Control => (1, "control"),
                    GroupTag::None => (2, "none"),
                };
                (k, l.to_string())
            }
            Grouping::FrequencyBin { counts } => {
                let c = counts.get(x.canonical_id as usize).copied().unwrap_or(0);
                if c == 0 {
                    (0, "0".to_string())
                } else {
                    let k = log2_bin(c);
                    (k as u64 + 1, format!("[{},{})", 1u128 << k, 1u128 << (k + 1)))
                }
            }
            Grouping::ContextFraction { bins, local, .. } => {
                let bins = (*bins).max(1);
                let f = if *local {
                    x.local16_dup_fraction
                } else {
                    x.full_context_dup_fraction
                };
                let k = ((f * bins as f64) as usize).min(bins - 1);
                let w = 1.0 / bins as f64;
                (k as u64, format!("[{:.3},{:.3})", k as f64 * w, (k + 1) as f64 * w))
            }
        };
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += d;
        e.1 += 1;
    }
    let floor = match grouping {
        Grouping::ContextFraction { min_support, .. } => *min_support,
        _ => 0,
    };
    let mut report = DeltaReport {
        groups: Vec::new(),
        overall_mean: f64::NAN,
        total: 0,
        dropped: 0,
    };
    let mut sum = 0.0;
    for ((_, label), (s, n)) in acc {
        if n < floor {
            report.dropped += n;
            continue;
        }
        sum += s;
        report.total += n;
        report.groups.push(GroupDelta {
            label,
            mean: s / n as f64,
            support: n,
        });
    }
    if report.total > 0 {
        report.overall_mean = sum / report.total as f64;
    }
    Ok(report)
}

/// `ppl(n) = a * n^b`, fitted by least squares on `(ln n, ln ppl)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a: f64,
    pub b: f64,
    /// RMS of the log-space residuals.
    pub residual_rms: f64,
    pub n_min: f64,
    pub n_max: f64,
}

impl FitResult {
    pub fn predict(&self, n: f64) -> f64 {
        self.a * n.powf(self.b)
    }

    /// The `n` at which the fit reaches `ppl`.
    pub fn invert(&self, ppl: f64) -> f64 {
        (ppl / self.a).powf(1.0 / self.b)
    }
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<FitResult, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::TooFewPoints {
            need: 2,
            got: points.len(),
        });
    }
    let mut sorted = points.to_vec();
    for &(n, p) in &sorted {
        if !(n > 0.0 && p > 0.0 && n.is_finite() && p.is_finite()) {
            return Err(AnalysisError::NonPositive(format!("({n}, {p})")));
        }
    }
    // Sorting makes the sums independent of input order.
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(AnalysisError::DuplicateN(w[0].0));
    }
    let k = sorted.len() as f64;
    let xs: Vec<f64> = sorted.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = sorted.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let b = sxy / sxx;
    let ln_a = my - b * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - ln_a - b * x).powi(2)).sum();
    Ok(FitResult {
        a: ln_a.exp(),
        b,
        residual_rms: (rss / k).sqrt(),
        n_min: sorted[0].0,
        n_max: sorted[sorted.len() - 1].0,
    })
}

/// For each `n_a`, the `n_b` at which `fit_b` matches `fit_a(n_a)`.
pub fn equal_performance_ratio(fit_a: &FitResult, fit_b: &FitResult, ns: &[f64]) -> Vec<(f64, f64)> {
    ns.iter().map(|&n| (n, fit_b.invert(fit_a.predict(n)))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// mean(a) < mean(b).
    Less,
    /// mean(a) > mean(b).
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn welch_t_test(a: &[f64], b: &[f64], alt: Alternative) -> Result<TTest, AnalysisError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(AnalysisError::TooFewPoints { need: 2, got: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonPositive("non-finite sample".into()));
        }
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Err(AnalysisError::DegenerateVariance("both samples are constant".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p = match alt {
        Alternative::TwoSided => 2.0 * student_t_sf(t.abs(), df),
        Alternative::Less => student_t_cdf(t, df),
        Alternative::Greater => student_t_sf(t, df),
    };
    Ok(TTest { t, df, p: p.min(1.0) })
}

/// P(T <= t) for Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    student_t_sf(-t, df)
}

/// P(T > t).
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    #[allow(clippy::excessive_precision)]
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut s = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

/// `I_x(a, b)`, by the continued fraction evaluated with Lentz's method.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
