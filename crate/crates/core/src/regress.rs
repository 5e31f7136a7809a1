//! Slice-level regression tests with statistical verdicts.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::analysis::{self, entropy, estimate_distribution, f1_from_pairs, AnalysisError, FlipCategory};
use crate::canonical::{hash_of, ContentHash, Label};
use crate::datasets::{apply_slice, Clause, Dataset, ExampleId, SliceSpec};
use crate::par::{self, Execution};
use crate::providers::SamplingParams;
use crate::runner::RunRecord;

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_MIN_N: usize = 30;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("required sample size is undefined: drop {drop} >= baseline rate {p}")]
    Infeasible { p: f64, drop: f64 },
    #[error("invalid test `{name}`: {reason}")]
    InvalidTest { name: String, reason: String },
    #[error("suite file {location}: {reason}")]
    SuiteParse { location: String, reason: String },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl RegressError {
    pub fn code(&self) -> &'static str {
        match self {
            RegressError::Infeasible { .. } => "INFEASIBLE",
            RegressError::InvalidTest { .. } => "INVALID_TEST",
            RegressError::SuiteParse { .. } => "SUITE_PARSE",
            RegressError::Analysis(e) => e.code(),
        }
    }
}

impl From<crate::datasets::DatasetError> for RegressError {
    fn from(e: crate::datasets::DatasetError) -> Self {
        RegressError::Analysis(e.into())
    }
}

/// ln C(n, k) + k ln p + (n-k) ln(1-p), summed over `ks` in log space.
fn binom_log_terms(n: u64, p: f64, ks: impl Iterator<Item = u64>) -> f64 {
    let ln_p = p.ln();
    let ln_q = (-p).ln_1p();
    let terms: Vec<f64> = ks.map(|k| ln_choose(n, k) + k as f64 * ln_p + (n - k) as f64 * ln_q).collect();
    log_sum_exp(&terms)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact two-sided McNemar test: binomial test of `b` successes in `b + c`
/// trials at p = 1/2. Returns 1 when there are no discordant pairs.
pub fn mcnemar_test(discordant_b: u64, discordant_c: u64) -> f64 {
    let n = discordant_b + discordant_c;
    if n == 0 {
        return 1.0;
    }
    let k = discordant_b.min(discordant_c);
    let mut ln_tail = f64::NEG_INFINITY;
    let mut ln_term = -(n as f64) * std::f64::consts::LN_2;
    for i in 0..=k {
        if i > 0 {
            ln_term += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        ln_tail = log_sum_exp(&[ln_tail, ln_term]);
    }
    (2.0 * ln_tail.exp()).min(1.0)
}

/// P(X >= k) for X ~ Binomial(n, p).
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    binom_log_terms(n, p, k..=n).exp().min(1.0)
}

/// Per-group size for a two-proportion test to detect `detectable_drop` from
/// `p_baseline` (two-sided `alpha`, normal approximation).
pub fn required_sample_size(
    p_baseline: f64,
    detectable_drop: f64,
    alpha: f64,
    power: f64,
) -> Result<u64, RegressError> {
    let p1 = p_baseline;
    let p2 = p_baseline - detectable_drop;
    if !(detectable_drop > 0.0) || !(p2 > 0.0) || !(p1 < 1.0) {
        return Err(RegressError::Infeasible { p: p_baseline, drop: detectable_drop });
    }
    let z = Normal::standard();
    let z_a = z.inverse_cdf(1.0 - alpha / 2.0);
    let z_b = z.inverse_cdf(power);
    let pbar = (p1 + p2) / 2.0;
    let num = z_a * (2.0 * pbar * (1.0 - pbar)).sqrt() + z_b * (p1 * (1.0 - p1) + p2 * (1.0 - p2)).sqrt();
    Ok((num * num / (detectable_drop * detectable_drop)).ceil() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1,
    RegressionRate,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::RegressionRate => "regression_rate",
        })
    }
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_min_n() -> usize {
    DEFAULT_MIN_N
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTest {
    pub name: String,
    /// Conjunction of clauses; empty means the whole dataset.
    #[serde(default)]
    pub slice: Vec<Clause>,
    pub metric: Metric,
    /// Largest tolerated drop (or largest tolerated rate for `regression_rate`).
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_min_n")]
    pub min_n: usize,
    /// Positive class for `f1`; the first label in the label set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<Label>,
}

impl RegressionTest {
    pub fn new(name: &str, slice: Vec<Clause>, metric: Metric) -> Self {
        RegressionTest {
            name: name.to_string(),
            slice,
            metric,
            delta: DEFAULT_DELTA,
            alpha: DEFAULT_ALPHA,
            min_n: DEFAULT_MIN_N,
            positive: None,
        }
    }

    pub fn validate(&self) -> Result<(), RegressError> {
        let bad = |reason: &str| Err(RegressError::InvalidTest { name: self.name.clone(), reason: reason.to_string() });
        if !(self.delta >= 0.0) {
            return bad("delta must be >= 0");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must be in (0, 1)");
        }
        if self.min_n == 0 {
            return bad("min_n must be >= 1");
        }
        Ok(())
    }

    fn slice_ids(&self, dataset: &Dataset) -> Result<BTreeSet<ExampleId>, RegressError> {
        if self.slice.is_empty() {
            return Ok(dataset.ids().map(str::to_string).collect());
        }
        let spec = SliceSpec { name: self.name.clone(), clauses: self.slice.clone() };
        Ok(apply_slice(dataset, &spec)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlakyConfig {
    pub entropy_threshold: f64,
    pub flaky_fraction: f64,
}

impl Default for FlakyConfig {
    fn default() -> Self {
        FlakyConfig { entropy_threshold: 0.1 * std::f64::consts::LN_2, flaky_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Pass,
    Inconclusive,
    Fail,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Inconclusive => "INCONCLUSIVE",
            Status::Fail => "FAIL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub test: String,
    pub metric: Metric,
    pub status: Status,
    pub flaky: bool,
    /// Share of slice examples above the entropy threshold in the probe run.
    pub unstable_fraction: Option<f64>,
    pub baseline_value: Option<f64>,
    pub candidate_value: Option<f64>,
    /// Baseline minus candidate; the regression rate itself for `regression_rate`.
    pub observed_delta: Option<f64>,
    pub p_value: Option<f64>,
    pub n_effective: usize,
    pub delta: f64,
    pub alpha: f64,
    pub min_n: usize,
    pub explanation: String,
}

impl Verdict {
    fn inconclusive(test: &RegressionTest, n: usize, explanation: String) -> Self {
        Verdict {
            test: test.name.clone(),
            metric: test.metric,
            status: Status::Inconclusive,
            flaky: false,
            unstable_fraction: None,
            baseline_value: None,
            candidate_value: None,
            observed_delta: None,
            p_value: None,
            n_effective: n,
            delta: test.delta,
            alpha: test.alpha,
            min_n: test.min_n,
            explanation,
        }
    }
}

/// Knobs shared by every test of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub flaky: FlakyConfig,
    pub bootstrap_resamples: usize,
    /// Mixed into each test's bootstrap seed together with its name.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { flaky: FlakyConfig::default(), bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES, seed: 0 }
    }
}

fn bootstrap_seed(seed: u64, name: &str) -> u64 {
    let h = hash_of(&(seed, name));
    u64::from_str_radix(&h.hex()[..16], 16).expect("hex digest")
}

/// Two-sided paired bootstrap p-value for a change in F1 (`baseline - candidate`).
pub fn bootstrap_f1_p_value(
    gold: &[&Label],
    baseline: &[Option<&Label>],
    candidate: &[Option<&Label>],
    positive: &Label,
    resamples: usize,
    seed: u64,
) -> f64 {
    let n = gold.len();
    if n == 0 || resamples == 0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut le, mut ge) = (0usize, 0usize);
    let mut idx = vec![0usize; n];
    for _ in 0..resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        let fb = f1_from_pairs(idx.iter().map(|&i| (gold[i], baseline[i])), positive).value;
        let fc = f1_from_pairs(idx.iter().map(|&i| (gold[i], candidate[i])), positive).value;
        let drop = fb - fc;
        if drop <= 0.0 {
            le += 1;
        }
        if drop >= 0.0 {
            ge += 1;
        }
    }
    let tail = (le.min(ge) + 1) as f64 / (resamples + 1) as f64;
    (2.0 * tail).min(1.0)
}

/// Share of `ids` whose sampled entropy exceeds the threshold.
fn unstable_fraction(probe: &RunRecord, ids: &BTreeSet<ExampleId>, cfg: &FlakyConfig) -> Result<f64, AnalysisError> {
    let mut above = 0;
    for id in ids {
        if entropy(&estimate_distribution(probe, id)?) > cfg.entropy_threshold {
            above += 1;
        }
    }
    Ok(above as f64 / ids.len() as f64)
}

/// Evaluates one test. `probe` is the candidate's sampling run used for the
/// flaky flag; without it `flaky` stays false.
pub fn evaluate_test(
    test: &RegressionTest,
    baseline: &RunRecord,
    candidate: &RunRecord,
    dataset: &Dataset,
    probe: Option<&RunRecord>,
    options: &EvalOptions,
) -> Result<Verdict, RegressError> {
    test.validate()?;
    let flips = analysis::classify_flips(baseline, candidate, dataset)?;
    let ids = test.slice_ids(dataset)?;
    if ids.is_empty() {
        return Err(AnalysisError::EmptySlice(test.name.clone()).into());
    }
    let n = ids.len();

    let mut notes = Vec::new();
    let (flaky, unstable) = match probe {
        Some(p) => match unstable_fraction(p, &ids, &options.flaky) {
            Ok(f) => (f >= options.flaky.flaky_fraction, Some(f)),
            Err(e) => {
                notes.push(format!("flakiness probe unavailable: {e}"));
                (false, None)
            }
        },
        None => (false, None),
    };

    let (b, c) = ids.iter().fold((0u64, 0u64), |(b, c), id| match flips.get(id) {
        Some(FlipCategory::Regressed) => (b + 1, c),
        Some(FlipCategory::Improved) => (b, c + 1),
        _ => (b, c),
    });

    let (base_v, cand_v, observed, p) = match test.metric {
        Metric::Accuracy => {
            let tb = analysis::accuracy_tally(baseline, dataset, Some(&ids))?;
            let tc = analysis::accuracy_tally(candidate, dataset, Some(&ids))?;
            let drop = (tb.correct as f64 - tc.correct as f64) / n as f64;
            (tb.rate(), tc.rate(), drop, mcnemar_test(b, c))
        }
        Metric::F1 => {
            let positive = match &test.positive {
                Some(l) => l.clone(),
                None => dataset.label_set().labels()[0].clone(),
            };
            let fb = analysis::f1(baseline, dataset, &positive, Some(&ids))?;
            let fc = analysis::f1(candidate, dataset, &positive, Some(&ids))?;
            let gold: Vec<&Label> = ids.iter().map(|id| &dataset.get(id).expect("slice id in dataset").gold).collect();
            let pb = analysis::predictions(baseline, ids.iter().map(String::as_str))?;
            let pc = analysis::predictions(candidate, ids.iter().map(String::as_str))?;
            let bs: Vec<Option<&Label>> = pb.iter().map(Option::as_ref).collect();
            let cs: Vec<Option<&Label>> = pc.iter().map(Option::as_ref).collect();
            let p = bootstrap_f1_p_value(
                &gold,
                &bs,
                &cs,
                &positive,
                options.bootstrap_resamples,
                bootstrap_seed(options.seed, &test.name),
            );
            (fb.value, fc.value, fb.value - fc.value, p)
        }
        Metric::RegressionRate => {
            let rate = b as f64 / n as f64;
            // H0: true rate <= delta
            let p = binomial_upper_tail(b, n as u64, test.delta);
            (f64::NAN, f64::NAN, rate, p)
        }
    };

    let exceeded = observed > test.delta;
    let significant = p < test.alpha;
    let status = if n < test.min_n {
        notes.insert(0, format!("slice has {n} examples, fewer than min_n={}", test.min_n));
        Status::Inconclusive
    } else if exceeded && significant {
        Status::Fail
    } else {
        Status::Pass
    };
    if status != Status::Inconclusive {
        let what = if test.metric == Metric::RegressionRate { "regression rate" } else { "drop" };
        notes.insert(
            0,
            format!(
                "{what} {observed:.4} {} delta {}, p={p:.4} {} alpha {}",
                if exceeded { ">" } else { "<=" },
                test.delta,
                if significant { "<" } else { ">=" },
                test.alpha
            ),
        );
    }

    let finite = |x: f64| x.is_finite().then_some(x);
    Ok(Verdict {
        test: test.name.clone(),
        metric: test.metric,
        status,
        flaky,
        unstable_fraction: unstable,
        baseline_value: finite(base_v),
        candidate_value: finite(cand_v),
        observed_delta: Some(observed),
        p_value: Some(p),
        n_effective: n,
        delta: test.delta,
        alpha: test.alpha,
        min_n: test.min_n,
        explanation: notes.join("; "),
    })
}

/// Which stored run is the suite's baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaselineSelector {
    RunId { run_id: String },
    ModelPrompt { model: String, prompt_id: String, prompt_version: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlakinessProbe {
    #[serde(flatten)]
    pub params: SamplingParams,
    #[serde(flatten)]
    pub thresholds: FlakyConfig,
}

impl Default for FlakinessProbe {
    fn default() -> Self {
        FlakinessProbe { params: SamplingParams::confidence(), thresholds: FlakyConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub suite_id: String,
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSelector>,
    #[serde(default)]
    pub flakiness: FlakinessProbe,
    #[serde(default)]
    pub seed: u64,
    pub tests: Vec<RegressionTest>,
}

impl TestSuite {
    /// Parses a TOML suite file and checks test names and parameters.
    pub fn from_toml(location: &str, text: &str) -> Result<Self, RegressError> {
        let suite: TestSuite = toml::from_str(text).map_err(|e| RegressError::SuiteParse {
            location: match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    format!("{location}:{line}")
                }
                None => location.to_string(),
            },
            reason: e.message().to_string(),
        })?;
        let mut seen = BTreeSet::new();
        for t in &suite.tests {
            if !seen.insert(t.name.as_str()) {
                return Err(RegressError::SuiteParse {
                    location: location.to_string(),
                    reason: format!("duplicate test name `{}`", t.name),
                });
            }
            t.validate()?;
        }
        Ok(suite)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("suite serializes to TOML")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub pass: usize,
    pub fail: usize,
    pub inconclusive: usize,
    pub flaky: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite_id: String,
    pub dataset_id: String,
    pub dataset_digest: ContentHash,
    pub baseline_run: ContentHash,
    pub candidate_run: ContentHash,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_run: Option<ContentHash>,
    pub verdicts: Vec<Verdict>,
    pub summary: SuiteSummary,
    pub note: String,
}

impl SuiteReport {
    /// 0 when every test passes, 1 on any FAIL, 2 on INCONCLUSIVE without FAIL.
    pub fn exit_code(&self) -> i32 {
        if self.summary.fail > 0 {
            1
        } else if self.summary.inconclusive > 0 {
            2
        } else {
            0
        }
    }

    pub fn verdict(&self, test: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.test == test)
    }
}

/// Runs every test. Per-test errors become INCONCLUSIVE verdicts.
pub fn run_suite(
    suite: &TestSuite,
    baseline: &RunRecord,
    candidate: &RunRecord,
    dataset: &Dataset,
    probe: Option<&RunRecord>,
    execution: Execution,
) -> SuiteReport {
    let options = EvalOptions {
        flaky: suite.flakiness.thresholds,
        bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
        seed: suite.seed,
    };
    let verdicts: Vec<Verdict> = par::map(execution, &suite.tests, |t| {
        evaluate_test(t, baseline, candidate, dataset, probe, &options)
            .unwrap_or_else(|e| Verdict::inconclusive(t, 0, format!("{}: {e}", e.code())))
    });
    let mut summary = SuiteSummary::default();
    for v in &verdicts {
        match v.status {
            Status::Pass => summary.pass += 1,
            Status::Fail => summary.fail += 1,
            Status::Inconclusive => summary.inconclusive += 1,
        }
        summary.flaky += v.flaky as usize;
    }
    SuiteReport {
        suite_id: suite.suite_id.clone(),
        dataset_id: dataset.id().to_string(),
        dataset_digest: dataset.digest().clone(),
        baseline_run: baseline.run_id.clone(),
        candidate_run: candidate.run_id.clone(),
        probe_run: probe.map(|p| p.run_id.clone()),
        verdicts,
        summary,
        note: "alpha applies to each test separately; no multiple-comparison correction".to_string(),
    }
}
