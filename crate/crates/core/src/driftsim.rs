//! Deterministic synthetic models with known accuracy and drift.
//!
//! Every random draw is a pure function of `(seed, example_id, stream[, sample_index])`
//! hashed with SHA-256, so samples do not depend on call order or thread.
//!
//! Whether a model answers an example correctly is decided by comparing a
//! per-example uniform `u` with the example's accuracy. An updated model
//! shares its parent's `u` except on a `churn` fraction of examples, where it
//! draws its own. Churn sets how many predictions flip between versions when
//! nothing systematic changed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

use crate::canonical::Label;
use crate::datasets::{Clause, Dataset, Example};
use crate::par::{self, Execution};
use crate::prompts::{PromptMode, PromptTemplate};
use crate::providers::{
    Choice, ModelRef, Provider, ProviderError, ReplayStore, SampleRequest, SampleResponse, SamplingParams, Usage,
};
use crate::regress::{evaluate_test, EvalOptions, RegressError, RegressionTest, Status};
use crate::runner::{collect_run, RunConfig, RunContext, RunError};

pub const SYNTHETIC_PROVIDER: &str = "synthetic";
pub const DEFAULT_CHURN: f64 = 0.25;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("calibration needs a null drift; slice `{0}` has a nonzero delta")]
    NonzeroDrift(String),
    #[error("power experiment needs at least one nonzero delta")]
    ZeroDrift,
    #[error("an experiment needs at least one trial")]
    NoTrials,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Regress(#[from] RegressError),
}

impl DriftError {
    pub fn code(&self) -> &'static str {
        match self {
            DriftError::NonzeroDrift(_) => "NONZERO_DRIFT",
            DriftError::ZeroDrift => "ZERO_DRIFT",
            DriftError::NoTrials => "NO_TRIALS",
            DriftError::InvalidSpec(_) => "INVALID_SPEC",
            DriftError::Run(e) => e.code(),
            DriftError::Regress(e) => e.code(),
        }
    }
}

/// Uniform in [0, 1) from a hash of the key parts.
fn uniform(seed: u64, example_id: &str, stream: &str, sample_index: Option<u32>) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((example_id.len() as u64).to_le_bytes());
    h.update(example_id.as_bytes());
    h.update(stream.as_bytes());
    if let Some(i) = sample_index {
        h.update(i.to_le_bytes());
    }
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAccuracy {
    pub name: String,
    pub clauses: Vec<Clause>,
    pub accuracy: f64,
}

/// The first matching slice sets an example's accuracy; unmatched examples
/// use `base_accuracy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    pub model_name: String,
    pub seed: u64,
    pub base_accuracy: f64,
    #[serde(default)]
    pub slices: Vec<SliceAccuracy>,
    /// Flip probability per unit temperature, clamped to [0, 0.5].
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Seed of the model this one was updated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_seed: Option<u64>,
    #[serde(default)]
    pub churn: f64,
}

fn default_kappa() -> f64 {
    0.5
}

impl SyntheticModelSpec {
    pub fn new(model_name: &str, seed: u64, base_accuracy: f64) -> Self {
        SyntheticModelSpec {
            model_name: model_name.to_string(),
            seed,
            base_accuracy,
            slices: Vec::new(),
            kappa: default_kappa(),
            parent_seed: None,
            churn: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DriftError> {
        let unit = |what: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(DriftError::InvalidSpec(format!("{what} = {x} is outside [0, 1]")))
            }
        };
        unit("base_accuracy", self.base_accuracy)?;
        unit("churn", self.churn)?;
        for s in &self.slices {
            unit(&format!("accuracy of `{}`", s.name), s.accuracy)?;
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(DriftError::InvalidSpec(format!("kappa = {} must be >= 0", self.kappa)));
        }
        Ok(())
    }

    pub fn accuracy_for(&self, example: &Example) -> f64 {
        self.slices
            .iter()
            .find(|s| s.clauses.iter().all(|c| c.matches(example)))
            .map_or(self.base_accuracy, |s| s.accuracy)
    }

    pub fn flip_probability(&self, temperature: f64) -> f64 {
        (self.kappa * temperature).clamp(0.0, 0.5)
    }

    /// The per-example uniform deciding correctness.
    fn correctness_draw(&self, example_id: &str) -> f64 {
        match self.parent_seed {
            Some(parent) if uniform(self.seed, example_id, "churn", None) >= self.churn => {
                uniform(parent, example_id, "correct", None)
            }
            _ => uniform(self.seed, example_id, "correct", None),
        }
    }

    pub fn model_ref(&self) -> ModelRef {
        ModelRef::new(SYNTHETIC_PROVIDER, &self.model_name, PromptMode::Completion)
    }
}

/// `labels` minus `exclude`, picked by `u`.
fn other_label<'a>(labels: &'a [Label], exclude: &Label, u: f64) -> &'a Label {
    let others: Vec<&Label> = labels.iter().filter(|l| *l != exclude).collect();
    others[((u * others.len() as f64) as usize).min(others.len() - 1)]
}

/// The label emitted for one sample. At temperature 0 it is the gold label
/// with probability `accuracy_for(example)`, otherwise a wrong label; at
/// temperature `t` each sample independently moves to a different label with
/// probability `min(kappa * t, 0.5)`.
pub fn synth_label(
    spec: &SyntheticModelSpec,
    labels: &[Label],
    example: &Example,
    temperature: f64,
    sample_index: u32,
) -> Label {
    let id = example.id.as_str();
    let mode = if spec.correctness_draw(id) < spec.accuracy_for(example) {
        &example.gold
    } else {
        other_label(labels, &example.gold, uniform(spec.seed, id, "wrong", None))
    };
    let flip = spec.flip_probability(temperature);
    if flip > 0.0 && uniform(spec.seed, id, "noise", Some(sample_index)) < flip {
        other_label(labels, mode, uniform(spec.seed, id, "noise-label", Some(sample_index))).clone()
    } else {
        mode.clone()
    }
}

pub fn synth_sample(
    spec: &SyntheticModelSpec,
    labels: &[Label],
    example: &Example,
    params: &SamplingParams,
    sample_index: u32,
) -> SampleResponse {
    SampleResponse {
        sample_index,
        raw_text: synth_label(spec, labels, example, params.temperature, sample_index).to_string(),
        finish_reason: "stop".into(),
        usage: Usage::default(),
        latency_ms: 0,
    }
}

/// A provider serving one or more synthetic models by name.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    labels: Vec<Label>,
    models: BTreeMap<String, SyntheticModelSpec>,
}

impl SyntheticProvider {
    pub fn new(labels: &[Label], specs: impl IntoIterator<Item = SyntheticModelSpec>) -> Self {
        SyntheticProvider {
            labels: labels.to_vec(),
            models: specs.into_iter().map(|s| (s.model_name.clone(), s)).collect(),
        }
    }
}

impl Provider for SyntheticProvider {
    fn fetch(&self, request: &SampleRequest<'_>) -> Result<Vec<Choice>, ProviderError> {
        let spec = self
            .models
            .get(&request.model.model_name)
            .ok_or_else(|| ProviderError::Config(format!("no synthetic model `{}`", request.model.model_name)))?;
        let example = request
            .example
            .ok_or_else(|| ProviderError::Config("synthetic provider needs the example context".into()))?;
        Ok(request
            .sample_indices
            .iter()
            .map(|&i| {
                let r = synth_sample(spec, &self.labels, example, request.params, i);
                Choice {
                    raw_text: r.raw_text,
                    finish_reason: r.finish_reason,
                    usage: r.usage,
                    latency_ms: r.latency_ms,
                }
            })
            .collect())
    }
}

/// A base model and the per-slice accuracy changes of its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub base: SyntheticModelSpec,
    /// Change of `base_accuracy` (examples outside every slice).
    #[serde(default)]
    pub base_delta: f64,
    /// Change of each named slice's accuracy.
    #[serde(default)]
    pub slice_deltas: BTreeMap<String, f64>,
    #[serde(default = "default_churn")]
    pub churn: f64,
}

fn default_churn() -> f64 {
    DEFAULT_CHURN
}

impl DriftSpec {
    pub fn null(base: SyntheticModelSpec) -> Self {
        DriftSpec { base, base_delta: 0.0, slice_deltas: BTreeMap::new(), churn: DEFAULT_CHURN }
    }

    pub fn is_null(&self) -> bool {
        self.base_delta == 0.0 && self.slice_deltas.values().all(|d| *d == 0.0)
    }

    fn first_nonzero(&self) -> Option<String> {
        if self.base_delta != 0.0 {
            return Some("base".to_string());
        }
        self.slice_deltas.iter().find(|(_, d)| **d != 0.0).map(|(k, _)| k.clone())
    }

    /// The (baseline, updated) pair with the baseline seeded by `seed`.
    pub fn pair(&self, seed: u64) -> Result<(SyntheticModelSpec, SyntheticModelSpec), DriftError> {
        self.base.validate()?;
        if let Some(name) = self.slice_deltas.keys().find(|k| !self.base.slices.iter().any(|s| &s.name == *k)) {
            return Err(DriftError::InvalidSpec(format!("delta for unknown slice `{name}`")));
        }
        let base = SyntheticModelSpec { seed, ..self.base.clone() };
        let mut updated = SyntheticModelSpec {
            model_name: format!("{}-updated", self.base.model_name),
            seed: derive_seed(seed, "updated"),
            parent_seed: Some(seed),
            churn: self.churn,
            base_accuracy: self.base.base_accuracy + self.base_delta,
            ..self.base.clone()
        };
        for s in &mut updated.slices {
            s.accuracy += self.slice_deltas.get(&s.name).copied().unwrap_or(0.0);
        }
        updated.validate()?;
        Ok((base, updated))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub status: Status,
    pub delta: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: String,
    pub test: String,
    pub n_trials: usize,
    pub fails: usize,
    pub fail_rate: f64,
    /// 95% Clopper-Pearson interval for the FAIL rate.
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: Vec<TrialOutcome>,
}

impl ExperimentResult {
    pub fn trials_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trial", "verdict", "delta", "p_value"]).expect("in-memory CSV");
        for t in &self.trials {
            let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([t.trial.to_string(), t.status.to_string(), f(t.delta), f(t.p_value)])
                .expect("in-memory CSV");
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("CSV is UTF-8")
    }
}

pub fn clopper_pearson(successes: usize, n: usize, confidence: f64) -> (f64, f64) {
    let a = (1.0 - confidence) / 2.0;
    let (k, n) = (successes as f64, n as f64);
    let lo = if successes == 0 { 0.0 } else { Beta::new(k, n - k + 1.0).expect("beta params").inverse_cdf(a) };
    let hi =
        if successes as f64 == n { 1.0 } else { Beta::new(k + 1.0, n - k).expect("beta params").inverse_cdf(1.0 - a) };
    (lo, hi)
}

fn template() -> PromptTemplate {
    PromptTemplate::new("synthetic", 1, PromptMode::Completion, "{text}")
}

/// One trial: sample both models over `dataset` at temperature 0 and judge
/// the pair with `test`.
fn trial(drift: &DriftSpec, test: &RegressionTest, dataset: &Dataset, seed: u64) -> Result<TrialOutcome, DriftError> {
    let (base, updated) = drift.pair(seed)?;
    let labels = dataset.label_set().labels().to_vec();
    let provider = SyntheticProvider::new(&labels, [base.clone(), updated.clone()]);
    let replay = ReplayStore::passthrough();
    let ctx = RunContext::new(&provider, &replay).with_execution(Execution::Sequential);
    let t = template();
    let run = |spec: &SyntheticModelSpec| {
        let mut cfg = RunConfig::new(spec.model_ref(), &t, dataset, SamplingParams::point());
        cfg.seed_note = format!("seed={}", spec.seed);
        collect_run(&cfg, dataset, &t, &ctx)
    };
    let b = run(&base)?;
    let c = run(&updated)?;
    let v = evaluate_test(test, &b, &c, dataset, None, &EvalOptions::default())?;
    Ok(TrialOutcome { trial: 0, seed, status: v.status, delta: v.observed_delta, p_value: v.p_value })
}

fn experiment(
    kind: &str,
    drift: &DriftSpec,
    test: &RegressionTest,
    dataset: &Dataset,
    n_trials: usize,
    seed: u64,
    execution: Execution,
) -> Result<ExperimentResult, DriftError> {
    if n_trials == 0 {
        return Err(DriftError::NoTrials);
    }
    drift.pair(seed)?;
    let outcomes = par::map_range(execution, n_trials, |i| {
        trial(drift, test, dataset, derive_seed(seed, &format!("trial-{i}"))).map(|t| TrialOutcome { trial: i, ..t })
    });
    let trials = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    let fails = trials.iter().filter(|t| t.status == Status::Fail).count();
    let (ci_low, ci_high) = clopper_pearson(fails, n_trials, 0.95);
    Ok(ExperimentResult {
        kind: kind.to_string(),
        test: test.name.clone(),
        n_trials,
        fails,
        fail_rate: fails as f64 / n_trials as f64,
        ci_low,
        ci_high,
        trials,
    })
}

/// FAIL rate of `test` when the update changes nothing.
pub fn calibration_experiment(
    drift: &DriftSpec,
    test: &RegressionTest,
    dataset: &Dataset,
    n_trials: usize,
    seed: u64,
    execution: Execution,
) -> Result<ExperimentResult, DriftError> {
    if let Some(name) = drift.first_nonzero() {
        return Err(DriftError::NonzeroDrift(name));
    }
    experiment("calibration", drift, test, dataset, n_trials, seed, execution)
}

/// FAIL rate of `test` under a real accuracy change.
pub fn power_experiment(
    drift: &DriftSpec,
    test: &RegressionTest,
    dataset: &Dataset,
    n_trials: usize,
    seed: u64,
    execution: Execution,
) -> Result<ExperimentResult, DriftError> {
    if drift.is_null() {
        return Err(DriftError::ZeroDrift);
    }
    experiment("power", drift, test, dataset, n_trials, seed, execution)
}

/// A dataset of `n` binary examples with a `group` metadata tag cycling
/// through `groups`.
pub fn synthetic_dataset(id: &str, n: usize, groups: &[&str]) -> Dataset {
    let labels = crate::canonical::LabelSet::from_names(&["toxic", "non-toxic"]).expect("two labels");
    let examples = (0..n)
        .map(|i| Example {
            id: format!("syn-{i:05}"),
            text: format!("synthetic document {i}"),
            gold: labels.labels()[(i / groups.len().max(1)) % 2].clone(),
            metadata: if groups.is_empty() {
                BTreeMap::new()
            } else {
                [("group".to_string(), groups[i % groups.len()].into())].into()
            },
        })
        .collect();
    Dataset::new(id, labels, examples, "generated").expect("synthetic dataset is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{entropy, LabelDistribution};
    use crate::regress::Metric;
    use proptest::prelude::*;

    fn labels() -> Vec<Label> {
        vec![Label::new("toxic").unwrap(), Label::new("non-toxic").unwrap()]
    }

    #[test]
    fn perfect_model_at_zero_temperature_is_gold() {
        let d = synthetic_dataset("d", 50, &[]);
        let spec = SyntheticModelSpec::new("m", 1, 1.0);
        for ex in d.examples() {
            for i in 0..5 {
                assert_eq!(synth_label(&spec, &labels(), ex, 0.0, i), ex.gold);
            }
        }
    }

    #[test]
    fn half_flip_noise_gives_near_uniform_distribution() {
        let d = synthetic_dataset("d", 200, &[]);
        let spec = SyntheticModelSpec { kappa: 1.0, ..SyntheticModelSpec::new("m", 3, 1.0) };
        let mut mean_e = 0.0;
        let mut toxic = 0u32;
        for ex in d.examples() {
            let counts = (0..20).fold([0u32; 2], |mut c, i| {
                let l = synth_label(&spec, &labels(), ex, 0.5, i);
                c[usize::from(l.as_str() != "toxic")] += 1;
                c
            });
            toxic += counts[0];
            let set = crate::canonical::LabelSet::new(labels()).unwrap();
            mean_e += entropy(&LabelDistribution::from_counts(&ex.id, &set, &counts, 0));
        }
        // 4000 fair coin flips: 3 sigma is about 95
        assert!((toxic as i64 - 2000).abs() < 95, "{toxic}");
        mean_e /= 200.0;
        assert!(mean_e > 0.6 && mean_e <= std::f64::consts::LN_2, "{mean_e}");
    }

    #[test]
    fn samples_are_deterministic() {
        let d = synthetic_dataset("d", 3, &[]);
        let spec = SyntheticModelSpec::new("m", 9, 0.7);
        let p = SamplingParams::confidence();
        for ex in d.examples() {
            assert_eq!(synth_sample(&spec, &labels(), ex, &p, 4), synth_sample(&spec, &labels(), ex, &p, 4));
        }
    }

    #[test]
    fn empirical_accuracy_within_three_sigma() {
        let d = synthetic_dataset("d", 1, &[]);
        let ex = &d.examples()[0];
        let n = 10_000u64;
        let acc = 0.73;
        let correct = (0..n)
            .filter(|s| synth_label(&SyntheticModelSpec::new("m", *s, acc), &labels(), ex, 0.0, 0) == ex.gold)
            .count() as f64;
        let sigma = (n as f64 * acc * (1.0 - acc)).sqrt();
        assert!((correct - n as f64 * acc).abs() < 3.0 * sigma, "{correct}");
    }

    #[test]
    fn churn_controls_shared_draws() {
        let d = synthetic_dataset("d", 2000, &[]);
        let drift = DriftSpec { churn: 0.0, ..DriftSpec::null(SyntheticModelSpec::new("m", 0, 0.8)) };
        let (a, b) = drift.pair(5).unwrap();
        let disagree = |a: &SyntheticModelSpec, b: &SyntheticModelSpec| {
            d.examples()
                .iter()
                .filter(|e| synth_label(a, &labels(), e, 0.0, 0) != synth_label(b, &labels(), e, 0.0, 0))
                .count()
        };
        assert_eq!(disagree(&a, &b), 0);
        let (a, b) = DriftSpec { churn: 1.0, ..drift }.pair(5).unwrap();
        // independent models at 0.8 disagree on 2 * 0.8 * 0.2 = 32% of examples
        let frac = disagree(&a, &b) as f64 / 2000.0;
        assert!((frac - 0.32).abs() < 0.04, "{frac}");
    }

    #[test]
    fn experiment_guards() {
        let d = synthetic_dataset("d", 20, &[]);
        let test = RegressionTest::new("all", vec![], Metric::Accuracy);
        let null = DriftSpec::null(SyntheticModelSpec::new("m", 0, 0.8));
        let drop = DriftSpec { base_delta: -0.1, ..null.clone() };
        let e = |r: Result<ExperimentResult, DriftError>| r.unwrap_err().code();
        assert_eq!(e(calibration_experiment(&drop, &test, &d, 5, 0, Execution::Sequential)), "NONZERO_DRIFT");
        assert_eq!(e(power_experiment(&null, &test, &d, 5, 0, Execution::Sequential)), "ZERO_DRIFT");
        assert_eq!(e(calibration_experiment(&null, &test, &d, 0, 0, Execution::Sequential)), "NO_TRIALS");
        let bad = DriftSpec { base_delta: 0.5, ..null };
        assert_eq!(e(power_experiment(&bad, &test, &d, 5, 0, Execution::Sequential)), "INVALID_SPEC");
    }

    #[test]
    fn experiments_are_reproducible_across_execution_modes() {
        let d = synthetic_dataset("d", 60, &[]);
        let mut test = RegressionTest::new("all", vec![], Metric::Accuracy);
        test.min_n = 10;
        let drift = DriftSpec { base_delta: -0.2, ..DriftSpec::null(SyntheticModelSpec::new("m", 0, 0.8)) };
        let a = power_experiment(&drift, &test, &d, 12, 42, Execution::Sequential).unwrap();
        let b = power_experiment(&drift, &test, &d, 12, 42, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials_csv().lines().count(), 13);
        assert!(a.ci_low <= a.fail_rate && a.fail_rate <= a.ci_high);
    }

    #[test]
    fn drift_in_one_slice_is_invisible_in_another() {
        let d = synthetic_dataset("d", 400, &["a", "b"]);
        let mut base = SyntheticModelSpec::new("m", 0, 0.8);
        for g in ["a", "b"] {
            base.slices.push(SliceAccuracy { name: g.into(), clauses: vec![Clause::meta("group", g)], accuracy: 0.8 });
        }
        let drift = DriftSpec { slice_deltas: [("a".to_string(), -0.3)].into(), ..DriftSpec::null(base) };
        let on_b = RegressionTest::new("b", vec![Clause::meta("group", "b")], Metric::Accuracy);
        let r = power_experiment(&drift, &on_b, &d, 40, 1, Execution::Parallel).unwrap();
        assert!(r.fail_rate <= 0.1, "{}", r.fail_rate);
        let on_a = RegressionTest::new("a", vec![Clause::meta("group", "a")], Metric::Accuracy);
        let r = power_experiment(&drift, &on_a, &d, 40, 1, Execution::Parallel).unwrap();
        assert!(r.fail_rate >= 0.9, "{}", r.fail_rate);
    }

    #[test]
    fn clopper_pearson_known_values() {
        let (lo, hi) = clopper_pearson(0, 10, 0.95);
        assert_eq!(lo, 0.0);
        // 1 - 0.025^(1/10)
        assert!((hi - (1.0 - 0.025f64.powf(0.1))).abs() < 1e-9);
        let (lo, hi) = clopper_pearson(25, 500, 0.95);
        assert!(lo < 0.05 && 0.05 < hi);
    }

    #[test]
    fn spec_toml_round_trip() {
        let text = r#"
base_delta = -0.1
churn = 0.25

[base]
model_name = "syn"
seed = 7
base_accuracy = 0.8
kappa = 0.6

[[base.slices]]
name = "politics"
clauses = [{ key = "trigger", value = "politics" }]
accuracy = 0.7

[slice_deltas]
politics = -0.05
"#;
        let d: DriftSpec = toml::from_str(text).unwrap();
        assert_eq!(d.base.slices[0].accuracy, 0.7);
        let (_, up) = d.pair(1).unwrap();
        assert!((up.slices[0].accuracy - 0.65).abs() < 1e-12);
        assert!((up.base_accuracy - 0.7).abs() < 1e-12);
        let back: DriftSpec = toml::from_str(&toml::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    proptest! {
        #[test]
        fn uniform_in_unit_interval(seed in any::<u64>(), id in "[a-z0-9]{1,8}", i in any::<u32>()) {
            let u = uniform(seed, &id, "s", Some(i));
            prop_assert!((0.0..1.0).contains(&u));
        }

        #[test]
        fn flip_probability_clamped(k in 0.0f64..10.0, t in 0.0f64..2.0) {
            let spec = SyntheticModelSpec { kappa: k, ..SyntheticModelSpec::new("m", 0, 0.5) };
            let p = spec.flip_probability(t);
            prop_assert!((0.0..=0.5).contains(&p));
        }
    }
}
