//! Measurement over stored runs: point predictions, accuracy and F1, flip
//! classification, sampled label distributions and entropy, and slice-level
//! regression shares.
//!
//! Entropy uses the natural log. UNPARSED samples count toward `n` but not
//! toward any label, so their mass is excluded from the entropy sum and
//! reported separately.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{ContentHash, Label, LabelSet};
use crate::datasets::{apply_slice, Dataset, DatasetError, Example, ExampleId, SliceSpec};
use crate::runner::RunRecord;

pub const ENTROPY_LOG_BASE: &str = "e";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("example `{0}` is not in the run")]
    UnknownExample(String),
    #[error("slice `{0}` selects no examples")]
    EmptySlice(String),
    #[error("run {0} has one sample per example; a distribution needs n >= 2")]
    SingleSampleRun(String),
    #[error("runs were made on different datasets ({baseline} vs {candidate})")]
    DatasetMismatch { baseline: String, candidate: String },
    #[error("sampling run is missing flipped example `{0}`")]
    CoverageGap(String),
    #[error("no regressions in the reference population")]
    NoRegressions,
    #[error("run {0} is not complete")]
    Incomplete(String),
    #[error("label `{0}` is not in the label set")]
    UnknownLabel(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl AnalysisError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalysisError::UnknownExample(_) => "UNKNOWN_EXAMPLE",
            AnalysisError::EmptySlice(_) => "EMPTY_SLICE",
            AnalysisError::SingleSampleRun(_) => "SINGLE_SAMPLE_RUN",
            AnalysisError::DatasetMismatch { .. } => "DATASET_MISMATCH",
            AnalysisError::CoverageGap(_) => "COVERAGE_GAP",
            AnalysisError::NoRegressions => "NO_REGRESSIONS",
            AnalysisError::Incomplete(_) => "RUN_INCOMPLETE",
            AnalysisError::UnknownLabel(_) => "UNKNOWN_LABEL",
            AnalysisError::Dataset(e) => e.code(),
        }
    }
}

type Result<T> = std::result::Result<T, AnalysisError>;

fn require_complete(run: &RunRecord) -> Result<()> {
    if run.is_complete() {
        Ok(())
    } else {
        Err(AnalysisError::Incomplete(run.run_id.hex().to_string()))
    }
}

fn require_same_dataset(run: &RunRecord, dataset: &Dataset) -> Result<()> {
    if &run.config.dataset_digest != dataset.digest() {
        return Err(AnalysisError::DatasetMismatch {
            baseline: run.config.dataset_digest.to_string(),
            candidate: dataset.digest().to_string(),
        });
    }
    Ok(())
}

/// Majority parsed label; ties go to the tied label seen at the smallest
/// sample index. `None` when every sample is UNPARSED.
pub fn point_prediction(run: &RunRecord, example_id: &str) -> Result<Option<Label>> {
    let samples = run.samples_for(example_id).ok_or_else(|| AnalysisError::UnknownExample(example_id.to_string()))?;
    // label -> (count, first sample index)
    let mut tally: BTreeMap<&Label, (u32, u32)> = BTreeMap::new();
    for s in samples {
        if let Some(l) = &s.parsed {
            let e = tally.entry(l).or_insert((0, s.sample_index));
            e.0 += 1;
            e.1 = e.1.min(s.sample_index);
        }
    }
    Ok(tally.into_iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1))).map(|(l, _)| l.clone()))
}

/// Point predictions for `ids`, in the given order.
pub fn predictions<'a>(run: &RunRecord, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<Option<Label>>> {
    ids.into_iter().map(|id| point_prediction(run, id)).collect()
}

fn slice_examples<'d>(
    dataset: &'d Dataset,
    slice: Option<&BTreeSet<ExampleId>>,
    name: &str,
) -> Result<Vec<&'d Example>> {
    let examples: Vec<&Example> = match slice {
        None => dataset.examples().iter().collect(),
        Some(ids) => {
            if let Some(missing) = ids.iter().find(|id| !dataset.contains(id)) {
                return Err(AnalysisError::UnknownExample(missing.clone()));
            }
            ids.iter().filter_map(|id| dataset.get(id)).collect()
        }
    };
    if examples.is_empty() {
        return Err(AnalysisError::EmptySlice(name.to_string()));
    }
    Ok(examples)
}

/// Exact correct/total count behind an accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub n: usize,
}

impl Tally {
    pub fn rate(self) -> f64 {
        self.correct as f64 / self.n as f64
    }
}

pub fn accuracy_tally(run: &RunRecord, dataset: &Dataset, slice: Option<&BTreeSet<ExampleId>>) -> Result<Tally> {
    let examples = slice_examples(dataset, slice, "slice")?;
    let mut correct = 0;
    for ex in &examples {
        if point_prediction(run, &ex.id)?.as_ref() == Some(&ex.gold) {
            correct += 1;
        }
    }
    Ok(Tally { correct, n: examples.len() })
}

/// Fraction of examples whose point prediction equals gold. UNPARSED is wrong.
pub fn accuracy(run: &RunRecord, dataset: &Dataset, slice: Option<&BTreeSet<ExampleId>>) -> Result<f64> {
    accuracy_tally(run, dataset, slice).map(Tally::rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub value: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `2TP + FP + FN = 0`; `value` is 0 by convention.
    pub degenerate: bool,
}

impl F1Score {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let denom = 2 * tp + fp + fn_;
        F1Score {
            value: if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 },
            tp,
            fp,
            fn_,
            degenerate: denom == 0,
        }
    }
}

/// Binary F1 of `positive` from (gold, prediction) pairs.
pub fn f1_from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Label, Option<&'a Label>)>, positive: &Label) -> F1Score {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (gold, pred) in pairs {
        match (gold == positive, pred == Some(positive)) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => {}
        }
    }
    F1Score::from_counts(tp, fp, fn_)
}

pub fn f1(
    run: &RunRecord,
    dataset: &Dataset,
    positive: &Label,
    slice: Option<&BTreeSet<ExampleId>>,
) -> Result<F1Score> {
    if !dataset.label_set().contains(positive) {
        return Err(AnalysisError::UnknownLabel(positive.to_string()));
    }
    let examples = slice_examples(dataset, slice, "slice")?;
    let preds = predictions(run, examples.iter().map(|e| e.id.as_str()))?;
    Ok(f1_from_pairs(examples.iter().map(|e| &e.gold).zip(preds.iter().map(Option::as_ref)), positive))
}

/// Unweighted mean of per-label F1 over the label set.
pub fn macro_f1(run: &RunRecord, dataset: &Dataset, slice: Option<&BTreeSet<ExampleId>>) -> Result<f64> {
    let examples = slice_examples(dataset, slice, "slice")?;
    let preds = predictions(run, examples.iter().map(|e| e.id.as_str()))?;
    let labels = dataset.label_set();
    let total: f64 = labels
        .iter()
        .map(|l| f1_from_pairs(examples.iter().map(|e| &e.gold).zip(preds.iter().map(Option::as_ref)), l).value)
        .sum();
    Ok(total / labels.len() as f64)
}

/// Sampled label counts for one example. `counts` follows label-set order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub example_id: ExampleId,
    pub counts: Vec<(Label, u32)>,
    pub unparsed: u32,
    pub n: u32,
}

impl LabelDistribution {
    pub fn from_counts(example_id: &str, label_set: &LabelSet, counts: &[u32], unparsed: u32) -> Self {
        assert_eq!(counts.len(), label_set.len(), "one count per label");
        LabelDistribution {
            example_id: example_id.to_string(),
            counts: label_set.iter().cloned().zip(counts.iter().copied()).collect(),
            unparsed,
            n: counts.iter().sum::<u32>() + unparsed,
        }
    }

    pub fn probabilities(&self) -> Vec<(Label, f64)> {
        self.counts
            .iter()
            .map(|(l, c)| (l.clone(), if self.n == 0 { 0.0 } else { *c as f64 / self.n as f64 }))
            .collect()
    }

    pub fn probability(&self, label: &Label) -> f64 {
        self.probabilities().into_iter().find(|(l, _)| l == label).map_or(0.0, |(_, p)| p)
    }

    pub fn unparsed_mass(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.unparsed as f64 / self.n as f64
        }
    }
}

pub fn estimate_distribution(run: &RunRecord, example_id: &str) -> Result<LabelDistribution> {
    if run.n_samples() < 2 {
        return Err(AnalysisError::SingleSampleRun(run.run_id.hex().to_string()));
    }
    let samples = run.samples_for(example_id).ok_or_else(|| AnalysisError::UnknownExample(example_id.to_string()))?;
    let labels = run.label_set();
    let mut counts = vec![0u32; labels.len()];
    let mut unparsed = 0;
    for s in samples {
        match s.parsed.as_ref().and_then(|l| labels.index_of(l)) {
            Some(i) => counts[i] += 1,
            None => unparsed += 1,
        }
    }
    Ok(LabelDistribution::from_counts(example_id, labels, &counts, unparsed))
}

/// `-Σ p ln p` over the given probabilities with `0 ln 0 = 0`.
pub fn entropy_of(probabilities: impl IntoIterator<Item = f64>) -> f64 {
    probabilities.into_iter().filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

pub fn entropy(dist: &LabelDistribution) -> f64 {
    entropy_of(dist.probabilities().into_iter().map(|(_, p)| p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FlipCategory {
    Regressed,
    Improved,
    UnflippedCorrect,
    UnflippedWrong,
}

impl FlipCategory {
    pub const ALL: [FlipCategory; 4] =
        [FlipCategory::Regressed, FlipCategory::Improved, FlipCategory::UnflippedCorrect, FlipCategory::UnflippedWrong];

    pub fn from_correctness(baseline_correct: bool, candidate_correct: bool) -> Self {
        match (baseline_correct, candidate_correct) {
            (true, false) => FlipCategory::Regressed,
            (false, true) => FlipCategory::Improved,
            (true, true) => FlipCategory::UnflippedCorrect,
            (false, false) => FlipCategory::UnflippedWrong,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlipCategory::Regressed => "REGRESSED",
            FlipCategory::Improved => "IMPROVED",
            FlipCategory::UnflippedCorrect => "UNFLIPPED_CORRECT",
            FlipCategory::UnflippedWrong => "UNFLIPPED_WRONG",
        }
    }

    pub fn is_unflipped(self) -> bool {
        matches!(self, FlipCategory::UnflippedCorrect | FlipCategory::UnflippedWrong)
    }
}

pub type FlipMap = BTreeMap<ExampleId, FlipCategory>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCounts {
    pub regressed: usize,
    pub improved: usize,
    pub unflipped_correct: usize,
    pub unflipped_wrong: usize,
}

impl FlipCounts {
    pub fn tally<'a>(categories: impl IntoIterator<Item = &'a FlipCategory>) -> Self {
        let mut c = FlipCounts::default();
        for cat in categories {
            match cat {
                FlipCategory::Regressed => c.regressed += 1,
                FlipCategory::Improved => c.improved += 1,
                FlipCategory::UnflippedCorrect => c.unflipped_correct += 1,
                FlipCategory::UnflippedWrong => c.unflipped_wrong += 1,
            }
        }
        c
    }

    pub fn unflipped(&self) -> usize {
        self.unflipped_correct + self.unflipped_wrong
    }

    pub fn total(&self) -> usize {
        self.regressed + self.improved + self.unflipped()
    }
}

fn check_pair(baseline: &RunRecord, candidate: &RunRecord, dataset: &Dataset) -> Result<()> {
    require_complete(baseline)?;
    require_complete(candidate)?;
    if baseline.config.dataset_digest != candidate.config.dataset_digest {
        return Err(AnalysisError::DatasetMismatch {
            baseline: baseline.config.dataset_digest.to_string(),
            candidate: candidate.config.dataset_digest.to_string(),
        });
    }
    require_same_dataset(baseline, dataset)
}

pub fn classify_flips(baseline: &RunRecord, candidate: &RunRecord, dataset: &Dataset) -> Result<FlipMap> {
    check_pair(baseline, candidate, dataset)?;
    dataset
        .examples()
        .iter()
        .map(|ex| {
            let b = point_prediction(baseline, &ex.id)?.as_ref() == Some(&ex.gold);
            let c = point_prediction(candidate, &ex.id)?.as_ref() == Some(&ex.gold);
            Ok((ex.id.clone(), FlipCategory::from_correctness(b, c)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntropy {
    pub group: String,
    pub n: usize,
    /// `None` for an empty group.
    pub mean_entropy: Option<f64>,
    pub mean_unparsed_mass: Option<f64>,
}

/// Mean entropy per flip group. `unflipped` is the union of both unflipped
/// categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBreakdown {
    pub sampling_run: ContentHash,
    pub log_base: String,
    pub groups: Vec<GroupEntropy>,
    /// Share of REGRESSED examples whose entropy is exactly 0.
    pub zero_entropy_regression_share: Option<f64>,
}

impl EntropyBreakdown {
    pub fn group(&self, name: &str) -> Option<&GroupEntropy> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.group(name).and_then(|g| g.mean_entropy)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn entropy_by_flip(sampling_run: &RunRecord, flips: &FlipMap) -> Result<EntropyBreakdown> {
    require_complete(sampling_run)?;
    if sampling_run.n_samples() < 2 {
        return Err(AnalysisError::SingleSampleRun(sampling_run.run_id.hex().to_string()));
    }
    let mut per_cat: BTreeMap<FlipCategory, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (id, cat) in flips {
        let dist = match estimate_distribution(sampling_run, id) {
            Err(AnalysisError::UnknownExample(id)) => return Err(AnalysisError::CoverageGap(id)),
            other => other?,
        };
        let slot = per_cat.entry(*cat).or_default();
        slot.0.push(entropy(&dist));
        slot.1.push(dist.unparsed_mass());
    }
    let group = |name: &str, cats: &[FlipCategory]| {
        let (mut e, mut u) = (Vec::new(), Vec::new());
        for c in cats {
            if let Some((ce, cu)) = per_cat.get(c) {
                e.extend_from_slice(ce);
                u.extend_from_slice(cu);
            }
        }
        GroupEntropy { group: name.to_string(), n: e.len(), mean_entropy: mean(&e), mean_unparsed_mass: mean(&u) }
    };
    let mut groups: Vec<GroupEntropy> = FlipCategory::ALL.iter().map(|c| group(c.name(), &[*c])).collect();
    groups.push(group("UNFLIPPED", &[FlipCategory::UnflippedCorrect, FlipCategory::UnflippedWrong]));
    let zero_share = per_cat
        .get(&FlipCategory::Regressed)
        .and_then(|(e, _)| (!e.is_empty()).then(|| e.iter().filter(|&&x| x == 0.0).count() as f64 / e.len() as f64));
    Ok(EntropyBreakdown {
        sampling_run: sampling_run.run_id.clone(),
        log_base: ENTROPY_LOG_BASE.to_string(),
        groups,
        zero_entropy_regression_share: zero_share,
    })
}

/// Population a slice's base rate and regression share are measured against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePopulation {
    All,
    Gold(Label),
    Slice(SliceSpec),
}

impl ReferencePopulation {
    fn ids(&self, dataset: &Dataset) -> Result<BTreeSet<ExampleId>> {
        Ok(match self {
            ReferencePopulation::All => dataset.ids().map(str::to_string).collect(),
            ReferencePopulation::Gold(l) => {
                dataset.examples().iter().filter(|e| &e.gold == l).map(|e| e.id.clone()).collect()
            }
            ReferencePopulation::Slice(s) => apply_slice(dataset, s)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionShare {
    pub slice: String,
    /// |REGRESSED ∩ slice ∩ ref| / |REGRESSED ∩ ref|
    pub share_of_regressions: f64,
    /// |slice ∩ ref| / |ref|
    pub base_rate: f64,
    pub regressed_in_slice: usize,
    pub regressed_total: usize,
    pub slice_size: usize,
    pub reference_size: usize,
}

/// Where a slice sits among regressions versus the reference population.
/// Both components are computed within the reference population, so a slice
/// equal to it scores (1, 1).
pub fn slice_regression_share(
    flips: &FlipMap,
    dataset: &Dataset,
    spec: &SliceSpec,
    reference: &ReferencePopulation,
) -> Result<RegressionShare> {
    let reference_ids = reference.ids(dataset)?;
    let slice_ids = apply_slice(dataset, spec)?;
    let regressed: BTreeSet<&ExampleId> = flips
        .iter()
        .filter(|(id, c)| **c == FlipCategory::Regressed && reference_ids.contains(*id))
        .map(|(id, _)| id)
        .collect();
    if regressed.is_empty() {
        return Err(AnalysisError::NoRegressions);
    }
    let in_slice = regressed.iter().filter(|id| slice_ids.contains(**id)).count();
    let slice_ref = slice_ids.intersection(&reference_ids).count();
    Ok(RegressionShare {
        slice: spec.name.clone(),
        share_of_regressions: in_slice as f64 / regressed.len() as f64,
        base_rate: slice_ref as f64 / reference_ids.len() as f64,
        regressed_in_slice: in_slice,
        regressed_total: regressed.len(),
        slice_size: slice_ref,
        reference_size: reference_ids.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice: String,
    pub n: usize,
    pub baseline_accuracy: f64,
    pub candidate_accuracy: f64,
    pub accuracy_delta: f64,
    pub baseline_f1: F1Score,
    pub candidate_f1: F1Score,
    pub f1_delta: f64,
    pub regressed: usize,
    pub improved: usize,
    pub unflipped: usize,
    /// Mean entropy of the slice under the sampling run, when one is given.
    pub mean_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub positive: Label,
    pub reference: ReferencePopulation,
    pub macro_f1: bool,
}

impl CompareOptions {
    /// Binary F1 on `positive`, regression shares against gold-`positive`.
    pub fn for_positive(positive: Label) -> Self {
        CompareOptions { reference: ReferencePopulation::Gold(positive.clone()), positive, macro_f1: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub baseline_run: ContentHash,
    pub candidate_run: ContentHash,
    pub baseline_label: String,
    pub candidate_label: String,
    pub dataset_id: String,
    pub dataset_digest: ContentHash,
    pub positive: Label,
    pub overall: SliceMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1_delta: Option<f64>,
    pub flips: FlipCounts,
    pub slices: Vec<SliceMetrics>,
    pub regression_shares: Vec<RegressionShare>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyBreakdown>,
}

impl ComparisonSummary {
    pub fn accuracy_delta(&self) -> f64 {
        self.overall.accuracy_delta
    }

    pub fn slice(&self, name: &str) -> Option<&SliceMetrics> {
        self.slices.iter().find(|s| s.slice == name)
    }

    pub fn share(&self, name: &str) -> Option<&RegressionShare> {
        self.regression_shares.iter().find(|s| s.slice == name)
    }
}

fn run_label(run: &RunRecord) -> String {
    format!("{}/{}@{}", run.config.model.model_name, run.config.prompt_id, run.config.prompt_version)
}

fn slice_metrics(
    name: &str,
    ids: Option<&BTreeSet<ExampleId>>,
    baseline: &RunRecord,
    candidate: &RunRecord,
    dataset: &Dataset,
    flips: &FlipMap,
    positive: &Label,
    sampling: Option<&RunRecord>,
) -> Result<SliceMetrics> {
    let examples = slice_examples(dataset, ids, name)?;
    let b_acc = accuracy_tally(baseline, dataset, ids)?;
    let c_acc = accuracy_tally(candidate, dataset, ids)?;
    let b_f1 = f1(baseline, dataset, positive, ids)?;
    let c_f1 = f1(candidate, dataset, positive, ids)?;
    let counts = FlipCounts::tally(examples.iter().filter_map(|e| flips.get(&e.id)));
    let mean_entropy = match sampling {
        Some(run) => {
            let mut es = Vec::with_capacity(examples.len());
            for e in &examples {
                es.push(entropy(&estimate_distribution(run, &e.id).map_err(|err| match err {
                    AnalysisError::UnknownExample(id) => AnalysisError::CoverageGap(id),
                    other => other,
                })?));
            }
            mean(&es)
        }
        None => None,
    };
    Ok(SliceMetrics {
        slice: name.to_string(),
        n: examples.len(),
        baseline_accuracy: b_acc.rate(),
        candidate_accuracy: c_acc.rate(),
        // from the counts, so 820/1000 vs 733/1000 is exactly 87/1000
        accuracy_delta: (c_acc.correct as f64 - b_acc.correct as f64) / examples.len() as f64,
        baseline_f1: b_f1,
        candidate_f1: c_f1,
        f1_delta: c_f1.value - b_f1.value,
        regressed: counts.regressed,
        improved: counts.improved,
        unflipped: counts.unflipped(),
        mean_entropy,
    })
}

/// Overall and per-slice deltas between two runs on the same dataset.
/// `sampling_run` (n >= 2) adds the entropy breakdown.
pub fn delta_report(
    baseline: &RunRecord,
    candidate: &RunRecord,
    dataset: &Dataset,
    slices: &[SliceSpec],
    sampling_run: Option<&RunRecord>,
    options: &CompareOptions,
) -> Result<ComparisonSummary> {
    let flips = classify_flips(baseline, candidate, dataset)?;
    if let Some(s) = sampling_run {
        require_same_dataset(s, dataset)?;
    }
    let overall = slice_metrics("ALL", None, baseline, candidate, dataset, &flips, &options.positive, sampling_run)?;
    let mut slice_rows = Vec::with_capacity(slices.len());
    let mut shares = Vec::new();
    for spec in slices {
        let ids = apply_slice(dataset, spec)?;
        slice_rows.push(slice_metrics(
            &spec.name,
            Some(&ids),
            baseline,
            candidate,
            dataset,
            &flips,
            &options.positive,
            sampling_run,
        )?);
        match slice_regression_share(&flips, dataset, spec, &options.reference) {
            Ok(s) => shares.push(s),
            Err(AnalysisError::NoRegressions) => {}
            Err(e) => return Err(e),
        }
    }
    let macro_f1_delta = if options.macro_f1 {
        Some(macro_f1(candidate, dataset, None)? - macro_f1(baseline, dataset, None)?)
    } else {
        None
    };
    let entropy = sampling_run.map(|s| entropy_by_flip(s, &flips)).transpose()?;
    Ok(ComparisonSummary {
        baseline_run: baseline.run_id.clone(),
        candidate_run: candidate.run_id.clone(),
        baseline_label: run_label(baseline),
        candidate_label: run_label(candidate),
        dataset_id: dataset.id().to_string(),
        dataset_digest: dataset.digest().clone(),
        positive: options.positive.clone(),
        flips: FlipCounts::tally(flips.values()),
        overall,
        macro_f1_delta,
        slices: slice_rows,
        regression_shares: shares,
        entropy,
    })
}

fn csv_string(build: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    build(&mut w).expect("in-memory CSV write");
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One row per slice (first row is the whole dataset).
pub fn slice_table_csv(summary: &ComparisonSummary) -> String {
    csv_string(|w| {
        w.write_record([
            "slice",
            "n",
            "baseline_accuracy",
            "candidate_accuracy",
            "accuracy_delta",
            "baseline_f1",
            "candidate_f1",
            "f1_delta",
            "regressed",
            "improved",
            "unflipped",
            "mean_entropy",
            "share_of_regressions",
            "base_rate",
        ])?;
        for s in std::iter::once(&summary.overall).chain(&summary.slices) {
            let share = summary.share(&s.slice);
            w.write_record([
                s.slice.clone(),
                s.n.to_string(),
                format!("{:.6}", s.baseline_accuracy),
                format!("{:.6}", s.candidate_accuracy),
                format!("{:.6}", s.accuracy_delta),
                format!("{:.6}", s.baseline_f1.value),
                format!("{:.6}", s.candidate_f1.value),
                format!("{:.6}", s.f1_delta),
                s.regressed.to_string(),
                s.improved.to_string(),
                s.unflipped.to_string(),
                opt(s.mean_entropy),
                opt(share.map(|x| x.share_of_regressions)),
                opt(share.map(|x| x.base_rate)),
            ])?;
        }
        Ok(())
    })
}

/// One row per flip group.
pub fn flip_table_csv(summary: &ComparisonSummary) -> String {
    csv_string(|w| {
        w.write_record(["category", "count", "mean_entropy", "mean_unparsed_mass"])?;
        let f = &summary.flips;
        let counts = [
            ("REGRESSED", f.regressed),
            ("IMPROVED", f.improved),
            ("UNFLIPPED_CORRECT", f.unflipped_correct),
            ("UNFLIPPED_WRONG", f.unflipped_wrong),
            ("UNFLIPPED", f.unflipped()),
        ];
        for (name, n) in counts {
            let g = summary.entropy.as_ref().and_then(|e| e.group(name));
            w.write_record([
                name.to_string(),
                n.to_string(),
                opt(g.and_then(|g| g.mean_entropy)),
                opt(g.and_then(|g| g.mean_unparsed_mass)),
            ])?;
        }
        Ok(())
    })
}
