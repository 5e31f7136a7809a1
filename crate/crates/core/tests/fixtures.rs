mod common;

use llmregress::analysis::{self, classify_flips, entropy_by_flip};
use llmregress::canonical::Label;
use llmregress::datasets::{apply_slice, Clause, SliceSpec};
use llmregress::prompts::render;
use llmregress::providers::SamplingParams;
use llmregress::runner::RunStore;

use common::*;

fn label(s: &str) -> Label {
    Label::new(s).unwrap()
}

#[test]
fn fixture_datasets_have_the_published_label_balance() {
    let civil = dataset("civil");
    assert_eq!(civil.len(), 1000);
    assert_eq!(civil.count_with_label(&label("toxic")), 41);
    assert_eq!(civil.count_with_label(&label("non-toxic")), 959);
    let github = dataset("github");
    assert_eq!(github.len(), 174);
    assert_eq!(github.count_with_label(&label("toxic")), 74);
    let toxic = SliceSpec::new("toxic", vec![Clause::gold(&label("toxic"))]).unwrap();
    assert_eq!(apply_slice(&github, &toxic).unwrap().len(), 74);
    let count =
        |k: &str, v: &str| apply_slice(&github, &SliceSpec::new(v, vec![Clause::meta(k, v)]).unwrap()).unwrap().len();
    assert_eq!((count("trigger", "politics"), count("target", "code"), count("severity", "severe")), (19, 16, 40));
}

#[test]
fn reloading_and_rewriting_keeps_the_digest() {
    let civil = dataset("civil");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.jsonl");
    civil.write(&path).unwrap();
    assert_eq!(llmregress::datasets::load_dataset(&path).unwrap().digest(), civil.digest());
}

#[test]
fn p1_renders_the_published_wording() {
    let rendered = render(&template("github", "p1"), "hi there");
    let want =
        "Classify the GitHub discussion as \"toxic\" or \"non-toxic\". Only reply with the label.\nDocument: hi there";
    assert_eq!(rendered, llmregress::prompts::RenderedPrompt::Completion { text: want.into() });
    let civil = render(&template("civil", "p1"), "hi there");
    assert_eq!(
        civil,
        llmregress::prompts::RenderedPrompt::Completion { text: want.replace("GitHub discussion", "comment") }
    );
}

#[test]
fn accuracy_of_the_stronger_model() {
    let dir = tempfile::tempdir().unwrap();
    let (old, new, _) = entropy_runs(&RunStore::open(dir.path()));
    let civil = dataset("civil");
    assert_eq!(analysis::accuracy(&new, &civil, None).unwrap(), 0.938);
    assert_eq!(analysis::accuracy(&old, &civil, None).unwrap(), 0.861);
    let flips = analysis::FlipCounts::tally(classify_flips(&old, &new, &civil).unwrap().values());
    assert_eq!((flips.regressed, flips.improved, flips.unflipped()), (16, 93, 891));
}

#[test]
fn most_regressions_are_confident() {
    let civil = dataset("civil");
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path());
    let t = template("civil", "p1");
    let rank = |i: usize| (i * 7) % 1000;
    let base =
        store_run(&store, &civil, &t, "text-davinci-003", SamplingParams::point(), &point_script(&civil, |_, _| true));
    let cand = point_script(&civil, |i, _| rank(i) >= 47);
    let cand = store_run(&store, &civil, &t, "gpt-3.5-turbo-instruct", SamplingParams::point(), &cand);
    let sampling = sampling_script(&civil, |i| if rank(i) < 30 || rank(i) >= 47 { 0 } else { 3 });
    let sampling = store_run(&store, &civil, &t, "gpt-3.5-turbo-instruct", SamplingParams::confidence(), &sampling);
    let flips = classify_flips(&base, &cand, &civil).unwrap();
    let breakdown = entropy_by_flip(&sampling, &flips).unwrap();
    let share = breakdown.zero_entropy_regression_share.unwrap();
    assert_eq!(share, 30.0 / 47.0);
    assert_eq!(format!("{share:.3}"), "0.638");
}
