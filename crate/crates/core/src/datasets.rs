//! Labeled datasets with flat metadata, and slice predicates over them.
//!
//! On disk a dataset is a JSON-lines file (`{"id", "text", "label", "meta"}` per
//! line) plus a sidecar header `<stem>.header.json` declaring the dataset `id`,
//! the ordered `label_set` and an optional `provenance` note.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{hash_of, ContentHash, Label, LabelError, LabelSet};

pub type ExampleId = String;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: line {line}: malformed record: {reason}")]
    MalformedRecord { path: String, line: usize, reason: String },
    #[error("{path}: line {line}: unknown label `{label}`")]
    UnknownLabel { path: String, line: usize, label: String },
    #[error("{path}: line {line}: duplicate example id `{id}`")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("{path}: dataset has no examples")]
    Empty { path: String },
    #[error("dataset header {path}: {reason}")]
    Header { path: String, reason: String },
    #[error("slice `{slice}` references unknown metadata key `{key}`")]
    UnknownMetadataKey { slice: String, key: String },
    #[error("slice `{0}` has no clauses")]
    EmptySlice(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DatasetError {
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::MalformedRecord { .. } => "MALFORMED_RECORD",
            DatasetError::UnknownLabel { .. } => "UNKNOWN_LABEL",
            DatasetError::DuplicateId { .. } => "DUPLICATE_ID",
            DatasetError::Empty { .. } => "EMPTY_DATASET",
            DatasetError::Header { .. } => "MALFORMED_HEADER",
            DatasetError::UnknownMetadataKey { .. } => "UNKNOWN_METADATA_KEY",
            DatasetError::EmptySlice(_) => "EMPTY_SLICE_SPEC",
            DatasetError::Label(_) => "INVALID_LABEL",
            DatasetError::Io { .. } => "IO_ERROR",
        }
    }
}

/// Scalar metadata value. Nested values are rejected at load.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Bool(bool),
    Str(String),
}

impl fmt::Display for MetaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaValue::Bool(b) => write!(f, "{b}"),
            MetaValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for MetaValue {
    fn from(s: &str) -> Self {
        MetaValue::Str(s.to_string())
    }
}

impl From<bool> for MetaValue {
    fn from(b: bool) -> Self {
        MetaValue::Bool(b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: ExampleId,
    pub text: String,
    #[serde(rename = "label")]
    pub gold: Label,
    #[serde(default, rename = "meta", skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, MetaValue>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub id: String,
    pub label_set: LabelSet,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    id: String,
    label_set: LabelSet,
    examples: Vec<Example>,
    provenance: String,
    digest: ContentHash,
    index: HashMap<ExampleId, usize>,
}

#[derive(Serialize)]
struct DigestView<'a> {
    id: &'a str,
    label_set: &'a LabelSet,
    examples: Vec<&'a Example>,
}

impl Dataset {
    /// Validates and builds a dataset. The digest covers id, label set and the
    /// examples sorted by id, so example order does not affect it.
    pub fn new(
        id: impl Into<String>,
        label_set: LabelSet,
        examples: Vec<Example>,
        provenance: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let id = id.into();
        let origin = format!("dataset `{id}`");
        if examples.is_empty() {
            return Err(DatasetError::Empty { path: origin });
        }
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            validate_example(ex, &label_set, &origin, i + 1)?;
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateId { path: origin, line: i + 1, id: ex.id.clone() });
            }
        }
        let digest = compute_digest(&id, &label_set, &examples);
        Ok(Dataset { id, label_set, examples, provenance: provenance.into(), digest, index })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn digest(&self) -> &ContentHash {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Gold label counts in label-set order.
    pub fn label_counts(&self) -> Vec<(Label, usize)> {
        self.label_set.iter().map(|l| (l.clone(), self.examples.iter().filter(|e| &e.gold == l).count())).collect()
    }

    pub fn count_with_label(&self, label: &Label) -> usize {
        self.examples.iter().filter(|e| &e.gold == label).count()
    }

    pub fn metadata_keys(&self) -> BTreeSet<&str> {
        self.examples.iter().flat_map(|e| e.metadata.keys().map(String::as_str)).collect()
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader { id: self.id.clone(), label_set: self.label_set.clone(), provenance: self.provenance.clone() }
    }

    /// JSON-lines body, one example per line in dataset order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes the records file and its sidecar header.
    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |source| DatasetError::Io { path: p, source }
        };
        fs::write(path, self.to_jsonl()).map_err(io(path))?;
        let header_path = header_path_for(path);
        let header = serde_json::to_string_pretty(&self.header()).expect("header serializes");
        fs::write(&header_path, header + "\n").map_err(io(&header_path))?;
        Ok(())
    }
}

fn compute_digest(id: &str, label_set: &LabelSet, examples: &[Example]) -> ContentHash {
    let mut sorted: Vec<&Example> = examples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    hash_of(&DigestView { id, label_set, examples: sorted })
}

fn validate_example(ex: &Example, labels: &LabelSet, path: &str, line: usize) -> Result<(), DatasetError> {
    let malformed =
        |reason: &str| DatasetError::MalformedRecord { path: path.to_string(), line, reason: reason.to_string() };
    if ex.id.is_empty() {
        return Err(malformed("`id` is empty"));
    }
    if ex.text.is_empty() {
        return Err(malformed("`text` is empty"));
    }
    if !labels.contains(&ex.gold) {
        return Err(DatasetError::UnknownLabel { path: path.to_string(), line, label: ex.gold.to_string() });
    }
    Ok(())
}

/// `data/civil.jsonl` -> `data/civil.header.json`.
pub fn header_path_for(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.header.json"))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let display = path.display().to_string();
    let header_path = header_path_for(path);
    let header_raw = fs::read_to_string(&header_path)
        .map_err(|source| DatasetError::Io { path: header_path.display().to_string(), source })?;
    let header: DatasetHeader = serde_json::from_str(&header_raw)
        .map_err(|e| DatasetError::Header { path: header_path.display().to_string(), reason: e.to_string() })?;
    let body = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: display.clone(), source })?;
    parse_records(&display, &header, &body)
}

/// Parses a JSON-lines body against an already-read header.
pub fn parse_records(origin: &str, header: &DatasetHeader, body: &str) -> Result<Dataset, DatasetError> {
    let mut examples = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_record(origin, line_no, line, &header.label_set)?;
        if seen.insert(ex.id.clone(), line_no).is_some() {
            return Err(DatasetError::DuplicateId { path: origin.to_string(), line: line_no, id: ex.id });
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(DatasetError::Empty { path: origin.to_string() });
    }
    Dataset::new(header.id.clone(), header.label_set.clone(), examples, header.provenance.clone())
}

fn parse_record(origin: &str, line: usize, raw: &str, labels: &LabelSet) -> Result<Example, DatasetError> {
    let malformed = |reason: String| DatasetError::MalformedRecord { path: origin.to_string(), line, reason };
    let value: Value = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| malformed("record is not an object".into()))?;
    let field = |name: &str| -> Result<&str, DatasetError> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s),
            Some(_) => Err(malformed(format!("`{name}` must be a string"))),
            None => Err(malformed(format!("missing `{name}`"))),
        }
    };
    let id = field("id")?.to_string();
    let text = field("text")?.to_string();
    let label_raw = field("label")?;
    let gold = labels.lookup(label_raw).cloned().ok_or_else(|| DatasetError::UnknownLabel {
        path: origin.to_string(),
        line,
        label: label_raw.to_string(),
    })?;
    let mut metadata = BTreeMap::new();
    match obj.get("meta") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                let v = match v {
                    Value::Bool(b) => MetaValue::Bool(*b),
                    Value::String(s) => MetaValue::Str(s.clone()),
                    _ => return Err(malformed(format!("meta `{k}` must be a string or boolean"))),
                };
                metadata.insert(k.clone(), v);
            }
        }
        Some(_) => return Err(malformed("`meta` must be a flat object".into())),
    }
    let ex = Example { id, text, gold, metadata };
    validate_example(&ex, labels, origin, line)?;
    Ok(ex)
}

/// One conjunct of a slice predicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Clause {
    Gold { gold: Label },
    Meta { key: String, value: MetaValue },
}

impl Clause {
    pub fn meta(key: &str, value: impl Into<MetaValue>) -> Self {
        Clause::Meta { key: key.to_string(), value: value.into() }
    }

    pub fn gold(label: &Label) -> Self {
        Clause::Gold { gold: label.clone() }
    }

    pub fn matches(&self, ex: &Example) -> bool {
        match self {
            Clause::Gold { gold } => &ex.gold == gold,
            Clause::Meta { key, value } => ex.metadata.get(key) == Some(value),
        }
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Clause::Gold { gold } => write!(f, "gold={gold}"),
            Clause::Meta { key, value } => write!(f, "{key}={value}"),
        }
    }
}

/// Named conjunction of clauses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub name: String,
    pub clauses: Vec<Clause>,
}

impl SliceSpec {
    pub fn new(name: impl Into<String>, clauses: Vec<Clause>) -> Result<Self, DatasetError> {
        let spec = SliceSpec { name: name.into(), clauses };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.clauses.is_empty() {
            return Err(DatasetError::EmptySlice(self.name.clone()));
        }
        Ok(())
    }

    pub fn metadata_keys(&self) -> impl Iterator<Item = &str> {
        self.clauses.iter().filter_map(|c| match c {
            Clause::Meta { key, .. } => Some(key.as_str()),
            Clause::Gold { .. } => None,
        })
    }

    pub fn matches(&self, ex: &Example) -> bool {
        self.clauses.iter().all(|c| c.matches(ex))
    }
}

impl fmt::Display for SliceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let clauses: Vec<String> = self.clauses.iter().map(ToString::to_string).collect();
        write!(f, "{} [{}]", self.name, clauses.join(" & "))
    }
}

pub fn apply_slice(dataset: &Dataset, spec: &SliceSpec) -> Result<BTreeSet<ExampleId>, DatasetError> {
    spec.validate()?;
    let known = dataset.metadata_keys();
    if let Some(key) = spec.metadata_keys().find(|k| !known.contains(k)) {
        return Err(DatasetError::UnknownMetadataKey { slice: spec.name.clone(), key: key.to_string() });
    }
    Ok(dataset.examples().iter().filter(|ex| spec.matches(ex)).map(|ex| ex.id.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels() -> LabelSet {
        LabelSet::from_names(&["toxic", "non-toxic"]).unwrap()
    }

    fn ex(id: &str, gold: &str, meta: &[(&str, MetaValue)]) -> Example {
        Example {
            id: id.into(),
            text: format!("text of {id}"),
            gold: Label::new(gold).unwrap(),
            metadata: meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    fn toy() -> Dataset {
        let examples = vec![
            ex("a", "toxic", &[("trigger", "politics".into())]),
            ex("b", "toxic", &[("trigger", "politics".into()), ("severe", true.into())]),
            ex("c", "non-toxic", &[("trigger", "politics".into())]),
            ex("d", "toxic", &[("trigger", "code".into())]),
        ];
        Dataset::new("toy", labels(), examples, "hand-built").unwrap()
    }

    fn header() -> DatasetHeader {
        DatasetHeader { id: "t".into(), label_set: labels(), provenance: String::new() }
    }

    #[test]
    fn conjunction_of_meta_and_gold() {
        let spec = SliceSpec::new(
            "politics-toxic",
            vec![Clause::meta("trigger", "politics"), Clause::gold(&Label::new("toxic").unwrap())],
        )
        .unwrap();
        let ids: Vec<_> = apply_slice(&toy(), &spec).unwrap().into_iter().collect();
        assert_eq!(ids, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn unmatched_clause_gives_empty_slice() {
        let spec = SliceSpec::new("none", vec![Clause::meta("trigger", "sports")]).unwrap();
        assert!(apply_slice(&toy(), &spec).unwrap().is_empty());
    }

    #[test]
    fn boolean_and_case_sensitive_matching() {
        let severe = SliceSpec::new("s", vec![Clause::meta("severe", true)]).unwrap();
        assert_eq!(apply_slice(&toy(), &severe).unwrap().len(), 1);
        let upper = SliceSpec::new("p", vec![Clause::meta("trigger", "Politics")]).unwrap();
        assert!(apply_slice(&toy(), &upper).unwrap().is_empty());
        let as_string = SliceSpec::new("s2", vec![Clause::meta("severe", "true")]).unwrap();
        assert!(apply_slice(&toy(), &as_string).unwrap().is_empty());
    }

    #[test]
    fn unknown_metadata_key_is_an_error() {
        let spec = SliceSpec::new("x", vec![Clause::meta("language", "en")]).unwrap();
        let err = apply_slice(&toy(), &spec).unwrap_err();
        assert_eq!(err.code(), "UNKNOWN_METADATA_KEY");
    }

    #[test]
    fn empty_slice_spec_rejected() {
        assert!(SliceSpec::new("x", vec![]).is_err());
    }

    #[test]
    fn missing_gold_is_malformed_with_line_number() {
        let body = "{\"id\":\"1\",\"text\":\"hi\",\"label\":\"toxic\"}\n{\"id\":\"2\",\"text\":\"yo\"}\n";
        match parse_records("mem", &header(), body) {
            Err(DatasetError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_label_and_duplicate_id() {
        let body = "{\"id\":\"1\",\"text\":\"hi\",\"label\":\"spam\"}\n";
        assert_eq!(parse_records("mem", &header(), body).unwrap_err().code(), "UNKNOWN_LABEL");
        let body =
            "{\"id\":\"1\",\"text\":\"hi\",\"label\":\"toxic\"}\n{\"id\":\"1\",\"text\":\"ho\",\"label\":\"Toxic\"}\n";
        assert_eq!(parse_records("mem", &header(), body).unwrap_err().code(), "DUPLICATE_ID");
    }

    #[test]
    fn nested_meta_and_empty_dataset_rejected() {
        let body = "{\"id\":\"1\",\"text\":\"hi\",\"label\":\"toxic\",\"meta\":{\"a\":{\"b\":1}}}\n";
        assert_eq!(parse_records("mem", &header(), body).unwrap_err().code(), "MALFORMED_RECORD");
        let body = "{\"id\":\"1\",\"text\":\"hi\",\"label\":\"toxic\",\"meta\":{\"a\":3}}\n";
        assert_eq!(parse_records("mem", &header(), body).unwrap_err().code(), "MALFORMED_RECORD");
        assert_eq!(parse_records("mem", &header(), "\n").unwrap_err().code(), "EMPTY_DATASET");
    }

    #[test]
    fn write_and_reload_keeps_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.jsonl");
        let d = toy();
        d.write(&path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.digest(), d.digest());
        assert_eq!(back.examples(), d.examples());
    }

    #[test]
    fn digest_ignores_example_order() {
        let d = toy();
        let mut rev = d.examples().to_vec();
        rev.reverse();
        let r = Dataset::new("toy", labels(), rev, "").unwrap();
        assert_eq!(r.digest(), d.digest());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        proptest::collection::vec((any::<bool>(), 0..3u8, any::<bool>()), 1..30).prop_map(|rows| {
            let examples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (toxic, trig, sev))| {
                    let trig = ["politics", "code", "other"][trig as usize];
                    ex(
                        &format!("e{i}"),
                        if toxic { "toxic" } else { "non-toxic" },
                        &[("trigger", trig.into()), ("severe", sev.into())],
                    )
                })
                .collect();
            Dataset::new("p", labels(), examples, "").unwrap()
        })
    }

    fn arb_clause() -> impl Strategy<Value = Clause> {
        prop_oneof![
            (0..3u8).prop_map(|t| Clause::meta("trigger", ["politics", "code", "other"][t as usize])),
            any::<bool>().prop_map(|b| Clause::meta("severe", b)),
            any::<bool>().prop_map(|b| Clause::gold(&Label::new(if b { "toxic" } else { "non-toxic" }).unwrap())),
        ]
    }

    proptest! {
        #[test]
        fn slice_is_subset_and_monotone(d in arb_dataset(),
                                        clauses in proptest::collection::vec(arb_clause(), 1..4),
                                        extra in arb_clause()) {
            let base = SliceSpec::new("s", clauses.clone()).unwrap();
            let ids = apply_slice(&d, &base).unwrap();
            prop_assert!(ids.iter().all(|id| d.contains(id)));
            let mut more = clauses;
            more.push(extra);
            let narrower = apply_slice(&d, &SliceSpec::new("s", more).unwrap()).unwrap();
            prop_assert!(narrower.is_subset(&ids));
        }
    }
}
