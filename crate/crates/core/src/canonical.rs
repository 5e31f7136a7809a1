//! Shared vocabulary: labels, label sets and content hashing over canonical bytes.
//!
//! Every cache key in the tool (dataset digests, run ids, replay keys, prompt
//! hashes) is a [`ContentHash`] of the canonical JSON form of some value. The
//! canonical form is compact, key-sorted, UTF-8 JSON with `\r\n` folded to `\n`
//! inside strings, so the same logical value hashes identically everywhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("label is empty after trimming")]
    Empty,
    #[error("label set needs at least two labels, got {0}")]
    TooFew(usize),
    #[error("duplicate label `{0}` in label set")]
    Duplicate(String),
}

/// A class label. Stored in canonical form (trimmed, lowercase).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(String);

impl Label {
    pub fn new(name: &str) -> Result<Self, LabelError> {
        let canon = canonicalize_label(name);
        if canon.is_empty() {
            return Err(LabelError::Empty);
        }
        Ok(Label(canon))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Lowercase and trim. Idempotent.
pub fn canonicalize_label(name: &str) -> String {
    name.trim().to_lowercase()
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Label {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::new(s)
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Label::new(&raw).map_err(serde::de::Error::custom)
    }
}

/// Ordered set of at least two distinct labels. The order is fixed when the
/// dataset is created and defines the label index used by distributions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct LabelSet(Vec<Label>);

impl LabelSet {
    pub fn new(labels: Vec<Label>) -> Result<Self, LabelError> {
        if labels.len() < 2 {
            return Err(LabelError::TooFew(labels.len()));
        }
        for (i, label) in labels.iter().enumerate() {
            if labels[..i].contains(label) {
                return Err(LabelError::Duplicate(label.to_string()));
            }
        }
        Ok(LabelSet(labels))
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, LabelError> {
        let labels = names.iter().map(|n| Label::new(n.as_ref())).collect::<Result<Vec<_>, _>>()?;
        LabelSet::new(labels)
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, label: &Label) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.index_of(label).is_some()
    }

    /// Case-insensitive lookup of a raw name.
    pub fn lookup(&self, name: &str) -> Option<&Label> {
        let canon = canonicalize_label(name);
        self.0.iter().find(|l| l.0 == canon)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Label> {
        self.0.iter()
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let labels = Vec::<Label>::deserialize(deserializer)?;
        LabelSet::new(labels).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigestAlgorithm {
    Sha256,
}

impl DigestAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            DigestAlgorithm::Sha256 => "sha256",
        }
    }
}

/// Digest of canonical bytes, tagged with the algorithm that produced it.
///
/// Serialized as `"<algorithm>:<hex>"` so stored artifacts always record the
/// digest algorithm next to the value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash {
    algorithm: DigestAlgorithm,
    digest: String,
}

impl ContentHash {
    pub fn algorithm(&self) -> DigestAlgorithm {
        self.algorithm
    }

    /// Lowercase hex digest, used for file and directory names.
    pub fn hex(&self) -> &str {
        &self.digest
    }

    /// Leading two hex characters, used to shard stores.
    pub fn shard(&self) -> &str {
        &self.digest[..2]
    }

    pub fn parse_hex(hex_digest: &str) -> Option<Self> {
        let hex_digest = hex_digest.strip_prefix("sha256:").unwrap_or(hex_digest);
        if hex_digest.len() == 64 && hex_digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            Some(ContentHash { algorithm: DigestAlgorithm::Sha256, digest: hex_digest.to_ascii_lowercase() })
        } else {
            None
        }
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algorithm.name(), self.digest)
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        let (algo, digest) =
            raw.split_once(':').ok_or_else(|| serde::de::Error::custom("content hash must be `<algorithm>:<hex>`"))?;
        if algo != DigestAlgorithm::Sha256.name() {
            return Err(serde::de::Error::custom(format!("unsupported digest algorithm `{algo}`")));
        }
        ContentHash::parse_hex(digest).ok_or_else(|| serde::de::Error::custom("malformed sha256 digest"))
    }
}

pub fn content_hash(canonical_bytes: &[u8]) -> ContentHash {
    let digest = Sha256::digest(canonical_bytes);
    ContentHash { algorithm: DigestAlgorithm::Sha256, digest: hex::encode(digest) }
}

/// Canonical JSON bytes of any serializable value.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let value = serde_json::to_value(value).expect("value serializes to JSON");
    canonical_value_bytes(&value)
}

pub fn canonical_value_bytes(value: &Value) -> Vec<u8> {
    let normalized = normalize_value(value.clone());
    // serde_json's default map is a BTreeMap, so keys come out sorted.
    serde_json::to_vec(&normalized).expect("JSON value serializes")
}

/// Hash of the canonical JSON form.
pub fn hash_of<T: Serialize + ?Sized>(value: &T) -> ContentHash {
    content_hash(&canonical_json(value))
}

fn normalize_value(value: Value) -> Value {
    match value {
        Value::String(s) => Value::String(normalize_newlines(&s)),
        Value::Array(items) => Value::Array(items.into_iter().map(normalize_value).collect()),
        Value::Object(map) => {
            Value::Object(map.into_iter().map(|(k, v)| (normalize_newlines(&k), normalize_value(v))).collect())
        }
        other => other,
    }
}

pub fn normalize_newlines(s: &str) -> String {
    let mut out = s.to_string();
    // "\r\r\n" collapses in two steps
    while out.contains("\r\n") {
        out = out.replace("\r\n", "\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn empty_input_matches_published_sha256_vector() {
        assert_eq!(content_hash(b"").hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(content_hash(b"abc").hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn hashing_is_deterministic_and_separates_temperature() {
        let a = json!({"model": "m", "temperature": 0.0, "n": 1});
        let b = json!({"n": 1, "temperature": 0.0, "model": "m"});
        let c = json!({"model": "m", "temperature": 0.7, "n": 1});
        assert_eq!(hash_of(&a), hash_of(&b));
        assert_eq!(hash_of(&a), hash_of(&a));
        assert_ne!(hash_of(&a), hash_of(&c));
    }

    #[test]
    fn canonical_json_is_sorted_and_compact() {
        let v = json!({"b": [1, 2], "a": "x\r\ny"});
        assert_eq!(canonical_value_bytes(&v), br#"{"a":"x\ny","b":[1,2]}"#.to_vec());
    }

    #[test]
    fn labels_compare_after_canonicalization() {
        assert_eq!(Label::new("Toxic ").unwrap(), Label::new("toxic").unwrap());
        assert_eq!(Label::new("  "), Err(LabelError::Empty));
    }

    #[test]
    fn label_set_rejects_duplicates_and_singletons() {
        assert_eq!(LabelSet::from_names(&["toxic"]), Err(LabelError::TooFew(1)));
        assert_eq!(LabelSet::from_names(&["toxic", "TOXIC"]), Err(LabelError::Duplicate("toxic".into())));
        let set = LabelSet::from_names(&["toxic", "non-toxic"]).unwrap();
        assert_eq!(set.index_of(&Label::new("NON-TOXIC").unwrap()), Some(1));
        assert_eq!(set.lookup(" Toxic").map(Label::as_str), Some("toxic"));
    }

    #[test]
    fn content_hash_serde_records_algorithm() {
        let h = content_hash(b"x");
        let s = serde_json::to_string(&h).unwrap();
        assert!(s.starts_with("\"sha256:"));
        let back: ContentHash = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        assert!(serde_json::from_str::<ContentHash>("\"md5:abcd\"").is_err());
    }

    proptest! {
        #[test]
        fn label_canonicalization_is_idempotent(s in "\\PC{0,20}") {
            let once = canonicalize_label(&s);
            prop_assert_eq!(canonicalize_label(&once), once.clone());
        }

        #[test]
        fn canonical_json_is_idempotent(keys in proptest::collection::vec("[a-z\\r\\n]{1,6}", 0..6),
                                        vals in proptest::collection::vec("[a-z\\r\\n ]{0,8}", 0..6)) {
            let map: serde_json::Map<String, Value> = keys.into_iter().zip(vals)
                .map(|(k, v)| (k, Value::String(v))).collect();
            let once = canonical_value_bytes(&Value::Object(map));
            let reparsed: Value = serde_json::from_slice(&once).unwrap();
            prop_assert_eq!(canonical_value_bytes(&reparsed), once);
        }
    }
}
