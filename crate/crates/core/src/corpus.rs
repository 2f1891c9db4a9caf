//! Dialogue/knowledge records, corpus files, and the token vocabulary.
//!
//! A corpus file holds one JSON record per line:
//!
//! ```text
//! {"context":[{"speaker":"A","text":"..."}],"knowledge":["...","..."],
//!  "response":"...","gold_knowledge_index":null,"topic":null}
//! ```
//!
//! and a sibling `<stem>.manifest.json` records the split name and the
//! record count.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            speaker,
            text: text.into(),
        }
    }
}

/// One dialogue turn to respond to, with its candidate knowledge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub context: Vec<Utterance>,
    pub knowledge: Vec<String>,
    pub response: String,
    /// Evaluation-only; never read during training.
    #[serde(default)]
    pub gold_knowledge_index: Option<usize>,
    #[serde(default)]
    pub topic: Option<String>,
}

impl Example {
    /// Checks the record invariants, reporting the first violated field.
    pub fn validate(&self, line: usize) -> Result<()> {
        let invalid = |field, message: &str| Error::Validation {
            line,
            field,
            message: message.to_string(),
        };
        if self.context.is_empty() {
            return Err(invalid("context", "must contain at least one utterance"));
        }
        if self.context.iter().any(|u| u.text.trim().is_empty()) {
            return Err(invalid("context", "utterance text is empty"));
        }
        if self.knowledge.is_empty() {
            return Err(invalid("knowledge", "must contain at least one sentence"));
        }
        if self.knowledge.iter().any(|k| k.trim().is_empty()) {
            return Err(invalid("knowledge", "knowledge sentence is empty"));
        }
        if self.response.trim().is_empty() {
            return Err(invalid("response", "response is empty"));
        }
        if let Some(idx) = self.gold_knowledge_index {
            if idx >= self.knowledge.len() {
                return Err(invalid(
                    "gold_knowledge_index",
                    &format!(
                        "index out of range: {idx} >= {} knowledge sentences",
                        self.knowledge.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test_seen" => Split::TestSeen,
            "test_unseen" => Split::TestUnseen,
            "test" => Split::Test,
            other => return Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn new(split: Split, examples: Vec<Example>) -> Self {
        Self { split, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// SHA-256 over the canonical serialisation of every example.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for ex in &self.examples {
            hasher.update(serde_json::to_vec(ex).expect("example serialises"));
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub record_count: usize,
}

/// `data/train.jsonl` -> `data/train.manifest.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Loads and validates a line-delimited corpus file.
///
/// Blank lines are skipped. When a manifest sits next to the file its split
/// and record count must agree with `split` and the file contents.
pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let example = parse_record(&line, line_no)?;
        example.validate(line_no)?;
        examples.push(example);
    }

    let manifest_file = manifest_path(path);
    if manifest_file.exists() {
        let text = fs::read_to_string(&manifest_file).map_err(|e| Error::io(&manifest_file, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.split != split {
            return Err(Error::InvalidArgument(format!(
                "{}: manifest declares split `{}`, expected `{}`",
                manifest_file.display(),
                manifest.split.as_str(),
                split.as_str()
            )));
        }
        if manifest.record_count != examples.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: manifest declares {} records, file has {}",
                manifest_file.display(),
                manifest.record_count,
                examples.len()
            )));
        }
    }
    Ok(Corpus { split, examples })
}

fn parse_record(line: &str, line_no: usize) -> Result<Example> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line: line_no,
        message: "record is not an object".into(),
    })?;
    for field in ["context", "knowledge", "response"] {
        if obj.get(field).map_or(true, |v| v.is_null()) {
            return Err(Error::Validation {
                line: line_no,
                field,
                message: "missing required field".into(),
            });
        }
    }
    if let Some(idx) = obj.get("gold_knowledge_index").and_then(|v| v.as_i64()) {
        if idx < 0 {
            return Err(Error::Validation {
                line: line_no,
                field: "gold_knowledge_index",
                message: format!("index out of range: {idx}"),
            });
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

/// Writes a corpus file and its manifest.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for ex in &corpus.examples {
        serde_json::to_writer(&mut out, ex)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest {
        split: corpus.split,
        record_count: corpus.len(),
    };
    let manifest_file = manifest_path(path);
    fs::write(&manifest_file, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_file, e))?;
    Ok(())
}

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEP: TokenId = 4;
pub const CLS: TokenId = 5;

pub const RESERVED_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[SEP]", "[CLS]"];

/// Text <-> token id mapping used by the models.
///
/// [`Vocabulary`] is the built-in whitespace implementation; an external
/// subword tokenizer can be plugged in by implementing this trait with the
/// same reserved ids.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
}

/// Whitespace-token vocabulary with reserved ids `0..6`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_full_list(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(vocab: Vocabulary) -> Self {
        vocab.tokens
    }
}

impl Vocabulary {
    /// Builds from an explicit token list; reserved tokens are prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::Config(format!(
                    "vocabulary id {i} must be reserved token {reserved}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(&self.tokens)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text)?;
        Self::from_full_list(tokens)
    }
}

impl Tokenizer for Vocabulary {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        encode_text(self, text)
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.len()
    }
}

/// Keeps the `max_size - 6` most frequent whitespace tokens of the corpus
/// (context, knowledge and responses); ties go to the lexicographically
/// smaller token.
pub fn build_vocabulary(corpus: &Corpus, max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    if max_size < RESERVED_TOKENS.len() {
        return Err(Error::Config(format!(
            "max_size {max_size} is smaller than the {} reserved tokens",
            RESERVED_TOKENS.len()
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in &corpus.examples {
        let texts = ex
            .context
            .iter()
            .map(|u| u.text.as_str())
            .chain(ex.knowledge.iter().map(String::as_str))
            .chain(std::iter::once(ex.response.as_str()));
        for tok in texts.flat_map(str::split_whitespace) {
            // reserved strings keep their ids
            if !RESERVED_TOKENS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED_TOKENS.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
}

/// Whitespace tokenisation; unknown tokens map to [`UNK`].
pub fn encode_text(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|tok| vocab.lookup(tok).unwrap_or(UNK))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(response: &str) -> Example {
        Example {
            context: vec![Utterance::new(Speaker::A, "hi there")],
            knowledge: vec!["alpha beta".into(), "gamma".into()],
            response: response.into(),
            gold_knowledge_index: None,
            topic: None,
        }
    }

    fn write_lines(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("train.jsonl");
        fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn loads_records_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::new(Split::Train, vec![example("first"), example("second")]);
        let path = dir.path().join("train.jsonl");
        write_corpus(&path, &corpus).unwrap();
        let loaded = load_corpus(&path, Split::Train).unwrap();
        assert_eq!(loaded, corpus);
        assert_eq!(loaded, load_corpus(&path, Split::Train).unwrap());
    }

    #[test]
    fn missing_response_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let good = serde_json::to_string(&example("ok")).unwrap();
        let bad = r#"{"context":[{"speaker":"A","text":"hi"}],"knowledge":["k"]}"#;
        let path = write_lines(dir.path(), &[&good, bad]);
        let err = load_corpus(&path, Split::Train).unwrap_err();
        match err {
            Error::Validation { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "response");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn gold_index_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = example("ok");
        ex.gold_knowledge_index = Some(2);
        let path = write_lines(dir.path(), &[&serde_json::to_string(&ex).unwrap()]);
        let err = load_corpus(&path, Split::Train).unwrap_err();
        assert!(err.to_string().contains("index out of range"), "{err}");
    }

    #[test]
    fn empty_knowledge_and_empty_response_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = example("ok");
        ex.knowledge.clear();
        let path = write_lines(dir.path(), &[&serde_json::to_string(&ex).unwrap()]);
        let err = load_corpus(&path, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "knowledge", .. }));

        let ex = example("   ");
        let path = write_lines(dir.path(), &[&serde_json::to_string(&ex).unwrap()]);
        let err = load_corpus(&path, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "response", .. }));
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let good = serde_json::to_string(&example("ok")).unwrap();
        let path = write_lines(dir.path(), &[&good, &good, "{not json"]);
        let err = load_corpus(&path, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn manifest_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("valid.jsonl");
        write_corpus(&path, &Corpus::new(Split::Valid, vec![example("x")])).unwrap();
        assert!(load_corpus(&path, Split::Train).is_err());
        assert!(load_corpus(&path, Split::Valid).is_ok());
    }

    fn single_text_corpus(text: &str) -> Corpus {
        Corpus::new(
            Split::Train,
            vec![Example {
                context: vec![Utterance::new(Speaker::A, text)],
                knowledge: vec![text.into()],
                response: text.into(),
                gold_knowledge_index: None,
                topic: None,
            }],
        )
    }

    #[test]
    fn vocabulary_without_truncation() {
        let vocab = build_vocabulary(&single_text_corpus("x y z x"), 100).unwrap();
        assert_eq!(vocab.len(), 3 + RESERVED_TOKENS.len());
        for (i, tok) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.lookup(tok), Some(i as TokenId));
        }
    }

    #[test]
    fn vocabulary_tie_break_is_lexicographic() {
        let vocab = build_vocabulary(&single_text_corpus("pear apple"), 100).unwrap();
        assert!(vocab.lookup("apple").unwrap() < vocab.lookup("pear").unwrap());
        // frequency dominates the tie-break
        let vocab = build_vocabulary(&single_text_corpus("zeta zeta apple"), 100).unwrap();
        assert!(vocab.lookup("zeta").unwrap() < vocab.lookup("apple").unwrap());
        let vocab = build_vocabulary(&single_text_corpus("zeta zeta apple"), 7).unwrap();
        assert_eq!(vocab.lookup("apple"), None);
    }

    #[test]
    fn vocabulary_smaller_than_reserved_is_a_config_error() {
        let err = build_vocabulary(&single_text_corpus("a"), 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(build_vocabulary(&Corpus::new(Split::Train, vec![]), 10).is_err());
    }

    #[test]
    fn encode_handles_empty_known_and_unknown() {
        let vocab = build_vocabulary(&single_text_corpus("the cat sat"), 100).unwrap();
        assert!(encode_text(&vocab, "").is_empty());
        let ids = encode_text(&vocab, "the cat sat");
        assert_eq!(vocab.decode(&ids), "the cat sat");
        let ids = encode_text(&vocab, "the dog sat");
        assert_eq!(ids.iter().filter(|&&i| i == UNK).count(), 1);
        assert_eq!(ids[1], UNK);
        assert_eq!(vocab.decode(&ids), "the [UNK] sat");
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = build_vocabulary(&single_text_corpus("b a c"), 100).unwrap();
        let path = dir.path().join("vocab.json");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.tokens(), vocab.tokens());
        assert_eq!(loaded.lookup("c"), vocab.lookup("c"));
        assert_eq!(loaded.content_hash(), vocab.content_hash());
    }
}
