//! Tokenization, vocabularies, query delexicalization and interrogative
//! detection.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Interrogative words in table order; a question with none of them uses
/// row [`NO_WH`].
pub const INTERROGATIVES: [&str; 10] = [
    "which", "what", "who", "whose", "whom", "where", "when", "how", "why", "whether",
];
pub const NO_WH: usize = INTERROGATIVES.len();

/// Lowercased maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Table index of the first question token that is an interrogative word.
pub fn interrogative_index(tokens: &[String]) -> Option<usize> {
    tokens
        .iter()
        .find_map(|t| INTERROGATIVES.iter().position(|w| w == t))
}

#[derive(Clone, Debug)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    /// The bundled English list.
    pub fn english() -> Self {
        Self::parse(include_str!("../data/stopwords.txt"))
    }

    pub fn parse(text: &str) -> Self {
        Stopwords(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn empty() -> Self {
        Stopwords(HashSet::new())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Date,
    Ordinal,
    Number,
}

impl ConstraintKind {
    pub fn token(self) -> &'static str {
        match self {
            ConstraintKind::Date => "__date__",
            ConstraintKind::Ordinal => "__ordinal__",
            ConstraintKind::Number => "__number__",
        }
    }
}

/// Token span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicMention {
    pub start: usize,
    pub end: usize,
    pub entity_id: String,
}

impl TopicMention {
    pub fn span(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintMention {
    pub start: usize,
    pub end: usize,
    pub kind: ConstraintKind,
}

impl ConstraintMention {
    pub fn span(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
        }
    }
}

/// One line of a QA dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawQuestion {
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_mention: Option<TopicMention>,
    #[serde(default)]
    pub constraints: Vec<ConstraintMention>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionRecord {
    pub text: String,
    pub tokens: Vec<String>,
    /// Filled by [`delexicalize`]; equals `tokens` until then.
    pub delex_tokens: Vec<String>,
    pub gold_answers: BTreeSet<String>,
    pub topic: Option<TopicMention>,
    pub constraints: Vec<ConstraintMention>,
    pub interrogative: Option<usize>,
}

impl QuestionRecord {
    pub fn from_raw(raw: RawQuestion) -> Result<Self> {
        let tokens = tokenize(&raw.question);
        let n = tokens.len();
        let check = |s: Span, what: &str| {
            if s.start >= s.end || s.end > n {
                Err(Error::Invalid(format!(
                    "{what} span {}..{} outside question of {n} tokens: {:?}",
                    s.start, s.end, raw.question
                )))
            } else {
                Ok(())
            }
        };
        if let Some(t) = &raw.topic_mention {
            check(t.span(), "topic")?;
        }
        for c in &raw.constraints {
            check(c.span(), "constraint")?;
        }
        Ok(QuestionRecord {
            interrogative: interrogative_index(&tokens),
            delex_tokens: tokens.clone(),
            text: raw.question,
            tokens,
            gold_answers: raw.answers.into_iter().collect(),
            topic: raw.topic_mention,
            constraints: raw.constraints,
        })
    }

    pub fn to_raw(&self) -> RawQuestion {
        RawQuestion {
            question: self.text.clone(),
            answers: self.gold_answers.iter().cloned().collect(),
            topic_mention: self.topic.clone(),
            constraints: self.constraints.clone(),
        }
    }

    /// Constraint kind covering each token, if any.
    pub fn constraint_kinds(&self) -> Vec<Option<ConstraintKind>> {
        let mut kinds = vec![None; self.tokens.len()];
        for c in &self.constraints {
            for k in kinds.iter_mut().take(c.end).skip(c.start) {
                *k = Some(c.kind);
            }
        }
        kinds
    }
}

pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: name.clone(),
            line: i + 1,
            message,
        };
        let raw: RawQuestion = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(QuestionRecord::from_raw(raw).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn save_questions(path: &Path, questions: &[QuestionRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for q in questions {
        serde_json::to_writer(&mut w, &q.to_raw())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DelexOptions {
    pub topic: bool,
    pub constraints: bool,
}

impl Default for DelexOptions {
    fn default() -> Self {
        DelexOptions {
            topic: true,
            constraints: true,
        }
    }
}

/// Replace the topic span by `topic_type` and each constraint span by its
/// kind token. Spans may not overlap.
pub fn delexicalize(
    tokens: &[String],
    topic: Option<(Span, &str)>,
    constraints: &[(Span, ConstraintKind)],
    opts: DelexOptions,
) -> Result<Vec<String>> {
    let mut spans: Vec<(Span, String)> = Vec::new();
    if let Some((span, ty)) = topic {
        if opts.topic {
            spans.push((span, ty.to_string()));
        }
    }
    if opts.constraints {
        spans.extend(constraints.iter().map(|(s, k)| (*s, k.token().to_string())));
    }
    // Validity and overlap are checked even for disabled replacements.
    let mut all: Vec<Span> = topic.iter().map(|(s, _)| *s).collect();
    all.extend(constraints.iter().map(|(s, _)| *s));
    all.sort_by_key(|s| s.start);
    for s in &all {
        if s.start >= s.end || s.end > tokens.len() {
            return Err(Error::Invalid(format!(
                "span {}..{} out of range",
                s.start, s.end
            )));
        }
    }
    for w in all.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::Invalid(format!(
                "overlapping spans {}..{} and {}..{}",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    spans.sort_by_key(|(s, _)| s.start);
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    for (span, replacement) in spans {
        out.extend_from_slice(&tokens[i..span.start]);
        out.push(replacement);
        i = span.end;
    }
    out.extend_from_slice(&tokens[i..]);
    Ok(out)
}

/// Token/index bijection with reserved padding and unknown rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            index: BTreeMap::new(),
            tokens: Vec::new(),
        };
        v.add(PAD_TOKEN);
        v.add(UNK_TOKEN);
        v
    }

    /// Vocabulary over the distinct tokens, in sorted order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = tokens.into_iter().collect();
        let mut v = Self::new();
        for t in set {
            v.add(t);
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(token.to_string(), i);
        self.tokens.push(token.to_string());
        i
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode_token(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| {
                self.tokens
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| UNK_TOKEN.to_string())
            })
            .collect()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in index order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut v = Vocabulary {
            index: BTreeMap::new(),
            tokens: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if v.index.contains_key(line) {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    message: format!("duplicate token `{line}`"),
                });
            }
            v.add(line);
        }
        if v.tokens.len() < 2 || v.tokens[PAD] != PAD_TOKEN || v.tokens[UNK] != UNK_TOKEN {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: 1,
                message: "vocabulary must start with the padding and unknown tokens".into(),
            });
        }
        Ok(v)
    }
}
