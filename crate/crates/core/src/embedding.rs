//! Node feature vectors: a tool multi-hot block of length |F|+1 followed by an
//! argument block.
//!
//! Arguments are embedded with hashed character n-grams in the style of
//! subword word vectors: every n-gram of `<token>` picks a bucket, each bucket
//! owns a fixed pseudo-random vector derived from the seed, and a token is the
//! mean of its n-gram vectors. Identifiers that share substrings therefore land
//! close to each other without any pretrained model. A word2vec text file can
//! override the vectors of the tokens it covers.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::trajectory::{ReasoningStep, TaskRecord, ABNORMAL_TOOL, FINAL_ANSWER_TOOL};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ToolVocabulary {
    tools: Vec<String>,
    index: HashMap<String, usize>,
}

impl ToolVocabulary {
    pub fn new(tools: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tools.len());
        for (pos, tool) in tools.iter().enumerate() {
            if tool == ABNORMAL_TOOL {
                return Err(Error::Config(format!(
                    "`{ABNORMAL_TOOL}` is reserved for the abnormal slot"
                )));
            }
            if index.insert(tool.clone(), pos).is_some() {
                return Err(Error::Config(format!(
                    "duplicate tool `{tool}` in vocabulary"
                )));
            }
        }
        Ok(Self { tools, index })
    }

    /// Sorted distinct tools seen in `records`, with the answer step appended
    /// last so it is always a regular vocabulary entry.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a TaskRecord>) -> Self {
        let mut names = BTreeSet::new();
        for record in records {
            for step in record.steps() {
                for tool in step.tools() {
                    if tool != ABNORMAL_TOOL && tool != FINAL_ANSWER_TOOL {
                        names.insert(tool.to_string());
                    }
                }
            }
        }
        let mut tools: Vec<String> = names.into_iter().collect();
        tools.push(FINAL_ANSWER_TOOL.to_string());
        Self::new(tools).expect("deduplicated names")
    }

    pub fn tools(&self) -> &[String] {
        &self.tools
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn position(&self, tool: &str) -> Option<usize> {
        self.index.get(tool).copied()
    }

    /// Width of the tool block, |F| + 1.
    pub fn block_len(&self) -> usize {
        self.tools.len() + 1
    }

    pub fn abnormal_slot(&self) -> usize {
        self.tools.len()
    }

    /// Multi-hot tool block. Unknown names, the abnormal sentinel and an empty
    /// tool set all light the abnormal slot.
    pub fn embed_tools<'a>(&self, tools: impl IntoIterator<Item = &'a str>) -> Vec<f64> {
        let mut block = vec![0.0; self.block_len()];
        let mut any = false;
        for tool in tools {
            any = true;
            match self.position(tool) {
                Some(pos) => block[pos] = 1.0,
                None => block[self.abnormal_slot()] = 1.0,
            }
        }
        if !any {
            block[self.abnormal_slot()] = 1.0;
        }
        block
    }
}

impl TryFrom<Vec<String>> for ToolVocabulary {
    type Error = Error;

    fn try_from(tools: Vec<String>) -> Result<Self> {
        Self::new(tools)
    }
}

impl From<ToolVocabulary> for Vec<String> {
    fn from(v: ToolVocabulary) -> Self {
        v.tools
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub arg_dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hash_buckets: u64,
    pub seed: u64,
    pub external_vectors: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            arg_dim: 300,
            ngram_min: 3,
            ngram_max: 6,
            hash_buckets: 1 << 20,
            seed: 0x5eed_f10a_6e7a_0001,
            external_vectors: None,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arg_dim == 0 {
            return Err(Error::Config("arg_dim must be positive".into()));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::Config(format!(
                "invalid n-gram range {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.hash_buckets == 0 {
            return Err(Error::Config("hash_buckets must be positive".into()));
        }
        Ok(())
    }
}

/// Argument embedder. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Embedder {
    cfg: EmbedderConfig,
    external: HashMap<String, Vec<f64>>,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let external = match &cfg.external_vectors {
            Some(path) => load_word_vectors(path, cfg.arg_dim)?,
            None => HashMap::new(),
        };
        Ok(Self { cfg, external })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.arg_dim
    }

    /// L2-normalized argument vector; the zero vector when there is nothing to
    /// embed.
    pub fn embed_arguments<S: AsRef<str>>(&self, args: &[S]) -> Vec<f64> {
        let joined = args.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        let tokens = tokenize(&joined);
        let mut acc = vec![0.0; self.cfg.arg_dim];
        if tokens.is_empty() {
            return acc;
        }
        for token in &tokens {
            let v = self.token_vector(token);
            for (a, x) in acc.iter_mut().zip(&v) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        let len = norm(&acc);
        if len > 0.0 {
            for a in &mut acc {
                *a /= len;
            }
        }
        acc
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.external.get(token) {
            return v.clone();
        }
        let grams = char_ngrams(token, self.cfg.ngram_min, self.cfg.ngram_max);
        let mut acc = vec![0.0; self.cfg.arg_dim];
        for gram in &grams {
            let bucket = stable_hash(gram.as_bytes(), self.cfg.seed) % self.cfg.hash_buckets;
            let mut stream =
                SplitMix64::new(self.cfg.seed ^ mix64(bucket.wrapping_add(0x9e37_79b9_7f4a_7c15)));
            for a in acc.iter_mut() {
                *a += stream.next_unit_variance();
            }
        }
        let n = grams.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        acc
    }

    /// `[tool block | argument block]` for one step.
    pub fn embed_step(&self, step: &ReasoningStep, vocab: &ToolVocabulary) -> Vec<f64> {
        self.embed_step_group(&[step], vocab)
    }

    /// Node vector of several steps that happened together: the tool block is
    /// the union of their tools, the arguments are concatenated.
    pub fn embed_step_group(&self, steps: &[&ReasoningStep], vocab: &ToolVocabulary) -> Vec<f64> {
        let mut out = step_tool_block(steps, vocab);
        let args: Vec<&str> = steps
            .iter()
            .flat_map(|s| s.args.iter().map(String::as_str))
            .collect();
        out.extend(self.embed_arguments(&args));
        out
    }
}

/// Tool block of a step group; abnormal steps always light the abnormal slot.
pub fn step_tool_block(steps: &[&ReasoningStep], vocab: &ToolVocabulary) -> Vec<f64> {
    let mut block = vocab.embed_tools(steps.iter().flat_map(|s| s.tools()));
    if steps.iter().any(|s| s.is_abnormal) {
        block[vocab.abnormal_slot()] = 1.0;
    }
    block
}

/// Cosine similarity clamped to [-1, 1]; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Lowercase, then split on everything that is not alphanumeric or `_`.
/// Dotted identifiers therefore split at the dots.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Character n-grams of `<token>`. A wrapped token shorter than `min` yields
/// itself so that every token contributes something.
pub fn char_ngrams(token: &str, min: usize, max: usize) -> Vec<String> {
    let wrapped: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut grams = Vec::new();
    for n in min..=max {
        if n > wrapped.len() {
            break;
        }
        for window in wrapped.windows(n) {
            grams.push(window.iter().collect());
        }
    }
    if grams.is_empty() {
        grams.push(wrapped.iter().collect());
    }
    grams
}

/// Seeded FNV-1a with a splitmix finalizer. Stable across platforms and
/// releases, unlike `std::hash`.
pub fn stable_hash(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ mix64(seed);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct SplitMix64(u64);

impl SplitMix64 {
    fn new(seed: u64) -> Self {
        Self(seed)
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix64(self.0)
    }

    /// Uniform on [-√3, √3): zero mean, unit variance.
    fn next_unit_variance(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        (2.0 * u - 1.0) * 3f64.sqrt()
    }
}

/// Reads a word2vec text file (`count dim` header, then `token v1 .. vdim`).
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read word vectors {}: {e}", path.display())))?;
    let bad = |line: usize, msg: &str| Error::Config(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let mut fields = header.split_whitespace();
    let _count: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(1, "header must be `count dim`"))?;
    let file_dim: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(1, "header must be `count dim`"))?;
    if file_dim != dim {
        return Err(bad(
            1,
            &format!("vector dimension {file_dim} does not match arg_dim {dim}"),
        ));
    }
    let mut vectors = HashMap::new();
    for (idx, line) in lines {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(idx + 1, "non-numeric vector entry"))?;
        if values.len() != dim {
            return Err(bad(
                idx + 1,
                &format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(idx + 1, "non-finite vector entry"));
        }
        vectors.entry(token.to_lowercase()).or_insert(values);
    }
    Ok(vectors)
}

/// Node encodings compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeEncoding {
    /// Tool block plus subword argument embedding.
    #[default]
    Full,
    /// Argument block replaced by anonymized identity slots: every distinct
    /// argument string of a graph gets its own slot, with no notion of
    /// similarity between strings.
    NoSemantics,
    /// Argument block zeroed.
    NoArguments,
    /// Tool block zeroed.
    NoFunctions,
}

impl std::str::FromStr for NodeEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no-semantics" => Ok(Self::NoSemantics),
            "no-arguments" => Ok(Self::NoArguments),
            "no-functions" => Ok(Self::NoFunctions),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, no-semantics, no-arguments or no-functions)"
            ))),
        }
    }
}

/// Per-graph slot assignment for [`NodeEncoding::NoSemantics`]. Slots are
/// handed out in first-seen order and wrap modulo the block width.
#[derive(Debug, Default)]
pub struct AnonymousSlots {
    slots: HashMap<String, usize>,
}

impl AnonymousSlots {
    pub fn encode(&mut self, args: &[&str], dim: usize) -> Vec<f64> {
        let mut block = vec![0.0; dim];
        for arg in args {
            let arg = arg.trim();
            if arg.is_empty() {
                continue;
            }
            let next = self.slots.len();
            let slot = *self.slots.entry(arg.to_string()).or_insert(next);
            block[slot % dim] = 1.0;
        }
        block
    }
}

/// Stateful node encoder for one graph build.
pub struct NodeEncoder<'a> {
    vocab: &'a ToolVocabulary,
    embedder: &'a Embedder,
    encoding: NodeEncoding,
    anonymous: AnonymousSlots,
}

impl<'a> NodeEncoder<'a> {
    pub fn new(vocab: &'a ToolVocabulary, embedder: &'a Embedder, encoding: NodeEncoding) -> Self {
        Self {
            vocab,
            embedder,
            encoding,
            anonymous: AnonymousSlots::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vocab.block_len() + self.embedder.dim()
    }

    pub fn encode(&mut self, step: &ReasoningStep) -> Vec<f64> {
        let dim = self.embedder.dim();
        match self.encoding {
            NodeEncoding::Full => self.embedder.embed_step(step, self.vocab),
            NodeEncoding::NoSemantics => {
                let mut out = step_tool_block(&[step], self.vocab);
                let args: Vec<&str> = step.args.iter().map(String::as_str).collect();
                out.extend(self.anonymous.encode(&args, dim));
                out
            }
            NodeEncoding::NoArguments => {
                let mut out = step_tool_block(&[step], self.vocab);
                out.extend(std::iter::repeat(0.0).take(dim));
                out
            }
            NodeEncoding::NoFunctions => {
                let mut out = vec![0.0; self.vocab.block_len()];
                out.extend(self.embedder.embed_arguments(&step.args));
                out
            }
        }
    }
}
