//! Deterministic offline provider.
//!
//! Every output is a pure function of the mock seed and the request, derived
//! through SHA-256 and a ChaCha stream so results agree across processes and
//! platforms.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{EmbeddingVector, GenerationParams, ProviderError};

pub const MOCK_EMBED_DIM: usize = 64;

const FILLER: [&str; 40] = [
    "because",
    "therefore",
    "consider",
    "result",
    "step",
    "value",
    "first",
    "then",
    "answer",
    "check",
    "likely",
    "number",
    "reason",
    "total",
    "each",
    "so",
    "we",
    "get",
    "which",
    "means",
    "also",
    "given",
    "note",
    "that",
    "case",
    "compute",
    "thus",
    "final",
    "maybe",
    "other",
    "simple",
    "part",
    "idea",
    "clear",
    "still",
    "again",
    "sure",
    "better",
    "detail",
    "point",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockMode {
    /// Seeded pseudo-text that borrows words from the prompt.
    Generate,
    /// `echo <prompt-char-count>: <first prompt line>`.
    Echo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockProvider {
    seed: u64,
    mode: MockMode,
    canned: BTreeMap<String, String>,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed, mode: MockMode::Generate, canned: BTreeMap::new() }
    }

    pub fn echo(seed: u64) -> Self {
        Self { mode: MockMode::Echo, ..Self::new(seed) }
    }

    /// Prompts containing `key` are answered with `reply`. Keys are checked in
    /// lexicographic order; the first match wins.
    pub fn with_canned(mut self, key: impl Into<String>, reply: impl Into<String>) -> Self {
        self.canned.insert(key.into(), reply.into());
        self
    }

    /// Parses `mock:<seed>` or `mock:<seed>:echo`.
    pub fn parse_url(url: &str) -> Result<(u64, MockMode), ProviderError> {
        let rest = url.strip_prefix("mock:").ok_or_else(|| ProviderError::Config(format!("not a mock url: {url}")))?;
        let (seed, mode) = match rest.split_once(':') {
            Some((s, "echo")) => (s, MockMode::Echo),
            Some((_, m)) => return Err(ProviderError::Config(format!("unknown mock mode `{m}`"))),
            None => (rest, MockMode::Generate),
        };
        let seed = seed.parse().map_err(|_| ProviderError::Config(format!("bad mock seed in `{url}`")))?;
        Ok((seed, mode))
    }

    pub fn from_url(url: &str) -> Result<Self, ProviderError> {
        let (seed, mode) = Self::parse_url(url)?;
        Ok(Self { mode, ..Self::new(seed) })
    }

    pub fn complete(&self, prompt: &str, params: &GenerationParams) -> Vec<String> {
        (0..params.n_samples).map(|i| self.sample(prompt, params, i)).collect()
    }

    fn sample(&self, prompt: &str, params: &GenerationParams, index: u32) -> String {
        if let Some(reply) = self.canned.iter().find(|(k, _)| prompt.contains(k.as_str())).map(|(_, v)| v) {
            return reply.clone();
        }
        let text = match self.mode {
            MockMode::Echo => {
                let first = prompt.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
                format!("echo {}: {first}", prompt.chars().count())
            }
            MockMode::Generate => self.generate(prompt, params, index),
        };
        apply_stop(text, params.stop.as_deref())
    }

    fn generate(&self, prompt: &str, params: &GenerationParams, index: u32) -> String {
        // greedy decoding returns the same text for every sample
        let sample_key = if params.temperature == 0.0 { 0 } else { index };
        let mut h = Sha256::new();
        h.update(b"complete\0");
        h.update(self.seed.to_le_bytes());
        h.update(params.temperature.to_bits().to_le_bytes());
        h.update(params.max_tokens.to_le_bytes());
        h.update(params.seed.map_or([0xff; 8], u64::to_le_bytes));
        h.update(sample_key.to_le_bytes());
        h.update(prompt.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest32(h));

        let mut vocab: Vec<String> = Vec::new();
        for w in prompt.split_whitespace() {
            let w: String = w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect();
            if !w.is_empty() && !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        let len = rng.random_range(6..=16usize).min(params.max_tokens as usize).max(1);
        let p_copy = (0.9 - 0.5 * params.temperature.min(1.0)).max(0.2);
        let words: Vec<&str> = (0..len)
            .map(|_| {
                if !vocab.is_empty() && rng.random_bool(p_copy) {
                    vocab[rng.random_range(0..vocab.len())].as_str()
                } else {
                    FILLER[rng.random_range(0..FILLER.len())]
                }
            })
            .collect();
        words.join(" ")
    }

    /// Token-hash bag projected to [`MOCK_EMBED_DIM`] dimensions with signed
    /// weights, then normalized.
    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0f64; MOCK_EMBED_DIM];
        for tok in text.split_whitespace() {
            let (idx, weight) = token_projection(self.seed, &tok.to_lowercase());
            v[idx] += weight;
        }
        EmbeddingVector::from_raw(v).unwrap_or_else(|| {
            let mut e = vec![0.0; MOCK_EMBED_DIM];
            e[0] = 1.0;
            EmbeddingVector::from_raw(e).expect("unit basis vector")
        })
    }
}

/// Bucket and signed weight of one lowercased token.
pub(crate) fn token_projection(seed: u64, token: &str) -> (usize, f64) {
    let mut h = Sha256::new();
    h.update(b"embed\0");
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let d = digest32(h);
    let idx = (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % MOCK_EMBED_DIM as u64) as usize;
    let magnitude = 0.5 + f64::from(d[9]) / 510.0;
    let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
    (idx, sign * magnitude)
}

fn digest32(h: Sha256) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

fn apply_stop(mut text: String, stop: Option<&[String]>) -> String {
    if let Some(cut) =
        stop.unwrap_or_default().iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min()
    {
        text.truncate(cut);
    }
    text
}
