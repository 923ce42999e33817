//! Deterministic offline backend.
//!
//! Completions depend only on the prompt text. The mock recognizes the
//! bundled prompt shapes:
//!
//! * selection prompts: returns the first bracketed candidate;
//! * keyword reconstruction prompts: returns the suggested keywords;
//! * generation prompts: returns a lightly varied copy of the seed example;
//! * demonstration prompts: returns the first demonstration's output, any
//!   marker tokens (`ABC_123`) from the query and first demonstration, and a
//!   few hash-chosen filler words.
//!
//! In [`MockMode::Echo`] a demonstration prompt whose query is a word prefix
//! of one of its demonstration inputs returns that input verbatim, and any
//! other query is answered with a fixed paraphrase of the query.
//!
//! Embeddings are bag-of-token hash projections to [`MOCK_DIM`] dimensions,
//! summed in integer arithmetic so they are identical on every platform.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::{
    normalize_embedding, BackendError, CompletionBackend, CompletionRequest, Embedder, Result,
};
use crate::prompts::{GENERATION_MARKER, KSA_MARKER, SELECTION_MARKERS, TASK_LABELS};
use crate::text::metric_tokens;

pub const MOCK_DIM: usize = 64;

const FILLER: [&str; 16] = [
    "rest",
    "hydration",
    "follow",
    "review",
    "monitor",
    "gentle",
    "advice",
    "plan",
    "check",
    "routine",
    "note",
    "support",
    "caution",
    "daily",
    "brief",
    "care",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MockMode {
    #[default]
    Standard,
    Echo,
}

#[derive(Debug, Default)]
pub struct MockBackend {
    mode: MockMode,
    seed: u64,
    embed_latency: Duration,
    complete_calls: AtomicU64,
    embed_calls: AtomicU64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Tokens shaped like `ANSWER_42` or `PRIVMARK_017`.
pub(crate) fn markers(text: &str) -> Vec<&str> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| is_marker(w))
        .collect()
}

fn is_marker(w: &str) -> bool {
    let Some((head, tail)) = w.rsplit_once('_') else {
        return false;
    };
    let mut hc = head.chars();
    matches!(hc.next(), Some(c) if c.is_ascii_uppercase())
        && hc.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
        && !tail.is_empty()
        && tail.chars().all(|c| c.is_ascii_digit())
}

fn filler(key: u64, n: usize) -> Vec<&'static str> {
    (0..n as u64)
        .map(|i| FILLER[(mix(key ^ mix(i)) % FILLER.len() as u64) as usize])
        .collect()
}

/// Fixed rewording of a query used when nothing can be echoed.
pub(crate) fn paraphrase(query: &str) -> String {
    let words: Vec<&str> = query.split_whitespace().collect();
    format!("In other words: {}", words.join(" "))
}

fn after_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    line.strip_prefix(label).map(str::trim)
}

struct Parsed<'a> {
    demos: Vec<(&'a str, &'a str)>,
    query: Option<&'a str>,
}

/// Splits a demonstration prompt into `(input, output)` pairs and the query.
fn parse_demonstration(prompt: &str) -> Parsed<'_> {
    let lines: Vec<&str> = prompt.lines().collect();
    let mut demos = Vec::new();
    let mut query = None;
    let mut i = 0;
    while i < lines.len() {
        let input = TASK_LABELS
            .iter()
            .find_map(|(inp, out)| after_label(lines[i], inp).map(|t| (t, *out)));
        if let Some((text, out_label)) = input {
            match lines.get(i + 1).and_then(|l| after_label(l, out_label)) {
                Some("") => query = Some(text),
                Some(output) => {
                    demos.push((text, output));
                    i += 1;
                }
                None => query = Some(text),
            }
        }
        i += 1;
    }
    Parsed { demos, query }
}

fn is_word_prefix(prefix: &str, full: &str) -> bool {
    let p: Vec<&str> = prefix.split_whitespace().collect();
    let f: Vec<&str> = full.split_whitespace().collect();
    !p.is_empty() && p.len() <= f.len() && p[..] == f[..p.len()]
}

impl MockBackend {
    pub fn new(mode: MockMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Sleeps this long on every embedding call, for timing comparisons.
    pub fn with_embed_latency(mut self, latency: Duration) -> Self {
        self.embed_latency = latency;
        self
    }

    pub fn mode(&self) -> MockMode {
        self.mode
    }

    pub fn complete_calls(&self) -> u64 {
        self.complete_calls.load(Ordering::Relaxed)
    }

    pub fn embed_calls(&self) -> u64 {
        self.embed_calls.load(Ordering::Relaxed)
    }

    fn respond(&self, prompt: &str) -> String {
        if SELECTION_MARKERS.iter().any(|m| prompt.contains(m)) {
            if let Some(c) = prompt
                .lines()
                .map(str::trim)
                .find(|l| l.len() >= 2 && l.starts_with('[') && l.ends_with(']'))
            {
                return c[1..c.len() - 1].to_string();
            }
        }
        if let Some(line) = prompt.lines().find(|l| l.contains(KSA_MARKER)) {
            let list = line.rsplit_once(':').map_or("", |(_, t)| t).trim();
            let list = list.trim_start_matches('[').trim_end_matches(']');
            return list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
        }
        let parsed = parse_demonstration(prompt);
        if prompt.contains(GENERATION_MARKER) {
            if let Some(&(input, output)) = parsed.demos.first() {
                let key = fnv1a(prompt.as_bytes()) ^ self.seed;
                let extra = filler(key, 2).join(" ");
                let (in_label, out_label) = TASK_LABELS
                    .iter()
                    .find(|(l, _)| prompt.lines().any(|line| line.starts_with(l)))
                    .copied()
                    .unwrap_or(TASK_LABELS[0]);
                return format!(
                    "{in_label} {input} Also {extra}.\n{out_label} {output} Keep {extra}."
                );
            }
        }
        let query = parsed.query.unwrap_or_else(|| prompt.trim());
        if self.mode == MockMode::Echo {
            if let Some(&(input, _)) = parsed
                .demos
                .iter()
                .find(|(input, _)| is_word_prefix(query, input))
            {
                return input.to_string();
            }
            return paraphrase(query);
        }
        let first = parsed.demos.first().copied();
        let base = first.map_or_else(|| paraphrase(query), |(_, out)| out.to_string());
        let mut salient = String::from(query);
        if let Some((input, output)) = first {
            salient.push('\n');
            salient.push_str(input);
            salient.push('\n');
            salient.push_str(output);
        }
        let mut parts = vec![base.clone()];
        let mut seen: Vec<&str> = Vec::new();
        for m in markers(&salient) {
            if !base.contains(m) && !seen.contains(&m) {
                seen.push(m);
                parts.push(m.to_string());
            }
        }
        let key = fnv1a(salient.as_bytes()) ^ self.seed;
        parts.extend(filler(key, 3).into_iter().map(str::to_string));
        parts.join(" ")
    }

    fn project(&self, text: &str) -> Vec<i64> {
        let mut acc = vec![0i64; MOCK_DIM];
        for tok in metric_tokens(text) {
            let h = fnv1a(tok.as_bytes()) ^ self.seed;
            for (j, a) in acc.iter_mut().enumerate() {
                let x = mix(h ^ mix(j as u64));
                *a += (x >> 40) as i64 - (1 << 23);
            }
        }
        acc
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        req.validate()?;
        self.complete_calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.respond(&req.prompt))
    }
}

impl Embedder for MockBackend {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest(
                "cannot embed empty text".into(),
            ));
        }
        self.embed_calls.fetch_add(1, Ordering::Relaxed);
        if !self.embed_latency.is_zero() {
            std::thread::sleep(self.embed_latency);
        }
        let mut v: Vec<f64> = self.project(text).into_iter().map(|x| x as f64).collect();
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        normalize_embedding(&v)
    }

    fn model_name(&self) -> &str {
        "mock-embedding-64"
    }
}
