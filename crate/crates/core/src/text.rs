//! Text normalization shared by keyword extraction and the metrics: a
//! bundled English stopword list, a small suffix-stripping stemmer and two
//! tokenizers.

use std::collections::HashSet;
use std::sync::OnceLock;

const STOPWORDS_TXT: &str = include_str!("stopwords.txt");

/// Minimum length a stem may be reduced to.
const MIN_STEM: usize = 3;

pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_TXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// Lowercased alphanumeric runs; everything else separates words.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Lowercased tokens where each punctuation character is its own token.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u' | b'y')
}

fn has_vowel(s: &[u8]) -> bool {
    s.iter().copied().any(is_vowel)
}

fn undouble(s: &mut Vec<u8>) {
    let n = s.len();
    if n > MIN_STEM
        && s[n - 1] == s[n - 2]
        && !is_vowel(s[n - 1])
        && !matches!(s[n - 1], b'l' | b's' | b'z')
    {
        s.pop();
    }
}

fn step(word: &[u8]) -> Vec<u8> {
    let n = word.len();
    let mut w = word.to_vec();
    if n <= MIN_STEM {
        return w;
    }
    if word.ends_with(b"sses") {
        w.truncate(n - 2);
    } else if word.ends_with(b"ies") && n - 2 >= MIN_STEM {
        w.truncate(n - 3);
        w.push(b'y');
    } else if word.ends_with(b"ing") && n - 3 >= MIN_STEM && has_vowel(&word[..n - 3]) {
        w.truncate(n - 3);
        undouble(&mut w);
    } else if word.ends_with(b"ed")
        && n - 2 >= MIN_STEM
        && has_vowel(&word[..n - 2])
        && word[n - 3] != b'e'
    {
        w.truncate(n - 2);
        undouble(&mut w);
    } else if word.ends_with(b"s")
        && !word.ends_with(b"ss")
        && !word.ends_with(b"us")
        && !word.ends_with(b"is")
        && n > MIN_STEM
    {
        w.truncate(n - 1);
    }
    w
}

/// Suffix-stripping stem, applied until it no longer changes, so `stem` is
/// idempotent. Non-ASCII words are returned unchanged.
pub fn stem(word: &str) -> String {
    if !word.is_ascii() {
        return word.to_string();
    }
    let mut cur = word.as_bytes().to_vec();
    loop {
        let next = step(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    String::from_utf8(cur).expect("ascii input stays ascii")
}

/// Stems of the non-stopword words of `text`, in order of first appearance.
pub fn keyword_stems(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for w in words(text) {
        if is_stopword(&w) {
            continue;
        }
        let s = stem(&w);
        if is_stopword(&s) {
            continue;
        }
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}
