//! Reference-based generation metrics: sentence BLEU-4, ROUGE-1/2/L and a
//! METEOR variant without synonym matching.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::{metric_tokens, stem};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU-4 with uniform weights and a brevity penalty against the closest
/// reference length. Higher orders with no match use `1 / (total + 1)`.
pub fn bleu(candidate: &str, references: &[&str]) -> f64 {
    let cand = metric_tokens(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r)).collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let matched: usize = counts
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max();
                c.min(max_ref.unwrap_or(0))
            })
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += 0.25 * p.ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_sum.exp()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-n F1 with clipped counts.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let cand = metric_tokens(candidate);
    let refr = metric_tokens(reference);
    if cand.is_empty() || n == 0 {
        return 0.0;
    }
    let cc = ngram_counts(&cand, n);
    let rc = ngram_counts(&refr, n);
    let (ct, rt): (usize, usize) = (cc.values().sum(), rc.values().sum());
    if ct == 0 || rt == 0 {
        // Too short for any n-gram; fall back to exact agreement.
        return if cand == refr { 1.0 } else { 0.0 };
    }
    let overlap: usize = cc
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    f1(overlap as f64 / ct as f64, overlap as f64 / rt as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = metric_tokens(candidate);
    let refr = metric_tokens(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&cand, &refr) as f64;
    f1(l / cand.len() as f64, l / refr.len() as f64)
}

/// METEOR with exact then stem matching, `F_mean = 10PR / (R + 9P)` and
/// fragmentation penalty `0.5 (chunks / matches)^3`.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let cand = metric_tokens(candidate);
    let refr = metric_tokens(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut ref_used = vec![false; refr.len()];
    let mut cand_match: Vec<Option<usize>> = vec![None; cand.len()];
    let cand_stems: Vec<String> = cand.iter().map(|t| stem(t)).collect();
    let ref_stems: Vec<String> = refr.iter().map(|t| stem(t)).collect();
    for (view_c, view_r) in [(&cand, &refr), (&cand_stems, &ref_stems)] {
        for (i, tok) in view_c.iter().enumerate() {
            if cand_match[i].is_some() {
                continue;
            }
            if let Some(j) = (0..refr.len()).find(|&j| !ref_used[j] && view_r[j] == *tok) {
                ref_used[j] = true;
                cand_match[i] = Some(j);
            }
        }
    }
    let pairs: Vec<(usize, usize)> = cand_match
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect();
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1)
        .count();
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / refr.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// All metrics for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu: f64,
    pub meteor: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl MetricScores {
    pub fn compute(candidate: &str, reference: &str) -> Self {
        Self {
            bleu: bleu(candidate, &[reference]),
            meteor: meteor(candidate, reference),
            rouge1: rouge_n(candidate, reference, 1),
            rouge2: rouge_n(candidate, reference, 2),
            rouge_l: rouge_l(candidate, reference),
        }
    }

    pub fn mean(items: &[MetricScores]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&MetricScores) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            bleu: sum(|m| m.bleu),
            meteor: sum(|m| m.meteor),
            rouge1: sum(|m| m.rouge1),
            rouge2: sum(|m| m.rouge2),
            rouge_l: sum(|m| m.rouge_l),
        }
    }

    /// Values scaled by 100 and formatted with two decimals, in CSV column order.
    pub fn percent_fields(&self) -> [String; 5] {
        [
            self.bleu,
            self.meteor,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
        ]
        .map(|v| format!("{:.2}", 100.0 * v))
    }
}

pub const CSV_HEADER: [&str; 6] = ["example_id", "bleu", "meteor", "rouge1", "rouge2", "rougeL"];
