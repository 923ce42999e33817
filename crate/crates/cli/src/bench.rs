//! `privicl bench`: embedding cache and coreset comparisons.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use anyhow::Result;
use rand::seq::index::sample;

use privicl::backend::{BackendError, CachedEmbedder, Embedder, EmbeddingCache};
use privicl::pipeline::{answer_query, coreset_sample};
use privicl::rng::DpRng;

use crate::config::{build_backends, resolve};
use crate::output::{ensure_dir, write_csv};
use crate::run::{load_datasets, Datasets};
use crate::Common;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Wall time and embedding calls with and without the cache.
    Cache,
    /// Random versus coreset-selected demonstration subsets.
    Coreset,
}

struct Counting<'a> {
    inner: &'a dyn Embedder,
    calls: AtomicU64,
}

impl Embedder for Counting<'_> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.embed(text)
    }
}

pub fn cmd_bench(common: &Common, mode: Mode) -> Result<()> {
    let cfg = resolve(common)?;
    let data = load_datasets(&cfg)?;
    if common.dry_run {
        println!("configuration ok: bench {mode:?}");
        return Ok(());
    }
    ensure_dir(&common.out)?;
    match mode {
        Mode::Cache => bench_cache(common, &cfg, &data),
        Mode::Coreset => bench_coreset(common, &cfg, &data),
    }
}

fn bench_cache(common: &Common, cfg: &crate::config::CliConfig, data: &Datasets) -> Result<()> {
    let backends = build_backends(&cfg.backend, cfg.ensemble.seed)?;
    let settings = cfg.settings();
    let raw: &dyn Embedder = backends.embedder.inner();
    let pass = |embedder: &dyn Embedder| -> Result<f64> {
        let start = Instant::now();
        let root = DpRng::new(cfg.ensemble.seed);
        for (i, q) in data.queries.iter().enumerate() {
            answer_query(
                q,
                &data.private,
                &data.public,
                &cfg.ensemble,
                &backends.llm,
                embedder,
                &settings,
                &mut root.substream(i as u64),
            )?;
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };

    let mut rows = Vec::new();
    let off = Counting {
        inner: raw,
        calls: AtomicU64::new(0),
    };
    for run in 1..=2 {
        let before = off.calls.load(Ordering::Relaxed);
        let ms = pass(&off)?;
        rows.push(("off", run, ms, off.calls.load(Ordering::Relaxed) - before));
    }
    let on = CachedEmbedder::new(
        Counting {
            inner: raw,
            calls: AtomicU64::new(0),
        },
        EmbeddingCache::in_memory(),
    );
    for run in 1..=2 {
        let before = on.inner().calls.load(Ordering::Relaxed);
        let ms = pass(&on)?;
        rows.push((
            "on",
            run,
            ms,
            on.inner().calls.load(Ordering::Relaxed) - before,
        ));
    }

    for (cache, run, ms, calls) in &rows {
        println!("cache {cache} run {run}: {ms:.1} ms, {calls} embedding calls");
    }
    write_csv(
        &common.out.join("bench_cache.csv"),
        &["cache", "run", "wall_ms", "embed_calls"],
        rows.iter().map(|(c, r, ms, n)| {
            vec![
                c.to_string(),
                r.to_string(),
                format!("{ms:.3}"),
                n.to_string(),
            ]
        }),
    )
}

/// Mean distance from every pool point to its nearest selected point.
fn coverage(points: &[Vec<f64>], selected: &[usize]) -> f64 {
    let total: f64 = points
        .iter()
        .map(|p| {
            selected
                .iter()
                .map(|&s| {
                    p.iter()
                        .zip(&points[s])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / points.len() as f64
}

fn bench_coreset(common: &Common, cfg: &crate::config::CliConfig, data: &Datasets) -> Result<()> {
    let backends = build_backends(&cfg.backend, cfg.ensemble.seed)?;
    let settings = cfg.settings();
    let mut points = Vec::with_capacity(data.private.len());
    for e in &data.private {
        let (v, _) = settings.retry.run(|| backends.embedder.embed(&e.input));
        points.push(v?);
    }
    let m = cfg.ensemble.members_m.min(points.len());
    let root = DpRng::new(cfg.ensemble.seed);
    const TRIALS: u64 = 20;
    let mut rows = Vec::new();
    let mut random_sum = 0.0;
    let mut coreset_sum = 0.0;
    for t in 0..TRIALS {
        let mut rng = root.substream(t);
        let random: Vec<usize> = sample(&mut rng, points.len(), m).into_vec();
        let core = coreset_sample(&points, m, 25, &mut rng)?;
        let (r, c) = (coverage(&points, &random), coverage(&points, &core));
        random_sum += r;
        coreset_sum += c;
        rows.push(vec![
            t.to_string(),
            m.to_string(),
            format!("{r:.6}"),
            format!("{c:.6}"),
        ]);
    }
    println!(
        "m = {m}: mean nearest-selected distance random {:.4}, coreset {:.4}",
        random_sum / TRIALS as f64,
        coreset_sum / TRIALS as f64
    );
    write_csv(
        &common.out.join("bench_coreset.csv"),
        &["trial", "m", "random_coverage", "coreset_coverage"],
        rows,
    )
}
