//! `privicl augment`: generate public examples near private clusters.

use anyhow::Result;
use serde::Serialize;

use privicl::aggregation::SgaBudget;
use privicl::data::Example;
use privicl::pipeline::augment_public;
use privicl::rng::DpRng;

use crate::config::{build_backends, resolve};
use crate::output::{ensure_dir, write_json};
use crate::run::load_datasets;
use crate::Common;

#[derive(Serialize)]
struct AugmentSummary<'a> {
    epsilon: f64,
    delta: f64,
    seeds: Vec<&'a str>,
    requested: usize,
    generated: usize,
    failures: usize,
    pool_size: usize,
    mechanism_log: &'a [privicl::ledger::MechanismEvent],
}

pub fn cmd_augment(common: &Common, n_generate: Option<usize>) -> Result<()> {
    let cfg = resolve(common)?;
    let data = load_datasets(&cfg)?;
    let n = n_generate.unwrap_or(cfg.augment.n_generate);
    let eps = cfg.augment.epsilon;
    if eps.is_nan() || eps <= 0.0 {
        anyhow::bail!("augment epsilon must be > 0, got {eps}");
    }
    if common.dry_run {
        println!(
            "configuration ok: {n} generations from {} public examples",
            data.public.len()
        );
        return Ok(());
    }
    let backends = build_backends(&cfg.backend, cfg.ensemble.seed)?;
    let settings = cfg.settings();
    let mut embeddings = Vec::with_capacity(data.private.len());
    for e in &data.private {
        let (v, _) = settings
            .retry
            .run(|| privicl::backend::Embedder::embed(&backends.embedder, &e.input));
        embeddings.push(v?);
    }
    let delta = cfg.ensemble.budget.delta;
    let dpm = SgaBudget::preset(eps).dpm_config(cfg.ensemble.task, delta);
    let mut rng = DpRng::new(cfg.ensemble.seed).labeled("augment");
    let aug = augment_public(
        &embeddings,
        &data.public,
        &dpm,
        n,
        cfg.ensemble.task,
        &backends.llm,
        &backends.embedder,
        &settings,
        &mut rng,
    )?;

    let out = &common.out;
    ensure_dir(out)?;
    let mut text = String::new();
    for e in &aug.pool {
        text.push_str(&serde_json::to_string::<Example>(e)?);
        text.push('\n');
    }
    std::fs::write(out.join("augmented_public.jsonl"), text)?;
    write_json(
        &out.join("augment.json"),
        &AugmentSummary {
            epsilon: eps,
            delta,
            seeds: aug
                .seeds
                .iter()
                .map(|&i| data.public[i].id.as_str())
                .collect(),
            requested: n,
            generated: aug.generated,
            failures: aug.failures,
            pool_size: aug.pool.len(),
            mechanism_log: &aug.mechanism_log,
        },
    )?;
    println!(
        "generated {} of {n} examples ({} failures)",
        aug.generated, aug.failures
    );
    Ok(())
}
