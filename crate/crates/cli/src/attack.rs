//! `privicl attack`: repeat membership-inference attack against a defense.

use anyhow::{Context, Result};
use serde::Serialize;

use privicl::data::load_examples;
use privicl::mia::{defense_budget, run_attack, AttackConfig, Defense, PoolRatio};

use crate::config::{build_backends, require, resolve};
use crate::output::{ensure_dir, write_csv, write_json};
use crate::{Common, EnsembleOverrides};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DefenseArg {
    /// Few-shot prompting without aggregation.
    None,
    /// Aggregation with unlimited budget.
    Aggregate,
    /// Private aggregation at --epsilon.
    Private,
}

#[derive(Serialize)]
struct AttackSummary {
    defense: Defense,
    ratio: PoolRatio,
    members: usize,
    nonmembers: usize,
    scored: usize,
    skipped: Vec<String>,
    auroc: f64,
    mean_member_score: f64,
    mean_nonmember_score: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn cmd_attack(
    common: &Common,
    overrides: &EnsembleOverrides,
    defense: Option<DefenseArg>,
) -> Result<()> {
    let cfg = resolve(common)?;
    let sec = &cfg.attack;
    let defense = match defense {
        None => match (sec.defense, overrides.epsilon) {
            (Defense::Private { .. }, Some(epsilon)) => Defense::Private { epsilon },
            (d, _) => d,
        },
        Some(DefenseArg::None) => Defense::NoAggregation,
        Some(DefenseArg::Aggregate) => Defense::NonPrivateAggregation,
        Some(DefenseArg::Private) => {
            let epsilon = match (overrides.epsilon, sec.defense) {
                (Some(e), _) => e,
                (None, Defense::Private { epsilon }) => epsilon,
                (None, _) => anyhow::bail!("--defense private needs --epsilon"),
            };
            Defense::Private { epsilon }
        }
    };

    let load =
        |p: &std::path::Path| load_examples(p).with_context(|| format!("loading {}", p.display()));
    let members = load(require(&sec.members, "attack members")?)?;
    let mut nonmembers = load(require(&sec.nonmembers, "attack non-members")?)?;
    let public = load(require(&cfg.data.public, "public pool")?)?;
    let want = match sec.ratio {
        PoolRatio::Balanced => members.len(),
        PoolRatio::Unbalanced => 4 * members.len(),
    };
    if nonmembers.len() > want {
        nonmembers.truncate(want);
    }

    let config = AttackConfig {
        truncate_tokens: sec.truncate_tokens,
        members,
        nonmembers,
        ratio: sec.ratio,
        shots_n: overrides.shots.unwrap_or(sec.shots_n),
        members_m: overrides.ensemble.unwrap_or(sec.members_m),
        seed: cfg.ensemble.seed,
        defense,
        delta: overrides.delta.unwrap_or(cfg.ensemble.budget.delta),
        parallel_width: cfg.ensemble.parallel_width,
    };
    config.validate()?;
    if common.dry_run {
        println!(
            "configuration ok: {} members, {} non-members, defense {defense:?}",
            config.members.len(),
            config.nonmembers.len()
        );
        return Ok(());
    }
    if let Some(b) = defense_budget(defense) {
        log::info!("defense budget split: {b:?}");
    }

    let backends = build_backends(&cfg.backend, config.seed)?;
    let result = run_attack(
        &config,
        &public,
        &backends.llm,
        &backends.embedder,
        &cfg.settings(),
    )?;

    let out = &common.out;
    ensure_dir(out)?;
    let summary = AttackSummary {
        defense,
        ratio: config.ratio,
        members: config.members.len(),
        nonmembers: config.nonmembers.len(),
        scored: result.transcripts.len(),
        skipped: result.skipped.clone(),
        auroc: result.auroc,
        mean_member_score: mean(&result.member_scores),
        mean_nonmember_score: mean(&result.nonmember_scores),
    };
    write_json(&out.join("attack.json"), &summary)?;
    let rows = result.transcripts.iter().map(|t| {
        vec![
            t.target_id.clone(),
            t.is_member.to_string(),
            format!("{:.6}", t.score),
        ]
    });
    write_csv(
        &out.join("attack.csv"),
        &["target_id", "is_member", "score"],
        rows,
    )?;
    write_json(&out.join("transcripts.json"), &result.transcripts)?;
    println!(
        "AUROC {:.4} ({} targets scored)",
        result.auroc,
        result.transcripts.len()
    );
    Ok(())
}
