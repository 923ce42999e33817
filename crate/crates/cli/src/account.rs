//! `privicl account`: privacy accounting of a composition plan.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use privicl::accountant::{
    account_plan, calibrate, plan_breakdown, ApproxDp, CompositionPlan, EntryAccount, Mechanism,
    Monotonicity, PrivacyReport,
};

use crate::output::{ensure_dir, write_json};
use crate::Common;

/// Parameter solved for by `--calibrate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Free {
    /// Noise multiplier of every Gaussian entry.
    Sigma,
    /// Budget of every exponential and Laplace entry.
    Epsilon,
}

#[derive(Serialize)]
struct AccountOutput {
    report: PrivacyReport,
    entries: Vec<EntryAccount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibrated: Option<Calibrated>,
}

#[derive(Serialize)]
struct Calibrated {
    parameter: Free,
    value: f64,
    target_epsilon: f64,
}

fn with_parameter(plan: &CompositionPlan, free: Free, x: f64) -> CompositionPlan {
    let mut p = plan.clone();
    for e in &mut p.entries {
        match (&mut e.mechanism, free) {
            (Mechanism::Gaussian { sigma, .. }, Free::Sigma) => *sigma = x,
            (
                Mechanism::Exponential { epsilon } | Mechanism::Laplace { epsilon },
                Free::Epsilon,
            ) => *epsilon = x,
            _ => {}
        }
    }
    p
}

pub fn cmd_account(
    common: &Common,
    plan_path: &Path,
    free: Option<Free>,
    target: Option<f64>,
    verbose: bool,
) -> Result<()> {
    let text = std::fs::read_to_string(plan_path)
        .with_context(|| format!("reading {}", plan_path.display()))?;
    let mut plan: CompositionPlan = serde_json::from_str(&text)
        .with_context(|| format!("parsing plan {}", plan_path.display()))?;

    let mut calibrated = None;
    if let (Some(free), Some(target)) = (free, target) {
        let has_free = plan.entries.iter().any(|e| {
            matches!(
                (&e.mechanism, free),
                (Mechanism::Gaussian { .. }, Free::Sigma)
                    | (
                        Mechanism::Exponential { .. } | Mechanism::Laplace { .. },
                        Free::Epsilon
                    )
            )
        });
        if !has_free {
            bail!("plan has no entry with a free {free:?} parameter");
        }
        let (mono, init) = match free {
            Free::Sigma => (Monotonicity::Decreasing, 1.0),
            Free::Epsilon => (Monotonicity::Increasing, 0.1),
        };
        let base = plan.clone();
        let value = calibrate(
            ApproxDp::new(target, plan.target_delta)?,
            |x| Ok(with_parameter(&base, free, x)),
            mono,
            init,
        )?;
        plan = with_parameter(&base, free, value);
        calibrated = Some(Calibrated {
            parameter: free,
            value,
            target_epsilon: target,
        });
    }

    let entries = plan_breakdown(&plan)?;
    let report = account_plan(&plan)?;
    if verbose {
        for (i, e) in entries.iter().enumerate() {
            match e.effective_epsilon {
                Some(eps) => println!(
                    "entry {i}: {:?} x{} effective epsilon {eps:.6}",
                    e.mechanism, e.count
                ),
                None => println!("entry {i}: {:?} x{}", e.mechanism, e.count),
            }
        }
    }
    if let Some(c) = &calibrated {
        println!("calibrated {:?} = {:.6}", c.parameter, c.value);
    }
    let alpha = report
        .alpha_star
        .map_or("none".to_string(), |a| format!("{a:.4}"));
    println!(
        "epsilon = {:.6}, delta = {:e}, alpha* = {alpha}",
        report.epsilon, report.delta
    );

    let out = AccountOutput {
        report,
        entries,
        calibrated,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    if !common.dry_run {
        ensure_dir(&common.out)?;
        write_json(&common.out.join("account.json"), &out)?;
    }
    Ok(())
}
