//! `privicl run`: answer every test query and write the run directory.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use privicl::accountant::PrivacyReport;
use privicl::data::{load_examples, Example};
use privicl::ledger::MechanismEvent;
use privicl::metrics::{MetricScores, CSV_HEADER};
use privicl::pipeline::{answer_query, BudgetTracker, EnsembleConfig, RunReport, Timing};
use privicl::rng::DpRng;

use crate::config::{apply_overrides, build_backends, require, resolve};
use crate::output::{ensure_dir, write_csv, write_json};
use crate::{Common, EnsembleOverrides};

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum QueryOutcome {
    Ok(Box<RunReport>),
    Failed { query_id: String, error: String },
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a EnsembleConfig,
    queries: Vec<QueryOutcome>,
    answered: usize,
    /// Sequential composition over all answered queries.
    total_budget: Option<PrivacyReport>,
    total_epsilon_limit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stopped: Option<String>,
}

#[derive(Serialize)]
struct QueryLog<'a> {
    query_id: &'a str,
    events: &'a [MechanismEvent],
}

#[derive(Serialize)]
struct QueryTiming<'a> {
    query_id: &'a str,
    #[serde(flatten)]
    timing: Timing,
}

pub struct Datasets {
    pub private: Vec<Example>,
    pub public: Vec<Example>,
    pub queries: Vec<Example>,
}

pub fn load_datasets(cfg: &crate::config::CliConfig) -> Result<Datasets> {
    let load = |p: &Path| load_examples(p).with_context(|| format!("loading {}", p.display()));
    Ok(Datasets {
        private: load(require(&cfg.data.private, "private pool")?)?,
        public: load(require(&cfg.data.public, "public pool")?)?,
        queries: load(require(&cfg.data.queries, "queries")?)?,
    })
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn cmd_run(
    common: &Common,
    overrides: &EnsembleOverrides,
    total_epsilon: Option<f64>,
) -> Result<()> {
    let mut cfg = resolve(common)?;
    apply_overrides(overrides, &mut cfg.ensemble);
    if let Some(t) = total_epsilon {
        cfg.limits.total_epsilon = Some(t);
    }
    let ens = cfg.ensemble.clone();
    ens.validate()?;
    if let Some(t) = cfg.limits.total_epsilon {
        if t.is_nan() || t <= 0.0 {
            bail!("total_epsilon must be > 0, got {t}");
        }
    }
    let data = load_datasets(&cfg)?;
    let required = ens.required_pool();
    if data.private.len() < required || data.public.len() < required {
        bail!(
            "pools need {required} examples each for {} shots x {} members (private {}, public {})",
            ens.shots_n,
            ens.members_m,
            data.private.len(),
            data.public.len()
        );
    }
    if common.dry_run {
        println!(
            "configuration ok: {} queries, private pool {}, public pool {}, aggregation {:?}",
            data.queries.len(),
            data.private.len(),
            data.public.len(),
            ens.aggregation
        );
        return Ok(());
    }

    let backends = build_backends(&cfg.backend, ens.seed)?;
    let settings = cfg.settings();
    let out = &common.out;
    ensure_dir(&out.join("prompts"))?;

    let root = DpRng::new(ens.seed);
    let mut tracker = BudgetTracker::new(cfg.limits.total_epsilon, ens.budget.delta);
    let mut outcomes = Vec::new();
    let mut first_error: Option<anyhow::Error> = None;
    let mut stopped = None;
    for (i, q) in data.queries.iter().enumerate() {
        let mut rng = root.substream(i as u64);
        let res = answer_query(
            q,
            &data.private,
            &data.public,
            &ens,
            &backends.llm,
            &backends.embedder,
            &settings,
            &mut rng,
        );
        let report = match res {
            Ok(r) => r,
            Err(e) => {
                log::error!("query {} failed: {e}", q.id);
                outcomes.push(QueryOutcome::Failed {
                    query_id: q.id.clone(),
                    error: e.to_string(),
                });
                first_error.get_or_insert_with(|| e.into());
                continue;
            }
        };
        // The answer is only released if the running total allows it.
        if let Err(e) = tracker.check(&report.mechanism_log) {
            stopped = Some(format!("query {}: {e}", q.id));
            first_error = Some(e.into());
            break;
        }
        tracker.record(&report.mechanism_log);
        outcomes.push(QueryOutcome::Ok(Box::new(report)));
    }

    let reports: Vec<&RunReport> = outcomes
        .iter()
        .filter_map(|o| match o {
            QueryOutcome::Ok(r) => Some(r.as_ref()),
            QueryOutcome::Failed { .. } => None,
        })
        .collect();

    for r in &reports {
        let dir = out.join("prompts").join(safe_name(&r.query_id));
        ensure_dir(&dir)?;
        for s in &r.prompt_snapshots {
            let path = dir.join(format!("{}_{:02}.txt", safe_name(&s.stage), s.index));
            std::fs::write(&path, &s.text)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }

    let mut scores = Vec::new();
    let mut rows = Vec::new();
    for r in &reports {
        let reference = data
            .queries
            .iter()
            .find(|q| q.id == r.query_id)
            .map_or("", |q| q.output.as_str());
        let s = MetricScores::compute(&r.answer, reference);
        scores.push(s);
        let mut row = vec![r.query_id.clone()];
        row.extend(s.percent_fields());
        rows.push(row);
    }
    let mut mean_row = vec!["mean".to_string()];
    mean_row.extend(MetricScores::mean(&scores).percent_fields());
    rows.push(mean_row);
    write_csv(&out.join("metrics.csv"), &CSV_HEADER, rows)?;

    let logs: Vec<QueryLog> = reports
        .iter()
        .map(|r| QueryLog {
            query_id: &r.query_id,
            events: &r.mechanism_log,
        })
        .collect();
    write_json(&out.join("mechanism_log.json"), &logs)?;
    let timings: Vec<QueryTiming> = reports
        .iter()
        .map(|r| QueryTiming {
            query_id: &r.query_id,
            timing: r.timing,
        })
        .collect();
    write_json(&out.join("timing.json"), &timings)?;

    let answered = reports.len();
    let summary = RunSummary {
        config: &ens,
        answered,
        total_budget: if answered > 0 {
            Some(tracker.total()?)
        } else {
            None
        },
        total_epsilon_limit: cfg.limits.total_epsilon,
        queries: outcomes,
        stopped,
    };
    write_json(&out.join("report.json"), &summary)?;
    eprintln!(
        "answered {answered} of {} queries; artifacts in {}",
        data.queries.len(),
        out.display()
    );
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
