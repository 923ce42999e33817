//! `privicl evaluate`: reference-based metrics for a predictions file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use privicl::data::read_jsonl;
use privicl::metrics::{MetricScores, CSV_HEADER};

use crate::output::{ensure_dir, write_csv};
use crate::Common;

#[derive(Deserialize)]
struct Record {
    id: String,
    #[serde(alias = "output", alias = "answer", alias = "prediction")]
    text: String,
}

fn load(path: &Path) -> Result<BTreeMap<String, String>> {
    let rows: Vec<Record> =
        read_jsonl(path).with_context(|| format!("loading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for r in rows {
        if map.insert(r.id.clone(), r.text).is_some() {
            bail!("{}: duplicate id {:?}", path.display(), r.id);
        }
    }
    Ok(map)
}

pub fn cmd_evaluate(common: &Common, predictions: &Path, references: &Path) -> Result<()> {
    let preds = load(predictions)?;
    let refs = load(references)?;
    let p: BTreeSet<&String> = preds.keys().collect();
    let r: BTreeSet<&String> = refs.keys().collect();
    let missing: Vec<&&String> = r.symmetric_difference(&p).collect();
    if !missing.is_empty() {
        bail!("ids present in only one file: {missing:?}");
    }
    if common.dry_run {
        println!("{} aligned examples", preds.len());
        return Ok(());
    }

    let mut scores = Vec::new();
    let mut rows = Vec::new();
    for (id, pred) in &preds {
        let s = MetricScores::compute(pred, &refs[id]);
        scores.push(s);
        let mut row = vec![id.clone()];
        row.extend(s.percent_fields());
        rows.push(row);
    }
    let mean = MetricScores::mean(&scores);
    let mut mean_row = vec!["mean".to_string()];
    mean_row.extend(mean.percent_fields());
    rows.push(mean_row);

    ensure_dir(&common.out)?;
    let path = common.out.join("metrics.csv");
    write_csv(&path, &CSV_HEADER, rows)?;
    let f = mean.percent_fields();
    println!(
        "BLEU {} METEOR {} ROUGE-1 {} ROUGE-2 {} ROUGE-L {}",
        f[0], f[1], f[2], f[3], f[4]
    );
    Ok(())
}
