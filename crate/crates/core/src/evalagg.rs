//! Benchmark scoring and aggregation.
//!
//! Raw scores are max-normalized per benchmark over the checkpoints present
//! in the table, then averaged into a visual long-context aggregate (VA) and
//! a broader long-context aggregate (LCA). Benchmarks reported at several
//! context lengths are normalized per length and then averaged into one
//! member score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("at least one gold answer is required")]
    NoGolds,
    #[error("benchmark {0:?} is not in the registry")]
    UnknownBenchmark(String),
    #[error("benchmark {0:?} has no positive score to normalize by")]
    ZeroColumn(String),
    #[error("duplicate score for {checkpoint} on {benchmark}")]
    Duplicate { checkpoint: String, benchmark: String },
    #[error("score {score} for {checkpoint} on {benchmark} must be finite and non-negative")]
    BadScore { checkpoint: String, benchmark: String, score: f64 },
    #[error("run variance needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("baseline {0:?} not found")]
    UnknownBaseline(String),
    #[error("no records to export")]
    NoRecords,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Edit distance over characters.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nls(pred: &str, gold: &str) -> f64 {
    let p: Vec<char> = pred.to_lowercase().chars().collect();
    let g: Vec<char> = gold.to_lowercase().chars().collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &g) as f64 / longest as f64
}

/// Best thresholded normalized Levenshtein similarity over the golds.
pub fn anls(prediction: &str, golds: &[&str], tau: f64) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::NoGolds);
    }
    Ok(golds
        .iter()
        .map(|g| nls(prediction, g))
        .map(|s| if s >= tau { s } else { 0.0 })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkInfo {
    pub id: String,
    pub metric: String,
    pub va_member: bool,
    pub lca_member: bool,
    /// Aggregate member this benchmark contributes to, when reported per context length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub benchmarks: Vec<BenchmarkInfo>,
}

impl Default for Registry {
    fn default() -> Self {
        let b = |id: &str, metric: &str, va: bool, group: Option<&str>| BenchmarkInfo {
            id: id.into(),
            metric: metric.into(),
            va_member: va,
            lca_member: true,
            group: group.map(str::to_string),
        };
        Self {
            benchmarks: vec![
                b("MMLongBenchDoc", "f1", true, None),
                b("MMLBD-C", "f1", true, None),
                b("MMLongBench", "task_avg", true, None),
                b("MMLongBench-32K", "task_avg", true, Some("MMLongBench")),
                b("MMLongBench-128K", "task_avg", true, Some("MMLongBench")),
                b("DUDE", "anls", true, None),
                b("SlideVQA", "anls", true, None),
                b("HELMET", "overall", false, None),
                b("HELMET-32K", "overall", false, Some("HELMET")),
                b("HELMET-128K", "overall", false, Some("HELMET")),
                b("LongBench v2", "accuracy", false, None),
            ],
        }
    }
}

impl Registry {
    pub fn get(&self, id: &str) -> Option<&BenchmarkInfo> {
        self.benchmarks.iter().find(|b| b.id == id)
    }

    fn member_of<'a>(&'a self, info: &'a BenchmarkInfo) -> &'a str {
        info.group.as_deref().unwrap_or(&info.id)
    }

    /// Aggregate members in registry order.
    fn members(&self, lca: bool) -> Vec<&str> {
        let mut seen = Vec::new();
        for info in &self.benchmarks {
            if info.lca_member && (lca || info.va_member) {
                let m = self.member_of(info);
                if !seen.contains(&m) {
                    seen.push(m);
                }
            }
        }
        seen
    }
}

/// A checkpoint, optionally qualified by an evaluation run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

impl RowKey {
    pub fn label(&self) -> String {
        match &self.run_id {
            Some(run) => format!("{}@{run}", self.checkpoint),
            None => self.checkpoint.clone(),
        }
    }

    pub fn parse(label: &str) -> Self {
        match label.split_once('@') {
            Some((c, r)) => Self { checkpoint: c.into(), run_id: Some(r.into()) },
            None => Self { checkpoint: label.into(), run_id: None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub checkpoint: String,
    pub benchmark: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    /// Serialized keyed by `checkpoint@run` labels.
    #[serde(with = "rows_by_label")]
    pub rows: BTreeMap<RowKey, BTreeMap<String, f64>>,
}

mod rows_by_label {
    use super::*;
    use serde::{Deserializer, Serializer};

    type Rows = BTreeMap<RowKey, BTreeMap<String, f64>>;

    pub fn serialize<S: Serializer>(rows: &Rows, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(rows.iter().map(|(k, v)| (k.label(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rows, D::Error> {
        let labelled = BTreeMap::<String, BTreeMap<String, f64>>::deserialize(d)?;
        Ok(labelled.into_iter().map(|(k, v)| (RowKey::parse(&k), v)).collect())
    }
}

impl ScoreTable {
    pub fn from_records(records: &[ScoreRecord], registry: &Registry) -> Result<Self, EvalError> {
        let mut table = ScoreTable::default();
        for r in records {
            if registry.get(&r.benchmark).is_none() {
                return Err(EvalError::UnknownBenchmark(r.benchmark.clone()));
            }
            if !(r.score.is_finite() && r.score >= 0.0) {
                return Err(EvalError::BadScore {
                    checkpoint: r.checkpoint.clone(),
                    benchmark: r.benchmark.clone(),
                    score: r.score,
                });
            }
            let key = RowKey { checkpoint: r.checkpoint.clone(), run_id: r.run_id.clone() };
            if table.rows.entry(key.clone()).or_default().insert(r.benchmark.clone(), r.score).is_some() {
                return Err(EvalError::Duplicate { checkpoint: key.label(), benchmark: r.benchmark.clone() });
            }
        }
        Ok(table)
    }

    pub fn load_jsonl(path: &Path, registry: &Registry) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| EvalError::Malformed { line: i + 1, message: e.to_string() })
            })
            .collect::<Result<Vec<ScoreRecord>, _>>()?;
        Self::from_records(&records, registry)
    }

    pub fn benchmarks(&self) -> BTreeSet<&str> {
        self.rows.values().flat_map(|r| r.keys().map(String::as_str)).collect()
    }
}

/// `100 * raw / column max`, columns taken over every row in the table.
pub fn normalize_scores(table: &ScoreTable) -> Result<ScoreTable, EvalError> {
    let mut maxima: BTreeMap<&str, f64> = BTreeMap::new();
    for row in table.rows.values() {
        for (b, &s) in row {
            let m = maxima.entry(b).or_insert(0.0);
            *m = m.max(s);
        }
    }
    if let Some((b, _)) = maxima.iter().find(|(_, &m)| m <= 0.0) {
        return Err(EvalError::ZeroColumn(b.to_string()));
    }
    Ok(ScoreTable {
        rows: table
            .rows
            .iter()
            .map(|(k, row)| {
                let normalized = row
                    .iter()
                    .map(|(b, &s)| {
                        let m = maxima[b.as_str()];
                        (b.clone(), if s == m { 100.0 } else { 100.0 * s / m })
                    })
                    .collect();
                (k.clone(), normalized)
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub key: RowKey,
    /// Normalized score per aggregate member.
    pub members: BTreeMap<String, f64>,
    pub va: Option<f64>,
    pub lca: Option<f64>,
    /// Aggregate members with no score; a non-empty list makes the row incomplete.
    pub missing: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub va_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lca_delta: Option<f64>,
}

impl AggregateRow {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpread {
    pub checkpoint: String,
    pub runs: usize,
    pub va_sigma: Option<f64>,
    pub lca_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub normalized: ScoreTable,
    pub rows: Vec<AggregateRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub run_spread: Vec<RunSpread>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// VA and LCA per row over a normalized table.
pub fn aggregate(normalized: &ScoreTable, registry: &Registry) -> Result<Vec<AggregateRow>, EvalError> {
    let va_members = registry.members(false);
    let lca_members = registry.members(true);
    normalized
        .rows
        .iter()
        .map(|(key, row)| {
            let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for (b, &s) in row {
                let info = registry.get(b).ok_or_else(|| EvalError::UnknownBenchmark(b.clone()))?;
                grouped.entry(registry.member_of(info)).or_default().push(s);
            }
            let members: BTreeMap<String, f64> = grouped.iter().map(|(m, v)| (m.to_string(), mean(v))).collect();
            let over = |names: &[&str]| -> Option<f64> {
                let vals: Option<Vec<f64>> = names.iter().map(|m| members.get(*m).copied()).collect();
                vals.map(|v| mean(&v))
            };
            let missing = lca_members.iter().filter(|m| !members.contains_key(**m)).map(|m| m.to_string()).collect();
            Ok(AggregateRow {
                key: key.clone(),
                va: over(&va_members),
                lca: over(&lca_members),
                members,
                missing,
                va_delta: None,
                lca_delta: None,
            })
        })
        .collect()
}

/// Population standard deviation.
pub fn run_variance(values: &[f64]) -> Result<f64, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewRuns(values.len()));
    }
    let m = mean(values);
    Ok((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt())
}

/// Normalize, aggregate, attach deltas against `baseline` and per-checkpoint run spread.
pub fn build_report(table: &ScoreTable, registry: &Registry, baseline: Option<&str>) -> Result<AggregateReport, EvalError> {
    let normalized = normalize_scores(table)?;
    let mut rows = aggregate(&normalized, registry)?;
    if let Some(label) = baseline {
        let wanted = RowKey::parse(label);
        let base = rows
            .iter()
            .find(|r| r.key == wanted)
            .or_else(|| rows.iter().find(|r| wanted.run_id.is_none() && r.key.checkpoint == wanted.checkpoint))
            .ok_or_else(|| EvalError::UnknownBaseline(label.to_string()))?;
        let (bva, blca) = (base.va, base.lca);
        for row in &mut rows {
            row.va_delta = row.va.zip(bva).map(|(a, b)| a - b);
            row.lca_delta = row.lca.zip(blca).map(|(a, b)| a - b);
        }
    }
    let mut by_checkpoint: BTreeMap<&str, Vec<&AggregateRow>> = BTreeMap::new();
    for row in &rows {
        by_checkpoint.entry(&row.key.checkpoint).or_default().push(row);
    }
    let run_spread = by_checkpoint
        .into_iter()
        .filter(|(_, runs)| runs.len() >= 2)
        .map(|(checkpoint, runs)| {
            let sigma = |get: fn(&AggregateRow) -> Option<f64>| -> Option<f64> {
                let vals: Option<Vec<f64>> = runs.iter().map(|r| get(r)).collect();
                vals.and_then(|v| run_variance(&v).ok())
            };
            RunSpread {
                checkpoint: checkpoint.to_string(),
                runs: runs.len(),
                va_sigma: sigma(|r| r.va),
                lca_sigma: sigma(|r| r.lca),
            }
        })
        .collect();
    Ok(AggregateReport {
        normalized,
        rows,
        baseline: baseline.map(str::to_string),
        run_spread,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRecord {
    pub checkpoint: String,
    #[serde(default)]
    pub method: String,
    #[serde(default)]
    pub base_model: String,
    #[serde(default)]
    pub merge_recipe: String,
    #[serde(default)]
    pub data_composition: String,
    /// Normalized score per aggregate member.
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub va: Option<f64>,
    #[serde(default)]
    pub lca: Option<f64>,
    #[serde(default)]
    pub incomplete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Json,
    Html,
}

/// Metadata columns keyed by checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub method: String,
    #[serde(default)]
    pub base_model: String,
    #[serde(default)]
    pub merge_recipe: String,
    #[serde(default)]
    pub data_composition: String,
}

pub fn leaderboard_records(report: &AggregateReport, meta: &BTreeMap<String, CheckpointMeta>) -> Vec<LeaderboardRecord> {
    report
        .rows
        .iter()
        .map(|row| {
            let m = meta.get(&row.key.checkpoint).cloned().unwrap_or_default();
            LeaderboardRecord {
                checkpoint: row.key.label(),
                method: m.method,
                base_model: m.base_model,
                merge_recipe: m.merge_recipe,
                data_composition: m.data_composition,
                scores: row.members.clone(),
                va: row.va,
                lca: row.lca,
                incomplete: !row.is_complete(),
            }
        })
        .collect()
}

fn sort_records(records: &mut [LeaderboardRecord]) {
    let key = |r: &LeaderboardRecord| (r.va.is_none(), r.va.map(|v| -v), r.scores.get("MMLBD-C").map(|v| -v));
    records.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.partial_cmp(&kb.1).unwrap_or(std::cmp::Ordering::Equal))
            .then(ka.2.partial_cmp(&kb.2).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.checkpoint.cmp(&b.checkpoint))
    });
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| "\u{2014}".to_string(), |v| format!("{v:.1}"))
}

const SORT_SCRIPT: &str = "document.querySelectorAll('th').forEach((th,i)=>th.addEventListener('click',()=>{\
const b=th.closest('table').tBodies[0];const rows=[...b.rows];const d=th.dataset.dir==='asc'?-1:1;th.dataset.dir=d>0?'asc':'desc';\
rows.sort((x,y)=>{const a=x.cells[i].dataset.v??x.cells[i].textContent,c=y.cells[i].dataset.v??y.cells[i].textContent;\
const n=parseFloat(a),m=parseFloat(c);return d*(isNaN(n)||isNaN(m)?a.localeCompare(c):n-m);});rows.forEach(r=>b.appendChild(r));}));";

/// Records sorted by VA descending (incomplete aggregates last) and rendered.
pub fn export_leaderboard(
    records: &[LeaderboardRecord],
    registry: &Registry,
    format: ExportFormat,
) -> Result<String, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    match format {
        ExportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&sorted).map_err(|e| EvalError::Malformed { line: 0, message: e.to_string() })?;
            s.push('\n');
            Ok(s)
        }
        ExportFormat::Html => Ok(render_html(&sorted, registry)),
    }
}

fn render_html(records: &[LeaderboardRecord], registry: &Registry) -> String {
    let members = registry.members(true);
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>Leaderboard</title>\n<style>\n");
    html.push_str("body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}th,td{border:1px solid #ccc;padding:4px 8px;text-align:right}th{cursor:pointer;background:#f4f4f4}td.t{text-align:left}tr.incomplete td{color:#888}\n");
    html.push_str("</style>\n</head>\n<body>\n<table>\n<thead><tr>");
    for h in ["Checkpoint", "Method", "Base model", "Merge", "Data", "VA", "LCA"].iter().copied().chain(members.iter().copied()) {
        let _ = write!(html, "<th>{}</th>", escape(h));
    }
    html.push_str("</tr></thead>\n<tbody>\n");
    for r in records {
        let class = if r.incomplete { " class=\"incomplete\"" } else { "" };
        let _ = write!(html, "<tr{class}>");
        for t in [&r.checkpoint, &r.method, &r.base_model, &r.merge_recipe, &r.data_composition] {
            let _ = write!(html, "<td class=\"t\">{}</td>", escape(t));
        }
        for v in [r.va, r.lca].into_iter().chain(members.iter().map(|m| r.scores.get(*m).copied())) {
            let sort_value = v.map_or_else(|| "-1".to_string(), |v| format!("{v}"));
            let _ = write!(html, "<td data-v=\"{sort_value}\">{}</td>", cell(v));
        }
        html.push_str("</tr>\n");
    }
    html.push_str("</tbody>\n</table>\n<script>");
    html.push_str(SORT_SCRIPT);
    html.push_str("</script>\n</body>\n</html>\n");
    html
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_levenshtein(a: &[char], b: &[char]) -> usize {
        // full-matrix oracle
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn anls_examples() {
        assert_eq!(anls("Paris", &["paris"], DEFAULT_TAU).unwrap(), 1.0);
        let s = anls("kitten", &["sitting"], DEFAULT_TAU).unwrap();
        assert!((s - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
        assert_eq!(anls("abc", &["xyz"], DEFAULT_TAU).unwrap(), 0.0);
        assert_eq!(anls("", &[""], DEFAULT_TAU).unwrap(), 1.0);
        assert_eq!(anls("", &["a"], DEFAULT_TAU).unwrap(), 0.0);
        assert_eq!(anls("abc", &["xyz", "abd"], DEFAULT_TAU).unwrap(), 1.0 - 1.0 / 3.0);
        assert!(anls("a", &[], DEFAULT_TAU).is_err());
    }

    proptest! {
        #[test]
        fn levenshtein_matches_full_matrix(a in "[a-dA-D]{0,12}", b in "[a-dA-D]{0,12}") {
            let (ac, bc): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            prop_assert_eq!(levenshtein(&ac, &bc), brute_levenshtein(&ac, &bc));
            prop_assert_eq!(anls(&a.to_uppercase(), &[&b], 0.5).unwrap(), anls(&a.to_lowercase(), &[&b], 0.5).unwrap());
        }
    }

    fn rec(c: &str, b: &str, s: f64) -> ScoreRecord {
        ScoreRecord { checkpoint: c.into(), benchmark: b.into(), score: s, run_id: None }
    }

    fn full(c: &str, s: f64) -> Vec<ScoreRecord> {
        ["MMLongBenchDoc", "MMLBD-C", "MMLongBench-32K", "MMLongBench-128K", "DUDE", "SlideVQA", "HELMET", "LongBench v2"]
            .iter()
            .map(|b| rec(c, b, s))
            .collect()
    }

    #[test]
    fn normalization_examples() {
        let reg = Registry::default();
        let t = ScoreTable::from_records(&[rec("a", "MMLBD-C", 57.3), rec("b", "MMLBD-C", 56.2)], &reg).unwrap();
        let n = normalize_scores(&t).unwrap();
        assert_eq!(n.rows[&RowKey::parse("a")]["MMLBD-C"], 100.0);
        assert!((n.rows[&RowKey::parse("b")]["MMLBD-C"] - 98.08).abs() < 0.005);
        let single = ScoreTable::from_records(&full("x", 42.0), &reg).unwrap();
        assert!(normalize_scores(&single).unwrap().rows.values().all(|r| r.values().all(|&v| v == 100.0)));
        let zero = ScoreTable::from_records(&[rec("a", "DUDE", 0.0)], &reg).unwrap();
        assert!(matches!(normalize_scores(&zero), Err(EvalError::ZeroColumn(_))));
    }

    #[test]
    fn aggregates_and_deltas() {
        let reg = Registry::default();
        let mut records = full("top", 80.0);
        records.extend(full("half", 40.0));
        let report = build_report(&ScoreTable::from_records(&records, &reg).unwrap(), &reg, Some("half")).unwrap();
        let top = report.rows.iter().find(|r| r.key.checkpoint == "top").unwrap();
        assert_eq!((top.va, top.lca), (Some(100.0), Some(100.0)));
        assert_eq!(top.va_delta, Some(50.0));
        let half = report.rows.iter().find(|r| r.key.checkpoint == "half").unwrap();
        assert_eq!((half.va_delta, half.lca_delta), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn split_context_lengths_average() {
        let reg = Registry::default();
        let mut records = full("a", 50.0);
        records.extend(full("b", 50.0));
        for r in records.iter_mut().filter(|r| r.checkpoint == "b" && r.benchmark == "MMLongBench-128K") {
            r.score = 25.0;
        }
        let report = build_report(&ScoreTable::from_records(&records, &reg).unwrap(), &reg, None).unwrap();
        let b = &report.rows[1];
        assert_eq!(b.members["MMLongBench"], 75.0);
        assert!((b.va.unwrap() - (100.0 * 4.0 + 75.0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn missing_cell_marks_incomplete() {
        let reg = Registry::default();
        let mut records = full("a", 50.0);
        records.retain(|r| r.benchmark != "DUDE");
        let report = build_report(&ScoreTable::from_records(&records, &reg).unwrap(), &reg, None).unwrap();
        assert_eq!(report.rows[0].va, None);
        assert_eq!(report.rows[0].missing, ["DUDE"]);
    }

    #[test]
    fn reported_run_spread() {
        let va = run_variance(&[92.8, 92.4, 92.0]).unwrap();
        let lca = run_variance(&[91.8, 91.5, 91.2]).unwrap();
        assert_eq!(format!("{va:.2}"), "0.33");
        assert_eq!(format!("{lca:.2}"), "0.24");
        assert_eq!(run_variance(&[1.0, 1.0]).unwrap(), 0.0);
        assert!(run_variance(&[1.0]).is_err());
    }

    #[test]
    fn per_checkpoint_run_spread() {
        let reg = Registry::default();
        let mut records = Vec::new();
        for (run, s) in [("r1", 90.0), ("r2", 80.0), ("r3", 70.0)] {
            for mut r in full("c", s) {
                r.run_id = Some(run.into());
                records.push(r);
            }
        }
        let report = build_report(&ScoreTable::from_records(&records, &reg).unwrap(), &reg, Some("c@r1")).unwrap();
        assert_eq!(report.run_spread.len(), 1);
        assert_eq!(report.run_spread[0].runs, 3);
        assert!(report.run_spread[0].va_sigma.unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn normalization_idempotent_and_scale_invariant(
            scores in proptest::collection::vec(1.0f64..100.0, 2..6),
            scale in 0.1f64..10.0,
        ) {
            let reg = Registry::default();
            let records: Vec<_> = scores.iter().enumerate().map(|(i, &s)| rec(&format!("c{i}"), "DUDE", s)).collect();
            let t = ScoreTable::from_records(&records, &reg).unwrap();
            let n = normalize_scores(&t).unwrap();
            let nn = normalize_scores(&n).unwrap();
            let scaled: Vec<_> = records.iter().map(|r| rec(&r.checkpoint, "DUDE", r.score * scale)).collect();
            let ns = normalize_scores(&ScoreTable::from_records(&scaled, &reg).unwrap()).unwrap();
            for (k, row) in &n.rows {
                prop_assert!((row["DUDE"] - nn.rows[k]["DUDE"]).abs() < 1e-9);
                prop_assert!((row["DUDE"] - ns.rows[k]["DUDE"]).abs() < 1e-9);
                prop_assert!((0.0..=100.0).contains(&row["DUDE"]));
            }
        }
    }

    fn three() -> Vec<LeaderboardRecord> {
        let reg = Registry::default();
        let mut records = full("mid", 60.0);
        records.extend(full("best", 80.0));
        records.extend(full("hole", 70.0));
        records.retain(|r| !(r.checkpoint == "hole" && r.benchmark == "SlideVQA"));
        let report = build_report(&ScoreTable::from_records(&records, &reg).unwrap(), &reg, None).unwrap();
        leaderboard_records(&report, &BTreeMap::new())
    }

    #[test]
    fn html_export_sorted_and_deterministic() {
        let reg = Registry::default();
        let records = three();
        let html = export_leaderboard(&records, &reg, ExportFormat::Html).unwrap();
        assert_eq!(html.matches("<tr").count(), 4);
        let best = html.find(">best<").unwrap();
        let mid = html.find(">mid<").unwrap();
        let hole = html.find(">hole<").unwrap();
        assert!(best < mid && mid < hole);
        assert!(html.contains("class=\"incomplete\""));
        assert!(html.contains("\u{2014}"));
        assert!(!html.contains("src=") && !html.contains("href="));
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(html, export_leaderboard(&reversed, &reg, ExportFormat::Html).unwrap());
    }

    #[test]
    fn json_export_mirrors_records() {
        let reg = Registry::default();
        let json = export_leaderboard(&three(), &reg, ExportFormat::Json).unwrap();
        let back: Vec<LeaderboardRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[0].checkpoint, "best");
        assert!(back[2].incomplete);
        assert!(export_leaderboard(&[], &reg, ExportFormat::Json).is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let reg = Registry::default();
        let mut records = full("a", 50.0);
        records.extend(full("b", 40.0).into_iter().map(|r| ScoreRecord { run_id: Some("r1".into()), ..r }));
        let report = build_report(&ScoreTable::from_records(&records, &reg).unwrap(), &reg, Some("a")).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.contains("\"b@r1\""));
        let back: AggregateReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
