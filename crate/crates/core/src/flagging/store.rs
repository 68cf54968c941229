//! On-disk review store: items, flags and an append-only decision log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{apply_decision, Action, BenchmarkItem, Decision, FlagError, FlagReport, ItemStatus};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const FLAGS_FILE: &str = "flags.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
/// Optional `{page_id, image_ref}` lines; refs resolve against the store directory.
pub const PAGES_FILE: &str = "pages.jsonl";
pub const SNAPSHOT_EVERY: usize = 16;

pub const PROVENANCE_NOTE: &str =
    "Original benchmark revision: 342 items flagged, 251 modified, 16 removed. Counts below reflect this store only.";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("duplicate id {0}")]
    Duplicate(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown flag {0}")]
    UnknownFlag(String),
    #[error("snapshot {path} disagrees with replayed decision log: {reason}")]
    SnapshotMismatch { path: PathBuf, reason: String },
    #[error(transparent)]
    Decision(#[from] FlagError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, required: bool) -> Result<Vec<T>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| StoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), StoreError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("serializable row"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagStatus {
    Pending,
    Kept,
    Modified,
    Removed,
}

impl FlagStatus {
    fn of(decision: Option<&Decision>) -> Self {
        match decision.map(|d| d.action) {
            None => Self::Pending,
            Some(Action::Keep) => Self::Kept,
            Some(Action::Modify) => Self::Modified,
            Some(Action::Remove) => Self::Removed,
        }
    }
}

impl FromStr for FlagStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(Self::Pending),
            "kept" => Ok(Self::Kept),
            "modified" => Ok(Self::Modified),
            "removed" => Ok(Self::Removed),
            other => Err(format!("unknown flag status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub pending: usize,
    pub kept: usize,
    pub modified: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagSummary {
    pub flag_id: String,
    pub item_id: String,
    pub issue_kind: super::IssueKind,
    pub status: FlagStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagDetail {
    pub flag: FlagReport,
    pub status: FlagStatus,
    /// Item as it stands after all effective decisions.
    pub item: BenchmarkItem,
    pub page_urls: Vec<String>,
    /// Every decision recorded for this flag, oldest first.
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Snapshot {
    decisions_applied: usize,
    stats: ReviewStats,
    export: String,
}

#[derive(Debug, Clone, Deserialize)]
struct PageEntry {
    page_id: String,
    image_ref: String,
}

/// Immutable state derived from a prefix of the decision log.
#[derive(Debug, Clone)]
pub struct ReviewView {
    flags: BTreeMap<String, FlagReport>,
    items: BTreeMap<String, BenchmarkItem>,
    decisions: BTreeMap<String, Vec<Decision>>,
    status: BTreeMap<String, FlagStatus>,
    stats: ReviewStats,
    export: String,
}

impl ReviewView {
    fn build(
        base: &BTreeMap<String, BenchmarkItem>,
        flags: &BTreeMap<String, FlagReport>,
        log: &[Decision],
    ) -> Result<Self, StoreError> {
        let mut latest: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, d) in log.iter().enumerate() {
            latest.insert(&d.flag_id, i);
        }
        let effective: BTreeSet<usize> = latest.values().copied().collect();
        let mut items = base.clone();
        for &i in &effective {
            let d = &log[i];
            let item_id = &flags.get(&d.flag_id).ok_or_else(|| StoreError::UnknownFlag(d.flag_id.clone()))?.item_id;
            let item = items.get_mut(item_id).ok_or_else(|| StoreError::UnknownItem(item_id.clone()))?;
            *item = apply_decision(item, d)?;
        }
        let mut decisions: BTreeMap<String, Vec<Decision>> = BTreeMap::new();
        for d in log {
            decisions.entry(d.flag_id.clone()).or_default().push(d.clone());
        }
        let mut stats = ReviewStats::default();
        let status: BTreeMap<String, FlagStatus> = flags
            .keys()
            .map(|id| {
                let s = FlagStatus::of(latest.get(id.as_str()).map(|&i| &log[i]));
                match s {
                    FlagStatus::Pending => stats.pending += 1,
                    FlagStatus::Kept => stats.kept += 1,
                    FlagStatus::Modified => stats.modified += 1,
                    FlagStatus::Removed => stats.removed += 1,
                }
                (id.clone(), s)
            })
            .collect();
        let export = export_items(items.values());
        Ok(Self { flags: flags.clone(), items, decisions, status, stats, export })
    }

    pub fn stats(&self) -> ReviewStats {
        self.stats
    }

    /// Corrected benchmark as JSONL: active items by id, trails limited to modifications.
    pub fn export_jsonl(&self) -> &str {
        &self.export
    }

    pub fn items(&self) -> impl Iterator<Item = &BenchmarkItem> {
        self.items.values()
    }

    pub fn flags(&self, status: Option<FlagStatus>) -> Vec<FlagSummary> {
        self.flags
            .values()
            .filter(|f| status.is_none_or(|s| self.status[&f.flag_id] == s))
            .map(|f| FlagSummary {
                flag_id: f.flag_id.clone(),
                item_id: f.item_id.clone(),
                issue_kind: f.issue_kind,
                status: self.status[&f.flag_id],
            })
            .collect()
    }

    pub fn flag_detail(&self, flag_id: &str) -> Option<FlagDetail> {
        let flag = self.flags.get(flag_id)?;
        Some(FlagDetail {
            flag: flag.clone(),
            status: self.status[flag_id],
            item: self.items[&flag.item_id].clone(),
            page_urls: flag.evidence.iter().map(|e| format!("/pages/{}", e.page_id)).collect(),
            decisions: self.decisions.get(flag_id).cloned().unwrap_or_default(),
        })
    }
}

fn export_items<'a>(items: impl Iterator<Item = &'a BenchmarkItem>) -> String {
    let mut out = String::new();
    for item in items.filter(|i| i.status == ItemStatus::Active) {
        let mut item = item.clone();
        item.trail.retain(|t| t.action == Action::Modify);
        out.push_str(&serde_json::to_string(&item).expect("serializable item"));
        out.push('\n');
    }
    out
}

/// Single-writer handle over a store directory.
#[derive(Debug)]
pub struct ReviewStore {
    dir: PathBuf,
    base: BTreeMap<String, BenchmarkItem>,
    flags: BTreeMap<String, FlagReport>,
    log: Vec<Decision>,
    pages: BTreeMap<String, String>,
    view: Arc<ReviewView>,
}

impl ReviewStore {
    /// Write a fresh store; fails if a decision log already exists.
    pub fn init(dir: &Path, items: &[BenchmarkItem], flags: &[FlagReport]) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log_path = dir.join(DECISIONS_FILE);
        if log_path.exists() {
            return Err(StoreError::Io {
                path: log_path,
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "decision log already exists"),
            });
        }
        write_jsonl(&dir.join(ITEMS_FILE), items)?;
        write_jsonl(&dir.join(FLAGS_FILE), flags)?;
        File::create(&log_path).map_err(io_err(&log_path))?;
        Self::open(dir)
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let mut base = BTreeMap::new();
        for item in read_jsonl::<BenchmarkItem>(&dir.join(ITEMS_FILE), true)? {
            item.validate().map_err(|m| FlagError::InvalidDecision(m))?;
            if base.contains_key(&item.item_id) {
                return Err(StoreError::Duplicate(item.item_id));
            }
            base.insert(item.item_id.clone(), item);
        }
        let mut flags = BTreeMap::new();
        for flag in read_jsonl::<FlagReport>(&dir.join(FLAGS_FILE), true)? {
            if !base.contains_key(&flag.item_id) {
                return Err(StoreError::UnknownItem(flag.item_id));
            }
            if flags.contains_key(&flag.flag_id) {
                return Err(StoreError::Duplicate(flag.flag_id));
            }
            flags.insert(flag.flag_id.clone(), flag);
        }
        let log: Vec<Decision> = read_jsonl(&dir.join(DECISIONS_FILE), false)?;
        let pages = read_jsonl::<PageEntry>(&dir.join(PAGES_FILE), false)?
            .into_iter()
            .map(|p| (p.page_id, p.image_ref))
            .collect();
        let view = Arc::new(ReviewView::build(&base, &flags, &log)?);
        let store = Self { dir: dir.to_path_buf(), base, flags, log, pages, view };
        store.verify_snapshot()?;
        Ok(store)
    }

    fn verify_snapshot(&self) -> Result<(), StoreError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mismatch = |reason: String| StoreError::SnapshotMismatch { path: path.clone(), reason };
        let snap: Snapshot = serde_json::from_str(&text).map_err(|e| mismatch(e.to_string()))?;
        if snap.decisions_applied > self.log.len() {
            return Err(mismatch(format!(
                "snapshot covers {} decisions, log has {}",
                snap.decisions_applied,
                self.log.len()
            )));
        }
        let replay = ReviewView::build(&self.base, &self.flags, &self.log[..snap.decisions_applied])?;
        if replay.export != snap.export || replay.stats != snap.stats {
            return Err(mismatch(format!("state after {} decisions differs", snap.decisions_applied)));
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn view(&self) -> Arc<ReviewView> {
        Arc::clone(&self.view)
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.log
    }

    /// Resolve a page image; relative refs may not leave the store directory.
    pub fn page_path(&self, page_id: &str) -> Option<PathBuf> {
        let path = Path::new(self.pages.get(page_id)?);
        if path.is_absolute() {
            return Some(path.to_path_buf());
        }
        if path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return None;
        }
        Some(self.dir.join(path))
    }

    /// Register page images, replacing the page list.
    pub fn write_pages(&mut self, pages: &BTreeMap<String, String>) -> Result<(), StoreError> {
        let rows: Vec<_> = pages.iter().map(|(id, r)| serde_json::json!({"page_id": id, "image_ref": r})).collect();
        write_jsonl(&self.dir.join(PAGES_FILE), &rows)?;
        self.pages = pages.clone();
        Ok(())
    }

    /// Validate, persist and apply a decision.
    pub fn record(&mut self, decision: Decision) -> Result<Arc<ReviewView>, StoreError> {
        decision.validate()?;
        let flag = self.flags.get(&decision.flag_id).ok_or_else(|| StoreError::UnknownFlag(decision.flag_id.clone()))?;
        let mut log = self.log.clone();
        log.push(decision.clone());
        let view = ReviewView::build(&self.base, &self.flags, &log)
            .map_err(|e| match e {
                StoreError::Decision(inner) => StoreError::Decision(FlagError::InvalidDecision(format!(
                    "flag {} on item {}: {inner}",
                    flag.flag_id, flag.item_id
                ))),
                other => other,
            })?;
        let path = self.dir.join(DECISIONS_FILE);
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut line = serde_json::to_string(&decision).expect("serializable decision");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))?;
        self.log = log;
        self.view = Arc::new(view);
        if self.log.len() % SNAPSHOT_EVERY == 0 {
            self.write_snapshot()?;
        }
        Ok(self.view())
    }

    pub fn write_snapshot(&self) -> Result<(), StoreError> {
        let snap = Snapshot {
            decisions_applied: self.log.len(),
            stats: self.view.stats,
            export: self.view.export.clone(),
        };
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&snap).expect("serializable snapshot")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flagging::{AnswerKind, FlagEvidence, IssueKind};

    pub(crate) fn seed(n_items: usize, n_flags: usize) -> (Vec<BenchmarkItem>, Vec<FlagReport>) {
        let items: Vec<_> = (0..n_items)
            .map(|i| BenchmarkItem::new(&format!("item-{i:02}"), "doc", &format!("question {i}"), &format!("answer {i}"), AnswerKind::Value))
            .collect();
        let flags = (0..n_flags)
            .map(|i| FlagReport {
                flag_id: format!("run.item-{i:02}"),
                item_id: format!("item-{i:02}"),
                issue_kind: IssueKind::Typo,
                rationale: "r".into(),
                evidence: vec![FlagEvidence { page_id: format!("doc-p{i}"), snippet: "s".into(), relevance: 8.0 }],
                created_by: "run".into(),
            })
            .collect();
        (items, flags)
    }

    fn decide(flag: &str, action: Action, new_question: Option<&str>) -> Decision {
        Decision {
            flag_id: flag.into(),
            action,
            new_question: new_question.map(str::to_string),
            new_answer: None,
            added_accepted_answers: vec![],
            reviewer: "alice".into(),
            timestamp_ms: 1_700_000_000_000,
        }
    }

    #[test]
    fn export_conservation_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let (items, flags) = seed(10, 4);
        let mut store = ReviewStore::init(dir.path(), &items, &flags).unwrap();
        assert_eq!(store.view().flags(Some(FlagStatus::Pending)).len(), 4);
        store.record(decide("run.item-00", Action::Keep, None)).unwrap();
        store.record(decide("run.item-01", Action::Modify, Some("fixed 1"))).unwrap();
        store.record(decide("run.item-02", Action::Modify, Some("fixed 2"))).unwrap();
        let view = store.record(decide("run.item-03", Action::Remove, None)).unwrap();
        let lines: Vec<BenchmarkItem> = view.export_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 9);
        assert_eq!(lines.iter().filter(|i| !i.trail.is_empty()).count(), 2);
        assert!(lines.iter().all(|i| i.item_id != "item-03"));
        assert_eq!(view.stats(), ReviewStats { pending: 0, kept: 1, modified: 2, removed: 1 });
        let reopened = ReviewStore::open(dir.path()).unwrap();
        assert_eq!(reopened.view().export_jsonl(), view.export_jsonl());
    }

    #[test]
    fn latest_decision_wins() {
        let dir = tempfile::tempdir().unwrap();
        let (items, flags) = seed(2, 1);
        let mut store = ReviewStore::init(dir.path(), &items, &flags).unwrap();
        store.record(decide("run.item-00", Action::Remove, None)).unwrap();
        let view = store.record(decide("run.item-00", Action::Keep, None)).unwrap();
        assert_eq!(view.export_jsonl().lines().count(), 2);
        assert_eq!(view.stats().kept, 1);
        assert_eq!(view.flag_detail("run.item-00").unwrap().decisions.len(), 2);
    }

    #[test]
    fn rejects_bad_decisions_without_logging() {
        let dir = tempfile::tempdir().unwrap();
        let (items, flags) = seed(2, 1);
        let mut store = ReviewStore::init(dir.path(), &items, &flags).unwrap();
        assert!(matches!(store.record(decide("nope", Action::Keep, None)), Err(StoreError::UnknownFlag(_))));
        assert!(store.record(decide("run.item-00", Action::Modify, None)).is_err());
        assert!(fs::read_to_string(dir.path().join(DECISIONS_FILE)).unwrap().is_empty());
    }

    #[test]
    fn snapshot_corruption_refuses_open() {
        let dir = tempfile::tempdir().unwrap();
        let (items, flags) = seed(3, 2);
        let mut store = ReviewStore::init(dir.path(), &items, &flags).unwrap();
        store.record(decide("run.item-00", Action::Remove, None)).unwrap();
        store.write_snapshot().unwrap();
        ReviewStore::open(dir.path()).unwrap();
        let path = dir.path().join(SNAPSHOT_FILE);
        let tampered = fs::read_to_string(&path).unwrap().replace("\"removed\": 1", "\"removed\": 0");
        fs::write(&path, tampered).unwrap();
        assert!(matches!(ReviewStore::open(dir.path()), Err(StoreError::SnapshotMismatch { .. })));
        fs::write(&path, "{").unwrap();
        assert!(ReviewStore::open(dir.path()).is_err());
    }

    #[test]
    fn page_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let (items, flags) = seed(1, 1);
        ReviewStore::init(dir.path(), &items, &flags).unwrap();
        fs::write(
            dir.path().join(PAGES_FILE),
            "{\"page_id\":\"a\",\"image_ref\":\"pages/a.png\"}\n{\"page_id\":\"b\",\"image_ref\":\"../b.png\"}\n{\"page_id\":\"c\",\"image_ref\":\"/srv/c.png\"}\n",
        )
        .unwrap();
        let store = ReviewStore::open(dir.path()).unwrap();
        assert_eq!(store.page_path("a"), Some(dir.path().join("pages/a.png")));
        assert_eq!(store.page_path("b"), None);
        assert_eq!(store.page_path("c"), Some(PathBuf::from("/srv/c.png")));
        assert_eq!(store.page_path("d"), None);
    }
}
