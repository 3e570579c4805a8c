//! In-memory view of the review queue with leases and a durable verdict log.
//!
//! The file on disk is the source of truth: every verdict is appended and
//! synced before memory changes, so a restart rebuilds the same state by
//! folding the file again. Leases live only in memory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mmcr::manifest::LabelVocabulary;
use mmcr::prune::{append_verdict, load_queue, now_timestamp, ReviewItem, ReviewStatus};

pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Instant::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock {
    base: Instant,
    offset: Mutex<Duration>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self {
            base: Instant::now(),
            offset: Mutex::new(Duration::ZERO),
        }
    }

    pub fn advance(&self, by: Duration) {
        *self.offset.lock().unwrap() += by;
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Instant {
        self.base + *self.offset.lock().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerdictError {
    NotFound,
    Invalid(String),
    /// The item already carries a verdict.
    Conflict(Box<ReviewItem>),
    Storage(String),
}

#[derive(Debug)]
pub struct ReviewStore {
    path: PathBuf,
    items: Vec<ReviewItem>,
    index: HashMap<String, usize>,
    leases: HashMap<String, Instant>,
    lease: Duration,
}

impl ReviewStore {
    pub fn open(path: &Path, lease: Duration) -> mmcr::Result<Self> {
        let items = load_queue(path)?;
        let index = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        Ok(Self {
            path: path.to_path_buf(),
            items,
            index,
            leases: HashMap::new(),
            lease,
        })
    }

    pub fn items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&ReviewItem> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    /// Pending items not under a live lease, highest score first. Returned
    /// items are leased until `now + lease`.
    pub fn next(&mut self, count: usize, now: Instant) -> Vec<ReviewItem> {
        let mut free: Vec<&ReviewItem> = self
            .items
            .iter()
            .filter(|it| it.status == ReviewStatus::Pending)
            .filter(|it| self.leases.get(&it.id).is_none_or(|&until| until <= now))
            .collect();
        free.sort_by(|a, b| b.outlier_score.total_cmp(&a.outlier_score).then_with(|| a.id.cmp(&b.id)));
        let out: Vec<ReviewItem> = free.into_iter().take(count).cloned().collect();
        for it in &out {
            self.leases.insert(it.id.clone(), now + self.lease);
        }
        out
    }

    /// Records a verdict. The line is on disk before this returns `Ok`.
    pub fn verdict(
        &mut self,
        id: &str,
        status: ReviewStatus,
        verdict_label: Option<String>,
        annotator: &str,
        vocabulary: Option<&LabelVocabulary>,
    ) -> Result<ReviewItem, VerdictError> {
        let &i = self.index.get(id).ok_or(VerdictError::NotFound)?;
        let current = &self.items[i];
        if current.status != ReviewStatus::Pending {
            return Err(VerdictError::Conflict(Box::new(current.clone())));
        }
        if status == ReviewStatus::Pending {
            return Err(VerdictError::Invalid("status must be accepted, rejected or relabeled".into()));
        }
        if annotator.trim().is_empty() {
            return Err(VerdictError::Invalid("annotator must not be empty".into()));
        }
        let updated = current.with_verdict(status, verdict_label, annotator, &now_timestamp());
        updated.validate(vocabulary).map_err(VerdictError::Invalid)?;
        append_verdict(&self.path, &updated).map_err(|e| VerdictError::Storage(e.to_string()))?;
        self.leases.remove(id);
        self.items[i] = updated.clone();
        Ok(updated)
    }
}
