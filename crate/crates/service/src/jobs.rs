//! Background index jobs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use needle_core::pipeline::IndexEvent;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, BuildError, ImageFailure};
use crate::{Service, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

/// Counters only ever grow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub images_total: usize,
    pub images_done: usize,
    pub tiles_done: usize,
    pub embeddings_done: BTreeMap<String, usize>,
}

impl JobProgress {
    fn record(&mut self, event: &IndexEvent) {
        match event {
            IndexEvent::ImageTiled { tiles, .. } => {
                self.images_done += 1;
                self.tiles_done += tiles;
            }
            IndexEvent::Embedded { embedder_id, count } => {
                let slot = self.embeddings_done.entry(embedder_id.clone()).or_default();
                *slot = (*slot).max(*count);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexJobView {
    pub job_id: String,
    pub dataset_id: String,
    pub state: JobState,
    pub force: bool,
    pub progress: JobProgress,
    /// Tiles per store once done.
    pub count: Option<usize>,
    /// Images that could not be read or tiled.
    pub errors: Vec<ImageFailure>,
    pub error: Option<String>,
}

#[derive(Default)]
pub(crate) struct JobRegistry {
    jobs: Mutex<BTreeMap<String, IndexJobView>>,
    running: Mutex<BTreeSet<String>>,
    next: AtomicU64,
}

impl JobRegistry {
    fn update(&self, job_id: &str, f: impl FnOnce(&mut IndexJobView)) {
        if let Some(j) = self.jobs.lock().expect("job lock").get_mut(job_id) {
            f(j);
        }
    }

    fn get(&self, job_id: &str) -> Option<IndexJobView> {
        self.jobs.lock().expect("job lock").get(job_id).cloned()
    }
}

impl Service {
    /// Registers a job after the synchronous checks (dataset exists, not
    /// already indexed unless `force`, no job running for it).
    fn create_job(&self, dataset_id: &str, force: bool) -> Result<IndexJobView, ServiceError> {
        let dir = self.dataset_path(dataset_id)?;
        if dataset::is_indexed(&dir) && !force {
            return Err(ServiceError::conflict(
                "already_indexed",
                format!("dataset {dataset_id} is already indexed; pass force to rebuild"),
            ));
        }
        if !self.jobs.running.lock().expect("job lock").insert(dataset_id.to_owned()) {
            return Err(ServiceError::conflict("job_running", format!("dataset {dataset_id} is being indexed")));
        }
        let n = self.jobs.next.fetch_add(1, Ordering::Relaxed) + 1;
        let view = IndexJobView {
            job_id: format!("job-{n}"),
            dataset_id: dataset_id.to_owned(),
            state: JobState::Queued,
            force,
            progress: JobProgress::default(),
            count: None,
            errors: Vec::new(),
            error: None,
        };
        self.jobs.jobs.lock().expect("job lock").insert(view.job_id.clone(), view.clone());
        Ok(view)
    }

    fn run_job(&self, job_id: &str, progress: &(dyn Fn(&JobProgress) + Sync)) -> IndexJobView {
        let job = self.jobs.get(job_id).expect("job registered");
        let dataset_id = job.dataset_id.clone();
        let result = (|| -> Result<usize, BuildError> {
            let dir = self.dataset_path(&dataset_id)?;
            let total = dataset::list_images(&dir)?.len();
            self.jobs.update(job_id, |j| {
                j.state = JobState::Running;
                j.progress.images_total = total;
            });
            let on_event = |e: IndexEvent| {
                let mut snapshot = None;
                self.jobs.update(job_id, |j| {
                    j.progress.record(&e);
                    snapshot = Some(j.progress.clone());
                });
                if let Some(p) = snapshot {
                    progress(&p);
                }
            };
            dataset::build_index(&dir, &self.embedders, &self.config.index_options(), job.force, &on_event)
        })();
        if result.is_ok() {
            self.invalidate_dataset(&dataset_id);
        }
        self.jobs.update(job_id, |j| match result {
            Ok(count) => {
                j.state = JobState::Done;
                j.count = Some(count);
            }
            Err(BuildError::Images(bad)) => {
                j.state = JobState::Failed;
                j.error = Some(format!("{} image(s) failed", bad.len()));
                j.errors = bad;
            }
            Err(BuildError::Other(e)) => {
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            }
        });
        self.jobs.running.lock().expect("job lock").remove(&dataset_id);
        self.jobs.get(job_id).expect("job registered")
    }

    /// Starts indexing on a background thread.
    pub fn start_index(self: &Arc<Self>, dataset_id: &str, force: bool) -> Result<IndexJobView, ServiceError> {
        let view = self.create_job(dataset_id, force)?;
        let svc = self.clone();
        let job_id = view.job_id.clone();
        std::thread::Builder::new()
            .name(format!("index-{dataset_id}"))
            .spawn(move || {
                let done = svc.run_job(&job_id, &|_| {});
                log::info!("{} finished: {:?}", done.job_id, done.state);
            })?;
        Ok(view)
    }

    /// Indexes in the calling thread, reporting progress snapshots.
    pub fn index_blocking(
        &self,
        dataset_id: &str,
        force: bool,
        progress: &(dyn Fn(&JobProgress) + Sync),
    ) -> Result<IndexJobView, ServiceError> {
        let view = self.create_job(dataset_id, force)?;
        Ok(self.run_job(&view.job_id, progress))
    }

    pub fn job(&self, job_id: &str) -> Result<IndexJobView, ServiceError> {
        self.jobs.get(job_id).ok_or_else(|| ServiceError::not_found("job", job_id))
    }
}
