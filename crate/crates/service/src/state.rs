//! Shared server state: cached records, the run registry, and the job executor.

use std::collections::BTreeMap;
use std::io;
use std::sync::Arc;

use nbeval_core::algorithms::{self, ModelDefaults};
use nbeval_core::driver;
use nbeval_core::interactions::InteractionLog;
use nbeval_core::protocol::{EvaluationContext, Run, RunEvent, RunPhase, RunRegistry};
use parking_lot::{Mutex, RwLock};
use tokio::sync::Semaphore;
use uuid::Uuid;

use crate::error::ApiError;
use crate::model::{unix_now, ConfigRecord, CreateJob, DatasetRecord, JobProgress, JobRecord, JobStatus};
use crate::store::Store;

pub const DEFAULT_JOB_CONCURRENCY: usize = 4;

struct DatasetEntry {
    record: DatasetRecord,
    log: Mutex<Option<Arc<InteractionLog>>>,
}

pub struct AppState {
    store: Arc<dyn Store>,
    registry: RunRegistry,
    datasets: RwLock<BTreeMap<String, Arc<DatasetEntry>>>,
    configs: RwLock<BTreeMap<String, ConfigRecord>>,
    jobs: RwLock<BTreeMap<String, Arc<RwLock<JobRecord>>>>,
    job_slots: Arc<Semaphore>,
    token: Option<String>,
}

impl AppState {
    /// Loads every record from `store` and rebuilds runs from their event logs.
    ///
    /// Runs whose logs cannot be replayed are listed as FAILED. Unfinished jobs
    /// are not restarted until [`resume_jobs`](Self::resume_jobs) is called.
    pub fn open(store: Arc<dyn Store>, job_concurrency: usize, token: Option<String>) -> io::Result<Arc<AppState>> {
        let registry = RunRegistry::new(store.clone());
        let state = AppState {
            registry,
            datasets: RwLock::new(BTreeMap::new()),
            configs: RwLock::new(BTreeMap::new()),
            jobs: RwLock::new(BTreeMap::new()),
            job_slots: Arc::new(Semaphore::new(job_concurrency.max(1))),
            token,
            store,
        };
        for record in state.store.dataset_records()? {
            let entry = DatasetEntry {
                record: record.clone(),
                log: Mutex::new(None),
            };
            state.datasets.write().insert(record.id, Arc::new(entry));
        }
        for record in state.store.config_records()? {
            state.configs.write().insert(record.id.clone(), record);
        }
        for (run_id, log) in state.store.run_logs()? {
            match log.and_then(|events| state.rebuild_run(&events)) {
                Ok(run) => state.registry.insert_recovered(run),
                Err(reason) => {
                    tracing::warn!("run {run_id} marked failed: {reason}");
                    state.registry.insert_broken(run_id, reason);
                }
            }
        }
        for record in state.store.job_records()? {
            state
                .jobs
                .write()
                .insert(record.job_id.clone(), Arc::new(RwLock::new(record)));
        }
        Ok(Arc::new(state))
    }

    fn rebuild_run(&self, events: &[RunEvent]) -> Result<Run, String> {
        let Some(RunEvent::Registered {
            config,
            dataset_ref,
            config_ref,
            ..
        }) = events.first()
        else {
            return Err("event log does not start with a registration".into());
        };
        let dataset_id = dataset_ref.as_deref().ok_or("run has no dataset reference")?;
        let log = self.dataset_log(dataset_id).map_err(|e| e.message)?;
        let mut ctx = EvaluationContext::new(log, config.clone()).map_err(|e| e.to_string())?;
        ctx.dataset_ref = dataset_ref.clone();
        ctx.config_ref = config_ref.clone();
        Run::replay(Arc::new(ctx), events).map_err(|e| e.to_string())
    }

    pub fn registry(&self) -> &RunRegistry {
        &self.registry
    }

    pub fn store(&self) -> &Arc<dyn Store> {
        &self.store
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub fn add_dataset(&self, record: DatasetRecord, log: InteractionLog) -> io::Result<()> {
        self.store.put_dataset(&record, &log)?;
        let entry = DatasetEntry {
            record: record.clone(),
            log: Mutex::new(Some(Arc::new(log))),
        };
        self.datasets.write().insert(record.id, Arc::new(entry));
        Ok(())
    }

    pub fn datasets(&self) -> Vec<DatasetRecord> {
        self.datasets.read().values().map(|e| e.record.clone()).collect()
    }

    pub fn dataset(&self, id: &str) -> Result<DatasetRecord, ApiError> {
        self.datasets
            .read()
            .get(id)
            .map(|e| e.record.clone())
            .ok_or_else(|| ApiError::unknown_dataset(id))
    }

    pub fn delete_dataset(&self, id: &str) -> Result<(), ApiError> {
        self.dataset(id)?;
        self.store.delete_dataset(id)?;
        self.datasets.write().remove(id);
        Ok(())
    }

    /// The dataset's interactions, loaded from the store on first use.
    pub fn dataset_log(&self, id: &str) -> Result<Arc<InteractionLog>, ApiError> {
        let entry = self
            .datasets
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_dataset(id))?;
        let mut slot = entry.log.lock();
        if let Some(log) = slot.as_ref() {
            return Ok(log.clone());
        }
        let log = Arc::new(self.store.load_dataset(id)?);
        *slot = Some(log.clone());
        Ok(log)
    }

    pub fn add_config(&self, record: ConfigRecord) -> io::Result<()> {
        self.store.put_config(&record)?;
        self.configs.write().insert(record.id.clone(), record);
        Ok(())
    }

    pub fn configs(&self) -> Vec<ConfigRecord> {
        self.configs.read().values().cloned().collect()
    }

    pub fn config(&self, id: &str) -> Result<ConfigRecord, ApiError> {
        self.configs
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_config(id))
    }

    pub fn delete_config(&self, id: &str) -> Result<(), ApiError> {
        self.config(id)?;
        self.store.delete_config(id)?;
        self.configs.write().remove(id);
        Ok(())
    }

    pub fn context_for(&self, dataset_id: &str, config_id: &str) -> Result<Arc<EvaluationContext>, ApiError> {
        let config = self.config(config_id)?.config;
        let log = self.dataset_log(dataset_id)?;
        let ctx = EvaluationContext::new(log, config)
            .map_err(|e| ApiError::validation(e.code(), e.to_string()))?
            .with_refs(dataset_id, config_id);
        Ok(Arc::new(ctx))
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        self.jobs.read().values().map(|j| j.read().clone()).collect()
    }

    pub fn job(&self, id: &str) -> Result<JobRecord, ApiError> {
        self.jobs
            .read()
            .get(id)
            .map(|j| j.read().clone())
            .ok_or_else(|| ApiError::not_found("UnknownJob", format!("unknown job {id}")))
    }

    /// Queues a built-in model evaluation. Returns as soon as the job is recorded.
    pub fn submit_job(self: &Arc<Self>, request: CreateJob) -> Result<JobRecord, ApiError> {
        self.config(&request.config_id)?;
        self.dataset(&request.dataset_id)?;
        let model = algorithms::canonical_model_name(&request.model)?;
        algorithms::build_model(model, &request.params, ModelDefaults { window_width: 1 })?;

        let record = JobRecord {
            job_id: Uuid::new_v4().to_string(),
            run_id: None,
            dataset_id: request.dataset_id,
            config_id: request.config_id,
            model: model.to_string(),
            params: request.params,
            status: JobStatus::Queued,
            progress: JobProgress::default(),
            error: None,
            created_at: unix_now(),
            started_at: None,
            finished_at: None,
        };
        self.store.put_job(&record)?;
        let job = Arc::new(RwLock::new(record.clone()));
        self.jobs.write().insert(record.job_id.clone(), job.clone());
        tokio::spawn(self.clone().execute(job));
        Ok(record)
    }

    /// Re-queues jobs that were queued or running when the server stopped.
    pub fn resume_jobs(self: &Arc<Self>) {
        let pending: Vec<Arc<RwLock<JobRecord>>> = self
            .jobs
            .read()
            .values()
            .filter(|j| !j.read().status.is_finished())
            .cloned()
            .collect();
        for job in pending {
            tokio::spawn(self.clone().execute(job));
        }
    }

    fn update_job(&self, job: &RwLock<JobRecord>, f: impl FnOnce(&mut JobRecord)) {
        let snapshot = {
            let mut record = job.write();
            f(&mut record);
            record.clone()
        };
        if let Err(e) = self.store.put_job(&snapshot) {
            tracing::error!("could not persist job {}: {e}", snapshot.job_id);
        }
    }

    async fn execute(self: Arc<Self>, job: Arc<RwLock<JobRecord>>) {
        let Ok(_permit) = self.job_slots.clone().acquire_owned().await else {
            return;
        };
        self.update_job(&job, |j| {
            j.status = JobStatus::Running;
            j.started_at.get_or_insert(unix_now());
        });
        let state = self.clone();
        let worker_job = job.clone();
        let outcome = tokio::task::spawn_blocking(move || state.run_job(&worker_job))
            .await
            .unwrap_or_else(|e| Err(format!("job worker panicked: {e}")));
        self.update_job(&job, |j| {
            j.finished_at = Some(unix_now());
            match outcome {
                Ok(()) => j.status = JobStatus::Completed,
                Err(reason) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(reason);
                }
            }
        });
    }

    fn run_job(&self, job: &RwLock<JobRecord>) -> Result<(), String> {
        let record = job.read().clone();
        let existing = record
            .run_id
            .filter(|id| self.registry.status(*id).is_ok_and(|s| s.phase != RunPhase::Failed));
        if let Some(id) = record.run_id.filter(|_| existing.is_none()) {
            return Err(format!("run {id} of this job cannot be resumed"));
        }
        let ctx = match existing {
            Some(id) => self
                .registry
                .run(id)
                .map_err(|e| e.to_string())?
                .lock()
                .context()
                .clone(),
            None => self
                .context_for(&record.dataset_id, &record.config_id)
                .map_err(|e| e.message)?,
        };
        let mut model = algorithms::build_model(&record.model, &record.params, driver::model_defaults(&ctx))
            .map_err(|e| e.to_string())?;
        let run_id = match existing {
            Some(id) => id,
            None => {
                let id = self
                    .registry
                    .register_with(ctx.clone(), driver::model_metadata(&record.model, &record.params))
                    .map_err(|e| e.to_string())?;
                self.update_job(job, |j| {
                    j.run_id = Some(id);
                    j.progress.total_windows = ctx.n_windows();
                });
                id
            }
        };
        let result = driver::drive(&self.registry, run_id, model.as_mut(), |done, total| {
            self.update_job(job, |j| {
                j.progress = JobProgress {
                    completed_windows: done,
                    total_windows: total,
                };
            });
        });
        if let Err(e) = result {
            let _ = self.registry.abort(run_id, &e.to_string());
            return Err(e.to_string());
        }
        Ok(())
    }
}
