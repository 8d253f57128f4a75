//! Sessions, their persisted state and the EDA run lifecycle.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio_util::sync::CancellationToken;

use capy_core::clarifier::ThreadStore;
use capy_core::eda::{EdaAgent, LoopEvent, SharedNotebook};
use capy_core::executor::{Executor, ExecutorConfig};
use capy_core::gateway::{Gateway, ProviderEnv};
use capy_core::insight::InsightGraph;
use capy_core::notebook::{parse_notebook, serialize_notebook, Notebook};
use capy_core::prompts::PromptAssets;
use capy_core::settings::{write_atomic, Settings};
use capy_core::story::StoryDocument;

use crate::error::ApiError;
use crate::events::EventLog;

const NOTEBOOK_FILE: &str = "notebook.ipynb";
const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Idle,
    Running,
    Stopping,
}

#[derive(Clone)]
pub struct ServiceConfig {
    pub state_dir: PathBuf,
    pub heartbeat: Duration,
    pub executor: ExecutorConfig,
    pub prompts: PromptAssets,
    pub provider_env: ProviderEnv,
    /// Settings given to new sessions.
    pub default_settings: Settings,
}

impl ServiceConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            state_dir: state_dir.into(),
            heartbeat: Duration::from_secs(2),
            executor: ExecutorConfig::reference(),
            prompts: PromptAssets::default(),
            provider_env: ProviderEnv::from_env(),
            default_settings: Settings::default(),
        }
    }
}

/// Everything about a session except the notebook, as written to the
/// sidecar state file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionData {
    pub id: String,
    pub settings: Settings,
    #[serde(default)]
    pub threads: ThreadStore,
    #[serde(default)]
    pub story: Option<StoryDocument>,
    #[serde(default)]
    pub graph: Option<InsightGraph>,
}

struct RunSlot {
    state: RunState,
    stop: Option<CancellationToken>,
}

pub struct Session {
    pub id: String,
    dir: PathBuf,
    pub notebook: SharedNotebook,
    /// Every change to session data goes through this lock and is persisted
    /// before it is released.
    data: Mutex<SessionData>,
    gateway: Mutex<Option<Arc<Gateway>>>,
    executor: Arc<Executor>,
    run: Mutex<RunSlot>,
    pub events: Arc<EventLog>,
    persist_lock: Mutex<()>,
    clarifying: Mutex<HashSet<String>>,
    pub(crate) story_busy: tokio::sync::Mutex<()>,
    pub(crate) insights_busy: tokio::sync::Mutex<()>,
}

/// Removes a clarify thread from the in-flight set when dropped.
pub struct ClarifyGuard<'a> {
    session: &'a Session,
    cell_id: String,
}

impl Drop for ClarifyGuard<'_> {
    fn drop(&mut self) {
        self.session.clarifying.lock().unwrap().remove(&self.cell_id);
    }
}

impl Session {
    fn new(dir: PathBuf, notebook: Notebook, data: SessionData, config: &ServiceConfig) -> Self {
        let gateway = match data.settings.gateway(&config.provider_env) {
            Ok(g) => Some(Arc::new(g)),
            Err(e) => {
                tracing::warn!(session = %data.id, "models unavailable: {e}");
                None
            }
        };
        Session {
            id: data.id.clone(),
            dir,
            notebook: Arc::new(RwLock::new(notebook)),
            data: Mutex::new(data),
            gateway: Mutex::new(gateway),
            executor: Arc::new(Executor::new(config.executor.clone())),
            run: Mutex::new(RunSlot { state: RunState::Idle, stop: None }),
            events: Arc::new(EventLog::default()),
            persist_lock: Mutex::new(()),
            clarifying: Mutex::new(HashSet::new()),
            story_busy: tokio::sync::Mutex::new(()),
            insights_busy: tokio::sync::Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Notebook {
        self.notebook.read().unwrap().clone()
    }

    pub fn data(&self) -> SessionData {
        self.data.lock().unwrap().clone()
    }

    pub fn settings(&self) -> Settings {
        self.data.lock().unwrap().settings.clone()
    }

    pub fn run_state(&self) -> RunState {
        self.run.lock().unwrap().state
    }

    pub fn gateway(&self) -> Result<Arc<Gateway>, ApiError> {
        self.gateway.lock().unwrap().clone().ok_or_else(|| {
            ApiError::new(
                axum::http::StatusCode::BAD_GATEWAY,
                "gateway_error",
                "the configured models could not be loaded; update settings",
            )
        })
    }

    /// Applies `f` to the session data and persists the result.
    pub fn update<R>(&self, f: impl FnOnce(&mut SessionData) -> R) -> Result<R, ApiError> {
        let mut data = self.data.lock().unwrap();
        let out = f(&mut data);
        self.persist_with(&data)?;
        Ok(out)
    }

    /// Runs `f` only while no run is active; a run cannot start meanwhile.
    fn while_idle<R>(&self, f: impl FnOnce() -> Result<R, ApiError>) -> Result<R, ApiError> {
        let run = self.run.lock().unwrap();
        if run.state != RunState::Idle {
            return Err(ApiError::run_active());
        }
        let out = f();
        drop(run);
        out
    }

    pub fn set_settings(&self, settings: Settings, env: &ProviderEnv) -> Result<(), ApiError> {
        settings.validate().map_err(ApiError::validation)?;
        let gateway = settings.gateway(env).map_err(|e| ApiError::validation(e.to_string()))?;
        self.while_idle(|| {
            *self.gateway.lock().unwrap() = Some(Arc::new(gateway));
            self.update(|d| d.settings = settings)
        })
    }

    pub fn replace_notebook(&self, nb: Notebook) -> Result<(), ApiError> {
        self.while_idle(|| {
            *self.notebook.write().unwrap() = nb.clone();
            self.update(|d| d.threads.sync_with(&nb))
        })
    }

    pub fn begin_clarify(&self, cell_id: &str) -> Result<ClarifyGuard<'_>, ApiError> {
        if !self.clarifying.lock().unwrap().insert(cell_id.to_string()) {
            return Err(ApiError::conflict("clarify_in_flight", format!("a question about cell {cell_id} is still being answered")));
        }
        Ok(ClarifyGuard { session: self, cell_id: cell_id.to_string() })
    }

    /// Writes notebook and state files atomically.
    pub fn persist(&self) -> Result<(), ApiError> {
        let data = self.data.lock().unwrap();
        self.persist_with(&data)
    }

    fn persist_with(&self, data: &SessionData) -> Result<(), ApiError> {
        let _guard = self.persist_lock.lock().unwrap();
        let notebook = serialize_notebook(&self.notebook.read().unwrap());
        let state = serde_json::to_vec_pretty(data).expect("state serializes");
        std::fs::create_dir_all(&self.dir)
            .and_then(|_| write_atomic(&self.dir.join(NOTEBOOK_FILE), &notebook))
            .and_then(|_| write_atomic(&self.dir.join(STATE_FILE), &state))
            .map_err(|e| {
                tracing::error!(session = %self.id, "persist failed: {e}");
                ApiError::internal(format!("could not save session: {e}"))
            })
    }

    /// Starts an EDA run in the background. Fails with 409 while another
    /// run is active.
    pub fn start_query(self: &Arc<Self>, query: String, config: &ServiceConfig) -> Result<u64, ApiError> {
        if query.trim().is_empty() {
            return Err(ApiError::validation("query text is empty"));
        }
        let gateway = self.gateway()?;
        let settings = self.settings();
        let token = CancellationToken::new();
        let run_id = {
            let mut run = self.run.lock().unwrap();
            if run.state != RunState::Idle {
                return Err(ApiError::run_active());
            }
            run.state = RunState::Running;
            run.stop = Some(token.clone());
            self.events.start_run()
        };
        tracing::info!(session = %self.id, run_id, "run started");

        let heartbeat_done = CancellationToken::new();
        tokio::spawn(heartbeat(self.clone(), run_id, config.heartbeat, heartbeat_done.clone()));

        let session = self.clone();
        let prompts = config.prompts.clone();
        tokio::spawn(async move {
            let agent = EdaAgent {
                gateway: &gateway,
                runner: session.executor.as_ref(),
                prompts: &prompts,
                config: settings.eda_config(),
            };
            let emit = |event: LoopEvent| session.record(run_id, event);
            let outcome = agent.run_query(&session.notebook, &query, &token, &emit).await;
            heartbeat_done.cancel();
            tracing::info!(session = %session.id, run_id, terminal = outcome.terminal.name(), "run finished");
        });
        Ok(run_id)
    }

    fn record(&self, run_id: u64, event: LoopEvent) {
        if matches!(event, LoopEvent::CellAppended { .. } | LoopEvent::ExecutionFinished { .. }) {
            let _ = self.persist();
        }
        if event.is_terminal() {
            // Go idle in the same critical section that logs the terminal
            // event, so a client reacting to it can start the next run.
            let _ = self.persist();
            let mut run = self.run.lock().unwrap();
            self.events.push_loop(run_id, &event);
            run.state = RunState::Idle;
            run.stop = None;
        } else {
            self.events.push_loop(run_id, &event);
        }
    }

    /// Requests a stop. Returns the run state after the request.
    pub fn stop(&self) -> RunState {
        let mut run = self.run.lock().unwrap();
        if let Some(token) = &run.stop {
            token.cancel();
            run.state = RunState::Stopping;
        }
        run.state
    }
}

async fn heartbeat(session: Arc<Session>, run_id: u64, every: Duration, done: CancellationToken) {
    let started = Instant::now();
    loop {
        tokio::select! {
            _ = done.cancelled() => return,
            _ = tokio::time::sleep(every) => {
                let cells = session.snapshot().len();
                if session.events.push_heartbeat(run_id, started.elapsed().as_millis() as u64, cells).is_none() {
                    return;
                }
            }
        }
    }
}

/// All sessions of one service.
pub struct Service {
    pub config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
}

impl Service {
    /// Creates the service and reloads sessions persisted in the state
    /// directory.
    pub fn new(config: ServiceConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(&config.state_dir)?;
        let mut sessions = BTreeMap::new();
        for entry in std::fs::read_dir(&config.state_dir)? {
            let dir = entry?.path();
            if !dir.join(STATE_FILE).is_file() {
                continue;
            }
            match load_session(&dir, &config) {
                Ok(session) => {
                    sessions.insert(session.id.clone(), Arc::new(session));
                }
                Err(e) => tracing::warn!("skipping {}: {e}", dir.display()),
            }
        }
        if !sessions.is_empty() {
            tracing::info!(count = sessions.len(), "restored sessions");
        }
        Ok(Service { config, sessions: RwLock::new(sessions) })
    }

    pub fn create(&self, notebook: Notebook) -> Result<Arc<Session>, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let data = SessionData {
            id: id.clone(),
            settings: self.config.default_settings.clone(),
            threads: ThreadStore::default(),
            story: None,
            graph: None,
        };
        let session = Arc::new(Session::new(self.config.state_dir.join(&id), notebook, data, &self.config));
        session.persist()?;
        self.sessions.write().unwrap().insert(id, session.clone());
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }
}

fn load_session(dir: &Path, config: &ServiceConfig) -> Result<Session, String> {
    let data: SessionData = serde_json::from_slice(&std::fs::read(dir.join(STATE_FILE)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let notebook = match std::fs::read(dir.join(NOTEBOOK_FILE)) {
        Ok(bytes) => parse_notebook(&bytes).map_err(|e| e.to_string())?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Notebook::new(),
        Err(e) => return Err(e.to_string()),
    };
    Ok(Session::new(dir.to_path_buf(), notebook, data, config))
}
