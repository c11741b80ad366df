//! Process layout. Single-process mode wires both gateways to in-memory
//! services. Multi-process mode runs each service as a child process of
//! the same executable and talks HTTP between all of them.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;

use axum::Router;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tokio::process::{Child, Command};
use tokio::sync::oneshot;

use crate::config::{ServiceConfig, ServiceName};
use crate::error::{ServiceError, ServiceResult};
use crate::http::{client_router, internal_router, service_router, ClientState};
use crate::internal::{worker_permits, InternalGateway, ServiceSet};
use crate::link::InternalLink;
use crate::orchestrator::Orchestrator;
use crate::stages::StageContext;
use crate::store::JobStore;

/// Line a service child prints once it accepts connections.
pub const READY_PREFIX: &str = "EYAS_LISTENING ";

pub enum Mode {
    SingleProcess,
    /// Children are started as `exe serve --role NAME [--config PATH]`.
    MultiProcess { exe: PathBuf, config_path: Option<PathBuf> },
}

pub struct RunningServer {
    pub client_addr: SocketAddr,
    pub internal_addr: SocketAddr,
    /// Base URL of each service (multi-process mode only).
    pub service_urls: BTreeMap<ServiceName, String>,
    shutdown: Vec<oneshot::Sender<()>>,
    children: Vec<Child>,
}

impl RunningServer {
    pub fn client_url(&self) -> String {
        format!("http://{}", self.client_addr)
    }

    pub fn internal_url(&self) -> String {
        format!("http://{}", self.internal_addr)
    }

    pub async fn stop(mut self) {
        for tx in self.shutdown.drain(..) {
            let _ = tx.send(());
        }
        for c in &mut self.children {
            let _ = c.kill().await;
        }
    }
}

fn io(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::internal(e.to_string())
}

async fn listen(bind: &str, port: u16) -> ServiceResult<TcpListener> {
    TcpListener::bind((bind, port))
        .await
        .map_err(|e| ServiceError::internal(format!("bind {bind}:{port}: {e}")))
}

fn spawn_router(listener: TcpListener, router: Router) -> oneshot::Sender<()> {
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(async move {
        let _ = axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    tx
}

fn stage_context(cfg: &ServiceConfig) -> Arc<StageContext> {
    Arc::new(StageContext {
        analysis: Arc::new(cfg.analysis.clone()),
        inject_failures: cfg.inject_failures.iter().copied().collect(),
    })
}

async fn spawn_child(exe: &PathBuf, config_path: &Option<PathBuf>, s: ServiceName, cfg: &ServiceConfig) -> ServiceResult<(Child, String)> {
    let mut cmd = Command::new(exe);
    cmd.arg("serve").arg("--role").arg(s.as_str());
    if let Some(p) = config_path {
        cmd.arg("--config").arg(p);
    }
    cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).kill_on_drop(true);
    let mut child = cmd.spawn().map_err(|e| io(format!("{}: {e}", exe.display())))?;
    let stdout = child.stdout.take().ok_or_else(|| io("child stdout"))?;
    let mut lines = BufReader::new(stdout).lines();
    let wait = async {
        while let Some(line) = lines.next_line().await.map_err(io)? {
            if let Some(addr) = line.strip_prefix(READY_PREFIX) {
                return Ok(format!("http://{}", addr.trim()));
            }
        }
        Err(io(format!("the {s} service exited before listening")))
    };
    let url = tokio::time::timeout(cfg.startup_timeout()?, wait)
        .await
        .map_err(|_| io(format!("the {s} service did not start in time")))??;
    // Keep draining so the child never blocks on a full pipe.
    tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
    Ok((child, url))
}

/// Starts both gateways (and, in multi-process mode, the services).
pub async fn start(cfg: ServiceConfig, mode: Mode) -> ServiceResult<RunningServer> {
    cfg.validate()?;
    let mut children = Vec::new();
    let mut shutdown = Vec::new();
    let mut service_urls = BTreeMap::new();
    let services = match &mode {
        Mode::SingleProcess => ServiceSet::Local {
            ctx: stage_context(&cfg),
            permits: worker_permits(),
        },
        Mode::MultiProcess { exe, config_path } => {
            for s in ServiceName::ALL {
                let url = match cfg.service_urls.get(&s) {
                    Some(u) => u.clone(),
                    None => {
                        let (child, url) = spawn_child(exe, config_path, s, &cfg).await?;
                        children.push(child);
                        url
                    }
                };
                service_urls.insert(s, url);
            }
            ServiceSet::Http {
                client: http_client(&cfg)?,
                urls: service_urls.clone(),
            }
        }
    };
    let gateway = Arc::new(InternalGateway::new(Arc::new(cfg.analysis.clone()), services));
    for d in &cfg.backends {
        gateway.register(d.clone())?;
    }
    let internal = listen(&cfg.bind, cfg.internal_port).await?;
    let internal_addr = internal.local_addr().map_err(io)?;
    shutdown.push(spawn_router(internal, internal_router(gateway.clone())));

    let link = match mode {
        Mode::SingleProcess => InternalLink::Local(gateway),
        Mode::MultiProcess { .. } => InternalLink::Http {
            client: http_client(&cfg)?,
            base: format!("http://{internal_addr}"),
        },
    };
    let store = Arc::new(JobStore::open(&cfg.data_dir).await?);
    let orchestrator = Arc::new(Orchestrator {
        link: link.clone(),
        store: store.clone(),
        onh_wait: cfg.onh_wait()?,
    });
    let state = Arc::new(ClientState {
        link,
        store,
        orchestrator,
        max_upload_bytes: cfg.max_upload_bytes,
    });
    let client = listen(&cfg.bind, cfg.client_port).await?;
    let client_addr = client.local_addr().map_err(io)?;
    shutdown.push(spawn_router(client, client_router(state, &cfg)));
    Ok(RunningServer {
        client_addr,
        internal_addr,
        service_urls,
        shutdown,
        children,
    })
}

fn http_client(cfg: &ServiceConfig) -> ServiceResult<reqwest::Client> {
    reqwest::Client::builder()
        .timeout(cfg.request_timeout()?)
        .build()
        .map_err(io)
}

/// Body of a service child process: serve until stdin closes.
pub async fn run_service(cfg: ServiceConfig, service: ServiceName) -> ServiceResult<()> {
    cfg.validate()?;
    let listener = listen(&cfg.bind, cfg.service_port(service)).await?;
    let addr = listener.local_addr().map_err(io)?;
    let router = service_router(stage_context(&cfg), service, worker_permits());
    let mut out = tokio::io::stdout();
    out.write_all(format!("{READY_PREFIX}{addr}\n").as_bytes()).await.map_err(io)?;
    out.flush().await.map_err(io)?;
    let parent_gone = async {
        let mut sink = Vec::new();
        let _ = tokio::io::stdin().read_to_end(&mut sink).await;
    };
    axum::serve(listener, router)
        .with_graceful_shutdown(parent_gone)
        .await
        .map_err(io)
}
