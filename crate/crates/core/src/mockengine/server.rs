//! Loopback HTTP front end for [`MockEngine`] and a replay client.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use super::{planned_requests, MockEngine, PlannedRequest, REMOTE_ADDR_HEADER};
use crate::sidechannel::{EngineTemplate, SearchTrace};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("engine at {addr} unreachable: {message}")]
    Unreachable { addr: String, message: String },
    #[error("engine answered {status} for {url}")]
    Status { status: u16, url: String },
    #[error("cannot bind engine on {addr}: {message}")]
    Bind { addr: String, message: String },
}

pub struct EngineServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
}

impl EngineServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves requests
    /// on `workers` threads.
    pub fn start(engine: Arc<MockEngine>, addr: &str, workers: usize) -> Result<Self, ReplayError> {
        let server = tiny_http::Server::http(addr).map_err(|e| ReplayError::Bind {
            addr: addr.to_string(),
            message: e.to_string(),
        })?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| ReplayError::Bind {
                addr: addr.to_string(),
                message: "not an IP listener".into(),
            })?;
        let server = Arc::new(server);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let engine = Arc::clone(&engine);
                std::thread::spawn(move || {
                    while let Ok(request) = server.recv() {
                        serve_one(&engine, request);
                    }
                })
            })
            .collect();
        Ok(EngineServer {
            addr: bound,
            server,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for EngineServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_one(engine: &MockEngine, request: tiny_http::Request) {
    let mut headers: BTreeMap<String, String> = request
        .headers()
        .iter()
        .map(|h| (h.field.as_str().as_str().to_ascii_lowercase(), h.value.as_str().to_string()))
        .collect();
    if let Some(peer) = request.remote_addr() {
        headers.insert(REMOTE_ADDR_HEADER.to_string(), peer.ip().to_string());
    }
    // client-library bookkeeping headers are not part of the footprint
    for h in ["host", "accept-encoding", "connection", "accept"] {
        headers.remove(h);
    }
    let response = engine.handle(request.url(), &headers);
    let mut out = tiny_http::Response::from_data(response.body).with_status_code(response.status);
    for (k, v) in response.headers {
        if let Ok(h) = tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()) {
            out.add_header(h);
        }
    }
    let _ = request.respond(out);
}

pub struct EngineClient {
    agent: ureq::Agent,
    base: String,
}

impl EngineClient {
    pub fn new(addr: &str) -> Self {
        let agent = ureq::AgentBuilder::new()
            .redirects(0)
            .timeout(Duration::from_secs(10))
            .user_agent("")
            .build();
        EngineClient {
            agent,
            base: format!("http://{addr}"),
        }
    }

    /// Checks that something answers HTTP at the address.
    pub fn ping(&self) -> Result<(), ReplayError> {
        match self.agent.get(&format!("{}/favicon.ico", self.base)).call() {
            Ok(_) | Err(ureq::Error::Status(..)) => Ok(()),
            Err(e) => Err(ReplayError::Unreachable {
                addr: self.base.clone(),
                message: e.to_string(),
            }),
        }
    }

    pub fn send(&self, req: &PlannedRequest) -> Result<u16, ReplayError> {
        let mut call = self.agent.get(&format!("{}{}", self.base, req.url));
        for (k, v) in &req.headers {
            call = call.set(k, v);
        }
        match call.call() {
            Ok(resp) => {
                let status = resp.status();
                let _ = resp.into_string();
                Ok(status)
            }
            Err(ureq::Error::Status(status, _)) => Err(ReplayError::Status {
                status,
                url: req.url.clone(),
            }),
            Err(e) => Err(ReplayError::Unreachable {
                addr: self.base.clone(),
                message: e.to_string(),
            }),
        }
    }
}

/// Replays traces over HTTP, one request at a time in trace order.
pub fn replay_http(client: &EngineClient, traces: &[SearchTrace], template: &EngineTemplate) -> Result<usize, ReplayError> {
    let mut sent = 0;
    for trace in traces {
        for req in planned_requests(trace, template) {
            client.send(&req)?;
            sent += 1;
        }
    }
    Ok(sent)
}
