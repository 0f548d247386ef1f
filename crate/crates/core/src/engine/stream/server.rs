//! Writer-side plumbing: listeners, the chunk store and the data server.

use std::collections::BTreeMap;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::{self, JoinHandle};

use super::wake_listener;
use crate::engine::wire::{read_message, write_message, Message};
use crate::engine::{EngineConfig, EngineError, StoredChunk};
use crate::geometry::extract;
use crate::model::Region;

/// Binds a listener on the configured address and port range.
pub(crate) fn bind(cfg: &EngineConfig) -> Result<TcpListener, EngineError> {
    let Some((lo, hi)) = cfg.port_range else {
        return Ok(TcpListener::bind((cfg.bind_address.as_str(), 0))?);
    };
    let mut last = None;
    for port in lo..=hi {
        match TcpListener::bind((cfg.bind_address.as_str(), port)) {
            Ok(l) => return Ok(l),
            Err(e) => last = Some(e),
        }
    }
    Err(last.map_or_else(|| EngineError::Config("port_range is empty".into()), EngineError::Io))
}

pub(crate) fn endpoint(listener: &TcpListener) -> Result<String, EngineError> {
    Ok(listener.local_addr()?.to_string())
}

/// Chunks of every step this rank still has to serve.
#[derive(Clone, Default)]
pub(crate) struct Store(Arc<Mutex<BTreeMap<u64, Vec<StoredChunk>>>>);

impl Store {
    pub fn insert(&self, step: u64, chunks: Vec<StoredChunk>) {
        self.0.lock().unwrap().insert(step, chunks);
    }

    pub fn remove(&self, step: u64) {
        self.0.lock().unwrap().remove(&step);
    }

    fn lookup(&self, step: u64, dataset: &str, chunk: &Region, region: &Region) -> Result<Vec<u8>, String> {
        let found = {
            let map = self.0.lock().unwrap();
            let chunks = map.get(&step).ok_or_else(|| format!("step {step} is not held"))?;
            chunks
                .iter()
                .find(|c| c.dataset == dataset && c.region == *chunk)
                .cloned()
                .ok_or_else(|| format!("no chunk {chunk} of {dataset:?} in step {step}"))?
        };
        if !found.region.contains(region) {
            return Err(format!("{region} lies outside chunk {chunk}"));
        }
        if found.region == *region {
            return Ok(found.bytes.as_ref().clone());
        }
        Ok(extract(&found.region, &found.bytes, region, found.width as usize))
    }
}

#[derive(Default)]
struct ServerStats {
    connections: AtomicUsize,
    requests: AtomicU64,
}

/// Answers chunk requests for one writer rank.
pub(crate) struct DataServer {
    endpoint: String,
    listener: Arc<TcpListener>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    stats: Arc<ServerStats>,
}

impl DataServer {
    pub fn start(listener: TcpListener, store: Store) -> Result<Self, EngineError> {
        let endpoint = endpoint(&listener)?;
        let listener = Arc::new(listener);
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let stats = Arc::new(ServerStats::default());
        let accept = {
            let (listener, stop, conns, stats) = (listener.clone(), stop.clone(), conns.clone(), stats.clone());
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        return;
                    }
                    let Ok(conn) = conn else { continue };
                    let _ = conn.set_nodelay(true);
                    if let Ok(c) = conn.try_clone() {
                        conns.lock().unwrap().push(c);
                    }
                    let (store, stats) = (store.clone(), stats.clone());
                    thread::spawn(move || serve(conn, store, stats));
                }
            })
        };
        Ok(Self {
            endpoint,
            listener,
            stop,
            accept: Some(accept),
            conns,
            stats,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn connections(&self) -> usize {
        self.stats.connections.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> u64 {
        self.stats.requests.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        wake_listener(&self.listener);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

fn serve(mut conn: TcpStream, store: Store, stats: Arc<ServerStats>) {
    let Ok(mut out) = conn.try_clone() else { return };
    loop {
        match read_message(&mut conn) {
            Ok(Some((Message::RegisterData { .. }, _))) => {
                stats.connections.fetch_add(1, Ordering::SeqCst);
            }
            Ok(Some((
                Message::Request {
                    step,
                    chunk,
                    dataset,
                    chunk_region,
                    region,
                },
                _,
            ))) => {
                stats.requests.fetch_add(1, Ordering::SeqCst);
                let sent = match store.lookup(step, &dataset, &chunk_region, &region) {
                    Ok(bytes) => write_message(&mut out, &Message::Data { step, chunk, region }, &bytes),
                    Err(reason) => write_message(&mut out, &Message::Unavailable { step, chunk, reason }, &[]),
                };
                if sent.is_err() {
                    return;
                }
            }
            Ok(Some((Message::Close, _))) | Ok(None) | Err(_) => return,
            Ok(Some(_)) => {}
        }
    }
}

/// Queue of frames written to one connection by a dedicated thread, so
/// the leader never blocks on a slow peer while holding its lock.
pub(crate) struct Outbox {
    tx: mpsc::Sender<(Message, Arc<Vec<u8>>)>,
    thread: JoinHandle<()>,
}

impl Outbox {
    pub fn spawn(mut conn: TcpStream) -> Self {
        let (tx, rx) = mpsc::channel::<(Message, Arc<Vec<u8>>)>();
        let thread = thread::spawn(move || {
            for (msg, body) in rx {
                if write_message(&mut conn, &msg, &body).is_err() {
                    return;
                }
            }
        });
        Self { tx, thread }
    }

    pub fn send(&self, msg: Message, body: Arc<Vec<u8>>) {
        let _ = self.tx.send((msg, body));
    }

    pub fn send_empty(&self, msg: Message) {
        self.send(msg, Arc::default());
    }

    /// Flushes everything queued, then stops the writer thread.
    pub fn finish(self) {
        drop(self.tx);
        let _ = self.thread.join();
    }
}
