//! Staging stream over TCP sockets.
//!
//! Writer rank 0 leads: it owns the step queue, takes registrations from
//! readers and from the other writer ranks, and announces each step once
//! every writer rank has contributed its share. Every writer rank serves
//! its own chunks from memory on a data endpoint until the leader tells
//! it the step was freed. Readers open data connections lazily, only to
//! the writer ranks whose chunks they actually load.

mod leader;
mod reader;
mod server;

use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

pub use reader::StreamReader;

use self::leader::Leader;
use self::server::{bind, DataServer, Store};
use super::contact::{leader_note_path, wait_for, LeaderNote, CONTACT_VERSION};
use super::wire::{read_message, write_message, Message};
use super::{EngineConfig, EngineError, GroupSpec, StepBuilder, StepOutcome};
use crate::distribution::RankMeta;
use crate::model::{encode_announcement, AttrValue, DatasetDecl, Region};

/// Counters of one writer rank.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WriterStats {
    pub published: u64,
    pub discarded: u64,
    /// Steps currently staged. Known on the leading rank only.
    pub queue_len: usize,
    /// Highest number of steps ever staged at once. Leading rank only.
    pub max_queue_len: usize,
    /// Data connections accepted from readers.
    pub data_connections: usize,
    pub requests_served: u64,
}

enum Role {
    Leader(Leader),
    Peer(Peer),
}

/// Stream engine writer handle of one rank.
pub struct StreamWriter {
    me: RankMeta,
    role: Role,
    store: Store,
    data: DataServer,
    step: Option<StepBuilder>,
    last: Option<u64>,
    published: u64,
    discarded: u64,
}

impl StreamWriter {
    pub fn open(series: &str, group: &GroupSpec, cfg: &EngineConfig) -> Result<Self, EngineError> {
        let store = Store::default();
        let contact = cfg.contact_path_for(series);
        let data = DataServer::start(bind(cfg)?, store.clone())?;
        let role = if group.me.rank == 0 {
            Role::Leader(Leader::open(series, group, cfg, &contact, data.endpoint(), store.clone())?)
        } else {
            Role::Peer(Peer::join(group, cfg, &contact, data.endpoint(), store.clone())?)
        };
        Ok(Self {
            me: group.me.clone(),
            role,
            store,
            data,
            step: None,
            last: None,
            published: 0,
            discarded: 0,
        })
    }

    pub fn me(&self) -> &RankMeta {
        &self.me
    }

    pub fn stats(&self) -> WriterStats {
        let mut s = WriterStats {
            published: self.published,
            discarded: self.discarded,
            data_connections: self.data.connections(),
            requests_served: self.data.requests(),
            ..Default::default()
        };
        if let Role::Leader(l) = &self.role {
            (s.queue_len, s.max_queue_len) = l.queue_lengths();
        }
        s
    }

    /// Waits until `groups` reader groups are fully registered. Only the
    /// leading rank tracks readers; other ranks return at once.
    pub fn wait_for_readers(&self, groups: usize, timeout: Duration) -> Result<(), EngineError> {
        match &self.role {
            Role::Leader(l) => l.wait_for_readers(groups, timeout),
            Role::Peer(_) => Ok(()),
        }
    }

    pub fn begin_step(&mut self, step: u64) -> Result<(), EngineError> {
        if self.step.is_some() {
            return Err(EngineError::StepOpen);
        }
        if let Some(last) = self.last.filter(|&l| step <= l) {
            return Err(EngineError::StepOrder { step, last });
        }
        self.step = Some(StepBuilder::new(step));
        Ok(())
    }

    pub fn declare(&mut self, decl: &DatasetDecl) -> Result<(), EngineError> {
        self.step.as_mut().ok_or(EngineError::OutsideStep)?.declare(decl)
    }

    pub fn set_attribute(&mut self, key: &str, value: AttrValue) -> Result<(), EngineError> {
        let b = self.step.as_mut().ok_or(EngineError::OutsideStep)?;
        b.ann.attributes.insert(key.to_owned(), value);
        Ok(())
    }

    pub fn put_chunk(&mut self, decl: &DatasetDecl, region: Region, payload: Vec<u8>) -> Result<(), EngineError> {
        let me = self.me.clone();
        self.step.as_mut().ok_or(EngineError::OutsideStep)?.put(&me, decl, region, payload)
    }

    /// Stages the step without waiting for readers. A full queue either
    /// drops this step or waits for a slot, depending on the policy.
    pub fn end_step(&mut self) -> Result<StepOutcome, EngineError> {
        let b = self.step.take().ok_or(EngineError::OutsideStep)?;
        let step = b.ann.step_index;
        self.last = Some(step);
        self.store.insert(step, b.chunks);
        let outcome = match &mut self.role {
            Role::Leader(l) => l.end_step(b.ann),
            Role::Peer(p) => p.contribute(step, &encode_announcement(&b.ann)?),
        };
        if !matches!(outcome, Ok(StepOutcome::Published)) {
            self.store.remove(step);
        }
        let outcome = outcome?;
        match outcome {
            StepOutcome::Discarded => self.discarded += 1,
            _ => self.published += 1,
        }
        Ok(outcome)
    }

    /// Waits until readers have released every announced step, then ends
    /// the stream.
    pub fn close(self) -> Result<(), EngineError> {
        if self.step.is_some() {
            return Err(EngineError::StepOpen);
        }
        let res = match self.role {
            Role::Leader(l) => l.close(),
            Role::Peer(p) => p.close(),
        };
        self.data.shutdown();
        res
    }
}

/// Connects to `endpoint`, retrying until `deadline` so a listener that is
/// still starting up (or a stale rendezvous file) is tolerated.
pub(crate) fn connect_until(endpoint: &str, deadline: Instant) -> Option<TcpStream> {
    loop {
        if let Ok(s) = TcpStream::connect(endpoint) {
            let _ = s.set_nodelay(true);
            return Some(s);
        }
        if Instant::now() >= deadline {
            return None;
        }
        thread::sleep(Duration::from_millis(20));
    }
}

enum PeerEvent {
    Outcome(u64, StepOutcome),
    Closed,
}

/// A non-leading writer rank's link to the leader.
struct Peer {
    control: TcpStream,
    events: mpsc::Receiver<PeerEvent>,
    listener: Option<thread::JoinHandle<()>>,
}

impl Peer {
    fn join(
        group: &GroupSpec,
        cfg: &EngineConfig,
        contact: &std::path::Path,
        data_endpoint: &str,
        store: Store,
    ) -> Result<Self, EngineError> {
        let note_path = leader_note_path(contact);
        let deadline = Instant::now() + cfg.rendezvous_timeout();
        let mut control = loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let note: LeaderNote = wait_for(&note_path, left)?;
            if note.version != CONTACT_VERSION {
                return Err(EngineError::VersionMismatch {
                    found: note.version,
                    expected: CONTACT_VERSION,
                });
            }
            // a stale note from an earlier run points at a dead endpoint
            let retry = (Instant::now() + Duration::from_millis(200)).min(deadline);
            if let Some(s) = connect_until(&note.control_endpoint, retry) {
                break s;
            }
            if Instant::now() >= deadline {
                return Err(EngineError::RendezvousTimeout(note_path));
            }
        };
        write_message(
            &mut control,
            &Message::RegisterWriter {
                member: group.me.clone(),
                data_endpoint: data_endpoint.to_owned(),
            },
            &[],
        )?;
        let (tx, events) = mpsc::channel();
        let mut incoming = control.try_clone()?;
        let listener = thread::spawn(move || loop {
            match read_message(&mut incoming) {
                Ok(Some((Message::Outcome { step, outcome }, _))) => {
                    if tx.send(PeerEvent::Outcome(step, outcome)).is_err() {
                        return;
                    }
                }
                Ok(Some((Message::Free { step }, _))) => store.remove(step),
                Ok(Some((Message::Close, _))) => {
                    let _ = tx.send(PeerEvent::Closed);
                    return;
                }
                Ok(Some(_)) => {}
                Ok(None) | Err(_) => return,
            }
        });
        Ok(Self {
            control,
            events,
            listener: Some(listener),
        })
    }

    fn contribute(&mut self, step: u64, ann: &[u8]) -> Result<StepOutcome, EngineError> {
        write_message(&mut self.control, &Message::Contribute { step }, ann)
            .map_err(|e| EngineError::ConnectionLost(e.to_string()))?;
        loop {
            match self.events.recv() {
                Ok(PeerEvent::Outcome(s, o)) if s == step => return Ok(o),
                Ok(PeerEvent::Outcome(..)) => {}
                Ok(PeerEvent::Closed) | Err(_) => {
                    return Err(EngineError::ConnectionLost("leader went away during end_step".into()))
                }
            }
        }
    }

    fn close(mut self) -> Result<(), EngineError> {
        write_message(&mut self.control, &Message::Close, &[])
            .map_err(|e| EngineError::ConnectionLost(e.to_string()))?;
        let res = loop {
            match self.events.recv() {
                Ok(PeerEvent::Closed) => break Ok(()),
                Ok(PeerEvent::Outcome(..)) => {}
                Err(_) => break Err(EngineError::ConnectionLost("leader went away during close".into())),
            }
        };
        let _ = self.control.shutdown(std::net::Shutdown::Both);
        if let Some(h) = self.listener.take() {
            let _ = h.join();
        }
        res
    }
}

/// Wakes a thread blocked in `accept` so it can notice a shutdown flag.
pub(crate) fn wake_listener(listener: &TcpListener) {
    if let Ok(addr) = listener.local_addr() {
        let _ = TcpStream::connect(addr);
    }
}
