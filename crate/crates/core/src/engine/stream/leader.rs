//! Step queue and registrations, run by writer rank 0.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::server::{bind, endpoint, Outbox, Store};
use super::wake_listener;
use crate::distribution::RankMeta;
use crate::engine::contact::{
    leader_note_path, write_atomic, ContactDocument, LeaderNote, WriterContact, CONTACT_VERSION,
};
use crate::engine::wire::{read_message, Message};
use crate::engine::{merge_parts, EngineConfig, EngineError, GroupSpec, QueuePolicy, StepOutcome};
use crate::model::{decode_announcement, encode_announcement, StepAnnouncement};

struct Staged {
    step: u64,
    parts: BTreeMap<usize, StepAnnouncement>,
    /// Encoded merged announcement, once every writer rank contributed.
    body: Option<Arc<Vec<u8>>>,
    delivered: BTreeSet<String>,
    released: BTreeMap<String, BTreeSet<usize>>,
}

struct Member {
    meta: RankMeta,
    out: Outbox,
}

struct Group {
    size: usize,
    members: BTreeMap<usize, Member>,
    departed: BTreeSet<usize>,
    last: Option<u64>,
}

impl Group {
    fn live(&self) -> bool {
        self.members.len() == self.size && self.departed.is_empty()
    }

    fn done_with(&self, released: Option<&BTreeSet<usize>>) -> bool {
        (0..self.size).all(|r| self.departed.contains(&r) || released.is_some_and(|s| s.contains(&r)))
    }
}

struct State {
    writers: Vec<Option<WriterContact>>,
    peers: BTreeMap<usize, Outbox>,
    peers_done: BTreeSet<usize>,
    queue: VecDeque<Staged>,
    pending: BTreeMap<u64, BTreeMap<usize, StepAnnouncement>>,
    discarded: BTreeSet<u64>,
    groups: BTreeMap<String, Group>,
    sockets: Vec<TcpStream>,
    closing: bool,
    max_queue_len: usize,
}

struct Shared {
    state: Mutex<State>,
    cond: Condvar,
    store: Store,
    writer_count: usize,
}

pub(super) struct Leader {
    shared: Arc<Shared>,
    depth: usize,
    policy: QueuePolicy,
    listener: Arc<TcpListener>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    contact: PathBuf,
    note: PathBuf,
}

impl Leader {
    pub fn open(
        series: &str,
        group: &GroupSpec,
        cfg: &EngineConfig,
        contact: &Path,
        data_endpoint: &str,
        store: Store,
    ) -> Result<Self, EngineError> {
        let note = leader_note_path(contact);
        for stale in [contact, note.as_path()] {
            match std::fs::remove_file(stale) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        let listener = Arc::new(bind(cfg)?);
        let control_endpoint = endpoint(&listener)?;
        let mut writers = vec![None; group.size];
        writers[0] = Some(WriterContact {
            rank: 0,
            hostname: group.me.hostname.clone(),
            data_endpoint: data_endpoint.to_owned(),
        });
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                writers,
                peers: BTreeMap::new(),
                peers_done: BTreeSet::new(),
                queue: VecDeque::new(),
                pending: BTreeMap::new(),
                discarded: BTreeSet::new(),
                groups: BTreeMap::new(),
                sockets: Vec::new(),
                closing: false,
                max_queue_len: 0,
            }),
            cond: Condvar::new(),
            store,
            writer_count: group.size,
        });
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let (listener, stop, shared) = (listener.clone(), stop.clone(), shared.clone());
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        return;
                    }
                    let Ok(conn) = conn else { continue };
                    let _ = conn.set_nodelay(true);
                    let shared = shared.clone();
                    thread::spawn(move || shared.handle(conn));
                }
            })
        };
        let mut leader = Self {
            shared,
            depth: cfg.queue_depth,
            policy: cfg.queue_policy,
            listener,
            stop,
            accept: Some(accept),
            contact: contact.to_owned(),
            note: note.clone(),
        };

        if group.size > 1 {
            write_atomic(
                &note,
                &LeaderNote {
                    version: CONTACT_VERSION,
                    control_endpoint: control_endpoint.clone(),
                },
            )?;
            let deadline = Instant::now() + cfg.rendezvous_timeout();
            let joined = leader
                .shared
                .wait_until(deadline, |s| s.writers.iter().all(Option::is_some))
                .is_some();
            if !joined {
                leader.stop_accepting();
                let _ = std::fs::remove_file(&note);
                return Err(EngineError::RendezvousTimeout(note));
            }
        }
        let writers = {
            let st = leader.shared.state.lock().unwrap();
            st.writers.iter().map(|w| w.clone().unwrap()).collect()
        };
        write_atomic(
            contact,
            &ContactDocument {
                version: CONTACT_VERSION,
                series: series.to_owned(),
                writer_group_size: group.size,
                writers,
                control_endpoint,
            },
        )?;
        Ok(leader)
    }

    pub fn queue_lengths(&self) -> (usize, usize) {
        let st = self.shared.state.lock().unwrap();
        (st.queue.len(), st.max_queue_len)
    }

    pub fn wait_for_readers(&self, groups: usize, timeout: Duration) -> Result<(), EngineError> {
        let ok = self
            .shared
            .wait_until(Instant::now() + timeout, |s| s.groups.values().filter(|g| g.live()).count() >= groups);
        ok.map(drop).ok_or_else(|| EngineError::RendezvousTimeout(self.contact.clone()))
    }

    pub fn end_step(&mut self, ann: StepAnnouncement) -> Result<StepOutcome, EngineError> {
        let step = ann.step_index;
        let mut st = self.shared.state.lock().unwrap();
        if st.queue.len() >= self.depth {
            match self.policy {
                QueuePolicy::Discard => {
                    st.discarded.insert(step);
                    for rank in st.pending.remove(&step).unwrap_or_default().into_keys() {
                        st.outcome(rank, step, StepOutcome::Discarded);
                    }
                    return Ok(StepOutcome::Discarded);
                }
                QueuePolicy::Block => {
                    while st.queue.len() >= self.depth {
                        st = self.shared.cond.wait(st).unwrap();
                    }
                }
            }
        }
        let mut parts = st.pending.remove(&step).unwrap_or_default();
        for &rank in parts.keys() {
            st.outcome(rank, step, StepOutcome::Published);
        }
        parts.insert(0, ann);
        st.queue.push_back(Staged {
            step,
            parts,
            body: None,
            delivered: BTreeSet::new(),
            released: BTreeMap::new(),
        });
        st.max_queue_len = st.max_queue_len.max(st.queue.len());
        self.shared.progress(&mut st)?;
        Ok(StepOutcome::Published)
    }

    pub fn close(mut self) -> Result<(), EngineError> {
        let mut st = self.shared.state.lock().unwrap();
        st.closing = true;
        // steps the leader never reached cannot be published
        for (step, parts) in std::mem::take(&mut st.pending) {
            for rank in parts.into_keys() {
                st.outcome(rank, step, StepOutcome::Discarded);
            }
        }
        let peers = self.shared.writer_count - 1;
        while st.peers_done.len() < peers {
            st = self.shared.cond.wait(st).unwrap();
        }
        loop {
            self.shared.free_released(&mut st);
            if st.queue.iter().all(|s| s.delivered.is_empty()) {
                break;
            }
            st = self.shared.cond.wait(st).unwrap();
        }
        let groups = std::mem::take(&mut st.groups);
        let peers = std::mem::take(&mut st.peers);
        let sockets = std::mem::take(&mut st.sockets);
        for step in st.queue.drain(..).map(|s| s.step) {
            self.shared.store.remove(step);
        }
        drop(st);
        for m in groups.into_values().flat_map(|g| g.members.into_values()) {
            m.out.send_empty(Message::Close);
            m.out.finish();
        }
        for p in peers.into_values() {
            p.send_empty(Message::Close);
            p.finish();
        }
        for s in sockets {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.stop_accepting();
        let _ = std::fs::remove_file(&self.contact);
        let _ = std::fs::remove_file(&self.note);
        Ok(())
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        wake_listener(&self.listener);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl State {
    fn outcome(&self, rank: usize, step: u64, outcome: StepOutcome) {
        if let Some(p) = self.peers.get(&rank) {
            p.send_empty(Message::Outcome { step, outcome });
        }
    }
}

impl Shared {
    fn wait_until(&self, deadline: Instant, mut ready: impl FnMut(&State) -> bool) -> Option<MutexGuard<'_, State>> {
        let mut st = self.state.lock().unwrap();
        while !ready(&st) {
            let left = deadline.checked_duration_since(Instant::now())?;
            st = self.cond.wait_timeout(st, left).unwrap().0;
        }
        Some(st)
    }

    /// Finalizes complete steps and announces them.
    fn progress(&self, st: &mut State) -> Result<(), EngineError> {
        let mut res = Ok(());
        for staged in st.queue.iter_mut() {
            if staged.body.is_none() && staged.parts.len() == self.writer_count {
                match merge_parts(staged.step, staged.parts.values()).and_then(|m| Ok(encode_announcement(&m)?)) {
                    Ok(body) => staged.body = Some(Arc::new(body)),
                    Err(e) => {
                        log::error!("step {} cannot be merged: {e}", staged.step);
                        res = Err(e);
                    }
                }
            }
        }
        self.pump(st);
        res
    }

    /// Announces finalized steps to every live reader group, in order.
    fn pump(&self, st: &mut State) {
        let State { groups, queue, .. } = st;
        for (name, group) in groups.iter_mut().filter(|(_, g)| g.live()) {
            let roster: Vec<RankMeta> = group.members.values().map(|m| m.meta.clone()).collect();
            for staged in queue.iter_mut() {
                if group.last.is_some_and(|l| staged.step <= l) {
                    continue;
                }
                let Some(body) = &staged.body else { break };
                for m in group.members.values() {
                    m.out.send(
                        Message::Announce {
                            step: staged.step,
                            roster: roster.clone(),
                        },
                        body.clone(),
                    );
                }
                staged.delivered.insert(name.clone());
                group.last = Some(staged.step);
            }
        }
    }

    /// Frees steps every receiving group has released.
    fn free_released(&self, st: &mut State) {
        let State { groups, queue, peers, .. } = st;
        let before = queue.len();
        queue.retain(|s| {
            let done = !s.delivered.is_empty()
                && s.delivered.iter().all(|g| groups.get(g).is_none_or(|grp| grp.done_with(s.released.get(g))));
            if done {
                for p in peers.values() {
                    p.send_empty(Message::Free { step: s.step });
                }
                self.store.remove(s.step);
            }
            !done
        });
        if queue.len() != before {
            self.cond.notify_all();
        }
    }

    fn handle(self: Arc<Self>, mut conn: TcpStream) {
        let first = match read_message(&mut conn) {
            Ok(Some((msg, _))) => msg,
            _ => return,
        };
        let Ok(out) = conn.try_clone() else { return };
        match first {
            Message::RegisterReader {
                group,
                group_size,
                member,
            } => {
                let rank = member.rank;
                if !self.register_reader(&group, group_size, member, out, &conn) {
                    return;
                }
                loop {
                    match read_message(&mut conn) {
                        Ok(Some((Message::Release { step, group: g, reader }, _))) => self.release(step, &g, reader),
                        Ok(Some((Message::Close, _))) | Ok(None) | Err(_) => break,
                        Ok(Some(_)) => {}
                    }
                }
                self.depart(&group, rank);
            }
            Message::RegisterWriter { member, data_endpoint } => {
                let rank = member.rank;
                {
                    let mut st = self.state.lock().unwrap();
                    if rank == 0 || rank >= self.writer_count || st.writers[rank].is_some() {
                        log::warn!("rejecting writer registration for rank {rank}");
                        return;
                    }
                    st.writers[rank] = Some(WriterContact {
                        rank,
                        hostname: member.hostname,
                        data_endpoint,
                    });
                    st.peers.insert(rank, Outbox::spawn(out));
                    if let Ok(c) = conn.try_clone() {
                        st.sockets.push(c);
                    }
                    self.cond.notify_all();
                }
                loop {
                    match read_message(&mut conn) {
                        Ok(Some((Message::Contribute { step }, body))) => match decode_announcement(&body) {
                            Ok(ann) => self.contribute(rank, step, ann),
                            Err(e) => log::error!("bad contribution from writer rank {rank}: {e}"),
                        },
                        Ok(Some((Message::Close, _))) | Ok(None) | Err(_) => break,
                        Ok(Some(_)) => {}
                    }
                }
                let mut st = self.state.lock().unwrap();
                st.peers_done.insert(rank);
                self.cond.notify_all();
            }
            other => log::warn!("unexpected first message on control endpoint: {other:?}"),
        }
    }

    fn register_reader(&self, name: &str, size: usize, member: RankMeta, out: TcpStream, conn: &TcpStream) -> bool {
        let mut st = self.state.lock().unwrap();
        let out = Outbox::spawn(out);
        if st.closing {
            out.send_empty(Message::Close);
            return false;
        }
        let group = st.groups.entry(name.to_owned()).or_insert_with(|| Group {
            size,
            members: BTreeMap::new(),
            departed: BTreeSet::new(),
            last: None,
        });
        if group.size != size || member.rank >= size || group.members.contains_key(&member.rank) {
            log::warn!("rejecting reader {} of group {name:?}", member.rank);
            return false;
        }
        group.members.insert(member.rank, Member { meta: member, out });
        if let Ok(c) = conn.try_clone() {
            st.sockets.push(c);
        }
        self.pump(&mut st);
        self.cond.notify_all();
        true
    }

    fn release(&self, step: u64, group: &str, reader: usize) {
        let mut st = self.state.lock().unwrap();
        if let Some(s) = st.queue.iter_mut().find(|s| s.step == step && s.delivered.contains(group)) {
            s.released.entry(group.to_owned()).or_default().insert(reader);
            self.free_released(&mut st);
        }
    }

    fn depart(&self, group: &str, rank: usize) {
        let mut st = self.state.lock().unwrap();
        let Some(g) = st.groups.get_mut(group) else { return };
        g.departed.insert(rank);
        if g.members.keys().all(|r| g.departed.contains(r)) {
            st.groups.remove(group);
            for s in st.queue.iter_mut() {
                s.delivered.remove(group);
                s.released.remove(group);
            }
        }
        self.free_released(&mut st);
        self.cond.notify_all();
    }

    fn contribute(&self, rank: usize, step: u64, ann: StepAnnouncement) {
        let mut st = self.state.lock().unwrap();
        if let Some(s) = st.queue.iter_mut().find(|s| s.step == step) {
            s.parts.insert(rank, ann);
            st.outcome(rank, step, StepOutcome::Published);
            let _ = self.progress(&mut st);
        } else if st.discarded.contains(&step) || st.closing {
            st.outcome(rank, step, StepOutcome::Discarded);
        } else {
            st.pending.entry(step).or_default().insert(rank, ann);
        }
    }
}
