use std::collections::{BTreeMap, BTreeSet};
use std::net::{Shutdown, TcpStream};
use std::time::{Duration, Instant};

use super::connect_until;
use crate::distribution::RankMeta;
use crate::engine::contact::{wait_for_contact, ContactDocument};
use crate::engine::wire::{read_message, write_message, Message};
use crate::engine::{EngineConfig, EngineError, GroupSpec};
use crate::geometry::{copy_cells, intersect};
use crate::model::{decode_announcement, validate_region, Region, StepAnnouncement};

/// Stream engine reader handle of one rank of a reader group.
pub struct StreamReader {
    group: GroupSpec,
    contact: ContactDocument,
    control: TcpStream,
    data: BTreeMap<usize, TcpStream>,
    current: Option<StepAnnouncement>,
    roster: Vec<RankMeta>,
    last: Option<u64>,
    step_contacts: BTreeSet<usize>,
    ended: bool,
    timeout: Duration,
}

impl StreamReader {
    pub fn open(series: &str, group: &GroupSpec, cfg: &EngineConfig) -> Result<Self, EngineError> {
        let path = cfg.contact_path_for(series);
        let deadline = Instant::now() + cfg.rendezvous_timeout();
        let (contact, mut control) = loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let contact = wait_for_contact(&path, left)?;
            let retry = (Instant::now() + Duration::from_millis(200)).min(deadline);
            if let Some(c) = connect_until(&contact.control_endpoint, retry) {
                break (contact, c);
            }
            if Instant::now() >= deadline {
                return Err(EngineError::RendezvousTimeout(path));
            }
        };
        write_message(
            &mut control,
            &Message::RegisterReader {
                group: group.name.clone(),
                group_size: group.size,
                member: group.me.clone(),
            },
            &[],
        )?;
        Ok(Self {
            group: group.clone(),
            contact,
            control,
            data: BTreeMap::new(),
            current: None,
            roster: Vec::new(),
            last: None,
            step_contacts: BTreeSet::new(),
            ended: false,
            timeout: cfg.rendezvous_timeout(),
        })
    }

    pub fn me(&self) -> &RankMeta {
        &self.group.me
    }

    /// Reader group as registered with the writer, in rank order.
    pub fn roster(&self) -> Vec<RankMeta> {
        if self.roster.is_empty() {
            return vec![self.group.me.clone()];
        }
        self.roster.clone()
    }

    pub fn current(&self) -> Option<&StepAnnouncement> {
        self.current.as_ref()
    }

    pub fn contact(&self) -> &ContactDocument {
        &self.contact
    }

    /// Writer ranks this reader has opened data connections to.
    pub fn contacted_writers(&self) -> BTreeSet<usize> {
        self.data.keys().copied().collect()
    }

    pub fn next_step(&mut self) -> Result<Option<StepAnnouncement>, EngineError> {
        if self.current.is_some() {
            self.release_step()?;
        }
        if self.ended {
            return Ok(None);
        }
        loop {
            match read_message(&mut self.control) {
                Ok(Some((Message::Announce { step, roster }, body))) => {
                    if let Some(last) = self.last.filter(|&l| step <= l) {
                        return Err(EngineError::StepOrder { step, last });
                    }
                    let ann = decode_announcement(&body)?;
                    self.last = Some(step);
                    self.roster = roster;
                    self.current = Some(ann.clone());
                    return Ok(Some(ann));
                }
                Ok(Some((Message::Close, _))) => {
                    self.ended = true;
                    return Ok(None);
                }
                Ok(Some(_)) => {}
                Ok(None) => return Err(EngineError::ConnectionLost("writer closed the control connection".into())),
                Err(EngineError::Io(e)) => return Err(EngineError::ConnectionLost(e.to_string())),
                Err(e) => return Err(e),
            }
        }
    }

    fn data_conn(&mut self, writer: usize) -> Result<&mut TcpStream, EngineError> {
        if !self.data.contains_key(&writer) {
            let w = self
                .contact
                .writers
                .get(writer)
                .ok_or_else(|| EngineError::Protocol(format!("no writer rank {writer} in contact document")))?;
            let mut conn = connect_until(&w.data_endpoint, Instant::now() + self.timeout)
                .ok_or_else(|| EngineError::ConnectionLost(format!("cannot reach writer rank {writer}")))?;
            write_message(
                &mut conn,
                &Message::RegisterData {
                    group: self.group.name.clone(),
                    reader: self.group.me.rank,
                },
                &[],
            )?;
            self.data.insert(writer, conn);
        }
        Ok(self.data.get_mut(&writer).unwrap())
    }

    /// Loads `region` of `dataset`, fetching only the intersecting chunks.
    pub fn get_region(&mut self, dataset: &str, region: &Region) -> Result<Vec<u8>, EngineError> {
        let step = self.current.as_ref().ok_or(EngineError::OutsideStep)?;
        let decl = step
            .dataset(dataset)
            .ok_or_else(|| EngineError::UnknownDataset(dataset.to_owned()))?;
        validate_region(region, decl)?;
        let width = decl.elem().width() as usize;
        let step_index = step.step_index;
        let mut hits = Vec::new();
        for (i, c) in step.chunk_table.iter().enumerate() {
            if c.dataset == dataset {
                if let Some(sub) = intersect(&c.region, region)? {
                    hits.push((i, c.producer_rank, c.region.clone(), sub));
                }
            }
        }
        if hits.iter().map(|h| h.3.volume()).sum::<u64>() < region.volume() {
            return Err(EngineError::Unavailable {
                dataset: dataset.to_owned(),
                region: region.clone(),
            });
        }
        let mut out = vec![0u8; region.volume() as usize * width];
        for (chunk, writer, chunk_region, sub) in hits {
            let conn = self.data_conn(writer)?;
            let req = Message::Request {
                step: step_index,
                chunk,
                dataset: dataset.to_owned(),
                chunk_region,
                region: sub.clone(),
            };
            let lost = |e: std::io::Error| EngineError::ConnectionLost(e.to_string());
            write_message(conn, &req, &[]).map_err(lost)?;
            match read_message(conn)? {
                Some((Message::Data { region: got, .. }, bytes)) => {
                    if got != sub || bytes.len() != sub.volume() as usize * width {
                        return Err(EngineError::Protocol(format!("writer {writer} answered with the wrong region")));
                    }
                    copy_cells(&sub, &bytes, region, &mut out, &sub, width);
                }
                Some((Message::Unavailable { reason, .. }, _)) => {
                    log::debug!("writer {writer}: {reason}");
                    return Err(EngineError::Unavailable {
                        dataset: dataset.to_owned(),
                        region: sub,
                    });
                }
                Some((other, _)) => return Err(EngineError::Protocol(format!("unexpected reply {other:?}"))),
                None => return Err(EngineError::ConnectionLost(format!("writer {writer} hung up"))),
            }
            self.step_contacts.insert(writer);
        }
        Ok(out)
    }

    /// Tells the control endpoint and every writer contacted in this step
    /// that this rank is done with it.
    pub fn release_step(&mut self) -> Result<(), EngineError> {
        let Some(step) = self.current.take() else {
            return Ok(());
        };
        let msg = Message::Release {
            step: step.step_index,
            group: self.group.name.clone(),
            reader: self.group.me.rank,
        };
        for w in std::mem::take(&mut self.step_contacts) {
            if let Some(c) = self.data.get_mut(&w) {
                let _ = write_message(c, &msg, &[]);
            }
        }
        if self.ended {
            return Ok(());
        }
        write_message(&mut self.control, &msg, &[]).map_err(|e| EngineError::ConnectionLost(e.to_string()))
    }

    pub fn close(mut self) -> Result<(), EngineError> {
        let res = self.release_step();
        if !self.ended {
            let _ = write_message(&mut self.control, &Message::Close, &[]);
        }
        for (_, mut c) in std::mem::take(&mut self.data) {
            let _ = write_message(&mut c, &Message::Close, &[]);
            let _ = c.shutdown(Shutdown::Both);
        }
        let _ = self.control.shutdown(Shutdown::Write);
        res
    }
}
