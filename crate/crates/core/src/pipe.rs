//! Copies a series step by step from one engine to one or more others.
//!
//! Each pipe rank loads the slabs the strategy gives it and re-publishes
//! them unchanged as its own chunks, so the sink sees the same alignment
//! the source had. Loading the next step overlaps writing the previous
//! one; at most two steps are in flight.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::StrategySpec;
use crate::engine::{open_reader, open_writer, EngineConfig, EngineError, GroupSpec, LoadedSlab, Writer};
use crate::model::StepAnnouncement;

/// A series together with the engine that reads or writes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub series: String,
    pub config: EngineConfig,
}

impl Endpoint {
    pub fn new(series: impl Into<String>, config: EngineConfig) -> Self {
        Self {
            series: series.into(),
            config,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipeSpec {
    pub source: Endpoint,
    pub sinks: Vec<Endpoint>,
    /// How pipe ranks split each source step among themselves.
    pub strategy: StrategySpec,
    /// This pipe instance; the same group reads the source and writes the sinks.
    pub group: GroupSpec,
}

#[derive(Debug, Error)]
pub enum PipeError {
    #[error("a pipe needs at least one sink")]
    NoSinks,
    #[error("series {0:?} is used more than once")]
    SameSeries(String),
    #[error("source: {0}")]
    Source(#[source] EngineError),
    #[error("sink {index}: {source}")]
    Sink {
        index: usize,
        #[source]
        source: EngineError,
    },
    #[error("report: {0}")]
    Report(#[from] std::io::Error),
}

impl PipeSpec {
    pub fn validate(&self) -> Result<(), PipeError> {
        if self.sinks.is_empty() {
            return Err(PipeError::NoSinks);
        }
        let mut seen = vec![normalize(&self.source.series)];
        for s in &self.sinks {
            let n = normalize(&s.series);
            if seen.contains(&n) {
                return Err(PipeError::SameSeries(s.series.clone()));
            }
            seen.push(n);
        }
        self.strategy
            .validate()
            .map_err(|e| PipeError::Source(EngineError::Distribution(e)))
    }
}

fn normalize(series: &str) -> std::path::PathBuf {
    let p = Path::new(series);
    match (p.parent(), p.file_name()) {
        (Some(dir), Some(name)) if !dir.as_os_str().is_empty() => {
            dir.canonicalize().unwrap_or_else(|_| dir.to_owned()).join(name)
        }
        _ => std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_owned()),
    }
}

/// Timing of one copied step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub bytes: u64,
    pub load_s: f64,
    pub store_s: f64,
    /// Wall clock time the sinks finished the step.
    #[serde(skip)]
    pub finished_at: Option<SystemTime>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipeReport {
    pub steps: Vec<StepRecord>,
}

impl PipeReport {
    pub fn bytes(&self) -> u64 {
        self.steps.iter().map(|s| s.bytes).sum()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), PipeError> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            w.serialize(s).map_err(|e| PipeError::Report(e.into()))?;
        }
        if self.steps.is_empty() {
            w.write_record(["step", "bytes", "load_s", "store_s"])
                .map_err(|e| PipeError::Report(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Loaded {
    ann: StepAnnouncement,
    slabs: Vec<LoadedSlab>,
}

fn store(writers: &mut [Writer], step: &Loaded) -> Result<(), PipeError> {
    for (index, w) in writers.iter_mut().enumerate() {
        let err = |source| PipeError::Sink { index, source };
        w.begin_step(step.ann.step_index).map_err(err)?;
        for d in &step.ann.datasets {
            w.declare(d).map_err(err)?;
        }
        for (k, v) in &step.ann.attributes {
            w.set_attribute(k, v.clone()).map_err(err)?;
        }
        for s in &step.slabs {
            let decl = step.ann.dataset(&s.dataset).expect("slab of a declared dataset");
            w.put_chunk(decl, s.slab.region.clone(), s.bytes.clone()).map_err(err)?;
        }
        w.end_step().map_err(err)?;
    }
    Ok(())
}

/// Runs the pipe until the source ends.
pub fn run_pipe(spec: &PipeSpec) -> Result<PipeReport, PipeError> {
    spec.validate()?;
    let mut reader = open_reader(&spec.source.series, &spec.group, &spec.source.config).map_err(PipeError::Source)?;
    let mut writers = Vec::new();
    for (index, sink) in spec.sinks.iter().enumerate() {
        writers.push(open_writer(&sink.series, &spec.group, &sink.config).map_err(|source| PipeError::Sink { index, source })?);
    }
    // a stream sink holds back until someone listens, so no step is lost
    for (index, w) in writers.iter().enumerate() {
        if let Writer::Stream(sw) = w {
            let timeout = Duration::from_secs_f64(spec.sinks[index].config.rendezvous_timeout_s);
            sw.wait_for_readers(1, timeout).map_err(|source| PipeError::Sink { index, source })?;
        }
    }

    // rendezvous channel: the loader blocks until the sink thread takes the step
    let (tx, rx) = mpsc::sync_channel::<Loaded>(0);
    let sink_thread = thread::spawn(move || -> Result<Vec<(f64, SystemTime)>, PipeError> {
        let mut times = Vec::new();
        let res = (|| {
            for step in rx {
                let t = Instant::now();
                store(&mut writers, &step)?;
                times.push((t.elapsed().as_secs_f64(), SystemTime::now()));
            }
            Ok(())
        })();
        let mut closed = Ok(());
        for (index, w) in writers.into_iter().enumerate() {
            if let Err(source) = w.close() {
                closed = closed.and(Err(PipeError::Sink { index, source }));
            }
        }
        res.and(closed).map(|_| times)
    });

    let mut loads = Vec::new();
    let load_res = (|| -> Result<(), PipeError> {
        loop {
            let t = Instant::now();
            let Some(ann) = reader.next_step().map_err(PipeError::Source)? else {
                return Ok(());
            };
            let slabs = reader.load_assigned(&spec.strategy).map_err(PipeError::Source)?;
            reader.release_step().map_err(PipeError::Source)?;
            let bytes = slabs.iter().map(|s| s.bytes.len() as u64).sum();
            let load_s = t.elapsed().as_secs_f64();
            loads.push((ann.step_index, bytes, load_s));
            if tx.send(Loaded { ann, slabs }).is_err() {
                // the sink thread stopped; its error is reported below
                return Ok(());
            }
        }
    })();
    drop(tx);
    let stored = sink_thread.join().expect("sink thread panicked");
    let closed = reader.close().map_err(PipeError::Source);
    load_res?;
    let stored = stored?;
    closed?;

    let steps = loads
        .into_iter()
        .zip(stored)
        .map(|((step, bytes, load_s), (store_s, at))| StepRecord {
            step,
            bytes,
            load_s,
            store_s,
            finished_at: Some(at),
        })
        .collect();
    Ok(PipeReport { steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PipeSpec {
        PipeSpec {
            source: Endpoint::new("a", EngineConfig::file()),
            sinks: vec![Endpoint::new("b", EngineConfig::file())],
            strategy: StrategySpec::Binpacking,
            group: GroupSpec::solo("pipe"),
        }
    }

    #[test]
    fn spec_validation() {
        spec().validate().unwrap();
        let mut s = spec();
        s.sinks.clear();
        assert!(matches!(s.validate(), Err(PipeError::NoSinks)));
        let mut s = spec();
        s.sinks.push(Endpoint::new("./a", EngineConfig::stream()));
        assert!(matches!(s.validate(), Err(PipeError::SameSeries(_))));
    }

    #[test]
    fn empty_report_still_has_a_header() {
        let mut out = Vec::new();
        PipeReport::default().write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,bytes,load_s,store_s\n");
        let r = PipeReport {
            steps: vec![StepRecord {
                step: 2,
                bytes: 10,
                load_s: 0.5,
                store_s: 0.25,
                finished_at: None,
            }],
        };
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,bytes,load_s,store_s\n2,10,0.5,0.25\n");
    }
}
