//! What one child process of a bench run does.

use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::metrics::{Role, Sample};
use super::plan::{BenchPlan, Mode};
use super::BenchError;
use crate::engine::{open_reader, open_writer, EngineConfig, GroupSpec, Reader, StepOutcome, Writer};
use crate::host::local_hostname;
use crate::pipe::{run_pipe, Endpoint, PipeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum WorkerRole {
    Writer,
    Reader,
}

impl WorkerRole {
    pub fn name(self) -> &'static str {
        match self {
            WorkerRole::Writer => "writer",
            WorkerRole::Reader => "reader",
        }
    }
}

/// Everything a child reports back to the orchestrator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub role: Option<WorkerRole>,
    pub rank: usize,
    pub hostname: String,
    /// Steps a writer began before the window closed.
    pub produced: u64,
    pub published: u64,
    pub discarded: u64,
    /// Wall time of each writer step, compute included.
    pub step_wall_s: Vec<f64>,
    /// Samples of operations that completed inside the window.
    pub samples: Vec<Sample>,
    /// Pipe writes into the sink, completed inside the window.
    pub sink_samples: Vec<Sample>,
    /// Writer ranks a reader opened data connections to.
    pub contacted_writers: Vec<usize>,
    /// Data connections a writer accepted.
    pub data_connections: usize,
}

pub fn report_path(dir: &Path, role: WorkerRole, rank: usize) -> PathBuf {
    dir.join(format!("worker-{}-{rank}.json", role.name()))
}

pub fn stream_series(dir: &Path) -> String {
    dir.join("data").join("stream").to_string_lossy().into_owned()
}

pub fn dump_series(dir: &Path) -> String {
    dir.join("data").join("dump").to_string_lossy().into_owned()
}

fn epoch_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).unwrap_or_default().as_millis() as u64
}

pub fn now_ms() -> u64 {
    epoch_ms(SystemTime::now())
}

fn sleep_until_ms(ms: u64) {
    let now = now_ms();
    if ms > now {
        thread::sleep(Duration::from_millis(ms - now));
    }
}

fn positive(d: Duration) -> f64 {
    d.as_secs_f64().max(1e-9)
}

/// Cross-process barrier among writers, one marker file per rank and step.
struct Barrier {
    dir: PathBuf,
    rank: usize,
    size: usize,
}

impl Barrier {
    fn new(run: &Path, rank: usize, size: usize) -> io::Result<Self> {
        let dir = run.join("barrier");
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, rank, size })
    }

    fn path(&self, step: u64, rank: usize) -> PathBuf {
        self.dir.join(format!("{step}.{rank}"))
    }

    /// Returns once every writer reached `step`, or at `deadline_ms`.
    fn wait(&self, step: u64, deadline_ms: u64) -> io::Result<()> {
        std::fs::write(self.path(step, self.rank), b"")?;
        if step > 0 {
            let _ = std::fs::remove_file(self.path(step - 1, self.rank));
        }
        let mut missing: Vec<usize> = (0..self.size).collect();
        loop {
            // a marker of a later step also means the rank got here
            missing.retain(|&r| !self.path(step, r).exists() && !self.path(step + 1, r).exists());
            if missing.is_empty() || now_ms() > deadline_ms + 5_000 {
                return Ok(());
            }
            thread::sleep(Duration::from_millis(1));
        }
    }
}

/// Per-run engine config: rendezvous files live in the run directory.
fn isolated(cfg: &EngineConfig, plan: &BenchPlan) -> EngineConfig {
    let mut c = cfg.clone();
    c.contact_path = None;
    c.rendezvous_timeout_s = c.rendezvous_timeout_s.max(plan.startup_grace_ms as f64 / 1000.0 + 30.0);
    c
}

/// Runs one child and writes its report into `dir`.
pub fn run_worker(plan: &BenchPlan, role: WorkerRole, rank: usize, dir: &Path, start_ms: u64) -> Result<WorkerReport, BenchError> {
    let deadline_ms = start_ms + plan.duration_s * 1000;
    let report = match role {
        WorkerRole::Writer => writer(plan, rank, dir, start_ms, deadline_ms)?,
        WorkerRole::Reader if plan.mode == Mode::StreamToFile => pipe(plan, rank, dir, deadline_ms)?,
        WorkerRole::Reader => reader(plan, rank, dir, deadline_ms)?,
    };
    let path = report_path(dir, role, rank);
    std::fs::write(&path, serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

fn writer(plan: &BenchPlan, rank: usize, dir: &Path, start_ms: u64, deadline_ms: u64) -> Result<WorkerReport, BenchError> {
    let cfg = isolated(&plan.engine, plan);
    let series = match plan.mode {
        Mode::FileOnly => dump_series(dir),
        _ => stream_series(dir),
    };
    let hostname = local_hostname();
    let group = GroupSpec::new("writers", plan.writers, rank, hostname.clone());
    let mut w = open_writer(&series, &group, &cfg)?;
    if let Writer::Stream(sw) = &w {
        let left = Duration::from_millis(deadline_ms.saturating_sub(now_ms()));
        sw.wait_for_readers(1, left)?;
    }
    sleep_until_ms(start_ms);

    let decl = plan.dataset();
    let region = plan.chunk_of(rank);
    let payload: Vec<u8> = (0..plan.bytes_per_writer_per_step).map(|i| (i as u8) ^ (rank as u8)).collect();
    let mut rep = WorkerReport {
        role: Some(WorkerRole::Writer),
        rank,
        hostname,
        ..Default::default()
    };
    let compute = Duration::from_millis(plan.compute_delay_ms);
    // ranks of a simulation advance together: nobody computes step k+1
    // before every rank finished writing step k
    let barrier = Barrier::new(dir, rank, plan.writers)?;
    let mut step = 0u64;
    loop {
        let wall = Instant::now();
        thread::sleep(compute);
        if now_ms() >= deadline_ms {
            break;
        }
        let t = Instant::now();
        w.begin_step(step)?;
        w.put_chunk(&decl, region.clone(), payload.clone())?;
        let outcome = w.end_step()?;
        let seconds = positive(t.elapsed());
        barrier.wait(step, deadline_ms)?;
        rep.produced += 1;
        rep.step_wall_s.push(wall.elapsed().as_secs_f64());
        match outcome {
            StepOutcome::Discarded => rep.discarded += 1,
            _ => {
                rep.published += 1;
                if now_ms() <= deadline_ms {
                    rep.samples.push(Sample {
                        role: Role::Store,
                        step,
                        rank,
                        bytes: plan.bytes_per_writer_per_step,
                        seconds,
                    });
                }
            }
        }
        step += 1;
    }
    if let Writer::Stream(sw) = &w {
        rep.data_connections = sw.stats().data_connections;
    }
    w.close()?;
    Ok(rep)
}

fn reader(plan: &BenchPlan, rank: usize, dir: &Path, deadline_ms: u64) -> Result<WorkerReport, BenchError> {
    let cfg = isolated(&plan.engine, plan);
    let hostname = local_hostname();
    let group = GroupSpec::new("readers", plan.readers, rank, hostname.clone());
    let mut r = open_reader(&stream_series(dir), &group, &cfg)?;
    let mut rep = WorkerReport {
        role: Some(WorkerRole::Reader),
        rank,
        hostname,
        ..Default::default()
    };
    while let Some(step) = r.next_step()? {
        let t = Instant::now();
        let slabs = r.load_assigned(&plan.strategy)?;
        let seconds = positive(t.elapsed());
        thread::sleep(Duration::from_millis(plan.reader_delay_ms));
        r.release_step()?;
        if now_ms() <= deadline_ms {
            rep.samples.push(Sample {
                role: Role::Load,
                step: step.step_index,
                rank,
                bytes: slabs.iter().map(|s| s.bytes.len() as u64).sum(),
                seconds,
            });
        }
    }
    if let Reader::Stream(sr) = &r {
        rep.contacted_writers = sr.contacted_writers().into_iter().collect();
    }
    r.close()?;
    Ok(rep)
}

fn pipe(plan: &BenchPlan, rank: usize, dir: &Path, deadline_ms: u64) -> Result<WorkerReport, BenchError> {
    let sink = plan.sink.as_ref().ok_or_else(|| BenchError::Plan("missing sink".into()))?;
    let hostname = local_hostname();
    let spec = PipeSpec {
        source: Endpoint::new(stream_series(dir), isolated(&plan.engine, plan)),
        sinks: vec![Endpoint::new(dump_series(dir), isolated(sink, plan))],
        strategy: plan.strategy.clone(),
        group: GroupSpec::new("pipes", plan.readers, rank, hostname.clone()),
    };
    let report = run_pipe(&spec)?;
    let mut rep = WorkerReport {
        role: Some(WorkerRole::Reader),
        rank,
        hostname,
        ..Default::default()
    };
    for s in report.steps {
        let in_window = s.finished_at.is_some_and(|t| epoch_ms(t) <= deadline_ms);
        if !in_window {
            continue;
        }
        let sample = |role, seconds: f64| Sample {
            role,
            step: s.step,
            rank,
            bytes: s.bytes,
            seconds: seconds.max(1e-9),
        };
        rep.samples.push(sample(Role::Load, s.load_s));
        rep.sink_samples.push(sample(Role::Store, s.store_s));
    }
    Ok(rep)
}
