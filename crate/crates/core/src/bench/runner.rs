use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::metrics::{per_dump, summarize, whisker_stats, Role, Sample, ThroughputSummary, WhiskerStats};
use super::plan::{BenchPlan, Mode};
use super::worker::{now_ms, report_path, WorkerReport, WorkerRole};
use super::BenchError;
use crate::distribution::{assign, imbalance, StrategySpec};
use crate::host::HOSTNAME_ENV;

/// Throughput of one role in one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleSummary {
    pub throughput: ThroughputSummary,
    pub whiskers: WhiskerStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepSummary {
    pub repetition: usize,
    /// Dumps every rank of the last stage completed inside the window.
    pub dumps: usize,
    /// Steps the writers began inside the window.
    pub produced: u64,
    pub published: u64,
    pub discarded: u64,
    /// Mean wall time of a writer step, compute included.
    pub writer_step_s: f64,
    pub store: Option<RoleSummary>,
    pub load: Option<RoleSummary>,
    pub sink_store: Option<RoleSummary>,
    /// Data connections the writers accepted.
    pub data_connections: usize,
    /// Distinct (writer, reader) pairs the readers contacted.
    pub contacted_pairs: usize,
    /// Every fully loaded dump carried exactly the bytes written.
    pub conserved: bool,
    /// Why the repetition failed; its summary covers the ranks that reported.
    pub failure: Option<String>,
}

/// A strategy applied to the plan's chunk table and reader roster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: StrategySpec,
    pub imbalance: f64,
    pub connections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub name: String,
    pub mode: Mode,
    pub repetitions: Vec<RepSummary>,
    pub mean_dumps: f64,
    pub strategies: Vec<StrategyRow>,
}

impl BenchReport {
    pub fn failed(&self) -> bool {
        self.repetitions.iter().any(|r| r.failure.is_some())
    }
}

/// One CSV row of `samples.csv`.
#[derive(Serialize)]
struct SampleRow {
    role: Role,
    step: u64,
    rank: usize,
    bytes: u64,
    seconds: f64,
}

struct Running {
    role: WorkerRole,
    rank: usize,
    log: PathBuf,
    child: Child,
}

/// Runs every repetition of `plan`, writing results below `out`.
///
/// `worker_exe` is the bench binary; it is re-invoked once per rank.
pub fn run_bench(plan: &BenchPlan, out: &Path, worker_exe: &Path) -> Result<BenchReport, BenchError> {
    plan.validate()?;
    fs::create_dir_all(out)?;
    let plan_path = out.join("plan.json");
    fs::write(&plan_path, serde_json::to_vec_pretty(plan).expect("plan serializes"))?;

    let mut reps = Vec::new();
    for k in 0..plan.repetitions {
        let dir = out.join(format!("rep-{k}"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(dir.join("data"))?;
        fs::create_dir_all(dir.join("logs"))?;
        let (reports, failure) = run_repetition(plan, &plan_path, &dir, worker_exe)?;
        if let Some(f) = &failure {
            log::error!("{} rep {k}: {f}", plan.name);
        }
        let mut summary = summarize_rep(plan, k, &reports)?;
        summary.failure = failure.map(|f| f.to_string());
        write_samples(&dir, &reports)?;
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary).expect("summary serializes"))?;
        log::info!("{} rep {k}: {} dumps, {} produced, {} discarded", plan.name, summary.dumps, summary.produced, summary.discarded);
        reps.push(summary);
    }

    let report = BenchReport {
        name: plan.name.clone(),
        mode: plan.mode,
        mean_dumps: reps.iter().map(|r| r.dumps as f64).sum::<f64>() / reps.len() as f64,
        repetitions: reps,
        strategies: strategy_sweep(plan)?,
    };
    fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

fn spawn(
    plan: &BenchPlan,
    plan_path: &Path,
    dir: &Path,
    exe: &Path,
    role: WorkerRole,
    rank: usize,
    start_ms: u64,
) -> Result<Running, BenchError> {
    let host = match role {
        WorkerRole::Writer => plan.writer_host(rank),
        WorkerRole::Reader => plan.reader_host(rank),
    };
    let log = dir.join("logs").join(format!("{}-{rank}.log", role.name()));
    let out = File::create(&log)?;
    let child = Command::new(exe)
        .arg("__worker")
        .arg("--plan")
        .arg(plan_path)
        .arg("--role")
        .arg(role.name())
        .arg("--rank")
        .arg(rank.to_string())
        .arg("--dir")
        .arg(dir)
        .arg("--start-ms")
        .arg(start_ms.to_string())
        .env(HOSTNAME_ENV, host)
        .stdin(Stdio::null())
        .stdout(out.try_clone()?)
        .stderr(out)
        .spawn()?;
    Ok(Running { role, rank, log, child })
}

/// Runs every rank of one repetition. A failed child does not discard
/// the reports of the others.
fn run_repetition(
    plan: &BenchPlan,
    plan_path: &Path,
    dir: &Path,
    exe: &Path,
) -> Result<(Vec<WorkerReport>, Option<BenchError>), BenchError> {
    let start_ms = now_ms() + plan.startup_grace_ms;
    let mut children = Vec::new();
    let spawned = (|| {
        for r in 0..plan.reader_count() {
            children.push(spawn(plan, plan_path, dir, exe, WorkerRole::Reader, r, start_ms)?);
        }
        for r in 0..plan.writers {
            children.push(spawn(plan, plan_path, dir, exe, WorkerRole::Writer, r, start_ms)?);
        }
        Ok::<_, BenchError>(())
    })();
    if let Err(e) = spawned {
        kill_all(&mut children);
        return Err(e);
    }

    // generous: a blocked writer may overrun the window by a few steps
    let limit = Instant::now() + Duration::from_millis(plan.startup_grace_ms) + Duration::from_secs(plan.duration_s * 3 + 120);
    let mut failure = None;
    let mut pending: Vec<usize> = (0..children.len()).collect();
    while !pending.is_empty() {
        let mut still = Vec::new();
        for i in pending {
            let c = &mut children[i];
            match c.child.try_wait()? {
                Some(status) if status.success() => {}
                Some(status) => {
                    failure.get_or_insert(BenchError::Worker {
                        role: c.role.name(),
                        rank: c.rank,
                        status: status.to_string(),
                        log: c.log.clone(),
                    });
                }
                None => still.push(i),
            }
        }
        pending = still;
        if failure.is_some() {
            break;
        }
        if Instant::now() > limit {
            let c = &children[pending[0]];
            failure = Some(BenchError::Worker {
                role: c.role.name(),
                rank: c.rank,
                status: "timed out".into(),
                log: c.log.clone(),
            });
            break;
        }
        thread::sleep(Duration::from_millis(50));
    }
    if failure.is_some() {
        // let the survivors notice the loss and write what they have
        let grace = Instant::now() + Duration::from_secs(5);
        while Instant::now() < grace && children.iter_mut().any(|c| matches!(c.child.try_wait(), Ok(None))) {
            thread::sleep(Duration::from_millis(50));
        }
        kill_all(&mut children);
    }

    let mut reports = Vec::new();
    for c in &children {
        let path = report_path(dir, c.role, c.rank);
        match fs::read(&path) {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(r) => reports.push(r),
                Err(source) => {
                    failure.get_or_insert(BenchError::Report { path, source });
                }
            },
            Err(e) if failure.is_some() && e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok((reports, failure))
}

fn kill_all(children: &mut [Running]) {
    for c in children {
        let _ = c.child.kill();
        let _ = c.child.wait();
    }
}

fn role_summary(samples: &[Sample], role: Role) -> Result<Option<RoleSummary>, BenchError> {
    let dumps = per_dump(samples, role).map_err(|e| BenchError::Plan(e.to_string()))?;
    if dumps.is_empty() {
        return Ok(None);
    }
    let values: Vec<f64> = dumps.values().map(|(_, t)| *t).collect();
    let err = |e: super::MetricsError| BenchError::Plan(e.to_string());
    Ok(Some(RoleSummary {
        throughput: summarize(&dumps).map_err(err)?,
        whiskers: whisker_stats(&values).map_err(err)?,
    }))
}

/// Steps for which every one of `ranks` reported a sample.
fn complete_steps(samples: &[Sample], ranks: usize) -> BTreeMap<u64, u64> {
    let mut by_step: BTreeMap<u64, (BTreeSet<usize>, u64)> = BTreeMap::new();
    for s in samples {
        let e = by_step.entry(s.step).or_default();
        e.0.insert(s.rank);
        e.1 += s.bytes;
    }
    by_step
        .into_iter()
        .filter(|(_, (r, _))| r.len() == ranks)
        .map(|(step, (_, bytes))| (step, bytes))
        .collect()
}

fn summarize_rep(plan: &BenchPlan, repetition: usize, reports: &[WorkerReport]) -> Result<RepSummary, BenchError> {
    let writers: Vec<&WorkerReport> = reports.iter().filter(|r| r.role == Some(WorkerRole::Writer)).collect();
    let readers: Vec<&WorkerReport> = reports.iter().filter(|r| r.role == Some(WorkerRole::Reader)).collect();
    let leader = writers.iter().find(|r| r.rank == 0).copied().cloned().unwrap_or_default();
    let store: Vec<Sample> = writers.iter().flat_map(|r| r.samples.iter().cloned()).collect();
    let load: Vec<Sample> = readers.iter().flat_map(|r| r.samples.iter().cloned()).collect();
    let sink: Vec<Sample> = readers.iter().flat_map(|r| r.sink_samples.iter().cloned()).collect();

    let written = plan.bytes_per_writer_per_step * plan.writers as u64;
    let loaded = complete_steps(&load, plan.readers);
    let dumps = match plan.mode {
        Mode::FileOnly => complete_steps(&store, plan.writers).len(),
        Mode::Stream => loaded.len(),
        Mode::StreamToFile => complete_steps(&sink, plan.readers).len(),
    };
    let walls: Vec<f64> = writers.iter().flat_map(|r| r.step_wall_s.iter().copied()).collect();
    let pairs: BTreeSet<(usize, usize)> = readers
        .iter()
        .flat_map(|r| r.contacted_writers.iter().map(move |w| (*w, r.rank)))
        .collect();

    Ok(RepSummary {
        repetition,
        dumps,
        produced: leader.produced,
        published: leader.published,
        discarded: leader.discarded,
        writer_step_s: if walls.is_empty() { 0.0 } else { walls.iter().sum::<f64>() / walls.len() as f64 },
        store: role_summary(&store, Role::Store)?,
        load: role_summary(&load, Role::Load)?,
        sink_store: role_summary(&sink, Role::Store)?,
        data_connections: writers.iter().map(|r| r.data_connections).sum(),
        contacted_pairs: pairs.len(),
        conserved: loaded.values().all(|b| *b == written),
        failure: None,
    })
}

/// Writes `samples.csv` and, for pipes, `sink_samples.csv`.
fn write_samples(dir: &Path, reports: &[WorkerReport]) -> Result<(), BenchError> {
    let all = |f: fn(&WorkerReport) -> &Vec<Sample>| reports.iter().flat_map(move |r| f(r).iter());
    write_csv(&dir.join("samples.csv"), all(|r| &r.samples))?;
    if reports.iter().any(|r| !r.sink_samples.is_empty()) {
        write_csv(&dir.join("sink_samples.csv"), all(|r| &r.sink_samples))?;
    }
    Ok(())
}

fn write_csv<'a>(path: &Path, samples: impl Iterator<Item = &'a Sample>) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["role", "step", "rank", "bytes", "seconds"])?;
    for s in samples {
        w.serialize(SampleRow {
            role: s.role,
            step: s.step,
            rank: s.rank,
            bytes: s.bytes,
            seconds: s.seconds,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// The strategies compared in every summary, applied to the plan's layout.
pub fn strategy_sweep(plan: &BenchPlan) -> Result<Vec<StrategyRow>, BenchError> {
    if plan.reader_count() == 0 {
        return Ok(Vec::new());
    }
    let chunks = plan.chunk_table();
    let roster = plan.reader_roster();
    let decls = [plan.dataset()];
    let specs = [
        StrategySpec::by_hostname(StrategySpec::Binpacking, StrategySpec::Binpacking),
        StrategySpec::Binpacking,
        StrategySpec::hyperslabs(),
    ];
    specs
        .into_iter()
        .map(|strategy| {
            let a = assign(&strategy, &chunks, &roster, &decls)?;
            Ok(StrategyRow {
                imbalance: imbalance(&a, &chunks, &decls),
                connections: a.connection_pairs(&chunks).len(),
                strategy,
            })
        })
        .collect()
}
