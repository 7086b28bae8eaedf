//! In-memory job queue with a fixed pool of worker threads.
//!
//! Status reads never take a lock: the phase, the packed progress counters
//! and the loss are atomics, and finished payloads are written once.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::thread;

use serde_json::{json, Value};

use stylecore::progress::{Observer, Progress};
use stylecore::{Error, ImageBuffer};

use crate::config::JobConfig;
use crate::run::{execute, JobInputs};

pub const PREVIEW_EVERY: usize = 25;

const QUEUED: u8 = 0;
const RUNNING: u8 = 1;
const DONE: u8 = 2;
const FAILED: u8 = 3;

/// `scale:8 | scales:8 | step:24 | steps:24`, so one load gives a
/// consistent set of counters.
fn pack(p: &Progress) -> u64 {
    let c = |v: usize, bits: u32| (v as u64).min((1 << bits) - 1);
    (c(p.scale, 8) << 56) | (c(p.scales, 8) << 48) | (c(p.step, 24) << 24) | c(p.steps, 24)
}

fn unpack(v: u64) -> (u64, u64, u64, u64) {
    (v >> 56, (v >> 48) & 0xff, (v >> 24) & 0xff_ffff, v & 0xff_ffff)
}

pub struct Job {
    id: String,
    config: JobConfig,
    inputs: Mutex<Option<JobInputs>>,
    phase: AtomicU8,
    progress: AtomicU64,
    loss: AtomicU64,
    cancel: AtomicBool,
    reason: OnceLock<String>,
    result: OnceLock<Vec<u8>>,
    report: OnceLock<Value>,
    preview: RwLock<Option<Arc<Vec<u8>>>>,
}

/// Outcome of a cancellation request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cancel {
    Requested,
    AlreadyFinished,
}

impl Job {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &JobConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.phase.load(Ordering::Acquire) >= DONE
    }

    pub fn result_png(&self) -> Option<&[u8]> {
        self.result.get().map(Vec::as_slice)
    }

    pub fn preview_png(&self) -> Option<Arc<Vec<u8>>> {
        self.preview.read().expect("preview lock").clone()
    }

    pub fn snapshot(&self) -> Value {
        let phase = self.phase.load(Ordering::Acquire);
        let (scale, scales, step, steps) = unpack(self.progress.load(Ordering::Acquire));
        let progress = (steps > 0).then(|| {
            json!({
                "scale": scale,
                "scales": scales,
                "step": step,
                "steps": steps,
                "loss": f64::from_bits(self.loss.load(Ordering::Acquire)),
            })
        });
        let status = ["queued", "running", "done", "failed"][phase as usize];
        let mut v = json!({
            "id": self.id,
            "kind": self.config.kind(),
            "status": status,
            "progress": progress,
            "config": self.config.resolved(),
        });
        if phase == FAILED {
            v["reason"] = json!(self.reason.get().cloned().unwrap_or_default());
        }
        if let Some(r) = self.report.get().filter(|_| phase == DONE) {
            v["report"] = r.clone();
        }
        v
    }

    fn transition(&self, from: u8, to: u8) -> bool {
        self.phase.compare_exchange(from, to, Ordering::AcqRel, Ordering::Acquire).is_ok()
    }

    fn fail(&self, from: u8, reason: String) {
        let _ = self.reason.set(reason);
        self.transition(from, FAILED);
    }

    fn request_cancel(&self) -> Cancel {
        if self.is_finished() {
            return Cancel::AlreadyFinished;
        }
        self.cancel.store(true, Ordering::Release);
        // A queued job never reaches a step boundary; fail it here.
        if self.phase.load(Ordering::Acquire) == QUEUED {
            let _ = self.reason.set("cancelled".into());
            self.transition(QUEUED, FAILED);
        }
        Cancel::Requested
    }

    fn run(&self) {
        if !self.transition(QUEUED, RUNNING) {
            return;
        }
        let Some(inputs) = self.inputs.lock().expect("inputs lock").take() else {
            return self.fail(RUNNING, "inputs missing".into());
        };
        match execute(&self.config, &inputs, &JobObserver(self)) {
            Ok(out) => match out.image.encode_png() {
                Ok(png) => {
                    let _ = self.result.set(png);
                    let _ = self.report.set(out.report);
                    self.transition(RUNNING, DONE);
                }
                Err(e) => self.fail(RUNNING, e.to_string()),
            },
            Err(Error::Cancelled) => self.fail(RUNNING, "cancelled".into()),
            Err(e) => self.fail(RUNNING, e.to_string()),
        }
    }
}

struct JobObserver<'a>(&'a Job);

impl Observer for JobObserver<'_> {
    fn on_step(&self, p: &Progress) {
        self.0.loss.store(p.loss.to_bits(), Ordering::Release);
        self.0.progress.store(pack(p), Ordering::Release);
    }

    fn preview_every(&self) -> Option<usize> {
        Some(PREVIEW_EVERY)
    }

    fn on_preview(&self, _p: &Progress, img: &ImageBuffer) {
        if let Ok(png) = img.encode_png() {
            *self.0.preview.write().expect("preview lock") = Some(Arc::new(png));
        }
    }

    fn cancelled(&self) -> bool {
        self.0.cancel.load(Ordering::Acquire)
    }
}

pub struct JobManager {
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    queue: Mutex<Sender<Arc<Job>>>,
    counter: AtomicU64,
    workers: usize,
}

/// Default worker count: half the available cores, at least one.
pub fn default_workers() -> usize {
    (thread::available_parallelism().map_or(1, |n| n.get()) / 2).max(1)
}

fn worker(rx: Arc<Mutex<Receiver<Arc<Job>>>>) {
    loop {
        let job = match rx.lock().expect("queue lock").recv() {
            Ok(j) => j,
            Err(_) => return,
        };
        job.run();
    }
}

impl JobManager {
    pub fn new(workers: usize) -> Arc<Self> {
        let workers = workers.max(1);
        let (tx, rx) = channel();
        let rx = Arc::new(Mutex::new(rx));
        for k in 0..workers {
            let rx = rx.clone();
            thread::Builder::new().name(format!("job-worker-{k}")).spawn(move || worker(rx)).expect("spawn worker");
        }
        Arc::new(Self { jobs: RwLock::new(HashMap::new()), queue: Mutex::new(tx), counter: AtomicU64::new(0), workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn submit(&self, config: JobConfig, inputs: JobInputs) -> Arc<Job> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let id = format!("{:08x}{:08x}", n as u32, rand::random::<u32>());
        let job = Arc::new(Job {
            id: id.clone(),
            config,
            inputs: Mutex::new(Some(inputs)),
            phase: AtomicU8::new(QUEUED),
            progress: AtomicU64::new(0),
            loss: AtomicU64::new(0),
            cancel: AtomicBool::new(false),
            reason: OnceLock::new(),
            result: OnceLock::new(),
            report: OnceLock::new(),
            preview: RwLock::new(None),
        });
        self.jobs.write().expect("jobs lock").insert(id, job.clone());
        self.queue.lock().expect("queue lock").send(job.clone()).expect("workers alive");
        job
    }

    pub fn get(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.read().expect("jobs lock").get(id).cloned()
    }

    pub fn cancel(&self, id: &str) -> Option<Cancel> {
        self.get(id).map(|j| j.request_cancel())
    }
}
