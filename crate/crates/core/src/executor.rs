//! A small elastic thread pool for running blocking I/O under a deadline.
//!
//! The caller waits on a reply channel with a timeout; if the job hangs, the
//! caller moves on and the worker stays stuck until the syscall returns.
//! Workers are spawned on demand up to `max_threads`, so a handful of hung
//! reads does not starve the rest.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};

type Job = Box<dyn FnOnce() + Send + 'static>;

struct Shared {
    rx: Receiver<Job>,
    idle: AtomicUsize,
    spawned: AtomicUsize,
}

pub(crate) struct TimedExecutor {
    name: &'static str,
    tx: Sender<Job>,
    shared: Arc<Shared>,
    max_threads: usize,
}

impl TimedExecutor {
    pub(crate) fn new(name: &'static str, max_threads: usize) -> Self {
        let (tx, rx) = unbounded();
        TimedExecutor {
            name,
            tx,
            shared: Arc::new(Shared {
                rx,
                idle: AtomicUsize::new(0),
                spawned: AtomicUsize::new(0),
            }),
            max_threads: max_threads.max(1),
        }
    }

    /// Runs `job` on a worker; `None` if it did not finish within `timeout`.
    pub(crate) fn run<T, F>(&self, timeout: Duration, job: F) -> Option<T>
    where
        T: Send + 'static,
        F: FnOnce() -> T + Send + 'static,
    {
        let (reply_tx, reply_rx) = bounded(1);
        let wrapped: Job = Box::new(move || {
            let _ = reply_tx.send(job());
        });
        self.maybe_spawn();
        if self.tx.send(wrapped).is_err() {
            return None;
        }
        match reply_rx.recv_timeout(timeout) {
            Ok(v) => Some(v),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    fn maybe_spawn(&self) {
        if self.shared.idle.load(Ordering::Acquire) > 0 {
            return;
        }
        let spawned = self.shared.spawned.load(Ordering::Acquire);
        if spawned >= self.max_threads {
            return;
        }
        if self
            .shared
            .spawned
            .compare_exchange(spawned, spawned + 1, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return;
        }
        let shared = Arc::clone(&self.shared);
        let res = thread::Builder::new()
            .name(format!("{}-{}", self.name, spawned))
            .spawn(move || {
                shared.idle.fetch_add(1, Ordering::AcqRel);
                while let Ok(job) = shared.rx.recv() {
                    shared.idle.fetch_sub(1, Ordering::AcqRel);
                    job();
                    shared.idle.fetch_add(1, Ordering::AcqRel);
                }
                shared.idle.fetch_sub(1, Ordering::AcqRel);
            });
        if res.is_err() {
            self.shared.spawned.fetch_sub(1, Ordering::AcqRel);
        }
    }
}
