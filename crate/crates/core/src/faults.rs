//! Test-time fault injection hooks for the storage path.
//!
//! A disarmed injector costs one relaxed atomic load per I/O. Corruption is
//! not injected here; tests corrupt page files on disk directly.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use parking_lot::Mutex;

use crate::page_store::{DirId, PageId};

#[derive(Debug)]
struct DiskFullRule {
    dir: Option<DirId>,
    skip: u64,
    remaining: u32,
}

#[derive(Debug)]
struct HangRule {
    page: Option<PageId>,
    remaining: u32,
    duration: Duration,
}

#[derive(Debug, Default)]
struct Rules {
    disk_full: Vec<DiskFullRule>,
    hangs: Vec<HangRule>,
    block_meta_failures: u32,
}

impl Rules {
    fn is_empty(&self) -> bool {
        self.disk_full.is_empty() && self.hangs.is_empty() && self.block_meta_failures == 0
    }
}

#[derive(Debug, Default)]
pub struct FaultInjector {
    armed: AtomicBool,
    rules: Mutex<Rules>,
}

impl FaultInjector {
    pub fn new() -> Self {
        Self::default()
    }

    /// After `skip` more page writes (to `dir`, or to any dir), fail the next
    /// `count` of them with "no space left on device".
    pub fn disk_full_after(&self, dir: Option<DirId>, skip: u64, count: u32) {
        let mut rules = self.rules.lock();
        rules.disk_full.push(DiskFullRule {
            dir,
            skip,
            remaining: count,
        });
        self.armed.store(true, Ordering::Release);
    }

    /// Make the next `count` local reads of `page` (or of any page) stall.
    pub fn hang_reads(&self, page: Option<PageId>, count: u32, duration: Duration) {
        let mut rules = self.rules.lock();
        rules.hangs.push(HangRule {
            page,
            remaining: count,
            duration,
        });
        self.armed.store(true, Ordering::Release);
    }

    /// Fail the next `count` block-adapter metadata writes, after the block
    /// payload has already been staged.
    pub fn fail_block_meta_writes(&self, count: u32) {
        let mut rules = self.rules.lock();
        rules.block_meta_failures += count;
        self.armed.store(true, Ordering::Release);
    }

    pub fn clear(&self) {
        *self.rules.lock() = Rules::default();
        self.armed.store(false, Ordering::Release);
    }

    pub fn pending(&self) -> bool {
        self.armed.load(Ordering::Acquire) && !self.rules.lock().is_empty()
    }

    pub(crate) fn on_write(&self, dir: DirId) -> bool {
        if !self.armed.load(Ordering::Acquire) {
            return false;
        }
        let mut rules = self.rules.lock();
        let mut fire = false;
        for rule in rules.disk_full.iter_mut() {
            if rule.dir.is_some_and(|d| d != dir) {
                continue;
            }
            if rule.skip > 0 {
                rule.skip -= 1;
            } else if !fire && rule.remaining > 0 {
                rule.remaining -= 1;
                fire = true;
            }
        }
        rules.disk_full.retain(|r| r.remaining > 0);
        self.rearm(&rules);
        fire
    }

    pub(crate) fn on_read(&self, page: &PageId) -> Option<Duration> {
        if !self.armed.load(Ordering::Acquire) {
            return None;
        }
        let mut rules = self.rules.lock();
        let mut stall = None;
        for rule in rules.hangs.iter_mut() {
            if rule.remaining > 0 && rule.page.as_ref().is_none_or(|p| p == page) {
                rule.remaining -= 1;
                stall = Some(rule.duration);
                break;
            }
        }
        rules.hangs.retain(|r| r.remaining > 0);
        self.rearm(&rules);
        stall
    }

    pub(crate) fn on_block_meta(&self) -> bool {
        if !self.armed.load(Ordering::Acquire) {
            return false;
        }
        let mut rules = self.rules.lock();
        let fire = rules.block_meta_failures > 0;
        if fire {
            rules.block_meta_failures -= 1;
        }
        self.rearm(&rules);
        fire
    }

    fn rearm(&self, rules: &Rules) {
        self.armed.store(!rules.is_empty(), Ordering::Release);
    }
}
