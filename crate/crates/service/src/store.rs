//! In-memory session storage with per-session locking and idle eviction.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use kgconsult_core::consult::Session;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Debug)]
pub struct Slot {
    pub session: Session,
    last_access: Instant,
}

/// Sessions keyed by id. The map lock is held only to find or insert a
/// slot; each slot has its own mutex so distinct sessions never block on
/// each other.
#[derive(Debug)]
pub struct SessionStore {
    slots: RwLock<HashMap<String, Arc<Mutex<Slot>>>>,
    idle: Duration,
}

impl SessionStore {
    pub fn new(idle: Duration) -> Self {
        Self {
            slots: RwLock::new(HashMap::new()),
            idle,
        }
    }

    pub fn insert(&self, session: Session) {
        let id = session.id.clone();
        let slot = Slot {
            session,
            last_access: Instant::now(),
        };
        self.slots
            .write()
            .unwrap()
            .insert(id, Arc::new(Mutex::new(slot)));
    }

    /// Locks one session and marks it as used. `None` when the id is
    /// unknown or the session sat idle past the timeout.
    pub fn with<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> T) -> Option<T> {
        let slot = self.slots.read().unwrap().get(id).cloned()?;
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        if guard.last_access.elapsed() > self.idle {
            drop(guard);
            self.slots.write().unwrap().remove(id);
            return None;
        }
        guard.last_access = Instant::now();
        Some(f(&mut guard.session))
    }

    /// Drops every session idle for longer than the timeout as of `now`.
    /// Returns how many were removed.
    pub fn evict_idle(&self, now: Instant) -> usize {
        let mut slots = self.slots.write().unwrap();
        let before = slots.len();
        slots.retain(|_, slot| match slot.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_access) <= self.idle,
            // Busy sessions are in use right now.
            Err(_) => true,
        });
        before - slots.len()
    }

    pub fn len(&self) -> usize {
        self.slots.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
