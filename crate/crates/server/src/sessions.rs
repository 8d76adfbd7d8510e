//! Edit sessions held in memory with least-recently-used eviction.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use partgen_core::pipeline::EditSession;

/// How many evicted ids are remembered so they can be reported as gone.
const EVICTED_MEMORY: usize = 4096;

pub type SharedSession = Arc<Mutex<EditSession>>;

#[derive(Clone, Debug)]
pub enum Lookup {
    Found(SharedSession),
    Evicted,
    Unknown,
}

struct Slot {
    session: SharedSession,
    created: SystemTime,
    last_used: u64,
}

#[derive(Default)]
struct Inner {
    live: HashMap<String, Slot>,
    evicted: HashSet<String>,
    evicted_order: VecDeque<String>,
    clock: u64,
}

pub struct SessionStore {
    inner: Mutex<Inner>,
    capacity: usize,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        Self { inner: Mutex::new(Inner::default()), capacity: capacity.max(1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores a session under a fresh id, evicting the least recently used
    /// one if the store is full. Returns the new id and the evicted one.
    pub fn insert(&self, session: EditSession) -> (String, Option<String>) {
        let mut inner = self.inner.lock().unwrap();
        let mut evicted = None;
        if inner.live.len() >= self.capacity {
            let oldest = inner.live.iter().min_by_key(|(_, s)| s.last_used).map(|(id, _)| id.clone());
            if let Some(id) = oldest {
                inner.live.remove(&id);
                inner.evicted.insert(id.clone());
                inner.evicted_order.push_back(id.clone());
                if inner.evicted_order.len() > EVICTED_MEMORY {
                    let old = inner.evicted_order.pop_front().unwrap();
                    inner.evicted.remove(&old);
                }
                evicted = Some(id);
            }
        }
        let id = uuid::Uuid::new_v4().to_string();
        inner.clock += 1;
        let slot = Slot { session: Arc::new(Mutex::new(session)), created: SystemTime::now(), last_used: inner.clock };
        inner.live.insert(id.clone(), slot);
        (id, evicted)
    }

    pub fn created(&self, id: &str) -> Option<SystemTime> {
        self.inner.lock().unwrap().live.get(id).map(|s| s.created)
    }

    /// Finds a session and marks it as used.
    pub fn get(&self, id: &str) -> Lookup {
        let mut inner = self.inner.lock().unwrap();
        inner.clock += 1;
        let now = inner.clock;
        if let Some(slot) = inner.live.get_mut(id) {
            slot.last_used = now;
            return Lookup::Found(slot.session.clone());
        }
        if inner.evicted.contains(id) {
            Lookup::Evicted
        } else {
            Lookup::Unknown
        }
    }
}
