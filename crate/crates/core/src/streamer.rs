//! Submodel streaming: a two-slot GPU tier that ping-pongs between the
//! active submodel and the one being swapped in, backed by an LRU CPU tier
//! of fetched bundles.
//!
//! [`CacheState`] only tracks submodel ids. Its owner performs the returned
//! [`Action`]s (moving bundle data between tiers, issuing network fetches)
//! and reports fetch outcomes back as [`Event::FetchDone`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::scene::{CellIndex, SceneLayout};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamerConfig {
    pub cpu_capacity: usize,
    /// How much closer (Chebyshev distance, normalized units) the camera must
    /// be to a new cell than to the active one before switching.
    pub hysteresis: f64,
    pub retry_initial_ms: u64,
    pub retry_max_ms: u64,
}

impl Default for StreamerConfig {
    fn default() -> Self {
        StreamerConfig {
            cpu_capacity: 4,
            hysteresis: 0.02,
            retry_initial_ms: 250,
            retry_max_ms: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Gpu,
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Download the bundle into the CPU tier.
    Fetch(CellIndex),
    /// Upload a CPU-tier bundle into the free GPU slot.
    Promote(CellIndex),
    Evict(CellIndex, Tier),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    /// Camera position in normalized scene space at time `now_ms`.
    Camera { position: Vec3, now_ms: u64 },
    FetchDone { cell: CellIndex, ok: bool, now_ms: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Submodel to render this frame; `None` until the first bundle arrives.
    pub render_with: Option<CellIndex>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Retry {
    delay_ms: u64,
    next_ms: u64,
}

#[derive(Debug, Clone)]
pub struct CacheState {
    layout: SceneLayout,
    cfg: StreamerConfig,
    active: Option<CellIndex>,
    /// The other GPU slot: the bundle being swapped in, and after a swap the
    /// previously active one.
    loading: Option<CellIndex>,
    /// Least recently used first.
    cpu: VecDeque<CellIndex>,
    pending: BTreeSet<CellIndex>,
    retries: BTreeMap<CellIndex, Retry>,
    target: Option<CellIndex>,
}

impl CacheState {
    pub fn new(layout: SceneLayout, cfg: StreamerConfig) -> Result<Self> {
        if cfg.cpu_capacity == 0 {
            return Err(Error::Config("cpu tier capacity must be at least 1".into()));
        }
        if layout.active.is_empty() {
            return Err(Error::NoActiveSubmodel);
        }
        Ok(CacheState {
            layout,
            cfg,
            active: None,
            loading: None,
            cpu: VecDeque::new(),
            pending: BTreeSet::new(),
            retries: BTreeMap::new(),
            target: None,
        })
    }

    pub fn active(&self) -> Option<CellIndex> {
        self.active
    }

    pub fn gpu_resident(&self) -> Vec<CellIndex> {
        self.active.into_iter().chain(self.loading).collect()
    }

    /// CPU tier contents, least recently used first.
    pub fn cpu_resident(&self) -> Vec<CellIndex> {
        self.cpu.iter().copied().collect()
    }

    pub fn pending(&self) -> impl Iterator<Item = CellIndex> + '_ {
        self.pending.iter().copied()
    }

    pub fn handle(&mut self, event: Event) -> Result<Step> {
        let mut actions = Vec::new();
        match event {
            Event::Camera { position, now_ms } => {
                self.target = Some(self.choose_target(position)?);
                self.advance(now_ms, &mut actions);
            }
            Event::FetchDone { cell, ok, now_ms } => {
                if !self.pending.remove(&cell) {
                    return Err(Error::Config(format!("fetch completion for {cell} which was not requested")));
                }
                if ok {
                    self.retries.remove(&cell);
                    self.touch_cpu(cell, &mut actions);
                    self.advance(now_ms, &mut actions);
                } else {
                    let delay_ms = match self.retries.get(&cell) {
                        Some(r) => (r.delay_ms * 2).min(self.cfg.retry_max_ms),
                        None => self.cfg.retry_initial_ms,
                    };
                    log::warn!("fetch of {cell} failed; retrying in {delay_ms} ms");
                    self.retries.insert(
                        cell,
                        Retry {
                            delay_ms,
                            next_ms: now_ms + delay_ms,
                        },
                    );
                }
            }
        }
        Ok(Step {
            render_with: self.active,
            actions,
        })
    }

    fn choose_target(&self, position: Vec3) -> Result<CellIndex> {
        let desired = self.layout.assign_submodel(position)?;
        let Some(active) = self.active else {
            return Ok(desired);
        };
        let gain = self.layout.cell_distance(position, active) - self.layout.cell_distance(position, desired);
        Ok(if desired != active && gain >= self.cfg.hysteresis {
            desired
        } else {
            active
        })
    }

    /// Moves towards the current target as far as the tiers allow.
    fn advance(&mut self, now_ms: u64, actions: &mut Vec<Action>) {
        let Some(target) = self.target else { return };
        if self.active == Some(target) {
            return;
        }
        if self.loading != Some(target) {
            if !self.cpu.contains(&target) {
                let waiting = self.retries.get(&target).is_some_and(|r| now_ms < r.next_ms);
                if !self.pending.contains(&target) && !waiting {
                    self.pending.insert(target);
                    actions.push(Action::Fetch(target));
                }
                return;
            }
            if let Some(old) = self.loading.take() {
                actions.push(Action::Evict(old, Tier::Gpu));
            }
            self.touch_cpu(target, actions);
            actions.push(Action::Promote(target));
            self.loading = Some(target);
        }
        self.loading = self.active;
        self.active = Some(target);
    }

    fn touch_cpu(&mut self, cell: CellIndex, actions: &mut Vec<Action>) {
        if let Some(i) = self.cpu.iter().position(|&c| c == cell) {
            self.cpu.remove(i);
        }
        self.cpu.push_back(cell);
        while self.cpu.len() > self.cfg.cpu_capacity {
            let old = self.cpu.pop_front().expect("non-empty");
            actions.push(Action::Evict(old, Tier::Cpu));
        }
    }
}
