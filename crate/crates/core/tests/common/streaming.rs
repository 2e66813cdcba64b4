//! Random-walk driver for the streaming state machine, checked against a
//! timestamp-based LRU reference.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilefield_core::scene::{CellIndex, SceneLayout};
use tilefield_core::streamer::{Action, CacheState, Event, StreamerConfig, Tier};
use tilefield_core::Vec3;

/// LRU cache that stores last-use stamps and evicts the oldest stamp.
pub struct ReferenceLru {
    capacity: usize,
    clock: u64,
    stamps: HashMap<CellIndex, u64>,
}

impl ReferenceLru {
    pub fn new(capacity: usize) -> Self {
        ReferenceLru { capacity, clock: 0, stamps: HashMap::new() }
    }

    /// Records a use; returns the evicted entry, if any.
    pub fn access(&mut self, k: CellIndex) -> Option<CellIndex> {
        self.clock += 1;
        self.stamps.insert(k, self.clock);
        if self.stamps.len() <= self.capacity {
            return None;
        }
        let (&old, _) = self.stamps.iter().min_by_key(|(_, &t)| t).unwrap();
        self.stamps.remove(&old);
        Some(old)
    }

    /// Least recently used first.
    pub fn order(&self) -> Vec<CellIndex> {
        let mut v: Vec<_> = self.stamps.iter().map(|(&k, &t)| (t, k)).collect();
        v.sort();
        v.into_iter().map(|(_, k)| k).collect()
    }
}

#[derive(Debug, Default)]
pub struct WalkReport {
    pub steps: usize,
    pub fetches: usize,
    pub swaps: usize,
    pub peak_gpu: usize,
}

fn random_layout<R: Rng>(rng: &mut R) -> SceneLayout {
    let mut layout = SceneLayout::single_cell();
    layout.k = 3;
    layout.contraction_prescale = 0.8;
    let all: Vec<CellIndex> = (0..27).map(|i| CellIndex::new(i / 9, i / 3 % 3, i % 3)).collect();
    let mut active: Vec<CellIndex> = all.iter().copied().filter(|_| rng.random_bool(0.4)).collect();
    while active.len() < 2 {
        active.push(*all.choose(rng).unwrap());
        active.sort();
        active.dedup();
    }
    layout.active = active;
    layout
}

/// Drives `steps` events: camera moves interleaved with completions of
/// in-flight fetches, a tenth of which fail. Checks tier invariants and LRU
/// equivalence after every event, then checks that a resting camera is
/// eventually served by its own cell.
pub fn random_walk(seed: u64, steps: usize, cpu_capacity: usize) -> Result<WalkReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = random_layout(&mut rng);
    let cfg = StreamerConfig { cpu_capacity, ..Default::default() };
    let mut state = CacheState::new(layout.clone(), cfg).map_err(|e| e.to_string())?;
    let mut lru = ReferenceLru::new(cpu_capacity);
    let mut gpu: Vec<CellIndex> = Vec::new();
    let mut cpu: BTreeSet<CellIndex> = BTreeSet::new();
    let mut in_flight: Vec<CellIndex> = Vec::new();
    let mut pos = Vec3::new(0.0, 0.0, 0.0);
    let mut now = 0u64;
    let mut report = WalkReport::default();
    let mut last_render = None;

    let mut apply = |event: Event,
                     state: &mut CacheState,
                     in_flight: &mut Vec<CellIndex>,
                     report: &mut WalkReport|
     -> Result<Option<CellIndex>, String> {
        let mut expected_evictions = Vec::new();
        if let Event::FetchDone { cell, ok: true, .. } = event {
            cpu.insert(cell);
            expected_evictions.extend(lru.access(cell));
        }
        let step = state.handle(event).map_err(|e| e.to_string())?;
        let mut evictions = Vec::new();
        for a in &step.actions {
            match *a {
                Action::Fetch(k) => {
                    if in_flight.contains(&k) || cpu.contains(&k) {
                        return Err(format!("redundant fetch of {k}"));
                    }
                    in_flight.push(k);
                    report.fetches += 1;
                }
                Action::Promote(k) => {
                    if !cpu.contains(&k) {
                        return Err(format!("promoted {k} which is not in the cpu tier"));
                    }
                    if gpu.contains(&k) {
                        return Err(format!("{k} would occupy two gpu slots"));
                    }
                    gpu.push(k);
                    expected_evictions.extend(lru.access(k));
                }
                Action::Evict(k, Tier::Gpu) => {
                    let i = gpu.iter().position(|&c| c == k).ok_or(format!("evicted absent {k}"))?;
                    gpu.remove(i);
                }
                Action::Evict(k, Tier::Cpu) => {
                    if !cpu.remove(&k) {
                        return Err(format!("evicted absent {k} from cpu"));
                    }
                    evictions.push(k);
                }
            }
            report.peak_gpu = report.peak_gpu.max(gpu.len());
            if gpu.len() > 2 {
                return Err(format!("{} bundles in the gpu tier", gpu.len()));
            }
        }
        if evictions != expected_evictions {
            return Err(format!("evicted {evictions:?}, reference evicted {expected_evictions:?}"));
        }
        if state.cpu_resident() != lru.order() {
            return Err(format!("cpu tier {:?} vs reference {:?}", state.cpu_resident(), lru.order()));
        }
        let mut resident = state.gpu_resident();
        resident.sort();
        let mut model = gpu.clone();
        model.sort();
        if resident != model {
            return Err(format!("gpu tier {resident:?} vs replayed actions {model:?}"));
        }
        if let Some(r) = step.render_with {
            if !gpu.contains(&r) {
                return Err(format!("rendering with {r}, which is not loaded"));
            }
        }
        Ok(step.render_with)
    };

    for _ in 0..steps {
        now += 16;
        report.steps += 1;
        let event = if !in_flight.is_empty() && rng.random_bool(0.3) {
            let cell = in_flight.swap_remove(rng.random_range(0..in_flight.len()));
            Event::FetchDone { cell, ok: rng.random_bool(0.9), now_ms: now }
        } else {
            let step = Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
            pos = (pos + step).map(|x| x.clamp(-1.8, 1.8));
            Event::Camera { position: pos, now_ms: now }
        };
        let r = apply(event, &mut state, &mut in_flight, &mut report)?;
        if r != last_render && last_render.is_some() {
            report.swaps += 1;
        }
        if last_render.is_some() && r.is_none() {
            return Err("lost the active submodel".into());
        }
        last_render = r;
    }

    // Liveness: rest inside some active cell with reliable fetches.
    let home = *layout.active.choose(&mut rng).unwrap();
    let rest = layout.cell_center(home);
    for _ in 0..2000 {
        now += 16;
        let event = match in_flight.pop() {
            Some(cell) => Event::FetchDone { cell, ok: true, now_ms: now },
            None => Event::Camera { position: rest, now_ms: now },
        };
        if apply(event, &mut state, &mut in_flight, &mut report)? == Some(home) && in_flight.is_empty() {
            return Ok(report);
        }
    }
    Err(format!("camera resting in {home} never got served by it"))
}
