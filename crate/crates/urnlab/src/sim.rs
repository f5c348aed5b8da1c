//! Exact event-driven simulation of the N-urn jump process.
//!
//! A particle in urn i triggers cross events toward urn j != i with rate
//! (1/N) lambda_k(i/N, j/N) (the particle is removed, k offspring land in
//! j) and in-place events with rate psi_k(i/N) (the particle is replaced
//! by k offspring). Simulation is kinetic Monte Carlo: the total rate W
//! drives an exponential clock, a Fenwick tree over per-urn rates selects
//! the source urn in O(log N), and precomputed alias tables select the
//! destination and offspring count in O(1).
//!
//! All randomness flows from a `SeedKey`: urn i's initial Poisson count
//! uses stream i, the event loop the reserved event stream, so a replica
//! is a pure function of its key.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};

use crate::alias::AliasTable;
use crate::error::{Error, Result};
use crate::fenwick::FenwickTree;
use crate::grid::GridFunction;
use crate::model::DiscretizedKernel;
use crate::rng::{SeedKey, EVENT_STREAM};

/// Scheduled full rebuild of the rate index, flushing float drift from
/// incremental updates.
const REBUILD_PERIOD: u64 = 100_000;

/// Static per-model sampling tables at a fixed urn count N.
#[derive(Debug)]
pub struct RateTables {
    n: usize,
    k_max: usize,
    /// R(i): total event rate of one particle sitting in urn i.
    per_particle: Vec<f64>,
    /// Cross part of R(i): (1/N) sum_{j != i} sum_k lambda_k.
    cross: Vec<f64>,
    /// Destination choice for a cross event from i (self-weight zero).
    dest: Vec<Option<AliasTable>>,
    /// Offspring count for a cross event i -> j, indexed i * n + j.
    offspring: Vec<Option<AliasTable>>,
    /// Offspring count for an in-place event at i.
    inplace_k: Vec<Option<AliasTable>>,
}

impl RateTables {
    /// Tabulate from a kernel discretized at the urn grid (M = N).
    pub fn build(kern: &DiscretizedKernel) -> Self {
        let n = kern.grid_size;
        let width = kern.k_max + 1;
        let mut cross = vec![0.0; n];
        let mut dest = Vec::with_capacity(n);
        let mut offspring = Vec::with_capacity(n * n);
        let mut row = vec![0.0; n];
        let mut k_weights = vec![0.0; width];
        for i in 0..n {
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { kern.a_sum[i * n + j] };
            }
            cross[i] = row.iter().sum::<f64>() / n as f64;
            dest.push(AliasTable::new(&row));
            for j in 0..n {
                if j == i || kern.a_sum[i * n + j] <= 0.0 {
                    offspring.push(None);
                    continue;
                }
                for k in 0..width {
                    k_weights[k] = kern.lambda[k][i * n + j];
                }
                offspring.push(AliasTable::new(&k_weights));
            }
        }
        let mut per_particle = vec![0.0; n];
        let mut inplace_k = Vec::with_capacity(n);
        for i in 0..n {
            for k in 0..width {
                k_weights[k] = kern.psi[k][i];
            }
            per_particle[i] = cross[i] + k_weights.iter().sum::<f64>();
            inplace_k.push(AliasTable::new(&k_weights));
        }
        RateTables {
            n,
            k_max: kern.k_max,
            per_particle,
            cross,
            dest,
            offspring,
            inplace_k,
        }
    }

    pub fn n_urns(&self) -> usize {
        self.n
    }

    pub fn max_offspring(&self) -> usize {
        self.k_max
    }

    pub fn per_particle(&self) -> &[f64] {
        &self.per_particle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Cross,
    InPlace,
}

#[derive(Debug, Clone, Copy)]
pub struct EventRecord {
    pub time: f64,
    pub source: usize,
    /// Destination urn; equals `source` for in-place events.
    pub dest: usize,
    pub offspring: u64,
    pub kind: EventKind,
}

/// Outcome of asking for the next event.
#[derive(Debug, Clone, Copy)]
pub enum Step {
    Event(EventRecord),
    /// No particles left; the process is frozen forever.
    Extinct,
}

/// Mutable simulation state: counts, clock, and the rate index.
#[derive(Debug, Clone)]
pub struct UrnState {
    counts: Vec<u64>,
    total: u64,
    clock: f64,
    /// weights[i] = counts[i] * R(i), mirrored into the Fenwick index.
    weights: Vec<f64>,
    index: FenwickTree,
    events_since_rebuild: u64,
}

impl UrnState {
    pub fn from_counts(counts: Vec<u64>, tables: &RateTables) -> Self {
        assert_eq!(counts.len(), tables.n, "counts must cover every urn");
        let weights: Vec<f64> = counts
            .iter()
            .zip(&tables.per_particle)
            .map(|(&c, &r)| c as f64 * r)
            .collect();
        let index = FenwickTree::from_weights(&weights);
        let total = counts.iter().sum();
        UrnState {
            counts,
            total,
            clock: 0.0,
            weights,
            index,
            events_since_rebuild: 0,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_particles(&self) -> u64 {
        self.total
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Total rate as tracked incrementally by the index.
    pub fn indexed_total_rate(&self) -> f64 {
        self.index.total()
    }

    /// Total rate recomputed from scratch; the index must track this to
    /// within float drift.
    pub fn direct_total_rate(&self, tables: &RateTables) -> f64 {
        self.counts
            .iter()
            .zip(&tables.per_particle)
            .map(|(&c, &r)| c as f64 * r)
            .sum()
    }

    fn rebuild(&mut self, tables: &RateTables) {
        for i in 0..self.counts.len() {
            self.weights[i] = self.counts[i] as f64 * tables.per_particle[i];
        }
        self.index = FenwickTree::from_weights(&self.weights);
        self.events_since_rebuild = 0;
    }
}

/// Draw initial counts: urn i is Poisson with mean phi(i/N), from stream i
/// of the key, so the draw depends only on (key, i).
pub fn init_state(kern: &DiscretizedKernel, tables: &RateTables, key: SeedKey) -> UrnState {
    let n = kern.grid_size;
    assert_eq!(n, tables.n, "tables and kernel must share the grid");
    let counts: Vec<u64> = (0..n)
        .map(|i| {
            let mean = kern.phi[i];
            if mean <= 0.0 {
                0
            } else {
                let dist = Poisson::new(mean).expect("validated phi is finite and positive");
                let mut rng = key.stream(i as u64);
                dist.sample(&mut rng) as u64
            }
        })
        .collect();
    UrnState::from_counts(counts, tables)
}

/// Sample the next event (time advance, source urn, kind, destination,
/// offspring). A failed consistency check on the rate index triggers one
/// rebuild-and-retry; a second failure is a hard error.
pub fn next_event(
    state: &mut UrnState,
    tables: &RateTables,
    rng: &mut ChaCha8Rng,
) -> Result<Step> {
    if state.total == 0 {
        return Ok(Step::Extinct);
    }
    for attempt in 0..2 {
        let w = state.index.total();
        if !(w > 0.0) {
            // Particles exist but the index says otherwise (or every
            // particle sits in a zero-rate urn, making W legitimately 0).
            if state.direct_total_rate(tables) <= 0.0 {
                return Ok(Step::Extinct);
            }
            state.rebuild(tables);
            continue;
        }
        let exp: f64 = Exp1.sample(rng);
        let dt = exp / w;
        let target = rng.gen::<f64>() * w;
        let i = state.index.descend(target);
        if i >= tables.n || state.counts[i] == 0 || state.weights[i] <= 0.0 {
            if attempt == 0 {
                state.rebuild(tables);
                continue;
            }
            return Err(Error::RateIndexCorrupt {
                urn: i.min(tables.n - 1),
            });
        }
        let time = state.clock + dt;
        let r = tables.per_particle[i];
        let is_cross = rng.gen::<f64>() * r < tables.cross[i];
        let record = if is_cross {
            let dest = tables.dest[i]
                .as_ref()
                .expect("positive cross rate implies a destination table")
                .sample(rng);
            let k = tables.offspring[i * tables.n + dest]
                .as_ref()
                .expect("sampled destination implies positive kernel mass")
                .sample(rng) as u64;
            EventRecord {
                time,
                source: i,
                dest,
                offspring: k,
                kind: EventKind::Cross,
            }
        } else {
            let k = tables.inplace_k[i]
                .as_ref()
                .expect("positive in-place rate implies an offspring table")
                .sample(rng) as u64;
            EventRecord {
                time,
                source: i,
                dest: i,
                offspring: k,
                kind: EventKind::InPlace,
            }
        };
        return Ok(Step::Event(record));
    }
    unreachable!("both attempts either returned or errored")
}

/// Apply an event to the state: counts, total, clock, and the rate index.
pub fn apply_event(state: &mut UrnState, tables: &RateTables, event: &EventRecord) {
    assert!(
        state.counts[event.source] >= 1,
        "urn count underflow at urn {}",
        event.source
    );
    match event.kind {
        EventKind::Cross => {
            state.counts[event.source] -= 1;
            state.counts[event.dest] += event.offspring;
        }
        EventKind::InPlace => {
            // k = 1 is a null move: the state is unchanged but time advances.
            state.counts[event.source] = state.counts[event.source] - 1 + event.offspring;
        }
    }
    state.total = state.total - 1 + event.offspring;
    for urn in [event.source, event.dest] {
        let fresh = state.counts[urn] as f64 * tables.per_particle[urn];
        state.index.add(urn, fresh - state.weights[urn]);
        state.weights[urn] = fresh;
        if event.dest == event.source {
            break;
        }
    }
    state.clock = event.time;
    state.events_since_rebuild += 1;
    if state.events_since_rebuild >= REBUILD_PERIOD {
        state.rebuild(tables);
    }
}

/// A level target on a recorded observable.
#[derive(Debug, Clone, Copy)]
pub struct HitTarget {
    pub function: usize,
    pub level: f64,
}

/// What one trajectory should observe.
#[derive(Debug, Clone)]
pub struct TrajectoryConfig<'a> {
    pub horizon: f64,
    /// Sorted, within [0, horizon].
    pub record_times: &'a [f64],
    /// Test functions tabulated on the urn grid.
    pub functions: &'a [GridFunction],
    pub targets: &'a [HitTarget],
    pub particle_cap: u64,
    pub record_events: bool,
    /// Also keep full count snapshots at record times.
    pub record_snapshots: bool,
    /// Stop early once every record and target is resolved (the remaining
    /// evolution is unobserved; final state then reflects the stop time).
    pub stop_when_resolved: bool,
    /// Replica index, echoed into explosion errors.
    pub replica: usize,
}

/// Observables of a single replica.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub record_times: Vec<f64>,
    /// mu[r][f]: empirical pairing (1/N) sum_i X(i) f(i/N) at record r.
    pub mu: Vec<Vec<f64>>,
    /// First time each target level was reached, if it was.
    pub hits: Vec<Option<f64>>,
    pub event_count: u64,
    pub final_counts: Vec<u64>,
    pub final_clock: f64,
    pub extinct_at: Option<f64>,
    pub snapshots: Option<Vec<Vec<u64>>>,
    pub events: Option<Vec<EventRecord>>,
}

fn pair_counts(counts: &[u64], f: &GridFunction) -> f64 {
    let n = counts.len() as f64;
    counts
        .iter()
        .zip(f.values())
        .map(|(&c, &fv)| c as f64 * fv)
        .sum::<f64>()
        / n
}

/// Run one replica: exact event loop to the horizon with incremental
/// observable tracking.
pub fn run_trajectory(
    kern: &DiscretizedKernel,
    tables: &RateTables,
    cfg: &TrajectoryConfig,
    key: SeedKey,
) -> Result<Trajectory> {
    let n = tables.n;
    for f in cfg.functions {
        if f.grid_size() != n {
            return Err(Error::GridMismatch {
                expected: n,
                got: f.grid_size(),
            });
        }
    }
    debug_assert!(cfg.record_times.windows(2).all(|w| w[0] <= w[1]));
    let mut state = init_state(kern, tables, key);
    let mut rng = key.stream(EVENT_STREAM);
    let inv_n = 1.0 / n as f64;

    let mut mu_cur: Vec<f64> = cfg.functions.iter().map(|f| pair_counts(&state.counts, f)).collect();
    let mut hits: Vec<Option<f64>> = cfg
        .targets
        .iter()
        .map(|t| (mu_cur[t.function] >= t.level).then_some(0.0))
        .collect();
    let mut mu_out: Vec<Vec<f64>> = Vec::with_capacity(cfg.record_times.len());
    let mut snapshots = cfg.record_snapshots.then(Vec::new);
    let mut events = cfg.record_events.then(Vec::new);
    let mut rec = 0usize;
    let mut event_count = 0u64;
    let mut extinct_at = None;

    loop {
        let all_hit = hits.iter().all(Option::is_some);
        if cfg.stop_when_resolved
            && rec == cfg.record_times.len()
            && all_hit
            && !cfg.record_events
        {
            break;
        }
        match next_event(&mut state, tables, &mut rng)? {
            Step::Extinct => {
                // The state is frozen; recompute pairings exactly (all
                // zero) instead of leaving incremental float dust.
                for (fi, f) in cfg.functions.iter().enumerate() {
                    mu_cur[fi] = pair_counts(&state.counts, f);
                }
                extinct_at = Some(state.clock);
                break;
            }
            Step::Event(ev) => {
                // The pre-event state holds on [clock, ev.time).
                while rec < cfg.record_times.len() && cfg.record_times[rec] < ev.time {
                    mu_out.push(mu_cur.clone());
                    if let Some(s) = snapshots.as_mut() {
                        s.push(state.counts.clone());
                    }
                    rec += 1;
                }
                if ev.time > cfg.horizon {
                    state.clock = cfg.horizon;
                    break;
                }
                apply_event(&mut state, tables, &ev);
                event_count += 1;
                if state.events_since_rebuild == 0 {
                    // Fresh rebuild: also flush drift from the running pairings.
                    for (fi, f) in cfg.functions.iter().enumerate() {
                        mu_cur[fi] = pair_counts(&state.counts, f);
                    }
                } else {
                    for (fi, f) in cfg.functions.iter().enumerate() {
                        let fv = f.values();
                        mu_cur[fi] += match ev.kind {
                            EventKind::Cross => {
                                (ev.offspring as f64 * fv[ev.dest] - fv[ev.source]) * inv_n
                            }
                            EventKind::InPlace => {
                                (ev.offspring as f64 - 1.0) * fv[ev.source] * inv_n
                            }
                        };
                    }
                }
                if state.total > cfg.particle_cap {
                    return Err(Error::Explosion {
                        replica: cfg.replica,
                        time: state.clock,
                        count: state.total,
                        cap: cfg.particle_cap,
                    });
                }
                for (ti, t) in cfg.targets.iter().enumerate() {
                    if hits[ti].is_none() && mu_cur[t.function] >= t.level {
                        hits[ti] = Some(ev.time);
                    }
                }
                if let Some(log) = events.as_mut() {
                    log.push(ev);
                }
            }
        }
    }
    // Nothing changes after extinction or past the horizon; remaining
    // record times see the current state.
    while rec < cfg.record_times.len() {
        mu_out.push(mu_cur.clone());
        if let Some(s) = snapshots.as_mut() {
            s.push(state.counts.clone());
        }
        rec += 1;
    }
    Ok(Trajectory {
        record_times: cfg.record_times.to_vec(),
        mu: mu_out,
        hits,
        event_count,
        final_counts: state.counts,
        final_clock: state.clock,
        extinct_at,
        snapshots,
        events,
    })
}
