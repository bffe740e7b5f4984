//! Target-row-refresh mitigation: a sampler that watches activations and an
//! inhibitor that refreshes suspected victims during REF.
//!
//! State is kept per bank. Victims are queued by the sampler and only ever
//! drained by [`TrrState::inhibit`], which the engine calls from its REF
//! handler with the per-REF budget.

use crate::config::{SimConfig, TrrVariant};
use crate::rng::{split, CounterRng, Stream};
use crate::tracker::BankHammerState;
use serde::{Deserialize, Serialize};
use std::collections::{HashSet, VecDeque};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrrParams {
    pub variant: TrrVariant,
    pub threshold: u64,
    pub companion_threshold: u64,
    pub counter_table_length: usize,
    pub companion_table_length: usize,
    pub probability: f64,
    pub reset_tables: bool,
}

impl TrrParams {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            variant: cfg.trr_variant,
            threshold: cfg.trr_threshold,
            companion_threshold: cfg.companion_threshold,
            counter_table_length: cfg.counter_table_length,
            companion_table_length: cfg.companion_table_length,
            probability: cfg.trr_probability(),
            reset_tables: cfg.trr_reset_tables,
        }
    }
}

/// Counters of one tREFW window, summed over banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrrWindowStats {
    pub window: u64,
    /// Activations seen by an active sampler.
    pub samples: u64,
    /// Sampler firings (probabilistic hit or counter reaching its threshold).
    pub triggers: u64,
    /// Distinct victims queued this window, including those carried in.
    pub queued: u64,
    pub refreshed: u64,
    /// Counter plus companion table entries at window end.
    pub table_occupancy: u64,
}

impl fmt::Display for TrrWindowStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.window, self.samples, self.queued, self.refreshed, self.table_occupancy
        )
    }
}

/// Bounded row → count table with minimum-count eviction, lowest row first
/// on ties.
#[derive(Debug, Clone, Default)]
struct CountTable {
    capacity: usize,
    entries: Vec<(u32, u64)>,
}

impl CountTable {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    fn get_mut(&mut self, row: u32) -> Option<&mut u64> {
        self.entries
            .iter_mut()
            .find(|(r, _)| *r == row)
            .map(|(_, c)| c)
    }

    /// Insert a new row; returns the evicted entry when full.
    fn insert(&mut self, row: u32, count: u64) -> Option<(u32, u64)> {
        let evicted = if self.entries.len() >= self.capacity {
            let idx = self
                .entries
                .iter()
                .enumerate()
                .min_by_key(|(_, (r, c))| (*c, *r))
                .map(|(i, _)| i)?;
            Some(self.entries.swap_remove(idx))
        } else {
            None
        };
        self.entries.push((row, count));
        evicted
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone)]
struct BankTrr {
    counter: CountTable,
    companion: CountTable,
    pending: VecDeque<u32>,
    pending_set: HashSet<u32>,
    acts: u64,
}

#[derive(Debug, Clone)]
pub struct TrrState {
    params: TrrParams,
    rows_per_bank: u32,
    banks: Vec<BankTrr>,
    current: TrrWindowStats,
}

impl TrrState {
    pub fn new(params: TrrParams, total_banks: usize, rows_per_bank: u32) -> Self {
        let bank = BankTrr {
            counter: CountTable::new(params.counter_table_length),
            companion: CountTable::new(params.companion_table_length),
            pending: VecDeque::new(),
            pending_set: HashSet::new(),
            acts: 0,
        };
        Self {
            params,
            rows_per_bank,
            banks: vec![bank; total_banks],
            current: TrrWindowStats::default(),
        }
    }

    pub fn params(&self) -> &TrrParams {
        &self.params
    }

    /// Statistics of the window in progress.
    pub fn current_stats(&self) -> &TrrWindowStats {
        &self.current
    }

    pub fn pending(&self, bank: usize) -> impl Iterator<Item = u32> + '_ {
        self.banks[bank].pending.iter().copied()
    }

    pub fn pending_len(&self) -> usize {
        self.banks.iter().map(|b| b.pending.len()).sum()
    }

    pub fn counter_table_len(&self, bank: usize) -> usize {
        self.banks[bank].counter.len()
    }

    pub fn companion_table_len(&self, bank: usize) -> usize {
        self.banks[bank].companion.len()
    }

    pub fn counter_of(&self, bank: usize, row: u32) -> Option<u64> {
        self.banks[bank]
            .counter
            .entries
            .iter()
            .find(|(r, _)| *r == row)
            .map(|(_, c)| *c)
    }

    /// Queue a victim refresh; duplicates of an already pending row coalesce.
    pub fn enqueue(&mut self, bank: usize, victim: u32) {
        let b = &mut self.banks[bank];
        if b.pending_set.insert(victim) {
            b.pending.push_back(victim);
            self.current.queued += 1;
        }
    }

    fn trigger(&mut self, bank: usize, aggressor: u32) {
        self.current.triggers += 1;
        if let Some(below) = aggressor.checked_sub(1) {
            self.enqueue(bank, below);
        }
        if aggressor + 1 < self.rows_per_bank {
            self.enqueue(bank, aggressor + 1);
        }
    }

    /// Sampler: observe one activation of `aggressor` in dense bank `bank`.
    pub fn sample(&mut self, bank: usize, aggressor: u32, rng: &CounterRng) {
        let p = self.params;
        if p.variant == TrrVariant::None {
            return;
        }
        self.current.samples += 1;
        let b = &mut self.banks[bank];
        let ordinal = b.acts;
        b.acts += 1;
        let fire = match p.variant {
            TrrVariant::None => false,
            TrrVariant::Probabilistic => {
                let (lo, hi) = split(ordinal);
                rng.uniform(Stream::TrrSampler, bank as u32, lo, hi, 0) < p.probability
            }
            TrrVariant::Counter | TrrVariant::Companion => {
                if let Some(c) = b.counter.get_mut(aggressor) {
                    *c += 1;
                    bump(c, p.threshold)
                } else if let Some(c) = (p.variant == TrrVariant::Companion)
                    .then(|| b.companion.get_mut(aggressor))
                    .flatten()
                {
                    *c += 1;
                    bump(c, p.companion_threshold)
                } else {
                    let evicted = b.counter.insert(aggressor, 1);
                    if let (Some((row, count)), TrrVariant::Companion) = (evicted, p.variant) {
                        b.companion.insert(row, count);
                    }
                    let c = b.counter.get_mut(aggressor).expect("just inserted");
                    bump(c, p.threshold)
                }
            }
        };
        if fire {
            self.trigger(bank, aggressor);
        }
    }

    /// Inhibitor: refresh up to `budget` distinct pending victims of `bank`,
    /// clearing their hammer exposure. Returns the refreshed rows.
    pub fn inhibit(
        &mut self,
        bank: usize,
        tracker: &mut BankHammerState,
        budget: usize,
    ) -> Vec<u32> {
        let b = &mut self.banks[bank];
        let mut done = Vec::with_capacity(budget.min(b.pending.len()));
        while done.len() < budget {
            let Some(v) = b.pending.pop_front() else {
                break;
            };
            b.pending_set.remove(&v);
            if done.contains(&v) {
                continue;
            }
            tracker.on_trr_refresh(v);
            done.push(v);
        }
        self.current.refreshed += done.len() as u64;
        done
    }

    /// Close the window in progress and start window `next`. Returns the
    /// closed window's statistics.
    pub fn roll_window(&mut self, next: u64) -> TrrWindowStats {
        let mut closed = self.current;
        closed.table_occupancy = self
            .banks
            .iter()
            .map(|b| (b.counter.len() + b.companion.len()) as u64)
            .sum();
        if self.params.reset_tables {
            for b in &mut self.banks {
                b.counter.clear();
                b.companion.clear();
            }
        }
        self.current = TrrWindowStats {
            window: next,
            queued: self.pending_len() as u64,
            ..TrrWindowStats::default()
        };
        closed
    }
}

/// Threshold check on a freshly incremented counter; resets it on firing.
fn bump(c: &mut u64, threshold: u64) -> bool {
    if *c >= threshold {
        *c = 0;
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(variant: TrrVariant, threshold: u64) -> TrrParams {
        TrrParams {
            variant,
            threshold,
            companion_threshold: 4,
            counter_table_length: 4,
            companion_table_length: 2,
            probability: 1.0 / threshold as f64,
            reset_tables: false,
        }
    }

    #[test]
    fn disabled_variant_never_queues() {
        let rng = CounterRng::new(0);
        let mut t = TrrState::new(params(TrrVariant::None, 1), 1, 1024);
        for i in 0..1_000_000u32 {
            t.sample(0, i % 1024, &rng);
        }
        assert_eq!(t.pending_len(), 0);
        assert_eq!(t.current_stats().samples, 0);
    }

    #[test]
    fn counter_fires_at_threshold_and_resets() {
        let rng = CounterRng::new(0);
        let mut t = TrrState::new(params(TrrVariant::Counter, 3), 1, 1024);
        for _ in 0..3 {
            t.sample(0, 10, &rng);
        }
        assert_eq!(t.pending(0).collect::<Vec<_>>(), vec![9, 11]);
        assert_eq!(t.counter_of(0, 10), Some(0));
    }

    #[test]
    fn eviction_takes_minimum_lowest_row() {
        let rng = CounterRng::new(0);
        let mut t = TrrState::new(params(TrrVariant::Counter, 100), 1, 1024);
        for (row, n) in [(5, 3), (2, 1), (7, 1), (9, 2)] {
            for _ in 0..n {
                t.sample(0, row, &rng);
            }
        }
        t.sample(0, 20, &rng);
        assert_eq!(t.counter_of(0, 2), None);
        assert_eq!(t.counter_of(0, 7), Some(1));
        assert_eq!(t.counter_of(0, 20), Some(1));
    }

    #[test]
    fn companion_keeps_evicted_counts() {
        let rng = CounterRng::new(0);
        let mut t = TrrState::new(params(TrrVariant::Companion, 100), 1, 1024);
        for _ in 0..3 {
            t.sample(0, 1, &rng);
        }
        for row in 10..14 {
            t.sample(0, row, &rng);
            t.sample(0, row, &rng);
            t.sample(0, row, &rng);
            t.sample(0, row, &rng);
        }
        // row 1 (count 3) was evicted into the companion table
        assert_eq!(t.counter_of(0, 1), None);
        assert_eq!(t.companion_table_len(0), 1);
        assert_eq!(t.pending_len(), 0);
        // one more ACT reaches the companion threshold of 4
        t.sample(0, 1, &rng);
        assert_eq!(t.pending(0).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn tables_stay_bounded_under_adversarial_streams() {
        let rng = CounterRng::new(0);
        for variant in [TrrVariant::Counter, TrrVariant::Companion] {
            let mut t = TrrState::new(params(variant, 5), 1, 4096);
            for i in 0..400u32 {
                t.sample(0, (i * 37) % 4096, &rng);
                assert!(t.counter_table_len(0) <= 4);
                assert!(t.companion_table_len(0) <= 2);
            }
        }
    }

    #[test]
    fn inhibit_coalesces_and_respects_budget() {
        let rng = CounterRng::new(0);
        let mut t = TrrState::new(params(TrrVariant::Counter, 3), 1, 1024);
        let mut h = BankHammerState::new(0, 0, 0, 1024);
        assert!(t.inhibit(0, &mut h, 2).is_empty());
        for v in [5, 5, 7] {
            t.enqueue(0, v);
        }
        assert_eq!(t.inhibit(0, &mut h, 2), vec![5, 7]);
        for v in [1, 2, 3, 4, 5] {
            t.enqueue(0, v);
        }
        assert_eq!(t.inhibit(0, &mut h, 2), vec![1, 2]);
        assert_eq!(t.pending_len(), 3);
        let _ = rng;
    }

    #[test]
    fn inhibit_clears_victim_exposure() {
        let mut t = TrrState::new(params(TrrVariant::Counter, 3), 1, 1024);
        let mut h = BankHammerState::new(0, 0, 0, 1024);
        for _ in 0..40 {
            h.expose(9, 0);
        }
        t.enqueue(0, 9);
        t.inhibit(0, &mut h, 1);
        assert_eq!(h.exposure(9), 0);
    }

    #[test]
    fn window_stats_lines() {
        let rng = CounterRng::new(0);
        let mut t = TrrState::new(params(TrrVariant::Counter, 3), 1, 1024);
        assert_eq!(t.roll_window(1).to_string(), "0 0 0 0 0");
        for _ in 0..3 {
            t.sample(0, 10, &rng);
        }
        let mut h = BankHammerState::new(0, 0, 0, 1024);
        t.inhibit(0, &mut h, 1);
        let s = t.roll_window(2);
        assert_eq!(s.to_string(), "1 3 2 1 1");
        assert!(s.refreshed <= s.queued);
        // the deferred victim is carried into the next window
        assert_eq!(t.current_stats().queued, 1);
    }

    #[test]
    fn probabilistic_enqueue_rate_matches_binomial() {
        let rng = CounterRng::new(42);
        let p = 0.01;
        let n = 100_000u32;
        let mut t = TrrState::new(params(TrrVariant::Probabilistic, 100), 1, 1 << 20);
        for i in 0..n {
            t.sample(0, 1 + (i % 1000) * 4, &rng);
        }
        let k = t.current_stats().triggers as f64;
        let mean = f64::from(n) * p;
        let sd = (mean * (1.0 - p)).sqrt();
        assert!((k - mean).abs() < 3.0 * sd, "{k} vs {mean}");
    }
}
