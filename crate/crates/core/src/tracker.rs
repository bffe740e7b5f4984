//! Per-bank activation tracking and bitflip sampling.
//!
//! Every activation of an aggressor row is an *evaluation* of each victim in
//! its neighbourhood: rows at distance one always, rows at distance two only
//! when the row between them has been activated in the current window
//! (half-double). Each evaluation raises the victim's exposure by one; once
//! exposure reaches the RowHammer threshold the evaluation *qualifies* and
//! every not-yet-flipped weak cell of the victim flips independently with the
//! probability of the evaluation's pattern class.
//!
//! Sampling uses exponential clocks instead of one uniform draw per cell per
//! evaluation. Each weak cell gets a threshold `E ~ Exp(1)` when it is armed,
//! the row accumulates hazard `-ln(1 - p)` per qualifying evaluation, and a cell
//! flips at the first evaluation where the accumulated hazard reaches its
//! threshold. That is exactly the law of independent per-evaluation Bernoulli
//! trials (`P(no flip after n) = prod (1 - p_i)`), keyed by
//! `(seed, bank, row, column, arm epoch)` and therefore independent of
//! evaluation order, but costs O(1) per evaluation instead of O(weak cells).

use crate::rng::{CounterRng, Stream};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrackerError {
    #[error("rows {aggressor} and {victim} are not 1 or 2 rows apart")]
    Distance { aggressor: u32, victim: u32 },
}

/// Access pattern that produced an evaluation, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternClass {
    SingleSided,
    HalfDouble,
    DoubleSided,
}

impl PatternClass {
    pub const ALL: [PatternClass; 3] = [
        PatternClass::SingleSided,
        PatternClass::HalfDouble,
        PatternClass::DoubleSided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternClass::SingleSided => "single_sided",
            PatternClass::HalfDouble => "half_double",
            PatternClass::DoubleSided => "double_sided",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PatternClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PatternClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown pattern class `{s}`"))
    }
}

/// Per-activation flip probability of one weak cell, by pattern class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Probabilities {
    pub single_sided: f64,
    pub double_sided: f64,
    pub half_double: f64,
}

impl Probabilities {
    pub fn uniform(p: f64) -> Self {
        Self {
            single_sided: p,
            double_sided: p,
            half_double: p,
        }
    }

    pub fn for_class(&self, class: PatternClass) -> f64 {
        match class {
            PatternClass::SingleSided => self.single_sided,
            PatternClass::DoubleSided => self.double_sided,
            PatternClass::HalfDouble => self.half_double,
        }
    }
}

/// One injected bitflip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitflipRecord {
    pub tick: u64,
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
    pub column: u32,
    pub pattern: PatternClass,
}

impl fmt::Display for BitflipRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.tick, self.rank, self.bank, self.row, self.column, self.pattern
        )
    }
}

/// Pattern class of one evaluation of `victim` caused by an activation of
/// `aggressor`, given the activation counts of the current window.
pub fn classify(
    acts: impl Fn(u32) -> u32,
    aggressor: u32,
    victim: u32,
) -> Result<PatternClass, TrackerError> {
    match aggressor.abs_diff(victim) {
        1 => {
            let below = victim.checked_sub(1).map_or(0, &acts);
            let above = victim.checked_add(1).map_or(0, &acts);
            Ok(if below >= 1 && above >= 1 {
                PatternClass::DoubleSided
            } else {
                PatternClass::SingleSided
            })
        }
        2 => {
            let middle = aggressor.min(victim) + 1;
            Ok(if acts(middle) >= 1 {
                PatternClass::HalfDouble
            } else {
                PatternClass::SingleSided
            })
        }
        _ => Err(TrackerError::Distance { aggressor, victim }),
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
struct WindowCounters {
    acts: u32,
    exposure: u64,
}

/// Exponential clocks of one victim row's weak cells.
#[derive(Debug, Clone, Default)]
struct CellClocks {
    hazard: f64,
    /// Min-heap of (threshold bits, column). Non-negative floats order like
    /// their bit patterns.
    armed: BinaryHeap<Reverse<(u64, u32)>>,
    flipped: BTreeSet<u32>,
    epoch: u32,
}

/// Hammer state of one bank.
#[derive(Debug, Clone)]
pub struct BankHammerState {
    rank: u32,
    bank: u32,
    bank_index: u32,
    rows_per_bank: u32,
    window: HashMap<u32, WindowCounters>,
    cells: HashMap<u32, CellClocks>,
    trials: u64,
}

/// Everything an evaluation needs besides the bank state.
#[derive(Debug, Clone, Copy)]
pub struct FaultParams {
    pub probabilities: Probabilities,
    pub rowhammer_threshold: u64,
    pub rng: CounterRng,
}

impl BankHammerState {
    /// `bank_index` is the dense index across all ranks; it keys the RNG.
    pub fn new(rank: u32, bank: u32, bank_index: u32, rows_per_bank: u32) -> Self {
        Self {
            rank,
            bank,
            bank_index,
            rows_per_bank,
            window: HashMap::new(),
            cells: HashMap::new(),
            trials: 0,
        }
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn bank(&self) -> u32 {
        self.bank
    }

    pub fn acts(&self, row: u32) -> u32 {
        self.window.get(&row).map_or(0, |c| c.acts)
    }

    pub fn exposure(&self, row: u32) -> u64 {
        self.window.get(&row).map_or(0, |c| c.exposure)
    }

    /// Rows with a non-zero activation count this window.
    pub fn active_rows(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.window
            .iter()
            .filter(|(_, c)| c.acts > 0)
            .map(|(r, c)| (*r, c.acts))
    }

    /// Rows with non-zero exposure this window.
    pub fn exposed_rows(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.window
            .iter()
            .filter(|(_, c)| c.exposure > 0)
            .map(|(r, c)| (*r, c.exposure))
    }

    pub fn flipped(&self, row: u32) -> impl Iterator<Item = u32> + '_ {
        self.cells
            .get(&row)
            .into_iter()
            .flat_map(|c| c.flipped.iter().copied())
    }

    pub fn flipped_count(&self, row: u32) -> usize {
        self.cells.get(&row).map_or(0, |c| c.flipped.len())
    }

    /// Cell-evaluations performed on unflipped weak cells so far.
    pub fn trials(&self) -> u64 {
        self.trials
    }

    /// Count one activation of `row`; returns the new window count.
    pub fn activate(&mut self, row: u32) -> u32 {
        let c = self.window.entry(row).or_default();
        c.acts += 1;
        c.acts
    }

    /// Victims evaluated by an activation of `aggressor`, in ascending row
    /// order. Distance-two victims appear only when the row in between has
    /// been activated this window.
    pub fn victims(&self, aggressor: u32) -> impl Iterator<Item = (u32, PatternClass)> + '_ {
        let acts = |r: u32| self.acts(r);
        [-2i64, -1, 1, 2].into_iter().filter_map(move |d| {
            let v = i64::from(aggressor) + d;
            if v < 0 || v >= i64::from(self.rows_per_bank) {
                return None;
            }
            let v = v as u32;
            if d.abs() == 2 {
                let middle = (i64::from(aggressor) + d / 2) as u32;
                if acts(middle) == 0 {
                    return None;
                }
            }
            classify(acts, aggressor, v).ok().map(|c| (v, c))
        })
    }

    /// Raise `victim`'s exposure by one; true when the evaluation qualifies.
    pub fn expose(&mut self, victim: u32, rowhammer_threshold: u64) -> bool {
        let c = self.window.entry(victim).or_default();
        c.exposure += 1;
        c.exposure >= rowhammer_threshold
    }

    /// One evaluation of `victim`: exposure update, threshold gate, and
    /// sampling over the weak cells in `weak_columns`.
    pub fn evaluate_faults(
        &mut self,
        victim: u32,
        pattern: PatternClass,
        weak_columns: &[u32],
        params: &FaultParams,
        tick: u64,
    ) -> Vec<BitflipRecord> {
        let mut out = Vec::new();
        if self.expose(victim, params.rowhammer_threshold) {
            self.sample(victim, pattern, weak_columns, params, tick, &mut out);
        }
        out
    }

    /// Sample flips for one qualifying evaluation, appending new records.
    pub fn sample(
        &mut self,
        victim: u32,
        pattern: PatternClass,
        weak_columns: &[u32],
        params: &FaultParams,
        tick: u64,
        out: &mut Vec<BitflipRecord>,
    ) {
        let p = params.probabilities.for_class(pattern);
        if weak_columns.is_empty() || p <= 0.0 {
            return;
        }
        let (bank_index, rng) = (self.bank_index, &params.rng);
        let clocks = self.cells.entry(victim).or_insert_with(|| {
            let mut c = CellClocks::default();
            for &col in weak_columns {
                c.arm(rng, bank_index, victim, col);
            }
            c
        });
        if clocks.armed.is_empty() {
            return;
        }
        self.trials += clocks.armed.len() as u64;
        let record = |column| BitflipRecord {
            tick,
            rank: self.rank,
            bank: self.bank,
            row: victim,
            column,
            pattern,
        };
        let start = out.len();
        if p >= 1.0 {
            while let Some(Reverse((_, col))) = clocks.armed.pop() {
                clocks.flipped.insert(col);
                out.push(record(col));
            }
            // Nothing is armed any more, so the hazard origin can restart.
            clocks.hazard = 0.0;
            out[start..].sort_unstable_by_key(|r| r.column);
            return;
        }
        clocks.hazard += -(-p).ln_1p();
        while let Some(&Reverse((bits, col))) = clocks.armed.peek() {
            if f64::from_bits(bits) > clocks.hazard {
                break;
            }
            clocks.armed.pop();
            clocks.flipped.insert(col);
            out.push(record(col));
        }
        out[start..].sort_unstable_by_key(|r| r.column);
    }

    /// Clear window-scoped counters. Flipped cells persist.
    pub fn reset_window(&mut self) {
        self.window.clear();
    }

    /// A targeted refresh of `victim` neutralizes its accumulated exposure.
    /// Activation counts are untouched.
    pub fn on_trr_refresh(&mut self, victim: u32) {
        if let Some(c) = self.window.get_mut(&victim) {
            c.exposure = 0;
        }
    }

    /// A write rewrote bit columns `[lo, hi)` of `row`: flipped cells there
    /// hold fresh data and become vulnerable again. Returns how many cells
    /// were repaired.
    pub fn repair(&mut self, row: u32, lo: u32, hi: u32, rng: &CounterRng) -> usize {
        let Some(clocks) = self.cells.get_mut(&row) else {
            return 0;
        };
        let repaired: Vec<u32> = clocks.flipped.range(lo..hi).copied().collect();
        if repaired.is_empty() {
            return 0;
        }
        clocks.epoch += 1;
        for &col in &repaired {
            clocks.flipped.remove(&col);
            clocks.arm(rng, self.bank_index, row, col);
        }
        repaired.len()
    }
}

impl CellClocks {
    fn arm(&mut self, rng: &CounterRng, bank_index: u32, row: u32, col: u32) {
        let e = rng.exponential(Stream::CellClock, bank_index, row, col, self.epoch);
        let threshold = self.hazard + e;
        self.armed.push(Reverse((threshold.to_bits(), col)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acts_of(active: &[u32]) -> impl Fn(u32) -> u32 + '_ {
        move |r| u32::from(active.contains(&r))
    }

    #[test]
    fn classification_examples() {
        let r = 10;
        assert_eq!(
            classify(acts_of(&[r]), r, r + 1).unwrap(),
            PatternClass::SingleSided
        );
        assert_eq!(
            classify(acts_of(&[r - 1, r + 1]), r - 1, r).unwrap(),
            PatternClass::DoubleSided
        );
        assert_eq!(
            classify(acts_of(&[r, r + 1]), r, r + 2).unwrap(),
            PatternClass::HalfDouble
        );
        assert_eq!(
            classify(acts_of(&[r]), r, r + 3),
            Err(TrackerError::Distance {
                aggressor: r,
                victim: r + 3
            })
        );
        assert!(classify(acts_of(&[r]), r, r).is_err());
    }

    // Table built by hand from the rules: half-double iff two apart with the
    // middle active; double-sided iff adjacent with both flanks active.
    #[test]
    fn classification_over_all_activation_subsets() {
        let base = 20u32;
        let rows: Vec<u32> = (base - 2..=base + 2).collect();
        for mask in 0u32..32 {
            let active: Vec<u32> = rows
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, r)| *r)
                .collect();
            let acts = acts_of(&active);
            for &aggr in &active {
                for &victim in &rows {
                    let d = aggr.abs_diff(victim);
                    let got = classify(&acts, aggr, victim);
                    let want = match d {
                        1 if active.contains(&(victim - 1)) && active.contains(&(victim + 1)) => {
                            Ok(PatternClass::DoubleSided)
                        }
                        1 => Ok(PatternClass::SingleSided),
                        2 if active.contains(&((aggr + victim) / 2)) => {
                            Ok(PatternClass::HalfDouble)
                        }
                        2 => Ok(PatternClass::SingleSided),
                        _ => Err(TrackerError::Distance {
                            aggressor: aggr,
                            victim,
                        }),
                    };
                    assert_eq!(got, want, "mask {mask:05b} aggr {aggr} victim {victim}");
                }
            }
        }
    }

    #[test]
    fn victim_row_zero_has_no_lower_flank() {
        assert_eq!(
            classify(acts_of(&[1]), 1, 0).unwrap(),
            PatternClass::SingleSided
        );
    }

    fn activate(state: &mut BankHammerState, row: u32) {
        state.activate(row);
        let victims: Vec<_> = state.victims(row).collect();
        for (v, _) in victims {
            state.expose(v, u64::MAX);
        }
    }

    #[test]
    fn three_counter_states() {
        let mut s = BankHammerState::new(0, 0, 0, 100);
        let r = 50;
        // initial
        assert!(s.active_rows().next().is_none());
        // after reading row r
        activate(&mut s, r);
        assert_eq!(s.acts(r), 1);
        assert_eq!((s.exposure(r - 1), s.exposure(r + 1)), (1, 1));
        assert_eq!((s.exposure(r - 2), s.exposure(r + 2)), (0, 0));
        // after reading row r + 1
        activate(&mut s, r + 1);
        assert_eq!((s.acts(r), s.acts(r + 1)), (1, 1));
        assert_eq!(s.exposure(r), 1);
        assert_eq!(s.exposure(r + 2), 1);
        // r - 1 now sees r + 1 through the active middle row r
        assert_eq!(s.exposure(r - 1), 2);
        assert_eq!(s.exposure(r + 3), 0);
        let v: Vec<_> = s.victims(r + 1).collect();
        assert_eq!(
            v,
            vec![
                (r - 1, PatternClass::HalfDouble),
                (r, PatternClass::SingleSided),
                (r + 2, PatternClass::SingleSided),
            ]
        );
    }

    #[test]
    fn victims_respect_bank_edges() {
        let mut s = BankHammerState::new(0, 0, 0, 4);
        s.activate(0);
        assert_eq!(
            s.victims(0).collect::<Vec<_>>(),
            vec![(1, PatternClass::SingleSided)]
        );
        s.activate(3);
        assert_eq!(
            s.victims(3).collect::<Vec<_>>(),
            vec![(2, PatternClass::SingleSided)]
        );
    }

    fn params(p: &Probabilities, threshold: u64, rng: &CounterRng) -> FaultParams {
        FaultParams {
            probabilities: *p,
            rowhammer_threshold: threshold,
            rng: *rng,
        }
    }

    #[test]
    fn zero_probability_never_flips() {
        let rng = CounterRng::new(1);
        let fp = params(&Probabilities::default(), 0, &rng);
        let mut s = BankHammerState::new(0, 0, 0, 16);
        for _ in 0..10_000 {
            assert!(s
                .evaluate_faults(5, PatternClass::DoubleSided, &[1, 2, 3], &fp, 0)
                .is_empty());
        }
        assert_eq!(s.trials(), 0);
    }

    #[test]
    fn unique_flips_saturate() {
        let rng = CounterRng::new(1);
        let fp = params(&Probabilities::uniform(1.0), 1, &rng);
        let mut s = BankHammerState::new(0, 0, 0, 16);
        let first = s.evaluate_faults(5, PatternClass::SingleSided, &[9], &fp, 3);
        assert_eq!(
            first,
            vec![BitflipRecord {
                tick: 3,
                rank: 0,
                bank: 0,
                row: 5,
                column: 9,
                pattern: PatternClass::SingleSided
            }]
        );
        assert!(s
            .evaluate_faults(5, PatternClass::SingleSided, &[9], &fp, 4)
            .is_empty());
        assert_eq!(s.flipped(5).collect::<Vec<_>>(), vec![9]);
    }

    #[test]
    fn threshold_gates_until_reached() {
        let rng = CounterRng::new(1);
        let fp = params(&Probabilities::uniform(1.0), 10, &rng);
        let mut s = BankHammerState::new(0, 0, 0, 16);
        for i in 1..=9 {
            assert!(
                s.evaluate_faults(5, PatternClass::SingleSided, &[0], &fp, i)
                    .is_empty(),
                "evaluation {i}"
            );
        }
        assert_eq!(
            s.evaluate_faults(5, PatternClass::SingleSided, &[0], &fp, 10)
                .len(),
            1
        );
    }

    #[test]
    fn reset_clears_counters_but_keeps_flips() {
        let rng = CounterRng::new(1);
        let fp = params(&Probabilities::uniform(1.0), 0, &rng);
        let mut s = BankHammerState::new(0, 0, 0, 16);
        s.activate(4);
        s.evaluate_faults(5, PatternClass::SingleSided, &[1], &fp, 0);
        s.reset_window();
        assert_eq!(s.acts(4), 0);
        assert_eq!(s.exposure(5), 0);
        assert!(s.victims(7).next().is_some());
        assert_eq!(s.flipped_count(5), 1);
    }

    #[test]
    fn exposure_is_rebuilt_after_reset() {
        // 30 evaluations split 15/15 across two windows never reach 20.
        let rng = CounterRng::new(1);
        let fp = params(&Probabilities::uniform(1.0), 20, &rng);
        let mut s = BankHammerState::new(0, 0, 0, 16);
        let mut flips = 0;
        for w in 0..2 {
            for _ in 0..15 {
                flips += s
                    .evaluate_faults(5, PatternClass::SingleSided, &[1], &fp, w)
                    .len();
            }
            s.reset_window();
        }
        assert_eq!(flips, 0);
    }

    #[test]
    fn trr_refresh_zeroes_exposure_only() {
        let mut s = BankHammerState::new(0, 0, 0, 100);
        for _ in 0..40_000 {
            s.expose(5, 0);
        }
        s.activate(5);
        assert_eq!(s.exposure(5), 40_000);
        s.on_trr_refresh(5);
        assert_eq!(s.exposure(5), 0);
        assert_eq!(s.acts(5), 1);
    }

    #[test]
    fn periodic_refresh_below_threshold_prevents_flips() {
        // exposure climbs by 1 per ACT and is cleared every 500 ACTs, so a
        // threshold of 600 is never reached.
        let rng = CounterRng::new(2);
        for (refresh, want_flips) in [(true, false), (false, true)] {
            let fp = params(&Probabilities::uniform(1.0), 600, &rng);
            let mut s = BankHammerState::new(0, 0, 0, 16);
            let mut flips = 0;
            for i in 0..5_000u64 {
                flips += s
                    .evaluate_faults(5, PatternClass::SingleSided, &[3], &fp, i)
                    .len();
                if refresh && i % 500 == 499 {
                    s.on_trr_refresh(5);
                }
            }
            assert_eq!(flips > 0, want_flips);
        }
    }

    #[test]
    fn repair_makes_cells_vulnerable_again() {
        let rng = CounterRng::new(3);
        let fp = params(&Probabilities::uniform(1.0), 0, &rng);
        let mut s = BankHammerState::new(0, 0, 0, 16);
        let cols = [0u32, 9, 70];
        assert_eq!(
            s.evaluate_faults(2, PatternClass::SingleSided, &cols, &fp, 0)
                .len(),
            3
        );
        // rewrite byte 1 (bits 8..16)
        assert_eq!(s.repair(2, 8, 16, &rng), 1);
        assert_eq!(s.flipped(2).collect::<Vec<_>>(), vec![0, 70]);
        let again = s.evaluate_faults(2, PatternClass::SingleSided, &cols, &fp, 1);
        assert_eq!(again.iter().map(|r| r.column).collect::<Vec<_>>(), vec![9]);
    }

    #[test]
    fn flip_frequency_matches_bernoulli_law() {
        // single cell, p = 0.01, 50 evaluations: P(flip) = 1 - 0.99^50
        let p = 0.01;
        let n = 50;
        let runs = 20_000;
        let want = 1.0 - (1.0f64 - p).powi(n);
        let mut hits = 0;
        for seed in 0..runs {
            let rng = CounterRng::new(seed);
            let fp = params(&Probabilities::uniform(p), 0, &rng);
            let mut s = BankHammerState::new(0, 0, 0, 16);
            for i in 0..n {
                if !s
                    .evaluate_faults(1, PatternClass::SingleSided, &[4], &fp, i as u64)
                    .is_empty()
                {
                    hits += 1;
                    break;
                }
            }
        }
        let freq = hits as f64 / runs as f64;
        let sigma = (want * (1.0 - want) / runs as f64).sqrt();
        assert!((freq - want).abs() < 3.0 * sigma, "{freq} vs {want}");
    }

    #[test]
    fn pattern_class_round_trips_through_names() {
        for c in PatternClass::ALL {
            assert_eq!(c.name().parse::<PatternClass>().unwrap(), c);
        }
        assert!(PatternClass::SingleSided < PatternClass::DoubleSided);
    }
}
