//! Event-ordered simulation core.
//!
//! Commands are processed in stream order. Before a command executes, every
//! tREFW boundary and every auto-inserted REF with a tick at or before it is
//! handled, boundaries first on ties. Runs of REFs with no pending TRR work
//! only advance the round-robin refresh pointers and are applied in closed
//! form.

use crate::config::{RefreshPolicy, SimConfig, TrrVariant};
use crate::devmap::DeviceMap;
use crate::ecc::{EccCounters, EccOutcome, ParityMatrix};
use crate::geometry::{
    decode_address, DeviceGeometry, GeometryError, RowKey, BURST_BYTES, WORD_BYTES,
};
use crate::memory::{MemoryError, MemoryImage};
use crate::rng::CounterRng;
use crate::trace::{Command, CommandKind, Target};
use crate::tracker::{BankHammerState, BitflipRecord, FaultParams, PatternClass, Probabilities};
use crate::trr::{TrrParams, TrrState, TrrWindowStats};
use serde::Serialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("command at tick {tick} precedes current time {now}")]
    OutOfOrder { now: u64, tick: u64 },
    #[error(transparent)]
    Address(#[from] GeometryError),
    #[error("{what} {value} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: u64,
        limit: u64,
    },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{0} requires a data payload")]
    MissingPayload(&'static str),
    #[error("device map geometry does not match the configured geometry")]
    MapGeometry,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Whether qualifying evaluations sample bitflips or are only counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Inject,
    CountOnly,
}

/// Observation hooks. All methods default to no-ops.
#[allow(unused_variables)]
pub trait Probe {
    fn activation(&mut self, bank: usize, row: u32, tick: u64) {}
    /// One (aggressor ACT, victim) evaluation, after the exposure update.
    fn evaluation(&mut self, bank: usize, victim: u32, class: PatternClass) {}
    fn victim_refreshed(&mut self, bank: usize, row: u32, inside_ref: bool) {}
    fn bitflip(&mut self, record: &BitflipRecord) {}
    /// Called after window `closed` has been rolled over and counters reset.
    fn window_rolled(&mut self, closed: &WindowReport, engine: &Engine) {}
}

impl Probe for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PatternCounts {
    pub single_sided: u64,
    pub half_double: u64,
    pub double_sided: u64,
}

impl PatternCounts {
    pub fn add(&mut self, class: PatternClass) {
        match class {
            PatternClass::SingleSided => self.single_sided += 1,
            PatternClass::HalfDouble => self.half_double += 1,
            PatternClass::DoubleSided => self.double_sided += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.single_sided + self.half_double + self.double_sided
    }

    fn merge(&mut self, o: &Self) {
        self.single_sided += o.single_sided;
        self.half_double += o.half_double;
        self.double_sided += o.double_sided;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct WindowReport {
    pub window: u64,
    pub acts: u64,
    pub bitflips: u64,
    pub bitflips_by_pattern: PatternCounts,
    pub trr: TrrWindowStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CommandCounts {
    pub act: u64,
    pub rd: u64,
    pub wr: u64,
    pub ref_explicit: u64,
    pub ref_inserted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TrrTotals {
    pub samples: u64,
    pub triggers: u64,
    pub refreshed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct SimReport {
    pub rng_seed: u64,
    pub total_bitflips: u64,
    pub bitflips_by_pattern: PatternCounts,
    pub commands: CommandCounts,
    pub trr: TrrTotals,
    pub ecc: EccCounters,
    pub windows: Vec<WindowReport>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `trr_stats_dump` contents: one line per window.
    pub fn trr_stats_lines(&self) -> String {
        self.windows
            .iter()
            .map(|w| format!("{}\n", w.trr))
            .collect()
    }
}

/// Data returned by a RD: the 64-byte burst (corrected when ECC is on) and
/// the worst per-word decode outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResult {
    pub data: Vec<u8>,
    pub ecc: Option<EccOutcome>,
}

/// A row-resolved command target.
#[derive(Debug, Clone, Copy)]
struct Resolved {
    rank: u32,
    bank: u32,
    row: u32,
    /// Byte offset within the row.
    offset: u32,
}

pub struct Engine {
    cfg: SimConfig,
    map: DeviceMap,
    pmatrix: Option<ParityMatrix>,
    mode: Mode,
    fault: FaultParams,
    banks: Vec<BankHammerState>,
    trr: TrrState,
    memory: MemoryImage,
    /// Pre-corruption value of each 8-byte word that has flipped since its
    /// last write, keyed by (row, word index).
    snapshots: HashMap<(RowKey, u32), u64>,
    now: u64,
    window: u64,
    next_ref: u64,
    auto_refs: bool,
    refresh_pointer: Vec<u32>,
    in_ref: bool,
    current: WindowReport,
    report: SimReport,
    records: Vec<BitflipRecord>,
}

impl Engine {
    pub fn new(
        cfg: SimConfig,
        map: DeviceMap,
        pmatrix: Option<ParityMatrix>,
    ) -> Result<Self, EngineError> {
        cfg.validate()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        if *map.geometry() != cfg.geometry {
            return Err(EngineError::MapGeometry);
        }
        if cfg.enable_ecc && pmatrix.is_none() {
            return Err(EngineError::Config(
                "enable_ecc requires a parity matrix".into(),
            ));
        }
        let g = cfg.geometry;
        let banks = (0..g.total_ranks())
            .flat_map(|r| (0..g.banks_per_rank).map(move |b| (r, b)))
            .map(|(r, b)| BankHammerState::new(r, b, g.bank_index(r, b) as u32, g.rows_per_bank))
            .collect();
        let fault = FaultParams {
            probabilities: Probabilities {
                single_sided: cfg.single_sided_prob,
                double_sided: cfg.double_sided_prob,
                half_double: cfg.half_double_prob,
            },
            rowhammer_threshold: cfg.rowhammer_threshold,
            rng: CounterRng::new(cfg.rng_seed),
        };
        let trr = TrrState::new(
            TrrParams::from_config(&cfg),
            g.total_banks() as usize,
            g.rows_per_bank,
        );
        Ok(Self {
            memory: MemoryImage::new(g, cfg.fill_pattern),
            auto_refs: cfg.refresh_policy != RefreshPolicy::TraceOnly,
            next_ref: cfg.timing.t_refi,
            refresh_pointer: vec![0; g.total_ranks() as usize],
            report: SimReport {
                rng_seed: cfg.rng_seed,
                ..SimReport::default()
            },
            cfg,
            map,
            pmatrix,
            mode: Mode::Inject,
            fault,
            banks,
            trr,
            snapshots: HashMap::new(),
            now: 0,
            window: 0,
            in_ref: false,
            current: WindowReport::default(),
            records: Vec::new(),
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        &self.cfg.geometry
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn bank_state(&self, rank: u32, bank: u32) -> &BankHammerState {
        &self.banks[self.cfg.geometry.bank_index(rank, bank)]
    }

    pub fn trr(&self) -> &TrrState {
        &self.trr
    }

    pub fn memory(&self) -> &MemoryImage {
        &self.memory
    }

    pub fn records(&self) -> &[BitflipRecord] {
        &self.records
    }

    /// Rows with a non-zero activation count in the current window.
    pub fn active_row_count(&self) -> usize {
        self.banks.iter().map(|b| b.active_rows().count()).sum()
    }

    pub fn refresh_pointer(&self, rank: u32) -> u32 {
        self.refresh_pointer[rank as usize]
    }

    fn check(what: &'static str, value: u32, limit: u32) -> Result<(), EngineError> {
        if value >= limit {
            Err(EngineError::OutOfRange {
                what,
                value: value.into(),
                limit: limit.into(),
            })
        } else {
            Ok(())
        }
    }

    fn resolve(&self, target: Target) -> Result<Resolved, EngineError> {
        let g = &self.cfg.geometry;
        match target {
            Target::Row {
                rank,
                bank,
                row,
                column,
            } => {
                Self::check("rank", rank, g.total_ranks())?;
                Self::check("bank", bank, g.banks_per_rank)?;
                Self::check("row", row, g.rows_per_bank)?;
                let column = column.unwrap_or(0);
                Self::check("column", column, g.bursts_per_row())?;
                Ok(Resolved {
                    rank,
                    bank,
                    row,
                    offset: column * BURST_BYTES,
                })
            }
            Target::Address(addr) => {
                let da = decode_address(addr, g, self.cfg.address_mapping)?;
                let key = da.row_key(g);
                Ok(Resolved {
                    rank: key.rank,
                    bank: key.bank,
                    row: key.row,
                    offset: da.row_offset(),
                })
            }
            Target::Rank(_) => unreachable!("REF targets are handled separately"),
        }
    }

    /// Process one command.
    pub fn step<P: Probe>(
        &mut self,
        cmd: &Command,
        probe: &mut P,
    ) -> Result<Option<ReadResult>, EngineError> {
        if cmd.tick < self.now {
            return Err(EngineError::OutOfOrder {
                now: self.now,
                tick: cmd.tick,
            });
        }
        self.advance_to(cmd.tick, probe);
        match cmd.kind {
            CommandKind::Ref => {
                let Target::Rank(rank) = cmd.target else {
                    return Err(EngineError::Config("REF must target a rank".into()));
                };
                Self::check("rank", rank, self.cfg.geometry.total_ranks())?;
                if self.cfg.refresh_policy == RefreshPolicy::Auto {
                    self.auto_refs = false;
                }
                self.report.commands.ref_explicit += 1;
                self.on_refresh(rank, probe);
                Ok(None)
            }
            CommandKind::Act => {
                let r = self.resolve(cmd.target)?;
                self.on_activate(r.rank, r.bank, r.row, cmd.tick, probe);
                Ok(None)
            }
            CommandKind::Rd => {
                let r = self.resolve(cmd.target)?;
                self.report.commands.rd += 1;
                let start = r.offset - r.offset % BURST_BYTES;
                Ok(Some(
                    self.on_read(RowKey::new(r.rank, r.bank, r.row), start)?,
                ))
            }
            CommandKind::Wr => {
                let r = self.resolve(cmd.target)?;
                self.report.commands.wr += 1;
                let key = RowKey::new(r.rank, r.bank, r.row);
                let data = match &cmd.payload {
                    Some(p) => p.clone(),
                    None => vec![self.cfg.fill_pattern; BURST_BYTES as usize],
                };
                self.on_write(key, r.offset, &data)?;
                Ok(None)
            }
        }
    }

    /// Process a whole stream.
    pub fn run<'a, P: Probe>(
        &mut self,
        commands: impl IntoIterator<Item = &'a Command>,
        probe: &mut P,
    ) -> Result<(), EngineError> {
        for c in commands {
            self.step(c, probe)?;
        }
        Ok(())
    }

    fn advance_to<P: Probe>(&mut self, tick: u64, probe: &mut P) {
        let t = self.cfg.timing;
        loop {
            let boundary = (self.window + 1) * t.t_refw;
            let next_ref = if self.auto_refs {
                self.next_ref
            } else {
                u64::MAX
            };
            if boundary.min(next_ref) > tick {
                break;
            }
            if boundary <= next_ref {
                self.rollover(probe);
                continue;
            }
            let ranks = self.cfg.geometry.total_ranks();
            if self.trr.pending_len() == 0 {
                let limit = tick.min(boundary - 1);
                let n = (limit - next_ref) / t.t_refi + 1;
                for rank in 0..ranks {
                    self.advance_pointer(rank, n);
                }
                self.report.commands.ref_inserted += n * u64::from(ranks);
                self.next_ref += n * t.t_refi;
            } else {
                for rank in 0..ranks {
                    self.report.commands.ref_inserted += 1;
                    self.on_refresh(rank, probe);
                }
                self.next_ref += t.t_refi;
            }
        }
        self.now = tick;
    }

    fn advance_pointer(&mut self, rank: u32, refs: u64) {
        let rows = u64::from(self.cfg.geometry.rows_per_bank);
        let step = u64::from(self.cfg.timing.rows_refreshed_per_refi) % rows;
        let p = &mut self.refresh_pointer[rank as usize];
        *p = ((u64::from(*p) + (refs % rows) * step) % rows) as u32;
    }

    fn rollover<P: Probe>(&mut self, probe: &mut P) {
        let next = self.window + 1;
        let mut closed = std::mem::take(&mut self.current);
        closed.window = self.window;
        closed.trr = self.trr.roll_window(next);
        for b in &mut self.banks {
            b.reset_window();
        }
        self.window = next;
        self.current.window = next;
        self.report.windows.push(closed);
        let closed = self.report.windows.last().expect("just pushed").clone();
        probe.window_rolled(&closed, self);
    }

    /// One ACT: count it, feed the TRR sampler, evaluate the victims.
    pub fn on_activate<P: Probe>(
        &mut self,
        rank: u32,
        bank: u32,
        row: u32,
        tick: u64,
        probe: &mut P,
    ) {
        let b = self.cfg.geometry.bank_index(rank, bank);
        self.report.commands.act += 1;
        self.current.acts += 1;
        let state = &mut self.banks[b];
        state.activate(row);
        probe.activation(b, row, tick);
        self.trr.sample(b, row, &self.fault.rng);
        let victims: Vec<(u32, PatternClass)> = state.victims(row).collect();
        let mut flips = Vec::new();
        for (v, class) in victims {
            let qualifies = state.expose(v, self.fault.rowhammer_threshold);
            probe.evaluation(b, v, class);
            if qualifies && self.mode == Mode::Inject {
                let weak = self.map.weak_columns(RowKey::new(rank, bank, v));
                state.sample(v, class, weak, &self.fault, tick, &mut flips);
            }
        }
        for rec in flips {
            self.inject(&rec);
            probe.bitflip(&rec);
        }
    }

    fn inject(&mut self, rec: &BitflipRecord) {
        self.current.bitflips += 1;
        self.current.bitflips_by_pattern.add(rec.pattern);
        if self.cfg.enable_memory_corruption {
            let key = RowKey::new(rec.rank, rec.bank, rec.row);
            let word = rec.column / 64;
            if self.cfg.enable_ecc && !self.snapshots.contains_key(&(key, word)) {
                let v = self.read_word(key, word);
                self.snapshots.insert((key, word), v);
            }
            self.memory
                .apply_flip(key, rec.column)
                .expect("map columns lie inside the row");
        }
        self.records.push(*rec);
    }

    fn read_word(&self, key: RowKey, word: u32) -> u64 {
        let bytes = self
            .memory
            .read(key, word * WORD_BYTES, WORD_BYTES as usize)
            .expect("word inside row");
        u64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    /// REF for one rank: advance the round-robin pointer and let TRR drain
    /// up to its budget of victims in every bank of the rank.
    pub fn on_refresh<P: Probe>(&mut self, rank: u32, probe: &mut P) -> Vec<(u32, u32)> {
        self.advance_pointer(rank, 1);
        let mut refreshed = Vec::new();
        if self.cfg.trr_variant == TrrVariant::None {
            return refreshed;
        }
        self.in_ref = true;
        let g = self.cfg.geometry;
        let budget = self.cfg.timing.max_trr_refreshes_per_refi as usize;
        for bank in 0..g.banks_per_rank {
            let b = g.bank_index(rank, bank);
            for v in self.trr.inhibit(b, &mut self.banks[b], budget) {
                probe.victim_refreshed(b, v, self.in_ref);
                refreshed.push((bank, v));
            }
        }
        self.in_ref = false;
        refreshed
    }

    /// RD of the burst starting at byte `offset` of `key`.
    pub fn on_read(&mut self, key: RowKey, offset: u32) -> Result<ReadResult, EngineError> {
        let mut data = self.memory.read(key, offset, BURST_BYTES as usize)?;
        let Some(pm) = self.pmatrix.as_ref().filter(|_| self.cfg.enable_ecc) else {
            return Ok(ReadResult { data, ecc: None });
        };
        let mut worst = EccOutcome::Clean;
        for (i, chunk) in data.chunks_exact_mut(WORD_BYTES as usize).enumerate() {
            let word = offset / WORD_BYTES + i as u32;
            let current = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            let outcome = match self.snapshots.get(&(key, word)) {
                None => EccOutcome::Clean,
                Some(&orig) => {
                    let (fixed, outcome) = pm.decode(current, pm.encode(orig));
                    if matches!(outcome, EccOutcome::CorrectedSingle(_)) {
                        chunk.copy_from_slice(&fixed.to_le_bytes());
                    }
                    outcome
                }
            };
            self.report.ecc.record(outcome);
            worst = worst.worst(outcome);
        }
        Ok(ReadResult {
            data,
            ecc: Some(worst),
        })
    }

    /// WR of `data` at byte `offset`: stores it, updates ECC snapshots and
    /// makes flipped cells under it vulnerable again.
    pub fn on_write(&mut self, key: RowKey, offset: u32, data: &[u8]) -> Result<(), EngineError> {
        self.memory.write(key, offset, data)?;
        let end = offset + data.len() as u32;
        if !self.snapshots.is_empty() {
            let (first, last) = (offset / WORD_BYTES, end.div_ceil(WORD_BYTES));
            for word in first..last {
                let Some(orig) = self.snapshots.get_mut(&(key, word)) else {
                    continue;
                };
                let base = word * WORD_BYTES;
                if offset <= base && base + WORD_BYTES <= end {
                    self.snapshots.remove(&(key, word));
                } else {
                    let mut bytes = orig.to_le_bytes();
                    for (i, b) in bytes.iter_mut().enumerate() {
                        let at = base + i as u32;
                        if (offset..end).contains(&at) {
                            *b = data[(at - offset) as usize];
                        }
                    }
                    *orig = u64::from_le_bytes(bytes);
                }
            }
        }
        let b = self.cfg.geometry.bank_index(key.rank, key.bank);
        self.banks[b].repair(key.row, offset * 8, end * 8, &self.fault.rng);
        Ok(())
    }

    /// Close the window in progress and return the report plus every
    /// injected bitflip in emission order.
    pub fn finish(mut self) -> (SimReport, Vec<BitflipRecord>) {
        let mut closed = std::mem::take(&mut self.current);
        closed.window = self.window;
        closed.trr = self.trr.roll_window(self.window + 1);
        self.report.windows.push(closed);
        let r = &mut self.report;
        for w in &r.windows {
            r.total_bitflips += w.bitflips;
            r.bitflips_by_pattern.merge(&w.bitflips_by_pattern);
            r.trr.samples += w.trr.samples;
            r.trr.triggers += w.trr.triggers;
            r.trr.refreshed += w.trr.refreshed;
        }
        (self.report, self.records)
    }
}

/// `rh_stat_file` contents: one line per bitflip.
pub fn rh_stat_lines(records: &[BitflipRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}
