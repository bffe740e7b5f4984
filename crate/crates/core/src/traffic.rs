//! Synthetic attack traffic.
//!
//! A [`TrafficSpec`] is written as comma-separated `key=value` pairs, with row
//! lists separated by `:`:
//!
//! ```text
//! pattern=double_sided,rows=100,acts_per_round=2,rounds=50000,interval_ps=640000
//! pattern=n_sided,rows=10:12:14:16,acts_per_round=4,rounds=1000
//! ```

use crate::geometry::DeviceGeometry;
use crate::rng::{split, CounterRng, Stream};
use crate::trace::Command;
use serde::{Serialize, Serializer};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrafficError {
    #[error("traffic spec: {0}")]
    Syntax(String),
    #[error("traffic spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrafficPattern {
    #[default]
    SingleSided,
    DoubleSided,
    NSided,
    UniformRandom,
}

impl TrafficPattern {
    pub fn name(self) -> &'static str {
        match self {
            TrafficPattern::SingleSided => "single_sided",
            TrafficPattern::DoubleSided => "double_sided",
            TrafficPattern::NSided => "n_sided",
            TrafficPattern::UniformRandom => "uniform_random",
        }
    }
}

impl FromStr for TrafficPattern {
    type Err = TrafficError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_sided" => Ok(TrafficPattern::SingleSided),
            "double_sided" => Ok(TrafficPattern::DoubleSided),
            "n_sided" => Ok(TrafficPattern::NSided),
            "uniform_random" => Ok(TrafficPattern::UniformRandom),
            _ => Err(TrafficError::Syntax(format!("unknown pattern `{s}`"))),
        }
    }
}

/// Parameters of one synthetic stream.
///
/// `rows` holds the aggressor for `single_sided`, the sandwiched victim for
/// `double_sided`, the aggressor list for `n_sided` and an optional candidate
/// list for `uniform_random` (empty means every row of the bank).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficSpec {
    pub pattern: TrafficPattern,
    pub rows: Vec<u32>,
    pub acts_per_round: u64,
    pub rounds: u64,
    pub interval_ps: u64,
    pub start_ps: u64,
    pub rank: u32,
    pub bank: u32,
    pub seed: u64,
    /// Append one RD per burst of every victim row after the ACTs.
    pub probe_reads: bool,
}

impl Default for TrafficSpec {
    fn default() -> Self {
        Self {
            pattern: TrafficPattern::SingleSided,
            rows: Vec::new(),
            acts_per_round: 1,
            rounds: 0,
            interval_ps: 1,
            start_ps: 0,
            rank: 0,
            bank: 0,
            seed: 0,
            probe_reads: false,
        }
    }
}

impl fmt::Display for TrafficSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<String> = self.rows.iter().map(u32::to_string).collect();
        write!(
            f,
            "pattern={},rows={},acts_per_round={},rounds={},interval_ps={},start_ps={},rank={},bank={},seed={},probe_reads={}",
            self.pattern.name(),
            rows.join(":"),
            self.acts_per_round,
            self.rounds,
            self.interval_ps,
            self.start_ps,
            self.rank,
            self.bank,
            self.seed,
            self.probe_reads
        )
    }
}

impl Serialize for TrafficSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T, TrafficError> {
    v.parse()
        .map_err(|_| TrafficError::Syntax(format!("invalid value `{v}` for `{key}`")))
}

impl FromStr for TrafficSpec {
    type Err = TrafficError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut spec = TrafficSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| TrafficError::Syntax(format!("expected key=value, got `{part}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "pattern" => spec.pattern = v.parse()?,
                "rows" => {
                    spec.rows = v
                        .split(':')
                        .filter(|r| !r.is_empty())
                        .map(|r| value(k, r))
                        .collect::<Result<_, _>>()?
                }
                "acts_per_round" => spec.acts_per_round = value(k, v)?,
                "rounds" => spec.rounds = value(k, v)?,
                "interval_ps" => spec.interval_ps = value(k, v)?,
                "start_ps" => spec.start_ps = value(k, v)?,
                "rank" => spec.rank = value(k, v)?,
                "bank" => spec.bank = value(k, v)?,
                "seed" => spec.seed = value(k, v)?,
                "probe_reads" => spec.probe_reads = value(k, v)?,
                _ => return Err(TrafficError::Syntax(format!("unknown key `{k}`"))),
            }
        }
        Ok(spec)
    }
}

impl TrafficSpec {
    pub fn total_acts(&self) -> u64 {
        self.acts_per_round * self.rounds
    }

    pub fn validate(&self, geometry: &DeviceGeometry) -> Result<(), TrafficError> {
        let bad = |m: String| Err(TrafficError::Invalid(m));
        if self.interval_ps < 1 {
            return bad("interval_ps must be at least 1".into());
        }
        if self.rank >= geometry.total_ranks() {
            return bad(format!("rank {} out of range", self.rank));
        }
        if self.bank >= geometry.banks_per_rank {
            return bad(format!("bank {} out of range", self.bank));
        }
        let rows = geometry.rows_per_bank;
        if let Some(r) = self.rows.iter().find(|&&r| r >= rows) {
            return bad(format!("row {r} out of range (rows per bank: {rows})"));
        }
        match self.pattern {
            TrafficPattern::SingleSided if self.rows.len() != 1 => {
                bad("single_sided takes exactly one aggressor row".into())
            }
            TrafficPattern::DoubleSided => match self.rows.as_slice() {
                [v] if *v >= 1 && v + 1 < rows => Ok(()),
                [v] => bad(format!("victim {v} needs both neighbours inside the bank")),
                _ => bad("double_sided takes exactly one victim row".into()),
            },
            TrafficPattern::NSided if self.rows.len() < 2 => {
                bad("n_sided needs at least two aggressor rows".into())
            }
            _ => Ok(()),
        }
    }

    /// Row activated by the `k`-th ACT.
    fn row_at(&self, k: u64, rng: &CounterRng, rows_per_bank: u32) -> u32 {
        match self.pattern {
            TrafficPattern::SingleSided => self.rows[0],
            TrafficPattern::DoubleSided => {
                if k.is_multiple_of(2) {
                    self.rows[0] - 1
                } else {
                    self.rows[0] + 1
                }
            }
            TrafficPattern::NSided => self.rows[(k % self.rows.len() as u64) as usize],
            TrafficPattern::UniformRandom => {
                let (lo, hi) = split(k);
                if self.rows.is_empty() {
                    rng.below(u64::from(rows_per_bank), Stream::Traffic, 0, lo, hi, 0) as u32
                } else {
                    let i = rng.below(self.rows.len() as u64, Stream::Traffic, 0, lo, hi, 0);
                    self.rows[i as usize]
                }
            }
        }
    }

    /// Rows next to an aggressor that are not aggressors themselves.
    pub fn victims(&self, rows_per_bank: u32) -> Vec<u32> {
        let aggressors: BTreeSet<u32> = match self.pattern {
            TrafficPattern::DoubleSided => return self.rows.clone(),
            TrafficPattern::UniformRandom => return Vec::new(),
            _ => self.rows.iter().copied().collect(),
        };
        aggressors
            .iter()
            .flat_map(|&a| [a.checked_sub(1), a.checked_add(1)])
            .flatten()
            .filter(|v| *v < rows_per_bank && !aggressors.contains(v))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Lazily generate the command stream of a validated spec. ACT `k` lands at
/// `start_ps + (k + 1) * interval_ps`.
pub fn generate<'a>(
    spec: &'a TrafficSpec,
    geometry: &'a DeviceGeometry,
) -> Result<impl Iterator<Item = Command> + 'a, TrafficError> {
    spec.validate(geometry)?;
    let rng = CounterRng::new(spec.seed);
    let n = spec.total_acts();
    let rows = geometry.rows_per_bank;
    let tick = move |k: u64| spec.start_ps + (k + 1) * spec.interval_ps;
    let acts = (0..n)
        .map(move |k| Command::act(tick(k), spec.rank, spec.bank, spec.row_at(k, &rng, rows)));
    let probes: Vec<u32> = if spec.probe_reads {
        spec.victims(rows)
    } else {
        Vec::new()
    };
    let bursts = geometry.bursts_per_row();
    let reads = probes
        .into_iter()
        .flat_map(move |v| (0..bursts).map(move |c| (v, c)))
        .enumerate()
        .map(move |(i, (v, c))| Command::read(tick(n + i as u64), spec.rank, spec.bank, v, c));
    Ok(acts.chain(reads))
}
