//! Offline analysis of ACT traces.
//!
//! A trace is replayed through the engine in count-only mode while a probe
//! records, for every victim and window, the run-length encoded sequence of
//! evaluation classes and TRR resets. Any RowHammer threshold and any
//! probability set can then be evaluated analytically without replaying.

use crate::config::{SimConfig, TrrVariant};
use crate::devmap::DeviceMap;
use crate::engine::{Engine, EngineError, Mode, Probe, WindowReport};
use crate::geometry::{DeviceGeometry, RowKey};
use crate::par::Exec;
use crate::trace::Command;
use crate::tracker::{PatternClass, Probabilities};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// One entry of a victim's evaluation history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Segment {
    Run {
        class: PatternClass,
        count: u64,
    },
    /// A TRR refresh cleared the exposure.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct VictimStats {
    pub evaluations: u64,
    pub exposure: u64,
    pub peak_exposure: u64,
    pub best_class: Option<PatternClass>,
    pub segments: Vec<Segment>,
}

impl VictimStats {
    fn push(&mut self, class: PatternClass) {
        self.evaluations += 1;
        self.exposure += 1;
        self.peak_exposure = self.peak_exposure.max(self.exposure);
        self.best_class = self.best_class.max(Some(class));
        match self.segments.last_mut() {
            Some(Segment::Run { class: c, count }) if *c == class => *count += 1,
            _ => self.segments.push(Segment::Run { class, count: 1 }),
        }
    }

    fn reset(&mut self) {
        if self.exposure > 0 {
            self.exposure = 0;
            self.segments.push(Segment::Reset);
        }
    }

    /// Qualifying evaluations per class under `threshold`, indexed by
    /// [`PatternClass::index`].
    pub fn qualifying(&self, threshold: u64) -> [u64; 3] {
        let mut q = [0u64; 3];
        let mut e = 0u64;
        for s in &self.segments {
            match *s {
                Segment::Reset => e = 0,
                Segment::Run { class, count } => {
                    // exposures after each evaluation are e+1 ..= e+count
                    let gated = threshold.saturating_sub(e + 1).min(count);
                    q[class.index()] += count - gated;
                    e += count;
                }
            }
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct WindowStats {
    pub window: u64,
    pub acts: BTreeMap<RowKey, u64>,
    pub victims: BTreeMap<RowKey, VictimStats>,
}

impl WindowStats {
    pub fn total_acts(&self) -> u64 {
        self.acts.values().sum()
    }
}

struct Recorder {
    geometry: DeviceGeometry,
    current: WindowStats,
    done: Vec<WindowStats>,
}

impl Recorder {
    fn key(&self, bank: usize, row: u32) -> RowKey {
        let per = self.geometry.banks_per_rank as usize;
        RowKey::new((bank / per) as u32, (bank % per) as u32, row)
    }
}

impl Probe for Recorder {
    fn activation(&mut self, bank: usize, row: u32, _tick: u64) {
        let k = self.key(bank, row);
        *self.current.acts.entry(k).or_default() += 1;
    }

    fn evaluation(&mut self, bank: usize, victim: u32, class: PatternClass) {
        let k = self.key(bank, victim);
        self.current.victims.entry(k).or_default().push(class);
    }

    fn victim_refreshed(&mut self, bank: usize, row: u32, _inside_ref: bool) {
        let k = self.key(bank, row);
        if let Some(v) = self.current.victims.get_mut(&k) {
            v.reset();
        }
    }

    fn window_rolled(&mut self, closed: &WindowReport, _engine: &Engine) {
        let mut w = std::mem::take(&mut self.current);
        w.window = closed.window;
        self.done.push(w);
    }
}

/// Replay `commands` and partition evaluations into half-open tREFW windows.
/// With `trr_replay` the configured TRR variant runs during replay;
/// otherwise TRR is disabled.
pub fn windowize<'a>(
    commands: impl IntoIterator<Item = &'a Command>,
    cfg: &SimConfig,
    trr_replay: bool,
) -> Result<Vec<WindowStats>, EngineError> {
    let mut cfg = cfg.clone();
    cfg.enable_ecc = false;
    cfg.enable_memory_corruption = false;
    if !trr_replay {
        cfg.trr_variant = TrrVariant::None;
    }
    let geometry = cfg.geometry;
    let mut engine = Engine::new(cfg, DeviceMap::empty(geometry), None)?.with_mode(Mode::CountOnly);
    let mut rec = Recorder {
        geometry,
        current: WindowStats::default(),
        done: Vec::new(),
    };
    engine.run(commands, &mut rec)?;
    let last = engine.window();
    let mut w = rec.current;
    w.window = last;
    rec.done.push(w);
    Ok(rec.done)
}

/// Number of (window, victim) pairs whose exposure reached `threshold`.
pub fn count_threshold_crossings(windows: &[WindowStats], threshold: u64) -> u64 {
    windows
        .iter()
        .flat_map(|w| w.victims.values())
        .filter(|v| v.evaluations > 0 && v.peak_exposure >= threshold)
        .count() as u64
}

/// Where weak cells come from.
#[derive(Debug, Clone, Copy)]
pub enum CellSource<'a> {
    /// Every victim row has this many weak cells.
    Uniform(u32),
    /// Only the map's weak cells.
    Map(&'a DeviceMap),
}

impl CellSource<'_> {
    fn cells(&self, key: RowKey) -> u64 {
        match self {
            CellSource::Uniform(n) => u64::from(*n),
            CellSource::Map(m) => m.weak_columns(key).len() as u64,
        }
    }
}

/// How flips of one cell combine across windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// Flips persist across windows: a cell contributes the probability that
    /// it first flips in a given window.
    #[default]
    Absorbing,
    /// Windows are treated independently: `1 - (1 - p)^q` per window.
    PerWindow,
}

fn log_survival(q: [u64; 3], probs: &Probabilities) -> f64 {
    PatternClass::ALL
        .iter()
        .map(|&c| {
            let n = q[c.index()];
            if n == 0 {
                0.0
            } else {
                n as f64 * (-probs.for_class(c)).ln_1p()
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub expected_flips: f64,
    pub variance: f64,
    pub per_window: Vec<f64>,
}

/// Expected bitflips of the online process over all windows.
pub fn estimate_bitflips(
    windows: &[WindowStats],
    probs: &Probabilities,
    cells: CellSource<'_>,
    threshold: u64,
    acc: Accumulation,
) -> Estimate {
    let mut per_window = vec![0.0; windows.len()];
    let mut expected = 0.0;
    let mut variance = 0.0;
    let mut survival: BTreeMap<RowKey, f64> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        for (k, v) in &w.victims {
            let n = cells.cells(*k);
            if n == 0 {
                continue;
            }
            let ls = log_survival(v.qualifying(threshold), probs);
            if ls == 0.0 {
                continue;
            }
            let p = match acc {
                Accumulation::Absorbing => {
                    let s = survival.entry(*k).or_insert(0.0);
                    let before = s.exp();
                    *s += ls;
                    before - s.exp()
                }
                Accumulation::PerWindow => {
                    let p = -ls.exp_m1();
                    variance += n as f64 * p * (1.0 - p);
                    p
                }
            };
            per_window[i] += n as f64 * p;
            expected += n as f64 * p;
        }
    }
    if acc == Accumulation::Absorbing {
        for (k, s) in &survival {
            let p = -s.exp_m1();
            variance += cells.cells(*k) as f64 * p * (1.0 - p);
        }
    }
    Estimate {
        expected_flips: expected,
        variance,
        per_window,
    }
}

/// Default sweep: decades from 1e-9 to 1e-1, then 0.2 to 1.0 in steps of 0.1.
pub fn default_grid() -> Vec<f64> {
    (0..9)
        .map(|i| 10f64.powi(i - 9))
        .chain((2..=10).map(|i| f64::from(i) / 10.0))
        .collect()
}

/// How the swept single-sided probability maps to the other classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepScaling {
    pub double_factor: f64,
    pub half_double_factor: f64,
}

impl Default for SweepScaling {
    fn default() -> Self {
        Self {
            double_factor: 2.5e3,
            half_double_factor: 0.0,
        }
    }
}

impl SweepScaling {
    pub fn probabilities(&self, p: f64) -> Probabilities {
        Probabilities {
            single_sided: p,
            double_sided: (p * self.double_factor).min(1.0),
            half_double: (p * self.half_double_factor).min(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub p: f64,
    pub expected_flips: f64,
    pub crossings: u64,
}

pub fn sweep(
    windows: &[WindowStats],
    grid: &[f64],
    scaling: SweepScaling,
    cells: CellSource<'_>,
    threshold: u64,
    exec: Exec,
) -> Vec<SweepPoint> {
    let crossings = count_threshold_crossings(windows, threshold);
    exec.map(grid, |&p| SweepPoint {
        p,
        expected_flips: estimate_bitflips(
            windows,
            &scaling.probabilities(p),
            cells,
            threshold,
            Accumulation::Absorbing,
        )
        .expected_flips,
        crossings,
    })
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("p,expected_flips,crossings\n");
    for pt in points {
        let _ = writeln!(out, "{:e},{},{}", pt.p, pt.expected_flips, pt.crossings);
    }
    out
}

pub fn window_csv(windows: &[WindowStats], threshold: u64) -> String {
    let mut out = String::from("window,acts,victims,max_exposure,crossings\n");
    for w in windows {
        let max = w
            .victims
            .values()
            .map(|v| v.peak_exposure)
            .max()
            .unwrap_or(0);
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            w.window,
            w.total_acts(),
            w.victims.len(),
            max,
            count_threshold_crossings(std::slice::from_ref(w), threshold)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub seeds: usize,
    pub offline_expected: f64,
    pub online_mean: f64,
    /// Standard deviation of the online mean predicted by the offline model.
    pub sigma_of_mean: f64,
    pub online_counts: Vec<u64>,
}

impl ConsistencyReport {
    pub fn within(&self, sigmas: f64) -> bool {
        let diff = (self.online_mean - self.offline_expected).abs();
        diff <= sigmas * self.sigma_of_mean + 1e-9
    }
}

/// Run the online engine over `n_seeds` consecutive seeds starting at
/// `cfg.rng_seed` and compare the mean flip count with the offline
/// expectation under the same configuration and map.
pub fn online_offline_consistency(
    commands: &[Command],
    cfg: &SimConfig,
    map: &DeviceMap,
    n_seeds: usize,
    exec: Exec,
) -> Result<ConsistencyReport, EngineError> {
    let windows = windowize(commands, cfg, cfg.trr_variant != TrrVariant::None)?;
    let probs = Probabilities {
        single_sided: cfg.single_sided_prob,
        double_sided: cfg.double_sided_prob,
        half_double: cfg.half_double_prob,
    };
    let est = estimate_bitflips(
        &windows,
        &probs,
        CellSource::Map(map),
        cfg.rowhammer_threshold,
        Accumulation::Absorbing,
    );
    let counts = exec.map_range(n_seeds, |i| -> Result<u64, EngineError> {
        let mut c = cfg.clone();
        c.rng_seed = cfg.rng_seed.wrapping_add(i as u64);
        c.enable_ecc = false;
        c.enable_memory_corruption = false;
        let mut e = Engine::new(c, map.clone(), None)?;
        e.run(commands, &mut ())?;
        Ok(e.finish().0.total_bitflips)
    });
    let online_counts = counts.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = online_counts.len().max(1) as f64;
    Ok(ConsistencyReport {
        seeds: online_counts.len(),
        offline_expected: est.expected_flips,
        online_mean: online_counts.iter().sum::<u64>() as f64 / n,
        sigma_of_mean: (est.variance / n).sqrt(),
        online_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TimingParams;
    use crate::geometry::DeviceGeometry;

    fn cfg() -> SimConfig {
        let g = DeviceGeometry {
            channels: 1,
            ranks_per_channel: 1,
            banks_per_rank: 1,
            rows_per_bank: 128,
            columns_per_row: 1024,
            bytes_per_row: 128,
        };
        let mut c = SimConfig::with_geometry(g);
        c.timing = TimingParams {
            t_refi: 1_000,
            t_refw: 8_000,
            rows_refreshed_per_refi: 16,
            max_trr_refreshes_per_refi: 2,
        };
        c
    }

    fn run(class: PatternClass, count: u64) -> Segment {
        Segment::Run { class, count }
    }

    #[test]
    fn qualifying_gate_arithmetic() {
        let v = VictimStats {
            segments: vec![
                run(PatternClass::SingleSided, 5),
                run(PatternClass::DoubleSided, 10),
                Segment::Reset,
                run(PatternClass::SingleSided, 12),
            ],
            ..VictimStats::default()
        };
        // exposures 1..5 single, 6..15 double, reset, 1..12 single
        assert_eq!(v.qualifying(0), [17, 0, 10]);
        assert_eq!(v.qualifying(8), [5, 0, 8]);
        assert_eq!(v.qualifying(13), [0, 0, 3]);
        assert_eq!(v.qualifying(100), [0, 0, 0]);
    }

    #[test]
    fn single_window_and_boundary() {
        let c = cfg();
        let t = vec![Command::act(10, 0, 0, 5), Command::act(7_999, 0, 0, 5)];
        assert_eq!(windowize(&t, &c, false).unwrap().len(), 1);
        let t = vec![Command::act(10, 0, 0, 5), Command::act(8_000, 0, 0, 5)];
        let w = windowize(&t, &c, false).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].total_acts(), 1);
    }

    #[test]
    fn crossings_by_hand() {
        let mut c = cfg();
        c.timing.t_refw = 1 << 40;
        c.timing.t_refi = 1 << 27;
        let t: Vec<Command> = (0..50_000).map(|i| Command::act(i, 0, 0, 10)).collect();
        let w = windowize(&t, &c, false).unwrap();
        // victims 9 and 11 at exposure 50,000
        assert_eq!(count_threshold_crossings(&w, 45_000), 2);
        assert_eq!(count_threshold_crossings(&w, 0), 2);
        assert_eq!(count_threshold_crossings(&w, u64::MAX), 0);
    }

    #[test]
    fn bernoulli_mean_of_one_cell() {
        let w = WindowStats {
            window: 0,
            acts: BTreeMap::new(),
            victims: [(
                RowKey::new(0, 0, 1),
                VictimStats {
                    evaluations: 1,
                    exposure: 1,
                    peak_exposure: 1,
                    best_class: Some(PatternClass::SingleSided),
                    segments: vec![run(PatternClass::SingleSided, 1)],
                },
            )]
            .into(),
        };
        let e = estimate_bitflips(
            std::slice::from_ref(&w),
            &Probabilities::uniform(0.5),
            CellSource::Uniform(1),
            0,
            Accumulation::Absorbing,
        );
        assert!((e.expected_flips - 0.5).abs() < 1e-15);
        let zero = estimate_bitflips(
            &[w],
            &Probabilities::default(),
            CellSource::Uniform(1),
            0,
            Accumulation::Absorbing,
        );
        assert_eq!(zero.expected_flips, 0.0);
    }

    #[test]
    fn absorbing_and_per_window_differ_only_across_windows() {
        let mk = |i| WindowStats {
            window: i,
            acts: BTreeMap::new(),
            victims: [(
                RowKey::new(0, 0, 1),
                VictimStats {
                    segments: vec![run(PatternClass::SingleSided, 1)],
                    evaluations: 1,
                    ..VictimStats::default()
                },
            )]
            .into(),
        };
        let probs = Probabilities::uniform(0.5);
        let one = [mk(0)];
        let two = [mk(0), mk(1)];
        let f = |w: &[WindowStats], a| {
            estimate_bitflips(w, &probs, CellSource::Uniform(1), 0, a).expected_flips
        };
        assert_eq!(
            f(&one, Accumulation::Absorbing),
            f(&one, Accumulation::PerWindow)
        );
        assert!((f(&two, Accumulation::Absorbing) - 0.75).abs() < 1e-12);
        assert!((f(&two, Accumulation::PerWindow) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 18);
        assert!((g[0] - 1e-9).abs() < 1e-24);
        assert!((g[8] - 0.1).abs() < 1e-15);
        assert_eq!(g[17], 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn deterministic_consistency_case() {
        let mut c = cfg();
        c.single_sided_prob = 1.0;
        c.rowhammer_threshold = 0;
        let mut map = DeviceMap::empty(c.geometry);
        map.insert(RowKey::new(0, 0, 6), vec![1, 2, 3, 4, 5])
            .unwrap();
        let t = vec![Command::act(1, 0, 0, 5)];
        let r = online_offline_consistency(&t, &c, &map, 3, Exec::default()).unwrap();
        assert_eq!(r.online_counts, vec![5, 5, 5]);
        assert_eq!(r.offline_expected, 5.0);
        assert!(r.within(3.0));
    }

    #[test]
    fn csv_headers() {
        let pts = [SweepPoint {
            p: 0.5,
            expected_flips: 1.25,
            crossings: 3,
        }];
        assert_eq!(sweep_csv(&pts), "p,expected_flips,crossings\n5e-1,1.25,3\n");
        assert!(window_csv(&[], 0).starts_with("window,acts"));
    }
}
