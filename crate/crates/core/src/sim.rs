//! Running a configured simulation end to end.

use crate::config::SimConfig;
use crate::devmap::{load_device_map, DeviceMap};
use crate::ecc::{load_pmatrix, ParityMatrix};
use crate::engine::{rh_stat_lines, Engine, Probe, SimReport};
use crate::trace::{open_trace, Command};
use crate::tracker::BitflipRecord;
use crate::traffic::{generate, TrafficSpec};
use crate::Error;
use std::path::Path;

/// Where commands come from.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Trace(&'a Path),
    Traffic(&'a TrafficSpec),
    Commands(&'a [Command]),
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: SimReport,
    pub records: Vec<BitflipRecord>,
    /// Hex dump of touched rows, when requested.
    pub memory_dump: Option<String>,
}

/// Load the device map and parity matrix a configuration refers to.
pub fn load_inputs(cfg: &SimConfig) -> Result<(DeviceMap, Option<ParityMatrix>), Error> {
    let map = match &cfg.device_file {
        Some(p) => load_device_map(p, cfg.geometry)?,
        None => DeviceMap::empty(cfg.geometry),
    };
    let pm = match (&cfg.p_matrix, cfg.enable_ecc) {
        (Some(p), true) => Some(load_pmatrix(p)?),
        _ => None,
    };
    Ok((map, pm))
}

pub fn simulate_with<P: Probe>(
    cfg: &SimConfig,
    map: DeviceMap,
    pmatrix: Option<ParityMatrix>,
    source: Source<'_>,
    probe: &mut P,
    dump_memory: bool,
) -> Result<SimOutput, Error> {
    let mut engine = Engine::new(cfg.clone(), map, pmatrix)?;
    match source {
        Source::Trace(path) => {
            for cmd in open_trace(path)? {
                let cmd = cmd.map_err(|e| match e {
                    crate::trace::TraceError::Io { source, .. } => Error::io(path, source),
                    other => other.into(),
                })?;
                engine.step(&cmd, probe)?;
            }
        }
        Source::Traffic(spec) => {
            for cmd in generate(spec, &cfg.geometry)? {
                engine.step(&cmd, probe)?;
            }
        }
        Source::Commands(cmds) => engine.run(cmds, probe)?,
    }
    let memory_dump = dump_memory.then(|| engine.memory().hex_dump());
    let (report, records) = engine.finish();
    Ok(SimOutput {
        report,
        records,
        memory_dump,
    })
}

/// Run `cfg` against `source`, falling back to the configured synthetic
/// traffic when no source is given.
pub fn simulate<P: Probe>(
    cfg: &SimConfig,
    source: Option<Source<'_>>,
    probe: &mut P,
    dump_memory: bool,
) -> Result<SimOutput, Error> {
    let (map, pm) = load_inputs(cfg)?;
    let source = match (source, &cfg.synthetic_traffic) {
        (Some(s), _) => s,
        (None, Some(spec)) => Source::Traffic(spec),
        (None, None) => Source::Commands(&[]),
    };
    simulate_with(cfg, map, pm, source, probe, dump_memory)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the report and the optional per-flip and TRR statistics files.
pub fn write_outputs(
    cfg: &SimConfig,
    out: &SimOutput,
    report_path: Option<&Path>,
) -> Result<(), Error> {
    if let Some(p) = report_path {
        write(p, &out.report.to_json())?;
    }
    if let Some(p) = &cfg.rh_stat_file {
        write(p, &rh_stat_lines(&out.records))?;
    }
    if let Some(p) = &cfg.trr_stats_dump {
        write(p, &out.report.trr_stats_lines())?;
    }
    Ok(())
}
