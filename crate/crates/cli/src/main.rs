use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rhsim::analyzer::{self, CellSource, SweepScaling};
use rhsim::config::load_config_with_overrides;
use rhsim::devmap::{self, load_device_map, save_device_map, DeviceMap, VariationParams};
use rhsim::ecc::{exhaustive_check, load_pmatrix, ParityMatrix};
use rhsim::metrics::{self, Axis, BitflipDistribution, Grid, Selection, Weighting};
use rhsim::rng::{CounterRng, Stream};
use rhsim::sim::{self, Source};
use rhsim::trace::{read_trace, Command};
use rhsim::traffic::generate;
use rhsim::{
    BitflipRecord, DeviceGeometry, ErrorKind, Exec, PatternClass, Probe, SimConfig, TrafficSpec,
};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "rhsim",
    version,
    about = "Trace-driven DRAM RowHammer fault simulator"
)]
struct Cli {
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run the online simulator over a trace or synthetic traffic.
    Simulate(SimulateArgs),
    /// Replay an ACT trace per refresh window and estimate expected bitflips.
    Analyze(AnalyzeArgs),
    /// Generate a statistical weak-cell map.
    Genmap(GenmapArgs),
    /// Jensen-Shannon divergence between bitflip distributions.
    Compare(CompareArgs),
    /// Validate a parity-check matrix and test it exhaustively.
    EccCheck(EccCheckArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set trr_variant=counter`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    fn load(&self) -> Result<SimConfig> {
        Ok(
            load_config_with_overrides(self.config.as_deref(), &self.overrides)
                .map_err(rhsim::Error::from)?,
        )
    }
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Command trace to replay.
    #[arg(long, conflicts_with = "traffic")]
    trace: Option<PathBuf>,
    /// Synthetic traffic spec, e.g. `pattern=double_sided,rows=100,acts_per_round=2,rounds=1000`.
    #[arg(long)]
    traffic: Option<TrafficSpec>,
    /// Write the JSON report here instead of standard output.
    #[arg(long, short)]
    report: Option<PathBuf>,
    /// Do not log injected bitflips to standard output.
    #[arg(long, short)]
    quiet: bool,
    /// Write a hex dump of every touched row.
    #[arg(long)]
    dump_memory: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// ACT trace to replay.
    #[arg(long, conflicts_with = "traffic", required_unless_present = "traffic")]
    trace: Option<PathBuf>,
    /// Synthetic traffic spec, same syntax as `simulate`.
    #[arg(long)]
    traffic: Option<TrafficSpec>,
    /// Device map; without it every victim row has `--cells-per-row` weak cells.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Comma-separated single-sided probabilities, or `default`.
    #[arg(long, default_value = "default")]
    sweep: String,
    /// RowHammer threshold; defaults to the configured one.
    #[arg(long)]
    threshold: Option<u64>,
    /// Weak cells per victim row when no map is given.
    #[arg(long, default_value_t = 1)]
    cells_per_row: u32,
    /// Double-sided probability as a multiple of the single-sided one.
    #[arg(long, default_value_t = 2.5e3)]
    double_factor: f64,
    /// Half-double probability as a multiple of the single-sided one.
    #[arg(long, default_value_t = 0.0)]
    half_double_factor: f64,
    /// Run the configured TRR variant during replay.
    #[arg(long)]
    trr_replay: bool,
    /// Sweep CSV; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Per-window CSV.
    #[arg(long)]
    windows: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenmapArgs {
    /// Geometry: a config file or an inline `key=value,...` list.
    #[arg(long)]
    geometry: Option<String>,
    /// Variation parameters: a TOML file or an inline `key=value,...` list.
    #[arg(long)]
    params: Option<String>,
    /// Overrides the seed in the variation parameters.
    #[arg(long)]
    seed: Option<u64>,
    /// Output map (JSON).
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AxisArg {
    Columns,
    Rows,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Reference inputs: device maps (JSON), bitflip logs or PGM grids.
    #[arg(long = "ref", required = true, num_args = 1..)]
    refs: Vec<PathBuf>,
    /// Test inputs, same formats.
    #[arg(long = "test", required = true, num_args = 1..)]
    tests: Vec<PathBuf>,
    /// Compare every reference with every test instead of pooling them.
    #[arg(long)]
    grid: bool,
    /// Weight each index 0/1 instead of by frequency.
    #[arg(long)]
    binary: bool,
    /// Index the distribution by column or by row.
    #[arg(long, value_enum, default_value = "columns")]
    axis: AxisArg,
    /// Restrict inputs to one rank.
    #[arg(long)]
    rank: Option<u32>,
    /// Restrict inputs to one bank.
    #[arg(long)]
    bank: Option<u32>,
    /// Restrict inputs to one row.
    #[arg(long)]
    row: Option<u32>,
    /// Add-epsilon smoothing applied to both sides.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Divergence CSV; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Write the superimposed test flips of the selected row as a PGM grid.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EccCheckArgs {
    /// Parity-check matrix: 8 lines of 72 `0`/`1` characters.
    #[arg(long, required_unless_present = "write_default")]
    pmatrix: Option<PathBuf>,
    /// Inject every single and double error into random words.
    #[arg(long)]
    exhaustive: bool,
    /// Random data words per exhaustive run.
    #[arg(long, default_value_t = 100)]
    words: u32,
    /// Seed for the random data words.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the built-in SECDED matrix to this file.
    #[arg(long)]
    write_default: Option<PathBuf>,
}

/// An invariant failure detected by the tool itself.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let result = match cli.command {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Analyze(a) => analyze(a, exec),
        Cmd::Genmap(a) => genmap(a, exec),
        Cmd::Compare(a) => compare(a, exec),
        Cmd::EccCheck(a) => ecc_check(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Join the error chain, skipping causes already quoted by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return 3;
    }
    match e.chain().find_map(|c| c.downcast_ref::<rhsim::Error>()) {
        Some(err) if err.kind() == ErrorKind::Invariant => 3,
        _ => 2,
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

struct FlipLog<W: Write>(W);

impl<W: Write> Probe for FlipLog<W> {
    fn bitflip(&mut self, r: &BitflipRecord) {
        let _ = writeln!(
            self.0,
            "bitflip tick={} rank={} bank={} row={} column={} pattern={}",
            r.tick, r.rank, r.bank, r.row, r.column, r.pattern
        );
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let source = match (&a.trace, &a.traffic) {
        (Some(t), _) => Some(Source::Trace(t)),
        (None, Some(s)) => Some(Source::Traffic(s)),
        (None, None) => None,
    };
    let dump = a.dump_memory.is_some();
    let out = if a.quiet {
        sim::simulate(&cfg, source, &mut (), dump)
    } else {
        let stdout = std::io::stdout();
        let mut log = FlipLog(BufWriter::new(stdout.lock()));
        let out = sim::simulate(&cfg, source, &mut log, dump);
        log.0.flush()?;
        out
    }
    .map_err(anyhow::Error::from)?;
    sim::write_outputs(&cfg, &out, a.report.as_deref())?;
    if a.report.is_none() {
        write_text(None, &out.report.to_json())?;
    }
    if let (Some(p), Some(d)) = (&a.dump_memory, &out.memory_dump) {
        write_text(Some(p), d)?;
    }
    Ok(())
}

fn load_commands(
    trace: Option<&Path>,
    traffic: Option<&TrafficSpec>,
    g: &DeviceGeometry,
) -> Result<Vec<Command>> {
    match (trace, traffic) {
        (Some(t), _) => Ok(read_trace(t).map_err(rhsim::Error::from)?),
        (None, Some(s)) => Ok(generate(s, g).map_err(rhsim::Error::from)?.collect()),
        (None, None) => bail!("either --trace or --traffic is required"),
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    if s == "default" {
        return Ok(analyzer::default_grid());
    }
    let grid = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("invalid probability `{v}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CheckFailed(format!("sweep probability {p} outside [0, 1]")).into());
    }
    Ok(grid)
}

fn analyze(a: AnalyzeArgs, exec: Exec) -> Result<()> {
    let cfg = a.config.load()?;
    let grid = parse_grid(&a.sweep)?;
    let commands = load_commands(a.trace.as_deref(), a.traffic.as_ref(), &cfg.geometry)?;
    let windows = analyzer::windowize(&commands, &cfg, a.trr_replay).map_err(rhsim::Error::from)?;
    let map = a
        .map
        .as_deref()
        .map(|p| load_device_map(p, cfg.geometry).map_err(rhsim::Error::from))
        .transpose()?;
    let cells = match &map {
        Some(m) => CellSource::Map(m),
        None => CellSource::Uniform(a.cells_per_row),
    };
    let threshold = a.threshold.unwrap_or(cfg.rowhammer_threshold);
    let scaling = SweepScaling {
        double_factor: a.double_factor,
        half_double_factor: a.half_double_factor,
    };
    let points = analyzer::sweep(&windows, &grid, scaling, cells, threshold, exec);
    write_text(a.output.as_deref(), &analyzer::sweep_csv(&points))?;
    if let Some(p) = &a.windows {
        write_text(Some(p), &analyzer::window_csv(&windows, threshold))?;
    }
    Ok(())
}

fn geometry_from(spec: Option<&str>) -> Result<DeviceGeometry> {
    let cfg = match spec {
        None => SimConfig::default(),
        Some(s) if Path::new(s).is_file() => {
            load_config_with_overrides(Some(Path::new(s)), &[]).map_err(rhsim::Error::from)?
        }
        Some(s) => {
            let pairs = s
                .split(',')
                .filter(|kv| !kv.trim().is_empty())
                .map(parse_kv)
                .collect::<Result<Vec<_>, _>>()
                .map_err(anyhow::Error::msg)?;
            load_config_with_overrides(None, &pairs).map_err(rhsim::Error::from)?
        }
    };
    Ok(cfg.geometry)
}

fn genmap(a: GenmapArgs, exec: Exec) -> Result<()> {
    let geometry = geometry_from(a.geometry.as_deref())?;
    let mut params = match &a.params {
        None => VariationParams::default(),
        Some(s) if Path::new(s).is_file() => {
            let text = std::fs::read_to_string(s).with_context(|| format!("reading {s}"))?;
            VariationParams::parse(&text).map_err(rhsim::Error::from)?
        }
        Some(s) => VariationParams::parse(s).map_err(rhsim::Error::from)?,
    };
    if let Some(seed) = a.seed {
        params.seed = seed;
    }
    let map = devmap::generate_statistical_map_with(&geometry, &params, exec)
        .map_err(rhsim::Error::from)?;
    save_device_map(&map, &a.output).map_err(rhsim::Error::from)?;
    eprintln!(
        "wrote {} weak cells in {} rows to {}",
        map.weak_cell_count(),
        map.weak_row_count(),
        a.output.display()
    );
    Ok(())
}

/// Parsed comparison input.
enum Input {
    Map(DeviceMap),
    Records(Vec<BitflipRecord>),
    Grid(Grid),
}

fn parse_records(text: &str, path: &Path) -> Result<Vec<BitflipRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        let bad = || {
            anyhow::anyhow!(
                "{}:{}: expected `<tick> <rank> <bank> <row> <column> <pattern>`",
                path.display(),
                i + 1
            )
        };
        if t.len() != 6 {
            return Err(bad());
        }
        let n = |s: &str| s.parse::<u64>().map_err(|_| bad());
        out.push(BitflipRecord {
            tick: n(t[0])?,
            rank: n(t[1])? as u32,
            bank: n(t[2])? as u32,
            row: n(t[3])? as u32,
            column: n(t[4])? as u32,
            pattern: t[5].parse::<PatternClass>().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn load_input(path: &Path, g: DeviceGeometry) -> Result<Input> {
    let text = std::fs::read_to_string(path).map_err(|e| rhsim::Error::io(path, e))?;
    let head = text.trim_start();
    if head.starts_with('{') {
        Ok(Input::Map(
            DeviceMap::from_json(&text, g).map_err(rhsim::Error::from)?,
        ))
    } else if head.starts_with("P2") {
        Ok(Input::Grid(
            Grid::from_pgm(&text).map_err(rhsim::Error::from)?,
        ))
    } else {
        Ok(Input::Records(parse_records(&text, path)?))
    }
}

fn flipped_columns(input: &Input, sel: Selection) -> Vec<u32> {
    match input {
        Input::Map(m) => m
            .rows()
            .filter(|(k, _)| sel.matches(*k))
            .flat_map(|(_, c)| c.iter().copied())
            .collect(),
        Input::Records(r) => r
            .iter()
            .filter(|r| sel.matches(rhsim::RowKey::new(r.rank, r.bank, r.row)))
            .map(|r| r.column)
            .collect(),
        Input::Grid(g) => g.flipped_columns().into_iter().collect(),
    }
}

fn distribution(
    label: &str,
    inputs: &[Input],
    g: &DeviceGeometry,
    axis: Axis,
    sel: Selection,
    w: Weighting,
) -> BitflipDistribution {
    let dim = match axis {
        Axis::Columns => g.columns_per_row,
        Axis::Rows => g.rows_per_bank,
    } as usize;
    let mut weights = vec![0.0; dim];
    for input in inputs {
        let d = match input {
            Input::Map(m) => {
                metrics::distribution_from_map(label, m, axis, sel, Weighting::Frequency)
            }
            Input::Records(r) => {
                metrics::distribution_from_records(label, r, dim, axis, sel, Weighting::Frequency)
            }
            Input::Grid(grid) => {
                let mut v = vec![0.0; dim];
                if axis == Axis::Columns {
                    for c in grid.flipped_columns() {
                        if let Some(x) = v.get_mut(c as usize) {
                            *x = 1.0;
                        }
                    }
                }
                BitflipDistribution::from_weights(label, v)
            }
        };
        // pool raw counts so each input keeps its own weight
        let mass = match input {
            Input::Map(m) => m
                .rows()
                .filter(|(k, _)| sel.matches(*k))
                .map(|(_, c)| c.len() as f64)
                .sum(),
            Input::Records(r) => r
                .iter()
                .filter(|r| sel.matches(rhsim::RowKey::new(r.rank, r.bank, r.row)))
                .count() as f64,
            Input::Grid(grid) => grid.flipped_columns().len() as f64,
        };
        for (acc, p) in weights.iter_mut().zip(d.probs()) {
            *acc += p * mass;
        }
    }
    if w == Weighting::Binary {
        for x in &mut weights {
            *x = f64::from(u8::from(*x > 0.0));
        }
    }
    BitflipDistribution::from_weights(label, weights)
}

fn label(p: &Path) -> String {
    p.file_name().map_or_else(
        || p.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn compare(a: CompareArgs, exec: Exec) -> Result<()> {
    let cfg = a.config.load()?;
    let g = cfg.geometry;
    let axis = match a.axis {
        AxisArg::Columns => Axis::Columns,
        AxisArg::Rows => Axis::Rows,
    };
    let weighting = if a.binary {
        Weighting::Binary
    } else {
        Weighting::Frequency
    };
    let sel = Selection {
        rank: a.rank,
        bank: a.bank,
        row: a.row,
    };
    let load_all = |paths: &[PathBuf]| -> Result<Vec<Input>> {
        paths.iter().map(|p| load_input(p, g)).collect()
    };
    let refs = load_all(&a.refs)?;
    let tests = load_all(&a.tests)?;
    let build = |labels: &[PathBuf], inputs: &[Input]| -> Vec<BitflipDistribution> {
        if a.grid {
            labels
                .iter()
                .zip(inputs)
                .map(|(p, i)| {
                    distribution(&label(p), std::slice::from_ref(i), &g, axis, sel, weighting)
                })
                .collect()
        } else {
            let name = labels
                .iter()
                .map(|p| label(p))
                .collect::<Vec<_>>()
                .join("+");
            vec![distribution(&name, inputs, &g, axis, sel, weighting)]
        }
    };
    let smooth = |d: Vec<BitflipDistribution>| -> Vec<BitflipDistribution> {
        match a.epsilon {
            Some(e) => d.iter().map(|x| x.smoothed(e)).collect(),
            None => d,
        }
    };
    let rd = smooth(build(&a.refs, &refs));
    let td = smooth(build(&a.tests, &tests));
    let m = metrics::jsd_matrix(&rd, &td, exec).map_err(rhsim::Error::from)?;
    write_text(a.output.as_deref(), &metrics::jsd_matrix_csv(&rd, &td, &m))?;
    if let Some(p) = &a.pgm {
        let grids: Vec<Grid> = tests
            .iter()
            .map(|i| {
                metrics::render_bitflip_grid(flipped_columns(i, sel), g.columns_per_row as usize)
            })
            .collect();
        let img = metrics::superimpose(&grids).context("grids differ in size")?;
        write_text(Some(p), &img.to_pgm())?;
    }
    Ok(())
}

fn ecc_check(a: EccCheckArgs, exec: Exec) -> Result<()> {
    if let Some(p) = &a.write_default {
        write_text(Some(p), &ParityMatrix::hsiao().to_string())?;
        println!("wrote default SECDED(72,64) matrix to {}", p.display());
    }
    let Some(path) = &a.pmatrix else {
        return Ok(());
    };
    let pm = load_pmatrix(path).map_err(rhsim::Error::from)?;
    println!(
        "matrix ok: 72 distinct non-zero columns, systematic check block; doubles never alias singles: {}",
        pm.detects_all_doubles()
    );
    if a.exhaustive {
        let rng = CounterRng::new(a.seed);
        let words: Vec<u64> = (0..a.words)
            .map(|i| rng.bits(Stream::Harness, i, 0, 0, 0))
            .collect();
        let r = exhaustive_check(&pm, &words, exec);
        println!(
            "words={} singles_corrected={}/{} doubles_flagged={}/{} doubles_silent={}",
            r.words, r.singles_corrected, r.singles, r.doubles_flagged, r.doubles, r.doubles_silent
        );
        if !r.passed() {
            return Err(CheckFailed("exhaustive SECDED check failed".into()).into());
        }
    }
    Ok(())
}
