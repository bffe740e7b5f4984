//! Command traces.
//!
//! One command per line, `#` starts a comment:
//!
//! ```text
//! <tick_ps> ACT|RD|WR <rank> <bank> <row> [column] [hex-payload]
//! <tick_ps> ACT|RD|WR <byte-address> [hex-payload]
//! <tick_ps> REF <rank>
//! ```
//!
//! `column` is a 64-byte burst index within the row. Byte addresses may be
//! decimal or `0x` hex and are decoded with the configured mapping scheme.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: tick {tick} precedes previous tick {prev}")]
    Order { line: usize, prev: u64, tick: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommandKind {
    Act,
    Rd,
    Wr,
    Ref,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Act => "ACT",
            CommandKind::Rd => "RD",
            CommandKind::Wr => "WR",
            CommandKind::Ref => "REF",
        }
    }
}

impl FromStr for CommandKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ACT" => Ok(CommandKind::Act),
            "RD" => Ok(CommandKind::Rd),
            "WR" => Ok(CommandKind::Wr),
            "REF" => Ok(CommandKind::Ref),
            _ => Err(format!("unknown command `{s}`")),
        }
    }
}

/// What a command addresses. Ranks are global (`channel * ranks + rank`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Row {
        rank: u32,
        bank: u32,
        row: u32,
        column: Option<u32>,
    },
    Address(u64),
    Rank(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub tick: u64,
    pub kind: CommandKind,
    pub target: Target,
    pub payload: Option<Vec<u8>>,
}

impl Command {
    pub fn act(tick: u64, rank: u32, bank: u32, row: u32) -> Self {
        Self {
            tick,
            kind: CommandKind::Act,
            target: Target::Row {
                rank,
                bank,
                row,
                column: None,
            },
            payload: None,
        }
    }

    pub fn read(tick: u64, rank: u32, bank: u32, row: u32, column: u32) -> Self {
        Self {
            tick,
            kind: CommandKind::Rd,
            target: Target::Row {
                rank,
                bank,
                row,
                column: Some(column),
            },
            payload: None,
        }
    }

    pub fn write(tick: u64, rank: u32, bank: u32, row: u32, column: u32, data: Vec<u8>) -> Self {
        Self {
            tick,
            kind: CommandKind::Wr,
            target: Target::Row {
                rank,
                bank,
                row,
                column: Some(column),
            },
            payload: Some(data),
        }
    }

    pub fn refresh(tick: u64, rank: u32) -> Self {
        Self {
            tick,
            kind: CommandKind::Ref,
            target: Target::Rank(rank),
            payload: None,
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.tick, self.kind.name())?;
        match self.target {
            Target::Row {
                rank,
                bank,
                row,
                column,
            } => {
                write!(f, " {rank} {bank} {row}")?;
                if let Some(c) = column {
                    write!(f, " {c}")?;
                }
            }
            Target::Address(a) => write!(f, " {a:#x}")?,
            Target::Rank(r) => write!(f, " {r}")?,
        }
        if let Some(p) = &self.payload {
            f.write_str(" ")?;
            for b in p {
                write!(f, "{b:02x}")?;
            }
        }
        Ok(())
    }
}

fn num<T: FromStr>(tok: &str, what: &str) -> Result<T, String> {
    tok.parse().map_err(|_| format!("invalid {what} `{tok}`"))
}

fn address(tok: &str) -> Result<u64, String> {
    match tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).map_err(|_| format!("invalid address `{tok}`")),
        None => num(tok, "address"),
    }
}

fn hex(tok: &str) -> Result<Vec<u8>, String> {
    let h = tok.strip_prefix("0x").unwrap_or(tok);
    if h.is_empty() || !h.len().is_multiple_of(2) {
        return Err(format!(
            "payload `{tok}` must be an even number of hex digits"
        ));
    }
    (0..h.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&h[i..i + 2], 16).map_err(|_| format!("invalid payload `{tok}`"))
        })
        .collect()
}

/// Parse one non-comment line.
pub fn parse_command(line: &str) -> Result<Command, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() < 3 {
        return Err("expected `<tick> <command> <operands>`".into());
    }
    let tick = num(toks[0], "tick")?;
    let kind: CommandKind = toks[1].parse()?;
    let ops = &toks[2..];
    let (target, payload) = match kind {
        CommandKind::Ref => {
            if ops.len() != 1 {
                return Err("REF takes exactly one rank".into());
            }
            (Target::Rank(num(ops[0], "rank")?), None)
        }
        _ => match ops.len() {
            1 | 2 => (
                Target::Address(address(ops[0])?),
                ops.get(1).map(|t| hex(t)).transpose()?,
            ),
            3..=5 => (
                Target::Row {
                    rank: num(ops[0], "rank")?,
                    bank: num(ops[1], "bank")?,
                    row: num(ops[2], "row")?,
                    column: ops.get(3).map(|t| num(t, "column")).transpose()?,
                },
                ops.get(4).map(|t| hex(t)).transpose()?,
            ),
            _ => return Err(format!("too many operands for {}", kind.name())),
        },
    };
    if payload.is_some() && kind != CommandKind::Wr {
        return Err(format!("{} does not take a payload", kind.name()));
    }
    Ok(Command {
        tick,
        kind,
        target,
        payload,
    })
}

/// Streaming parser over a reader; enforces non-decreasing ticks.
pub struct TraceReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    prev: u64,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
            prev: 0,
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<Command, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(source) => {
                    return Some(Err(TraceError::Io {
                        path: "<stream>".into(),
                        source,
                    }))
                }
            };
            self.line += 1;
            let body = text.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let line = self.line;
            let cmd = match parse_command(body) {
                Ok(c) => c,
                Err(msg) => return Some(Err(TraceError::Parse { line, msg })),
            };
            if cmd.tick < self.prev {
                return Some(Err(TraceError::Order {
                    line,
                    prev: self.prev,
                    tick: cmd.tick,
                }));
            }
            self.prev = cmd.tick;
            return Some(Ok(cmd));
        }
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<Command>, TraceError> {
    TraceReader::new(text.as_bytes()).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn open_trace(path: &Path) -> Result<TraceReader<BufReader<std::fs::File>>, TraceError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    Ok(TraceReader::new(BufReader::new(f)))
}

pub fn read_trace(path: &Path) -> Result<Vec<Command>, TraceError> {
    open_trace(path)?
        .map(|r| {
            r.map_err(|e| match e {
                TraceError::Io { source, .. } => io_err(path)(source),
                other => other,
            })
        })
        .collect()
}

pub fn write_trace<'a>(
    commands: impl IntoIterator<Item = &'a Command>,
    path: &Path,
) -> Result<(), TraceError> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for c in commands {
        writeln!(w, "{c}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_form() {
        let t = parse_trace(
            "# header\n\
             10 ACT 0 1 5\n\
             11 RD 0 1 5 3   # probe\n\
             12 WR 0 1 5 3 00ff\n\
             13 ACT 0x40\n\
             14 WR 128 0a0b\n\
             15 REF 0\n",
        )
        .unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t[0], Command::act(10, 0, 1, 5));
        assert_eq!(t[1], Command::read(11, 0, 1, 5, 3));
        assert_eq!(t[2], Command::write(12, 0, 1, 5, 3, vec![0, 0xff]));
        assert_eq!(t[3].target, Target::Address(64));
        assert_eq!(t[4].payload, Some(vec![10, 11]));
        assert_eq!(t[5], Command::refresh(15, 0));
    }

    #[test]
    fn bad_tick_reports_line_one() {
        match parse_trace("abc ACT 0 0 5") {
            Err(TraceError::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tick_regression_rejected() {
        match parse_trace("5 ACT 0 0 1\n3 ACT 0 0 1\n") {
            Err(TraceError::Order {
                line: 2,
                prev: 5,
                tick: 3,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_operands() {
        for bad in [
            "1 FOO 0 0 0",
            "1 REF",
            "1 REF 0 1",
            "1 ACT 0 0 0 1 ff",
            "1 WR 0 0 0 1 abc",
            "1 ACT 0 0 0 1 2 3",
            "1 ACT",
        ] {
            assert!(parse_command(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn display_round_trips() {
        for c in [
            Command::act(1, 2, 3, 4),
            Command::read(1, 0, 0, 9, 2),
            Command::write(5, 0, 0, 9, 2, vec![1, 2, 255]),
            Command::refresh(7, 1),
            Command {
                tick: 9,
                kind: CommandKind::Rd,
                target: Target::Address(0xabc0),
                payload: None,
            },
        ] {
            assert_eq!(parse_command(&c.to_string()).unwrap(), c);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.trace");
        let cmds: Vec<Command> = (0..10_000u64)
            .map(|i| match i % 4 {
                0 => Command::act(i, 0, (i % 3) as u32, i as u32),
                1 => Command::read(i, 0, 1, 2, (i % 7) as u32),
                2 => Command::write(i, 0, 1, 2, 0, vec![i as u8; 8]),
                _ => Command::refresh(i, 0),
            })
            .collect();
        write_trace(&cmds, &p).unwrap();
        assert_eq!(read_trace(&p).unwrap(), cmds);
    }
}
