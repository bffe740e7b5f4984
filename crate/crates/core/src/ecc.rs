//! SECDED over 64-bit words with eight check bits.
//!
//! Bit `j < 64` of a code word is data bit `j` (bit `j` of the little-endian
//! `u64` read from memory); bits 64..72 are check bits 0..8. Column `j` of the
//! parity-check matrix is an 8-bit vector whose bit `i` is the entry in row `i`.

use crate::par::Exec;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub const DATA_BITS: usize = 64;
pub const CODE_BITS: usize = 72;
pub const CHECK_BITS: usize = 8;

#[derive(Debug, Error)]
pub enum EccError {
    #[error("reading parity matrix {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parity matrix must have {CHECK_BITS} rows, found {0}")]
    RowCount(usize),
    #[error("parity matrix row {row} must have {CODE_BITS} columns, found {found}")]
    RowLength { row: usize, found: usize },
    #[error("parity matrix row {row}: invalid character {ch:?}")]
    BadChar { row: usize, ch: char },
    #[error("column {0} is all zero")]
    ZeroColumn(usize),
    #[error("ambiguous syndrome: columns {0} and {1} are equal")]
    DuplicateColumn(usize, usize),
    #[error("check column {0} is not part of an identity block")]
    NotSystematic(usize),
}

/// Validated 8 x 72 parity-check matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityMatrix {
    columns: [u8; CODE_BITS],
    row_masks: [u64; CHECK_BITS],
    single: [Option<u8>; 256],
    double: [bool; 256],
}

impl ParityMatrix {
    pub fn from_columns(columns: [u8; CODE_BITS]) -> Result<Self, EccError> {
        for (j, &c) in columns.iter().enumerate() {
            if c == 0 {
                return Err(EccError::ZeroColumn(j));
            }
        }
        for i in 0..CHECK_BITS {
            if columns[DATA_BITS + i] != 1 << i {
                return Err(EccError::NotSystematic(DATA_BITS + i));
            }
        }
        let mut single = [None; 256];
        for (j, &c) in columns.iter().enumerate() {
            if let Some(prev) = single[c as usize] {
                return Err(EccError::DuplicateColumn(prev as usize, j));
            }
            single[c as usize] = Some(j as u8);
        }
        let mut double = [false; 256];
        for a in 0..CODE_BITS {
            for b in a + 1..CODE_BITS {
                double[(columns[a] ^ columns[b]) as usize] = true;
            }
        }
        let mut row_masks = [0u64; CHECK_BITS];
        for (j, &c) in columns[..DATA_BITS].iter().enumerate() {
            for (i, mask) in row_masks.iter_mut().enumerate() {
                if c >> i & 1 == 1 {
                    *mask |= 1 << j;
                }
            }
        }
        Ok(Self {
            columns,
            row_masks,
            single,
            double,
        })
    }

    /// Hsiao-style matrix: data columns are the 56 weight-3 vectors followed
    /// by the first 8 weight-5 vectors in ascending order, check columns the
    /// identity. Every column has odd weight, so any double error yields an
    /// even, non-zero syndrome that matches no column.
    pub fn hsiao() -> Self {
        let mut columns = [0u8; CODE_BITS];
        let data = (0u16..256)
            .filter(|v| v.count_ones() == 3)
            .chain((0u16..256).filter(|v| v.count_ones() == 5).take(8));
        for (slot, v) in columns.iter_mut().zip(data) {
            *slot = v as u8;
        }
        for i in 0..CHECK_BITS {
            columns[DATA_BITS + i] = 1 << i;
        }
        Self::from_columns(columns).expect("hsiao matrix is valid")
    }

    pub fn parse(text: &str) -> Result<Self, EccError> {
        let rows: Vec<Vec<char>> = text
            .lines()
            .map(|l| l.chars().filter(|c| !c.is_whitespace()).collect::<Vec<_>>())
            .filter(|r| !r.is_empty())
            .collect();
        if rows.len() != CHECK_BITS {
            return Err(EccError::RowCount(rows.len()));
        }
        let mut columns = [0u8; CODE_BITS];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != CODE_BITS {
                return Err(EccError::RowLength {
                    row: i,
                    found: row.len(),
                });
            }
            for (j, &ch) in row.iter().enumerate() {
                match ch {
                    '0' => {}
                    '1' => columns[j] |= 1 << i,
                    _ => return Err(EccError::BadChar { row: i, ch }),
                }
            }
        }
        Self::from_columns(columns)
    }

    pub fn column(&self, j: usize) -> u8 {
        self.columns[j]
    }

    /// True when no pair of single-bit errors can alias a single error, so
    /// doubles are never miscorrected.
    pub fn detects_all_doubles(&self) -> bool {
        self.columns.iter().all(|&c| !self.double[c as usize])
    }

    pub fn encode(&self, word: u64) -> u8 {
        let mut check = 0u8;
        for (i, mask) in self.row_masks.iter().enumerate() {
            check |= (((word & mask).count_ones() & 1) as u8) << i;
        }
        check
    }

    pub fn decode(&self, word: u64, check: u8) -> (u64, EccOutcome) {
        let s = check ^ self.encode(word);
        if s == 0 {
            return (word, EccOutcome::Clean);
        }
        if let Some(j) = self.single[s as usize] {
            let fixed = if (j as usize) < DATA_BITS {
                word ^ (1 << j)
            } else {
                word
            };
            return (fixed, EccOutcome::CorrectedSingle(j));
        }
        if self.double[s as usize] {
            (word, EccOutcome::DetectedDouble)
        } else {
            (word, EccOutcome::Uncorrectable)
        }
    }
}

impl fmt::Display for ParityMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..CHECK_BITS {
            for c in &self.columns {
                f.write_str(if c >> i & 1 == 1 { "1" } else { "0" })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn load_pmatrix(path: &Path) -> Result<ParityMatrix, EccError> {
    let text = std::fs::read_to_string(path).map_err(|source| EccError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ParityMatrix::parse(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EccOutcome {
    Clean,
    /// Carries the corrected code-word bit position.
    CorrectedSingle(u8),
    DetectedDouble,
    Uncorrectable,
}

impl EccOutcome {
    fn severity(self) -> u8 {
        match self {
            EccOutcome::Clean => 0,
            EccOutcome::CorrectedSingle(_) => 1,
            EccOutcome::DetectedDouble => 2,
            EccOutcome::Uncorrectable => 3,
        }
    }

    /// The more severe of two outcomes.
    pub fn worst(self, other: Self) -> Self {
        if other.severity() > self.severity() {
            other
        } else {
            self
        }
    }
}

/// Running decode statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EccCounters {
    pub clean: u64,
    pub corrected_single: u64,
    pub detected_double: u64,
    pub uncorrectable: u64,
}

impl EccCounters {
    pub fn record(&mut self, outcome: EccOutcome) {
        match outcome {
            EccOutcome::Clean => self.clean += 1,
            EccOutcome::CorrectedSingle(_) => self.corrected_single += 1,
            EccOutcome::DetectedDouble => self.detected_double += 1,
            EccOutcome::Uncorrectable => self.uncorrectable += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.clean + self.corrected_single + self.detected_double + self.uncorrectable
    }
}

/// Result of injecting every single and double error into a set of words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ExhaustiveReport {
    pub words: u64,
    pub singles: u64,
    pub singles_corrected: u64,
    pub doubles: u64,
    pub doubles_flagged: u64,
    /// Doubles decoded as clean or "corrected" to some word.
    pub doubles_silent: u64,
}

impl ExhaustiveReport {
    pub fn passed(&self) -> bool {
        self.singles_corrected == self.singles
            && self.doubles_flagged == self.doubles
            && self.doubles_silent == 0
    }

    fn merge(mut self, o: Self) -> Self {
        self.words += o.words;
        self.singles += o.singles;
        self.singles_corrected += o.singles_corrected;
        self.doubles += o.doubles;
        self.doubles_flagged += o.doubles_flagged;
        self.doubles_silent += o.doubles_silent;
        self
    }
}

fn flip(word: u64, check: u8, bit: usize) -> (u64, u8) {
    if bit < DATA_BITS {
        (word ^ (1 << bit), check)
    } else {
        (word, check ^ (1 << (bit - DATA_BITS)))
    }
}

fn check_word(pm: &ParityMatrix, word: u64) -> ExhaustiveReport {
    let check = pm.encode(word);
    let mut r = ExhaustiveReport {
        words: 1,
        ..ExhaustiveReport::default()
    };
    for a in 0..CODE_BITS {
        let (w, c) = flip(word, check, a);
        r.singles += 1;
        if let (fixed, EccOutcome::CorrectedSingle(j)) = pm.decode(w, c) {
            if fixed == word && j as usize == a {
                r.singles_corrected += 1;
            }
        }
        for b in a + 1..CODE_BITS {
            let (w2, c2) = flip(w, c, b);
            r.doubles += 1;
            match pm.decode(w2, c2).1 {
                EccOutcome::DetectedDouble | EccOutcome::Uncorrectable => r.doubles_flagged += 1,
                _ => r.doubles_silent += 1,
            }
        }
    }
    r
}

/// Inject all 72 single and all C(72, 2) double errors into every word.
pub fn exhaustive_check(pm: &ParityMatrix, words: &[u64], exec: Exec) -> ExhaustiveReport {
    exec.map(words, |&w| check_word(pm, w))
        .into_iter()
        .fold(ExhaustiveReport::default(), ExhaustiveReport::merge)
}
