//! Bitflip distributions, Jensen-Shannon divergence and grid images.

use crate::devmap::DeviceMap;
use crate::geometry::RowKey;
use crate::par::Exec;
use crate::tracker::BitflipRecord;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("distribution dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("distribution `{0}` is empty")]
    Empty(String),
    #[error("invalid PGM: {0}")]
    Pgm(String),
}

/// Probability vector over column (or row) indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BitflipDistribution {
    pub label: String,
    probs: Vec<f64>,
    mass: f64,
}

impl BitflipDistribution {
    /// Normalize non-negative weights. An all-zero vector stays all-zero and
    /// is reported as empty.
    pub fn from_weights(label: impl Into<String>, weights: Vec<f64>) -> Self {
        let mass: f64 = weights.iter().sum();
        let probs = if mass > 0.0 {
            weights.iter().map(|w| w / mass).collect()
        } else {
            weights
        };
        Self {
            label: label.into(),
            probs,
            mass,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass <= 0.0
    }

    /// Add `eps` to every bin and renormalize.
    pub fn smoothed(&self, eps: f64) -> Self {
        Self::from_weights(
            self.label.clone(),
            self.probs.iter().map(|p| p + eps).collect(),
        )
    }

    pub fn require_non_empty(self) -> Result<Self, MetricsError> {
        if self.is_empty() {
            Err(MetricsError::Empty(self.label))
        } else {
            Ok(self)
        }
    }
}

fn kl_term(a: f64, m: f64) -> f64 {
    if a > 0.0 {
        a * (a / m).log2()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in bits, in `[0, 1]`.
pub fn js_divergence(
    p: &BitflipDistribution,
    q: &BitflipDistribution,
) -> Result<f64, MetricsError> {
    if p.support_size() != q.support_size() {
        return Err(MetricsError::Dimension(p.support_size(), q.support_size()));
    }
    for d in [p, q] {
        if d.is_empty() {
            return Err(MetricsError::Empty(d.label.clone()));
        }
    }
    let mut jsd = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        // summed in an order-independent way so jsd(p, q) == jsd(q, p)
        let m = 0.5 * (a + b);
        let (x, y) = (kl_term(a, m), kl_term(b, m));
        jsd += 0.5 * (x.min(y) + x.max(y));
    }
    Ok(jsd.clamp(0.0, 1.0))
}

/// Pairwise divergences, rows = references, columns = tests.
pub fn jsd_matrix(
    refs: &[BitflipDistribution],
    tests: &[BitflipDistribution],
    exec: Exec,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    exec.map(refs, |r| {
        tests
            .iter()
            .map(|t| js_divergence(r, t))
            .collect::<Result<Vec<_>, _>>()
    })
    .into_iter()
    .collect()
}

pub fn jsd_matrix_csv(
    refs: &[BitflipDistribution],
    tests: &[BitflipDistribution],
    matrix: &[Vec<f64>],
) -> String {
    let mut out = String::from("# jsd_log_base=2\nreference");
    for t in tests {
        let _ = write!(out, ",{}", t.label);
    }
    out.push('\n');
    for (r, row) in refs.iter().zip(matrix) {
        out.push_str(&r.label);
        for v in row {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Which index a distribution is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Axis {
    #[default]
    Columns,
    Rows,
}

/// How repeated hits of the same index are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Count every hit.
    #[default]
    Frequency,
    /// 1 if the index was hit at all.
    Binary,
}

/// Restricts which rows contribute. `None` matches anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Selection {
    pub rank: Option<u32>,
    pub bank: Option<u32>,
    pub row: Option<u32>,
}

impl Selection {
    pub fn matches(&self, k: RowKey) -> bool {
        self.rank.is_none_or(|r| r == k.rank)
            && self.bank.is_none_or(|b| b == k.bank)
            && self.row.is_none_or(|r| r == k.row)
    }
}

fn finish(label: &str, mut w: Vec<f64>, weighting: Weighting) -> BitflipDistribution {
    if weighting == Weighting::Binary {
        for x in &mut w {
            *x = f64::from(u8::from(*x > 0.0));
        }
    }
    BitflipDistribution::from_weights(label, w)
}

/// Distribution of bitflip records over `dim` indices.
pub fn distribution_from_records(
    label: &str,
    records: &[BitflipRecord],
    dim: usize,
    axis: Axis,
    selection: Selection,
    weighting: Weighting,
) -> BitflipDistribution {
    let mut w = vec![0.0; dim];
    for r in records {
        if !selection.matches(RowKey::new(r.rank, r.bank, r.row)) {
            continue;
        }
        let i = match axis {
            Axis::Columns => r.column,
            Axis::Rows => r.row,
        } as usize;
        if let Some(x) = w.get_mut(i) {
            *x += 1.0;
        }
    }
    finish(label, w, weighting)
}

/// Uniform distribution over the weak cells of the selected map rows.
pub fn distribution_from_map(
    label: &str,
    map: &DeviceMap,
    axis: Axis,
    selection: Selection,
    weighting: Weighting,
) -> BitflipDistribution {
    let g = map.geometry();
    let dim = match axis {
        Axis::Columns => g.columns_per_row,
        Axis::Rows => g.rows_per_bank,
    } as usize;
    let mut w = vec![0.0; dim];
    for (k, cols) in map.rows().filter(|(k, _)| selection.matches(*k)) {
        match axis {
            Axis::Columns => {
                for &c in cols {
                    w[c as usize] += 1.0;
                }
            }
            Axis::Rows => w[k.row as usize] += cols.len() as f64,
        }
    }
    finish(label, w, weighting)
}

/// Square grayscale image of one row: column `c` is pixel
/// `(c % side, c / side)` with `side = ceil(sqrt(columns))`; white = flipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub side: usize,
    pub pixels: Vec<u8>,
}

pub fn grid_side(columns: usize) -> usize {
    let mut s = (columns as f64).sqrt() as usize;
    while s * s < columns {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= columns {
        s -= 1;
    }
    s
}

pub fn render_bitflip_grid(flipped: impl IntoIterator<Item = u32>, columns: usize) -> Grid {
    let side = grid_side(columns);
    let mut pixels = vec![0u8; side * side];
    for c in flipped {
        if let Some(p) = pixels.get_mut(c as usize) {
            *p = 255;
        }
    }
    Grid { side, pixels }
}

/// Union of several grids of equal size.
pub fn superimpose(grids: &[Grid]) -> Option<Grid> {
    let first = grids.first()?;
    let mut out = first.clone();
    for g in &grids[1..] {
        if g.side != out.side {
            return None;
        }
        for (a, b) in out.pixels.iter_mut().zip(&g.pixels) {
            *a = (*a).max(*b);
        }
    }
    Some(out)
}

impl Grid {
    pub fn flipped_columns(&self) -> BTreeSet<u32> {
        self.pixels
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Plain (P2) portable graymap.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.side, self.side);
        for row in self.pixels.chunks(self.side.max(1)) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_pgm(text: &str) -> Result<Self, MetricsError> {
        let bad = |m: &str| MetricsError::Pgm(m.to_string());
        let mut toks = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if toks.next() != Some("P2") {
            return Err(bad("expected P2 header"));
        }
        let mut num = |what: &str| -> Result<usize, MetricsError> {
            toks.next()
                .ok_or_else(|| bad(&format!("missing {what}")))?
                .parse()
                .map_err(|_| bad(&format!("invalid {what}")))
        };
        let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
        if w != h {
            return Err(bad("grid must be square"));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            let v = num("pixel")?;
            pixels.push(if v * 2 > max { 255 } else { 0 });
        }
        Ok(Grid { side: w, pixels })
    }
}
