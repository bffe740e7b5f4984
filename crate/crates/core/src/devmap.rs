//! Weak-cell vulnerability maps.
//!
//! A map lists, per `(rank, bank, row)`, the bit columns that can flip under
//! hammering. Rows that are not listed are strong and never flip. On disk the
//! map is nested JSON keyed by decimal strings:
//!
//! ```json
//! { "0": { "3": { "8024": [17, 18, 4095] } } }
//! ```

use crate::geometry::{DeviceGeometry, GeometryError, RowKey};
use crate::par::Exec;
use crate::rng::{inverse_normal_cdf, CounterRng, Stream};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("cannot access device map {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("device map is not valid JSON: {0}")]
    Parse(String),
    #[error("device map {level} key `{key}` is not a decimal integer")]
    NonIntegerKey { level: &'static str, key: String },
    #[error("device map {level} entry must be {expected}")]
    Shape {
        level: &'static str,
        expected: &'static str,
    },
    #[error("{what} out of range: {value} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: u64,
        limit: u64,
    },
    #[error("invalid variation parameter `{field}`: {reason}")]
    Params { field: &'static str, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Validated weak-cell map bound to one geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceMap {
    geometry: DeviceGeometry,
    rows: BTreeMap<RowKey, Box<[u32]>>,
}

impl DeviceMap {
    pub fn empty(geometry: DeviceGeometry) -> Self {
        Self {
            geometry,
            rows: BTreeMap::new(),
        }
    }

    /// Build from explicit row entries. Columns are sorted and deduplicated;
    /// rows with no columns are dropped.
    pub fn from_rows(
        geometry: DeviceGeometry,
        rows: impl IntoIterator<Item = (RowKey, Vec<u32>)>,
    ) -> Result<Self, MapError> {
        geometry.validate()?;
        let mut map = Self::empty(geometry);
        for (key, cols) in rows {
            map.insert(key, cols)?;
        }
        Ok(map)
    }

    /// Add or replace one row entry.
    pub fn insert(&mut self, key: RowKey, mut cols: Vec<u32>) -> Result<(), MapError> {
        let g = &self.geometry;
        check("rank", key.rank.into(), g.total_ranks().into())?;
        check("bank", key.bank.into(), g.banks_per_rank.into())?;
        check("row", key.row.into(), g.rows_per_bank.into())?;
        for &c in &cols {
            check("column", c.into(), g.columns_per_row.into())?;
        }
        cols.sort_unstable();
        cols.dedup();
        if cols.is_empty() {
            return Ok(());
        }
        match self.rows.get(&key) {
            Some(existing) => {
                let mut merged: Vec<u32> = existing.iter().copied().chain(cols).collect();
                merged.sort_unstable();
                merged.dedup();
                self.rows.insert(key, merged.into_boxed_slice());
            }
            None => {
                self.rows.insert(key, cols.into_boxed_slice());
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        &self.geometry
    }

    /// Weak columns of a row; empty for strong rows.
    pub fn weak_columns(&self, key: RowKey) -> &[u32] {
        self.rows.get(&key).map(|c| &c[..]).unwrap_or(&[])
    }

    pub fn is_weak_row(&self, key: RowKey) -> bool {
        self.rows.contains_key(&key)
    }

    pub fn rows(&self) -> impl Iterator<Item = (RowKey, &[u32])> {
        self.rows.iter().map(|(k, v)| (*k, &v[..]))
    }

    pub fn weak_row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn weak_cell_count(&self) -> usize {
        self.rows.values().map(|c| c.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Serialize with keys in ascending numeric order.
    pub fn to_json(&self) -> String {
        let mut nested: BTreeMap<u32, BTreeMap<u32, BTreeMap<u32, &[u32]>>> = BTreeMap::new();
        for (k, cols) in &self.rows {
            nested
                .entry(k.rank)
                .or_default()
                .entry(k.bank)
                .or_default()
                .insert(k.row, cols);
        }
        serde_json::to_string_pretty(&nested).expect("map serialization is infallible")
    }

    pub fn from_json(text: &str, geometry: DeviceGeometry) -> Result<Self, MapError> {
        geometry.validate()?;
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| MapError::Parse(e.to_string()))?;
        let mut map = Self::empty(geometry);
        let ranks = value.as_object().ok_or(MapError::Shape {
            level: "top",
            expected: "an object keyed by rank",
        })?;
        for (rk, banks) in ranks {
            let rank = parse_key("rank", rk)?;
            let banks = banks.as_object().ok_or(MapError::Shape {
                level: "rank",
                expected: "an object keyed by bank",
            })?;
            for (bk, rows) in banks {
                let bank = parse_key("bank", bk)?;
                let rows = rows.as_object().ok_or(MapError::Shape {
                    level: "bank",
                    expected: "an object keyed by row",
                })?;
                for (rowk, cols) in rows {
                    let row = parse_key("row", rowk)?;
                    let cols = cols.as_array().ok_or(MapError::Shape {
                        level: "row",
                        expected: "an array of column indices",
                    })?;
                    let mut out = Vec::with_capacity(cols.len());
                    for c in cols {
                        let c = c.as_u64().ok_or(MapError::Shape {
                            level: "column",
                            expected: "a non-negative integer",
                        })?;
                        check("column", c, geometry.columns_per_row.into())?;
                        out.push(c as u32);
                    }
                    map.insert(RowKey::new(rank, bank, row), out)?;
                }
            }
        }
        Ok(map)
    }
}

fn check(what: &'static str, value: u64, limit: u64) -> Result<(), MapError> {
    if value >= limit {
        Err(MapError::OutOfRange { what, value, limit })
    } else {
        Ok(())
    }
}

fn parse_key(level: &'static str, key: &str) -> Result<u32, MapError> {
    if key.is_empty() || !key.bytes().all(|b| b.is_ascii_digit()) {
        return Err(MapError::NonIntegerKey {
            level,
            key: key.to_string(),
        });
    }
    key.parse().map_err(|_| MapError::OutOfRange {
        what: level,
        value: u64::MAX,
        limit: u32::MAX.into(),
    })
}

pub fn load_device_map(path: &Path, geometry: DeviceGeometry) -> Result<DeviceMap, MapError> {
    let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    DeviceMap::from_json(&text, geometry)
}

pub fn save_device_map(map: &DeviceMap, path: &Path) -> Result<(), MapError> {
    std::fs::write(path, map.to_json()).map_err(|source| MapError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Knobs of the statistical weak-cell generator.
///
/// This is a modeling choice, not a calibrated process model: a row-level
/// vulnerability field with exponential correlation decides which rows are
/// weak, and weak cells inside a weak row gather in Gaussian clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationParams {
    /// Expected fraction of all cells that are weak.
    pub density: f64,
    /// Correlation length of the row vulnerability field, in rows.
    pub correlation_length: f64,
    /// Standard deviation of a cluster, in columns. Zero disables clustering.
    pub cluster_spread: f64,
    /// Fraction of rows that are strong.
    pub strong_fraction: f64,
    pub seed: u64,
}

impl Default for VariationParams {
    fn default() -> Self {
        Self {
            density: 1e-3,
            correlation_length: 16.0,
            cluster_spread: 4.0,
            strong_fraction: 0.9,
            seed: 0,
        }
    }
}

impl VariationParams {
    /// Parse a TOML document or a comma-separated `key=value` list; missing
    /// keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, MapError> {
        let doc = if text.contains('\n') || !text.contains(',') {
            text.to_string()
        } else {
            text.split(',')
                .map(|kv| format!("{}\n", kv.trim()))
                .collect()
        };
        let params: Self = toml::from_str(&doc).map_err(|e| MapError::Params {
            field: "variation parameters",
            reason: e.to_string(),
        })?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let unit = |field, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MapError::Params {
                    field,
                    reason: format!("{v} outside [0, 1]"),
                })
            }
        };
        unit("density", self.density)?;
        unit("strong_fraction", self.strong_fraction)?;
        for (field, v) in [
            ("correlation_length", self.correlation_length),
            ("cluster_spread", self.cluster_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MapError::Params {
                    field,
                    reason: format!("{v} must be finite and >= 0"),
                });
            }
        }
        Ok(())
    }
}

/// Draw a weak-cell map. Pure in `(geometry, params)`.
pub fn generate_statistical_map(
    geometry: &DeviceGeometry,
    params: &VariationParams,
) -> Result<DeviceMap, MapError> {
    generate_statistical_map_with(geometry, params, Exec::default())
}

pub fn generate_statistical_map_with(
    geometry: &DeviceGeometry,
    params: &VariationParams,
    exec: Exec,
) -> Result<DeviceMap, MapError> {
    geometry.validate()?;
    params.validate()?;
    let rng = CounterRng::new(params.seed);
    let banks = exec.map_range(geometry.total_banks() as usize, |b| {
        generate_bank(geometry, params, &rng, b as u32)
    });
    let mut map = DeviceMap::empty(*geometry);
    for (b, rows) in banks.into_iter().enumerate() {
        let rank = b as u32 / geometry.banks_per_rank;
        let bank = b as u32 % geometry.banks_per_rank;
        for (row, cols) in rows {
            map.rows
                .insert(RowKey::new(rank, bank, row), cols.into_boxed_slice());
        }
    }
    Ok(map)
}

fn generate_bank(
    g: &DeviceGeometry,
    p: &VariationParams,
    rng: &CounterRng,
    bank: u32,
) -> Vec<(u32, Vec<u32>)> {
    let rows = g.rows_per_bank;
    let cols = g.columns_per_row;
    let target = (p.density * f64::from(rows) * f64::from(cols)).round() as u64;
    if target == 0 || p.strong_fraction >= 1.0 {
        return Vec::new();
    }

    // Stationary AR(1) over the row index: unit-variance Gaussian field with
    // correlation exp(-d / L) between rows d apart.
    let rho = if p.correlation_length > 0.0 {
        (-1.0 / p.correlation_length).exp()
    } else {
        0.0
    };
    let innovation = (1.0 - rho * rho).sqrt();
    let cut = inverse_normal_cdf(p.strong_fraction);
    let mut weak_rows = Vec::new();
    let mut z = 0.0;
    for r in 0..rows {
        let eps = rng.normal(Stream::MapField, bank, r, 0, 0);
        z = if r == 0 {
            eps
        } else {
            rho * z + innovation * eps
        };
        if z > cut {
            weak_rows.push(r);
        }
    }
    if weak_rows.is_empty() {
        return Vec::new();
    }

    // Spread the cell budget evenly over the weak rows.
    let n_weak = weak_rows.len() as u64;
    weak_rows
        .iter()
        .enumerate()
        .filter_map(|(i, &row)| {
            let i = i as u64;
            let n = ((i + 1) * target / n_weak - i * target / n_weak).min(u64::from(cols)) as u32;
            (n > 0).then(|| (row, place_cells(rng, bank, row, n, cols, p.cluster_spread)))
        })
        .collect()
}

fn place_cells(rng: &CounterRng, bank: u32, row: u32, n: u32, cols: u32, spread: f64) -> Vec<u32> {
    let mut taken = HashSet::with_capacity(n as usize);
    let mut out = Vec::with_capacity(n as usize);
    let mut draw = 0u32;
    if spread <= 0.0 {
        while out.len() < n as usize {
            draw += 1;
            let c = rng.below(cols.into(), Stream::MapCells, bank, row, draw, 0) as u32;
            if taken.insert(c) {
                out.push(c);
            }
        }
    } else {
        let per_cluster = (2.0 * spread).ceil().max(1.0) as u32;
        let clusters = n.div_ceil(per_cluster).max(1);
        let centers: Vec<i64> = (0..clusters)
            .map(|k| rng.below(cols.into(), Stream::MapCells, bank, row, k, 1) as i64)
            .collect();
        for j in 0..n {
            let center = centers[(j % clusters) as usize];
            let mut placed = false;
            for _ in 0..64 {
                draw += 1;
                let off =
                    (rng.normal(Stream::MapCells, bank, row, draw, 2) * spread).round() as i64;
                let c = (center + off).rem_euclid(i64::from(cols)) as u32;
                if taken.insert(c) {
                    out.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                // Saturated neighbourhood: take the nearest free column.
                let start = center.rem_euclid(i64::from(cols)) as u32;
                let c = (0..cols)
                    .map(|k| (start + k) % cols)
                    .find(|c| !taken.contains(c))
                    .expect("n <= cols guarantees a free column");
                taken.insert(c);
                out.push(c);
            }
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(rows: u32, cols: u32) -> DeviceGeometry {
        DeviceGeometry {
            channels: 1,
            ranks_per_channel: 1,
            banks_per_rank: 1,
            rows_per_bank: rows,
            columns_per_row: cols,
            bytes_per_row: (cols / 8).max(64).next_multiple_of(64),
        }
    }

    #[test]
    fn listing_format_loads() {
        let m = DeviceMap::from_json(r#"{"0":{"0":{"5":[3,7]}}}"#, geom(6, 8)).unwrap();
        assert_eq!(m.weak_cell_count(), 2);
        assert_eq!(m.weak_columns(RowKey::new(0, 0, 5)), &[3, 7]);
        assert!(!m.is_weak_row(RowKey::new(0, 0, 4)));
    }

    #[test]
    fn empty_object_is_all_strong() {
        let m = DeviceMap::from_json("{}", geom(6, 8)).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.to_json(), "{}");
    }

    #[test]
    fn out_of_range_column_is_rejected() {
        let err = DeviceMap::from_json(r#"{"0":{"0":{"5":[9999]}}}"#, geom(16, 1024)).unwrap_err();
        assert!(err.to_string().contains("column out of range"), "{err}");
        let err = DeviceMap::from_json(r#"{"0":{"1":{"5":[1]}}}"#, geom(16, 1024)).unwrap_err();
        assert!(matches!(err, MapError::OutOfRange { what: "bank", .. }));
    }

    #[test]
    fn non_integer_keys_are_rejected() {
        for text in [
            r#"{"r0":{"0":{"5":[1]}}}"#,
            r#"{"0":{"-1":{"5":[1]}}}"#,
            r#"{"0":{"0":{"5.0":[1]}}}"#,
        ] {
            assert!(matches!(
                DeviceMap::from_json(text, geom(16, 64)),
                Err(MapError::NonIntegerKey { .. })
            ));
        }
        assert!(matches!(
            DeviceMap::from_json("[1]", geom(16, 64)),
            Err(MapError::Shape { .. })
        ));
    }

    #[test]
    fn unsorted_columns_are_normalized() {
        let m = DeviceMap::from_json(r#"{"0":{"0":{"2":[7,3,7,1]}}}"#, geom(4, 8)).unwrap();
        assert_eq!(m.weak_columns(RowKey::new(0, 0, 2)), &[1, 3, 7]);
    }

    #[test]
    fn saved_keys_are_in_numeric_order() {
        let m = DeviceMap::from_rows(
            geom(200, 64),
            [
                (RowKey::new(0, 0, 100), vec![5]),
                (RowKey::new(0, 0, 9), vec![2, 1]),
            ],
        )
        .unwrap();
        let json = m.to_json();
        assert!(json.find("\"9\"").unwrap() < json.find("\"100\"").unwrap());
        assert_eq!(DeviceMap::from_json(&json, geom(200, 64)).unwrap(), m);
    }

    #[test]
    fn variation_params_parse_inline_and_toml() {
        let p = VariationParams::parse("density=0.01, seed=3").unwrap();
        assert_eq!(p.density, 0.01);
        assert_eq!(p.seed, 3);
        assert_eq!(p.cluster_spread, VariationParams::default().cluster_spread);
        let t = VariationParams::parse("strong_fraction = 0.5\ncorrelation_length = 2\n").unwrap();
        assert_eq!(t.strong_fraction, 0.5);
        assert!(VariationParams::parse("density=2").is_err());
        assert!(VariationParams::parse("densty=0.1").is_err());
    }

    #[test]
    fn zero_density_or_all_strong_gives_empty_map() {
        let g = geom(512, 256);
        let p = VariationParams {
            density: 0.0,
            ..Default::default()
        };
        assert!(generate_statistical_map(&g, &p).unwrap().is_empty());
        let p = VariationParams {
            density: 0.05,
            strong_fraction: 1.0,
            ..Default::default()
        };
        assert!(generate_statistical_map(&g, &p).unwrap().is_empty());
    }

    #[test]
    fn generated_density_is_concentrated() {
        let g = geom(4096, 1024);
        let expected = 0.01 * 4096.0 * 1024.0;
        for seed in [7u64, 0, 1, 2, 3, 4, 5, 6, 8, 9] {
            let p = VariationParams {
                density: 0.01,
                seed,
                ..Default::default()
            };
            let n = generate_statistical_map(&g, &p).unwrap().weak_cell_count() as f64;
            assert!(
                (0.8 * expected..=1.2 * expected).contains(&n),
                "seed {seed}: {n} vs {expected}"
            );
        }
    }

    #[test]
    fn generation_is_pure_and_exec_independent() {
        let g = DeviceGeometry {
            banks_per_rank: 4,
            ..geom(1024, 512)
        };
        let p = VariationParams {
            density: 0.005,
            seed: 11,
            ..Default::default()
        };
        let a = generate_statistical_map_with(&g, &p, Exec::Sequential).unwrap();
        let b = generate_statistical_map_with(&g, &p, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a,
            generate_statistical_map(&g, &VariationParams { seed: 12, ..p }).unwrap()
        );
    }

    #[test]
    fn weak_rows_follow_strong_fraction() {
        let g = geom(8192, 256);
        let p = VariationParams {
            density: 0.01,
            strong_fraction: 0.9,
            correlation_length: 0.0,
            ..Default::default()
        };
        let m = generate_statistical_map(&g, &p).unwrap();
        let frac = m.weak_row_count() as f64 / 8192.0;
        // Binomial(8192, 0.1): sd ~ 0.0033
        assert!((frac - 0.1).abs() < 0.015, "{frac}");
    }

    fn near_fraction(m: &DeviceMap, radius: u32) -> f64 {
        let mut near = 0usize;
        let mut total = 0usize;
        for (_, cols) in m.rows() {
            for (i, &c) in cols.iter().enumerate() {
                let left = i.checked_sub(1).map(|j| c - cols[j]);
                let right = cols.get(i + 1).map(|&n| n - c);
                let d = left.into_iter().chain(right).min();
                total += 1;
                if d.is_some_and(|d| d <= radius) {
                    near += 1;
                }
            }
        }
        near as f64 / total as f64
    }

    #[test]
    fn clustered_maps_are_more_localized_than_uniform() {
        let g = geom(2048, 8192);
        let base = VariationParams {
            density: 0.002,
            cluster_spread: 4.0,
            seed: 3,
            ..Default::default()
        };
        let clustered = generate_statistical_map(&g, &base).unwrap();
        let uniform = generate_statistical_map(
            &g,
            &VariationParams {
                cluster_spread: 0.0,
                ..base
            },
        )
        .unwrap();
        assert_eq!(clustered.weak_cell_count(), uniform.weak_cell_count());
        let (fc, fu) = (near_fraction(&clustered, 4), near_fraction(&uniform, 4));
        assert!(fc > fu + 0.3, "clustered {fc} vs uniform {fu}");
    }
}
