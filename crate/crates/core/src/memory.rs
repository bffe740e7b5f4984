//! Sparse simulated memory contents.

use crate::geometry::{DeviceGeometry, RowKey};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("access of {len} bytes at offset {offset} overflows a {row_bytes}-byte row")]
    RowOverflow {
        offset: u32,
        len: usize,
        row_bytes: u32,
    },
    #[error("column {column} out of range (columns per row: {limit})")]
    ColumnOutOfRange { column: u32, limit: u32 },
    #[error("row {0} outside the device geometry")]
    RowOutOfRange(RowKey),
}

/// Row buffers materialized on first write or flip. Column `c` is bit
/// `c % 8` of byte `c / 8`.
#[derive(Debug, Clone)]
pub struct MemoryImage {
    geometry: DeviceGeometry,
    fill: u8,
    rows: BTreeMap<RowKey, Box<[u8]>>,
}

impl MemoryImage {
    pub fn new(geometry: DeviceGeometry, fill: u8) -> Self {
        Self {
            geometry,
            fill,
            rows: BTreeMap::new(),
        }
    }

    pub fn fill_pattern(&self) -> u8 {
        self.fill
    }

    pub fn materialized_rows(&self) -> usize {
        self.rows.len()
    }

    fn check(&self, key: RowKey, offset: u32, len: usize) -> Result<(), MemoryError> {
        if !self.geometry.contains_row(key) {
            return Err(MemoryError::RowOutOfRange(key));
        }
        let row_bytes = self.geometry.bytes_per_row;
        if u64::from(offset) + len as u64 > u64::from(row_bytes) {
            return Err(MemoryError::RowOverflow {
                offset,
                len,
                row_bytes,
            });
        }
        Ok(())
    }

    fn row_mut(&mut self, key: RowKey) -> &mut [u8] {
        let (fill, n) = (self.fill, self.geometry.bytes_per_row as usize);
        self.rows
            .entry(key)
            .or_insert_with(|| vec![fill; n].into_boxed_slice())
    }

    pub fn write(&mut self, key: RowKey, offset: u32, bytes: &[u8]) -> Result<(), MemoryError> {
        self.check(key, offset, bytes.len())?;
        let o = offset as usize;
        self.row_mut(key)[o..o + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn read(&self, key: RowKey, offset: u32, len: usize) -> Result<Vec<u8>, MemoryError> {
        self.check(key, offset, len)?;
        let o = offset as usize;
        Ok(match self.rows.get(&key) {
            Some(row) => row[o..o + len].to_vec(),
            None => vec![self.fill; len],
        })
    }

    pub fn apply_flip(&mut self, key: RowKey, column: u32) -> Result<(), MemoryError> {
        let limit = self.geometry.columns_per_row;
        if column >= limit {
            return Err(MemoryError::ColumnOutOfRange { column, limit });
        }
        self.check(key, column / 8, 1)?;
        self.row_mut(key)[(column / 8) as usize] ^= 1 << (column % 8);
        Ok(())
    }

    /// Hex dump of every materialized row, one row per line:
    /// `<rank> <bank> <row> <hex bytes>`.
    pub fn hex_dump(&self) -> String {
        let mut out = String::new();
        for (key, bytes) in &self.rows {
            let _ = write!(out, "{key} ");
            for b in bytes.iter() {
                let _ = write!(out, "{b:02x}");
            }
            out.push('\n');
        }
        out
    }
}
