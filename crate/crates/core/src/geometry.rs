//! Device organization and physical-address mapping.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Bytes moved by one RD/WR command (BL8 on a 64-bit bus). Decoded column
/// indices count bursts, not bits.
pub const BURST_BYTES: u32 = 64;

/// Bytes covered by one ECC word.
pub const WORD_BYTES: u32 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("geometry field `{field}` must be at least 1")]
    ZeroCount { field: &'static str },
    #[error("columns_per_row ({columns}) exceeds the {bits} bits of a row")]
    TooManyColumns { columns: u32, bits: u64 },
    #[error("bytes_per_row ({0}) must be a multiple of the {BURST_BYTES}-byte burst")]
    RowNotBurstAligned(u32),
    #[error("device capacity overflows 64 bits")]
    CapacityOverflow,
    #[error("address {addr:#x} is beyond device capacity {capacity:#x}")]
    AddressOutOfRange { addr: u64, capacity: u64 },
    #[error("{field} index {value} out of range (limit {limit})")]
    CoordinateOutOfRange {
        field: &'static str,
        value: u64,
        limit: u64,
    },
    #[error("unknown address mapping scheme `{0}` (expected RoBaRaChCo or RoCoRaBaCh)")]
    UnknownScheme(String),
}

/// Shape of the simulated device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceGeometry {
    pub channels: u32,
    pub ranks_per_channel: u32,
    pub banks_per_rank: u32,
    pub rows_per_bank: u32,
    /// Bit positions per row that weak-cell maps may name.
    pub columns_per_row: u32,
    pub bytes_per_row: u32,
}

impl Default for DeviceGeometry {
    /// One DDR4 rank: 16 banks of 64K rows, 8 KiB per row.
    fn default() -> Self {
        Self {
            channels: 1,
            ranks_per_channel: 1,
            banks_per_rank: 16,
            rows_per_bank: 65_536,
            columns_per_row: 8_192,
            bytes_per_row: 8_192,
        }
    }
}

impl DeviceGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let counts = [
            ("channels", self.channels),
            ("ranks_per_channel", self.ranks_per_channel),
            ("banks_per_rank", self.banks_per_rank),
            ("rows_per_bank", self.rows_per_bank),
            ("columns_per_row", self.columns_per_row),
            ("bytes_per_row", self.bytes_per_row),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(GeometryError::ZeroCount { field });
            }
        }
        let bits = u64::from(self.bytes_per_row) * 8;
        if u64::from(self.columns_per_row) > bits {
            return Err(GeometryError::TooManyColumns {
                columns: self.columns_per_row,
                bits,
            });
        }
        if !self.bytes_per_row.is_multiple_of(BURST_BYTES) {
            return Err(GeometryError::RowNotBurstAligned(self.bytes_per_row));
        }
        self.checked_capacity()
            .ok_or(GeometryError::CapacityOverflow)?;
        Ok(())
    }

    fn checked_capacity(&self) -> Option<u64> {
        u64::from(self.channels)
            .checked_mul(u64::from(self.ranks_per_channel))?
            .checked_mul(u64::from(self.banks_per_rank))?
            .checked_mul(u64::from(self.rows_per_bank))?
            .checked_mul(u64::from(self.bytes_per_row))
    }

    /// Total bytes addressable. Assumes a validated geometry.
    pub fn capacity(&self) -> u64 {
        self.checked_capacity().unwrap_or(u64::MAX)
    }

    /// Ranks across all channels; device maps and traces index ranks globally.
    pub fn total_ranks(&self) -> u32 {
        self.channels * self.ranks_per_channel
    }

    pub fn total_banks(&self) -> u32 {
        self.total_ranks() * self.banks_per_rank
    }

    pub fn bursts_per_row(&self) -> u32 {
        self.bytes_per_row / BURST_BYTES
    }

    /// Dense index of a (global rank, bank) pair.
    pub fn bank_index(&self, rank: u32, bank: u32) -> usize {
        (rank * self.banks_per_rank + bank) as usize
    }

    pub fn contains_row(&self, key: RowKey) -> bool {
        key.rank < self.total_ranks()
            && key.bank < self.banks_per_rank
            && key.row < self.rows_per_bank
    }
}

/// Coordinates of one burst-aligned byte inside the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceAddress {
    pub channel: u32,
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
    /// Burst index within the row.
    pub column: u32,
    /// Byte offset within the burst.
    pub offset: u32,
}

impl DeviceAddress {
    /// Row identity with the rank flattened across channels.
    pub fn row_key(&self, geometry: &DeviceGeometry) -> RowKey {
        RowKey {
            rank: self.channel * geometry.ranks_per_channel + self.rank,
            bank: self.bank,
            row: self.row,
        }
    }

    /// Byte offset of this address within its row.
    pub fn row_offset(&self) -> u32 {
        self.column * BURST_BYTES + self.offset
    }
}

/// A row named by global rank, bank and row index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
}

impl RowKey {
    pub fn new(rank: u32, bank: u32, row: u32) -> Self {
        Self { rank, bank, row }
    }
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.rank, self.bank, self.row)
    }
}

/// Field ordering used to slice a physical address, named MSB first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum MappingScheme {
    /// row | bank | rank | channel | column | burst offset
    #[default]
    RoBaRaChCo,
    /// row | column | rank | bank | channel | burst offset
    RoCoRaBaCh,
}

#[derive(Clone, Copy)]
enum Field {
    Channel,
    Rank,
    Bank,
    Row,
    Column,
}

impl MappingScheme {
    // Least significant field first; the burst offset always sits below these.
    fn fields(self) -> [Field; 5] {
        use Field::*;
        match self {
            MappingScheme::RoBaRaChCo => [Column, Channel, Rank, Bank, Row],
            MappingScheme::RoCoRaBaCh => [Channel, Bank, Rank, Column, Row],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MappingScheme::RoBaRaChCo => "RoBaRaChCo",
            MappingScheme::RoCoRaBaCh => "RoCoRaBaCh",
        }
    }
}

impl fmt::Display for MappingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MappingScheme {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "robarachco" | "row-bank-rank-channel-column" => Ok(MappingScheme::RoBaRaChCo),
            "rocorabach" | "row-column-rank-bank-channel" => Ok(MappingScheme::RoCoRaBaCh),
            _ => Err(GeometryError::UnknownScheme(s.to_string())),
        }
    }
}

fn radix(geometry: &DeviceGeometry, field: Field) -> u64 {
    u64::from(match field {
        Field::Channel => geometry.channels,
        Field::Rank => geometry.ranks_per_channel,
        Field::Bank => geometry.banks_per_rank,
        Field::Row => geometry.rows_per_bank,
        Field::Column => geometry.bursts_per_row(),
    })
}

/// Split a physical byte address into device coordinates.
///
/// Fields are peeled off in mixed radix, which is plain bit slicing when every
/// dimension is a power of two.
pub fn decode_address(
    addr: u64,
    geometry: &DeviceGeometry,
    scheme: MappingScheme,
) -> Result<DeviceAddress, GeometryError> {
    let capacity = geometry.capacity();
    if addr >= capacity {
        return Err(GeometryError::AddressOutOfRange { addr, capacity });
    }
    let mut rest = addr;
    let offset = (rest % u64::from(BURST_BYTES)) as u32;
    rest /= u64::from(BURST_BYTES);
    let mut out = DeviceAddress {
        channel: 0,
        rank: 0,
        bank: 0,
        row: 0,
        column: 0,
        offset,
    };
    for field in scheme.fields() {
        let r = radix(geometry, field);
        let v = (rest % r) as u32;
        rest /= r;
        match field {
            Field::Channel => out.channel = v,
            Field::Rank => out.rank = v,
            Field::Bank => out.bank = v,
            Field::Row => out.row = v,
            Field::Column => out.column = v,
        }
    }
    Ok(out)
}

/// Inverse of [`decode_address`].
pub fn encode_address(
    da: &DeviceAddress,
    geometry: &DeviceGeometry,
    scheme: MappingScheme,
) -> Result<u64, GeometryError> {
    if da.offset >= BURST_BYTES {
        return Err(GeometryError::CoordinateOutOfRange {
            field: "offset",
            value: da.offset.into(),
            limit: BURST_BYTES.into(),
        });
    }
    let mut addr = 0u64;
    let mut scale = u64::from(BURST_BYTES);
    for field in scheme.fields() {
        let r = radix(geometry, field);
        let (name, v) = match field {
            Field::Channel => ("channel", da.channel),
            Field::Rank => ("rank", da.rank),
            Field::Bank => ("bank", da.bank),
            Field::Row => ("row", da.row),
            Field::Column => ("column", da.column),
        };
        if u64::from(v) >= r {
            return Err(GeometryError::CoordinateOutOfRange {
                field: name,
                value: v.into(),
                limit: r,
            });
        }
        addr += u64::from(v) * scale;
        scale *= r;
    }
    Ok(addr + u64::from(da.offset))
}
