//! Simulation parameters and the flat key/value config file.
//!
//! Keys match the RowHammer parameter names users already know
//! (`single_sided_prob`, `trr_variant`, ...). Precedence is command-line
//! override, then file, then default.

use crate::geometry::{DeviceGeometry, GeometryError, MappingScheme};
use crate::traffic::TrafficSpec;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// 8192 refresh commands per 64 ms window.
pub const DEFAULT_T_REFI_PS: u64 = 7_812_500;
pub const DEFAULT_T_REFW_PS: u64 = 64_000_000_000;
pub const T_REFW_32MS_PS: u64 = 32_000_000_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl ConfigError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

/// Refresh schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingParams {
    pub t_refi: u64,
    pub t_refw: u64,
    pub rows_refreshed_per_refi: u32,
    pub max_trr_refreshes_per_refi: u32,
}

impl TimingParams {
    /// Default DDR4 schedule sized so every row of `geometry` is refreshed
    /// once per window.
    pub fn default_for(geometry: &DeviceGeometry) -> Self {
        let refs = DEFAULT_T_REFW_PS / DEFAULT_T_REFI_PS;
        Self {
            t_refi: DEFAULT_T_REFI_PS,
            t_refw: DEFAULT_T_REFW_PS,
            rows_refreshed_per_refi: u64::from(geometry.rows_per_bank).div_ceil(refs) as u32,
            max_trr_refreshes_per_refi: 2,
        }
    }

    pub fn refs_per_window(&self) -> u64 {
        self.t_refw / self.t_refi
    }

    pub fn validate(&self, geometry: &DeviceGeometry) -> Result<(), ConfigError> {
        if self.t_refi == 0 {
            return Err(ConfigError::invalid("t_refi_ps", "must be positive"));
        }
        if self.t_refw == 0 || !self.t_refw.is_multiple_of(self.t_refi) {
            return Err(ConfigError::invalid(
                "t_refw_ps",
                format!("must be a positive multiple of t_refi_ps ({})", self.t_refi),
            ));
        }
        let covered = u64::from(self.rows_refreshed_per_refi) * self.refs_per_window();
        if covered < u64::from(geometry.rows_per_bank) {
            return Err(ConfigError::invalid(
                "rows_refreshed_per_refi",
                format!(
                    "{} rows x {} refreshes per window leaves some of the {} rows unrefreshed",
                    self.rows_refreshed_per_refi,
                    self.refs_per_window(),
                    geometry.rows_per_bank
                ),
            ));
        }
        Ok(())
    }

    /// Index of the refresh window containing `tick`.
    pub fn window_of(&self, tick: u64) -> u64 {
        tick / self.t_refw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrrVariant {
    #[default]
    None,
    /// PARA-style: refresh the neighbours of an activated row with
    /// probability `1 / trr_threshold`.
    Probabilistic,
    /// Bounded activation counter table.
    Counter,
    /// Counter table backed by a companion table for evicted rows.
    Companion,
}

impl FromStr for TrrVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(TrrVariant::None),
            "probabilistic" | "para" => Ok(TrrVariant::Probabilistic),
            "counter" => Ok(TrrVariant::Counter),
            "companion" => Ok(TrrVariant::Companion),
            other => Err(ConfigError::invalid(
                "trr_variant",
                format!("unknown variant `{other}`"),
            )),
        }
    }
}

impl fmt::Display for TrrVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrrVariant::None => "none",
            TrrVariant::Probabilistic => "probabilistic",
            TrrVariant::Counter => "counter",
            TrrVariant::Companion => "companion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EccAlgorithm {
    #[default]
    Secded72,
}

/// Whether the engine synthesizes REF commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    /// Insert a REF every tREFI unless the command stream carries its own.
    #[default]
    Auto,
    Insert,
    TraceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub device_file: Option<PathBuf>,
    pub rowhammer_threshold: u64,
    pub single_sided_prob: f64,
    pub double_sided_prob: f64,
    pub half_double_prob: f64,
    pub trr_variant: TrrVariant,
    pub trr_threshold: u64,
    pub companion_threshold: u64,
    pub counter_table_length: usize,
    pub companion_table_length: usize,
    pub enable_memory_corruption: bool,
    pub enable_ecc: bool,
    pub p_matrix: Option<PathBuf>,
    pub ecc_algorithm: EccAlgorithm,
    pub trr_stats_dump: Option<PathBuf>,
    pub rh_stat_file: Option<PathBuf>,
    pub synthetic_traffic: Option<TrafficSpec>,
    pub rng_seed: u64,
    pub geometry: DeviceGeometry,
    pub timing: TimingParams,
    pub address_mapping: MappingScheme,
    pub refresh_policy: RefreshPolicy,
    pub fill_pattern: u8,
    /// Clear TRR tables at every tREFW rollover instead of keeping them.
    pub trr_reset_tables: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        let geometry = DeviceGeometry::default();
        Self {
            device_file: None,
            rowhammer_threshold: 45_000,
            single_sided_prob: 0.0,
            double_sided_prob: 0.0,
            half_double_prob: 0.0,
            trr_variant: TrrVariant::None,
            trr_threshold: 1_000,
            companion_threshold: 500,
            counter_table_length: 16,
            companion_table_length: 16,
            enable_memory_corruption: false,
            enable_ecc: false,
            p_matrix: None,
            ecc_algorithm: EccAlgorithm::Secded72,
            trr_stats_dump: None,
            rh_stat_file: None,
            synthetic_traffic: None,
            rng_seed: 0,
            timing: TimingParams::default_for(&geometry),
            geometry,
            address_mapping: MappingScheme::RoBaRaChCo,
            refresh_policy: RefreshPolicy::Auto,
            fill_pattern: 0xFF,
            trr_reset_tables: false,
        }
    }
}

impl SimConfig {
    /// Defaults for a given geometry, with the refresh schedule sized to it.
    pub fn with_geometry(geometry: DeviceGeometry) -> Self {
        Self {
            timing: TimingParams::default_for(&geometry),
            geometry,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geometry.validate()?;
        self.timing.validate(&self.geometry)?;
        for (field, p) in [
            ("single_sided_prob", self.single_sided_prob),
            ("double_sided_prob", self.double_sided_prob),
            ("half_double_prob", self.half_double_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::invalid(
                    field,
                    format!("probability {p} outside [0, 1]"),
                ));
            }
        }
        match self.trr_variant {
            TrrVariant::None => {}
            TrrVariant::Probabilistic => {
                if self.trr_threshold == 0 {
                    return Err(ConfigError::invalid(
                        "trr_threshold",
                        "probabilistic TRR samples with probability 1/trr_threshold; must be >= 1",
                    ));
                }
            }
            TrrVariant::Counter | TrrVariant::Companion => {
                if self.trr_threshold == 0 {
                    return Err(ConfigError::invalid("trr_threshold", "must be >= 1"));
                }
                if self.counter_table_length == 0 {
                    return Err(ConfigError::invalid("counter_table_length", "must be >= 1"));
                }
                if self.trr_variant == TrrVariant::Companion {
                    if self.companion_table_length == 0 {
                        return Err(ConfigError::invalid(
                            "companion_table_length",
                            "must be >= 1",
                        ));
                    }
                    if self.companion_threshold == 0 {
                        return Err(ConfigError::invalid("companion_threshold", "must be >= 1"));
                    }
                }
            }
        }
        if self.enable_ecc && self.p_matrix.is_none() {
            return Err(ConfigError::invalid(
                "p_matrix",
                "enable_ecc requires a p_matrix file",
            ));
        }
        if let Some(spec) = &self.synthetic_traffic {
            spec.validate(&self.geometry)
                .map_err(|e| ConfigError::invalid("synthetic_traffic", e.to_string()))?;
        }
        Ok(())
    }

    /// Sampling probability of the probabilistic variant, `1 / trr_threshold`.
    pub fn trr_probability(&self) -> f64 {
        if self.trr_threshold == 0 {
            0.0
        } else {
            1.0 / self.trr_threshold as f64
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    device_file: Option<PathBuf>,
    rowhammer_threshold: Option<u64>,
    single_sided_prob: Option<f64>,
    double_sided_prob: Option<f64>,
    half_double_prob: Option<f64>,
    trr_variant: Option<String>,
    trr_threshold: Option<u64>,
    companion_threshold: Option<u64>,
    counter_table_length: Option<usize>,
    companion_table_length: Option<usize>,
    enable_memory_corruption: Option<bool>,
    enable_ecc: Option<bool>,
    p_matrix: Option<PathBuf>,
    ecc_algorithm: Option<EccAlgorithm>,
    trr_stats_dump: Option<PathBuf>,
    rh_stat_file: Option<PathBuf>,
    synthetic_traffic: Option<String>,
    rng_seed: Option<u64>,
    channels: Option<u32>,
    ranks_per_channel: Option<u32>,
    banks_per_rank: Option<u32>,
    rows_per_bank: Option<u32>,
    columns_per_row: Option<u32>,
    bytes_per_row: Option<u32>,
    t_refi_ps: Option<u64>,
    t_refw_ps: Option<u64>,
    rows_refreshed_per_refi: Option<u32>,
    max_trr_refreshes_per_refi: Option<u32>,
    address_mapping: Option<String>,
    refresh_policy: Option<RefreshPolicy>,
    fill_pattern: Option<u8>,
    trr_reset_tables: Option<bool>,
}

const PATH_KEYS: [&str; 4] = ["device_file", "p_matrix", "trr_stats_dump", "rh_stat_file"];

/// Load a config file. Relative paths inside it resolve against its directory.
pub fn load_config(path: &Path) -> Result<SimConfig, ConfigError> {
    load_config_with_overrides(Some(path), &[])
}

/// Load a config (or start from defaults) and apply `key=value` overrides.
///
/// Override values are parsed as TOML scalars and fall back to plain strings,
/// so `--set trr_variant=counter` and `--set single_sided_prob=1e-9` both work.
pub fn load_config_with_overrides(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<SimConfig, ConfigError> {
    let mut table = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let mut table: toml::Table =
                toml::from_str(&text).map_err(|e| ConfigError::Malformed(e.to_string()))?;
            let base = path.parent().unwrap_or(Path::new(""));
            for key in PATH_KEYS {
                if let Some(toml::Value::String(s)) = table.get_mut(key) {
                    let p = Path::new(s.as_str());
                    if p.is_relative() && !base.as_os_str().is_empty() {
                        *s = base.join(p).to_string_lossy().into_owned();
                    }
                }
            }
            table
        }
        None => toml::Table::new(),
    };
    for (key, value) in overrides {
        table.insert(key.clone(), parse_override(value));
    }
    from_table(table)
}

/// Parse a config document held in memory.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))?;
    from_table(table)
}

fn parse_override(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn from_table(table: toml::Table) -> Result<SimConfig, ConfigError> {
    let raw: RawConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Malformed(e.to_string()))?;
    let d = SimConfig::default();
    let geometry = DeviceGeometry {
        channels: raw.channels.unwrap_or(d.geometry.channels),
        ranks_per_channel: raw
            .ranks_per_channel
            .unwrap_or(d.geometry.ranks_per_channel),
        banks_per_rank: raw.banks_per_rank.unwrap_or(d.geometry.banks_per_rank),
        rows_per_bank: raw.rows_per_bank.unwrap_or(d.geometry.rows_per_bank),
        columns_per_row: raw.columns_per_row.unwrap_or(d.geometry.columns_per_row),
        bytes_per_row: raw.bytes_per_row.unwrap_or(d.geometry.bytes_per_row),
    };
    geometry.validate()?;
    let dt = TimingParams::default_for(&geometry);
    let t_refi = raw.t_refi_ps.unwrap_or(dt.t_refi);
    let t_refw = raw.t_refw_ps.unwrap_or(dt.t_refw);
    let rows_refreshed_per_refi = raw.rows_refreshed_per_refi.unwrap_or_else(|| {
        if t_refi == 0 || t_refw < t_refi {
            dt.rows_refreshed_per_refi
        } else {
            u64::from(geometry.rows_per_bank).div_ceil(t_refw / t_refi) as u32
        }
    });
    let timing = TimingParams {
        t_refi,
        t_refw,
        rows_refreshed_per_refi,
        max_trr_refreshes_per_refi: raw
            .max_trr_refreshes_per_refi
            .unwrap_or(dt.max_trr_refreshes_per_refi),
    };
    let trr_variant = match raw.trr_variant {
        Some(s) => s.parse()?,
        None => d.trr_variant,
    };
    let address_mapping = match raw.address_mapping {
        Some(s) => s
            .parse()
            .map_err(|e: GeometryError| ConfigError::invalid("address_mapping", e.to_string()))?,
        None => d.address_mapping,
    };
    let synthetic_traffic = match raw.synthetic_traffic {
        Some(s) => Some(
            s.parse::<TrafficSpec>()
                .map_err(|e| ConfigError::invalid("synthetic_traffic", e.to_string()))?,
        ),
        None => None,
    };
    let cfg = SimConfig {
        device_file: raw.device_file,
        rowhammer_threshold: raw.rowhammer_threshold.unwrap_or(d.rowhammer_threshold),
        single_sided_prob: raw.single_sided_prob.unwrap_or(d.single_sided_prob),
        double_sided_prob: raw.double_sided_prob.unwrap_or(d.double_sided_prob),
        half_double_prob: raw.half_double_prob.unwrap_or(d.half_double_prob),
        trr_variant,
        trr_threshold: raw.trr_threshold.unwrap_or(d.trr_threshold),
        companion_threshold: raw.companion_threshold.unwrap_or(d.companion_threshold),
        counter_table_length: raw.counter_table_length.unwrap_or(d.counter_table_length),
        companion_table_length: raw
            .companion_table_length
            .unwrap_or(d.companion_table_length),
        enable_memory_corruption: raw
            .enable_memory_corruption
            .unwrap_or(d.enable_memory_corruption),
        enable_ecc: raw.enable_ecc.unwrap_or(d.enable_ecc),
        p_matrix: raw.p_matrix,
        ecc_algorithm: raw.ecc_algorithm.unwrap_or(d.ecc_algorithm),
        trr_stats_dump: raw.trr_stats_dump,
        rh_stat_file: raw.rh_stat_file,
        synthetic_traffic,
        rng_seed: raw.rng_seed.unwrap_or(d.rng_seed),
        geometry,
        timing,
        address_mapping,
        refresh_policy: raw.refresh_policy.unwrap_or(d.refresh_policy),
        fill_pattern: raw.fill_pattern.unwrap_or(d.fill_pattern),
        trr_reset_tables: raw.trr_reset_tables.unwrap_or(d.trr_reset_tables),
    };
    cfg.validate()?;
    Ok(cfg)
}
