//! Machine parameters. Every field has a default so a config file only needs
//! the values it overrides.

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub fm_memories: u32,
    pub fm_banks_per_memory: u32,
    /// Rows per bank in each FM memory.
    pub fm_bank_rows: u32,
    /// Bytes per bank row.
    pub fm_row_bytes: u32,
    pub pm_bytes: u32,
    /// Largest `w * c` row vector a single instruction may touch.
    pub gamma: u32,
    /// Preferred conv output rows per tile.
    pub h_c: u32,
    /// Pool input rows advanced per pool instruction.
    pub h_p: u32,
    /// Eltwise rows per instruction.
    pub h_e: u32,
    pub ddr_bytes_per_cycle: u32,
    pub conv_macs_per_cycle: u32,
    pub misc_elems_per_cycle: u32,
    pub issue_overhead: u32,
    pub clock_mhz: u32,
    /// Instructions a queue may hold before dispatch stalls.
    pub queue_depth: u32,
    /// Idle cycles without progress before the timing model reports deadlock.
    pub watchdog_cycles: u64,
    /// Optional DDR size cap in bytes.
    pub ddr_capacity: Option<u64>,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            fm_memories: 3,
            fm_banks_per_memory: 8,
            fm_bank_rows: 512,
            fm_row_bytes: 64,
            pm_bytes: 65536,
            gamma: 8192,
            h_c: 8,
            h_p: 2,
            h_e: 2,
            ddr_bytes_per_cycle: 16,
            conv_macs_per_cycle: 1024,
            misc_elems_per_cycle: 64,
            issue_overhead: 4,
            clock_mhz: 300,
            queue_depth: 64,
            watchdog_cycles: 1_000_000,
            ddr_capacity: None,
        }
    }
}

impl MachineConfig {
    /// Bytes in one bank row across all banks; the FM allocation unit.
    pub fn fm_line_bytes(&self) -> u32 {
        self.fm_banks_per_memory * self.fm_row_bytes
    }

    pub fn fm_capacity(&self) -> u32 {
        self.fm_line_bytes() * self.fm_bank_rows
    }

    /// PM allocation unit.
    pub fn pm_align(&self) -> u32 {
        self.fm_row_bytes
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let counts = [
            ("fm_memories", self.fm_memories),
            ("fm_banks_per_memory", self.fm_banks_per_memory),
            ("fm_bank_rows", self.fm_bank_rows),
            ("fm_row_bytes", self.fm_row_bytes),
            ("pm_bytes", self.pm_bytes),
            ("gamma", self.gamma),
            ("h_c", self.h_c),
            ("h_p", self.h_p),
            ("h_e", self.h_e),
            ("ddr_bytes_per_cycle", self.ddr_bytes_per_cycle),
            ("conv_macs_per_cycle", self.conv_macs_per_cycle),
            ("misc_elems_per_cycle", self.misc_elems_per_cycle),
            ("clock_mhz", self.clock_mhz),
            ("queue_depth", self.queue_depth),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(GraphError::Parse(format!("config field {name} must be positive")));
        }
        if self.h_c < self.h_p || self.h_c < self.h_e {
            return Err(GraphError::Parse("config requires h_c >= h_p and h_c >= h_e".into()));
        }
        if !self.pm_bytes.is_multiple_of(self.pm_align()) {
            return Err(GraphError::Parse("pm_bytes must be a multiple of fm_row_bytes".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let cfg: MachineConfig = serde_json::from_str(text).map_err(|e| GraphError::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = MachineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.fm_line_bytes(), 512);
        assert_eq!(cfg.fm_capacity(), 256 * 1024);
        assert_eq!(MachineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = MachineConfig::from_json(r#"{"gamma": 1024, "h_c": 4}"#).unwrap();
        assert_eq!(cfg.gamma, 1024);
        assert_eq!(cfg.h_c, 4);
        assert_eq!(cfg.pm_bytes, 65536);
    }

    #[test]
    fn rejects_zero_counts_and_unknown_fields() {
        assert!(MachineConfig::from_json(r#"{"fm_memories": 0}"#).is_err());
        assert!(MachineConfig::from_json(r#"{"h_c": 1, "h_p": 2}"#).is_err());
        assert!(MachineConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
