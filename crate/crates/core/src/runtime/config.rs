use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Host,
    #[serde(alias = "sim")]
    SimAccel,
}

impl DeviceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Host => "host",
            DeviceKind::SimAccel => "sim",
        }
    }
}

/// Cost model and identity of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub kind: DeviceKind,
    pub launch_latency_us: f64,
    pub copy_bandwidth_bytes_per_us: f64,
    pub packed_overhead_us: f64,
    pub pack_threshold_bytes: u64,
    /// Simulated cost per element of kernel work.
    pub per_element_us: f64,
    /// Group adjacent copies into packed transfers.
    pub coalesce: bool,
    /// Number of devices of this kind.
    pub count: usize,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            kind: DeviceKind::SimAccel,
            launch_latency_us: 5.0,
            copy_bandwidth_bytes_per_us: 8000.0,
            packed_overhead_us: 20.0,
            pack_threshold_bytes: 65536,
            per_element_us: 0.0,
            coalesce: true,
            count: 1,
        }
    }
}

impl DeviceConfig {
    pub fn host() -> Self {
        DeviceConfig {
            kind: DeviceKind::Host,
            ..Default::default()
        }
    }

    pub fn sim() -> Self {
        DeviceConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("launch_latency_us", self.launch_latency_us),
            ("copy_bandwidth_bytes_per_us", self.copy_bandwidth_bytes_per_us),
            ("packed_overhead_us", self.packed_overhead_us),
            ("pack_threshold_bytes", self.pack_threshold_bytes as f64),
            ("count", self.count as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.per_element_us >= 0.0 && self.per_element_us.is_finite()) {
            return Err(Error::Config("per_element_us must be non-negative".into()));
        }
        Ok(())
    }

    /// Reads a `.json` or TOML file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: DeviceConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_parsing() {
        let d = DeviceConfig::default();
        assert_eq!(d.pack_threshold_bytes, 65536);
        d.validate().unwrap();
        let t: DeviceConfig = toml::from_str("kind = \"sim\"\nlaunch_latency_us = 2.5").unwrap();
        assert_eq!(t.kind, DeviceKind::SimAccel);
        assert_eq!(t.launch_latency_us, 2.5);
        assert_eq!(t.packed_overhead_us, 20.0);
        let j: DeviceConfig = serde_json::from_str(r#"{"kind":"host"}"#).unwrap();
        assert_eq!(j.kind, DeviceKind::Host);
        let bad = DeviceConfig {
            copy_bandwidth_bytes_per_us: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(toml::from_str::<DeviceConfig>("bogus = 1").is_err());
    }
}
