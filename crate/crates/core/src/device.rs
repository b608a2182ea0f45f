//! Compute device selection through `UGDA_DEVICE`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEVICE_ENV: &str = "UGDA_DEVICE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Device {
    #[default]
    Cpu,
}

impl FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "cpu" => Ok(Device::Cpu),
            other => Err(Error::invalid(format!(
                "unsupported device {other:?}; this build runs on the CPU only"
            ))),
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("cpu")
    }
}

impl Device {
    /// Device named by `UGDA_DEVICE`, defaulting to the CPU.
    pub fn from_env() -> Result<Self> {
        std::env::var(DEVICE_ENV).map_or(Ok(Device::Cpu), |v| v.parse())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse() {
        assert_eq!("CPU".parse::<Device>().unwrap(), Device::Cpu);
        assert!("cuda:0".parse::<Device>().is_err());
    }
}
