use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Stimulus presets: edge/surface contact at light/heavy intensity, plus the
/// retracted no-contact pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    EL,
    EH,
    SL,
    SH,
    NC,
}

impl Condition {
    /// The four conditions presented in a session, in reporting order.
    pub const STIMULI: [Condition; 4] = [Condition::EL, Condition::EH, Condition::SL, Condition::SH];

    pub fn label(self) -> &'static str {
        match self {
            Condition::EL => "EL",
            Condition::EH => "EH",
            Condition::SL => "SL",
            Condition::SH => "SH",
            Condition::NC => "NC",
        }
    }

    pub fn is_edge(self) -> bool {
        matches!(self, Condition::EL | Condition::EH)
    }

    pub fn is_heavy(self) -> bool {
        matches!(self, Condition::EH | Condition::SH)
    }

    /// Target displacements in units of (a, b).
    pub fn multiples(self) -> (f64, f64) {
        match self {
            Condition::EL => (1.0, 1.0),
            Condition::EH => (2.0, 2.0),
            Condition::SL => (1.0, -1.0),
            Condition::SH => (2.0, -1.0),
            Condition::NC => (-1.0, -1.0),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown condition `{0}` (expected EL, EH, SL, SH or NC)")]
pub struct UnknownCondition(pub String);

impl FromStr for Condition {
    type Err = UnknownCondition;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EL" => Ok(Condition::EL),
            "EH" => Ok(Condition::EH),
            "SL" => Ok(Condition::SL),
            "SH" => Ok(Condition::SH),
            "NC" => Ok(Condition::NC),
            _ => Err(UnknownCondition(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        for c in [Condition::EL, Condition::EH, Condition::SL, Condition::SH, Condition::NC] {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
        assert_eq!("sh".parse::<Condition>().unwrap(), Condition::SH);
        assert!("XX".parse::<Condition>().is_err());
    }
}
