use std::fmt;

use serde::{Deserialize, Serialize};

/// Closed set of error codes reported over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    NotCalibrated,
    Busy,
    OutOfRange,
    BadCommand,
    Protocol,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NotCalibrated => "NOT_CALIBRATED",
            ErrorCode::Busy => "BUSY",
            ErrorCode::OutOfRange => "OUT_OF_RANGE",
            ErrorCode::BadCommand => "BAD_COMMAND",
            ErrorCode::Protocol => "PROTOCOL",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
