//! Pyramid levels and the scale routing shared by training and inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the four backbone feature levels, deepest last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Level {
    P2,
    P3,
    P4,
    P5,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::P2, Level::P3, Level::P4, Level::P5];

    /// Block number, 2 through 5.
    pub fn id(self) -> u8 {
        self.index() as u8 + 2
    }

    /// Position in `ALL`.
    pub fn index(self) -> usize {
        match self {
            Level::P2 => 0,
            Level::P3 => 1,
            Level::P4 => 2,
            Level::P5 => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Level> {
        match id {
            2 => Ok(Level::P2),
            3 => Ok(Level::P3),
            4 => Ok(Level::P4),
            5 => Ok(Level::P5),
            _ => Err(Error::InvalidArgument(format!("feature level must be 2..=5, got {id}"))),
        }
    }
}

impl TryFrom<u8> for Level {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        Level::from_id(id)
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.id()
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Height cutoffs (scene units) between consecutive levels.
pub const ROUTING_CUTOFFS: [f64; 3] = [40.0, 80.0, 160.0];

/// Level responsible for a box of height `h`: taller boxes use deeper levels.
pub fn route_by_height(h: f64) -> Level {
    if h < ROUTING_CUTOFFS[0] {
        Level::P2
    } else if h < ROUTING_CUTOFFS[1] {
        Level::P3
    } else if h < ROUTING_CUTOFFS[2] {
        Level::P4
    } else {
        Level::P5
    }
}
