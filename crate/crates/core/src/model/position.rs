use crate::error::{Error, Result};

/// Discrete body zone along z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BodyZone {
    Chest = 0,
    Abdomen = 1,
    Pelvis = 2,
}

impl BodyZone {
    pub const ALL: [BodyZone; 3] = [BodyZone::Chest, BodyZone::Abdomen, BodyZone::Pelvis];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::InvalidArgument(format!("position class {i} outside 0..3")))
    }

    /// Zone of a normalised z coordinate, with zone boundaries `bounds`
    /// (chest/abdomen, abdomen/pelvis).
    pub fn from_continuous(p: f64, bounds: [f64; 2]) -> Self {
        if p < bounds[0] {
            BodyZone::Chest
        } else if p < bounds[1] {
            BodyZone::Abdomen
        } else {
            BodyZone::Pelvis
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyZone::Chest => "chest",
            BodyZone::Abdomen => "abdomen",
            BodyZone::Pelvis => "pelvis",
        }
    }
}

pub const THIRDS: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];

/// Supervision for the position head: zone class and normalised z in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionLabel {
    pub zone: BodyZone,
    pub p: f64,
}

impl PositionLabel {
    pub fn new(zone: BodyZone, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("continuous position {p} outside [0, 1]")));
        }
        Ok(Self { zone, p })
    }

    pub fn from_index(class: usize, p: f64) -> Result<Self> {
        Self::new(BodyZone::from_index(class)?, p)
    }

    pub fn from_continuous(p: f64) -> Result<Self> {
        Self::new(BodyZone::from_continuous(p, THIRDS), p)
    }
}
