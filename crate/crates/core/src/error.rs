use thiserror::Error;

use crate::model::TechnologyKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown technology {0:?}")]
    UnknownTechnology(String),
    #[error("unknown direction {0:?}")]
    UnknownDirection(String),
    #[error("unknown unit {0:?}")]
    UnknownUnit(String),
    #[error("invalid measurement point {0:?}")]
    InvalidMeasurementPoint(String),
    #[error("invalid {0} radio profile: {1}")]
    InvalidProfile(TechnologyKind, String),
    #[error("campaign: {0}")]
    Campaign(String),
    #[error("reading: {0}")]
    Reading(String),
}
