use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by model construction, forward passes, losses and metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Shape { op: &'static str, detail: String },
    /// A configuration value violates its documented range.
    Config(String),
    /// A label falls outside `[0, num_classes)`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// Feature-map height cannot be split into equal stripes.
    Indivisible { height: usize, parts: usize },
    /// Every anchor in a triplet batch lacked a positive or a negative.
    NoValidTriplets,
    /// Not enough identities to fill a batch of `p` identities.
    NotEnoughIdentities { requested: usize, available: usize },
    /// No query kept at least one relevant gallery entry.
    NoValidQueries { excluded: usize },
    /// Epoch outside the schedule.
    EpochOutOfRange { epoch: usize, total: usize },
    /// Training produced a NaN or infinite loss; carries the offending batch.
    NonFiniteLoss { epoch: usize, step: usize, indices: Vec<usize> },
    /// Image buffer could not be used.
    Image(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::Indivisible { height, parts } => {
                write!(f, "feature height {height} is not divisible into {parts} parts")
            }
            Error::NoValidTriplets => write!(f, "no anchor has both a positive and a negative in the batch"),
            Error::NotEnoughIdentities { requested, available } => {
                write!(f, "requested {requested} identities per batch but only {available} are available")
            }
            Error::NoValidQueries { excluded } => {
                write!(f, "all {excluded} queries were excluded (no relevant gallery entry)")
            }
            Error::EpochOutOfRange { epoch, total } => {
                write!(f, "epoch {epoch} outside schedule of {total} epochs")
            }
            Error::NonFiniteLoss { epoch, step, indices } => {
                write!(f, "non-finite loss at epoch {epoch} step {step}; batch record indices {indices:?}")
            }
            Error::Image(msg) => write!(f, "image error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
