use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::graph::OpKind;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// The reduced axis has no elements.
    EmptyAxis { op: OpKind },
    InvalidShape { shape: Vec<usize>, len: usize },
    NonScalarLoss { shape: Vec<usize> },
    /// A mask entry was not exactly 0 or 1.
    InvalidMask { value: f64 },
    LabelOutOfRange { label: usize, classes: usize },
    /// A NaN or infinite value appeared where a finite one is required.
    NonFinite { what: String },
    /// Probability rows that do not sum to one.
    InvalidDistribution { row: usize, sum: f64 },
    EmptyBatch,
    UnknownDomain { id: usize },
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::EmptyAxis { op } => write!(f, "{op}: empty axis"),
            Error::InvalidShape { shape, len } => {
                write!(f, "shape {shape:?} does not describe {len} values")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::InvalidMask { value } => write!(f, "mask entry {value} is not 0 or 1"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::InvalidDistribution { row, sum } => {
                write!(f, "probability row {row} sums to {sum}")
            }
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::UnknownDomain { id } => write!(f, "unknown domain id {id}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
