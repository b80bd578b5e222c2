use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: header declares {declared} records, only {found} present")]
    Truncated { declared: u64, found: u64 },

    #[error("event outside the {grid}x{grid} detector: ({x}, {y})")]
    OffGrid { x: u32, y: u32, grid: u32 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed file: {0}")]
    Parse(String),

    #[error("input stream is not time-sorted at index {0}")]
    Unsorted(usize),

    #[error("timestamp overflow while applying offset {0} ns")]
    Overflow(i64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no beam peak found in the momentum image")]
    NoPeak,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),

    #[error("non-finite objective value at evaluation {0}")]
    NonFinite(usize),

    #[error("fit did not converge: {0}")]
    NoConvergence(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),
}

/// Failure modes of the mirror and lens ray constructions. These are reported
/// per pixel when rasterizing an effective mask, so they carry no payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("ray does not intersect the mirror")]
    NoIntersection,
    #[error("degenerate construction (point at or on the axis through the focus)")]
    Degenerate,
    #[error("reflected rays are nearly parallel or skew beyond tolerance")]
    IllConditioned,
    #[error("ray falls outside the collection aperture")]
    OutsideAperture,
    #[error("wavevector outside the light cone")]
    OutsideLightCone,
    #[error("image point lies at or behind the lens")]
    BehindLens,
}
