use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid permutation {order:?} for a rank-{rank} tensor")]
    InvalidPermutation { order: Vec<usize>, rank: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error(
        "relative offset ({dx}, {dy}) is outside the RPB table range [-{reach}, {reach}]; \
         a fixed relative position bias cannot serve groups larger than {max_group}x{max_group}"
    )]
    BiasRange {
        dx: i64,
        dy: i64,
        reach: usize,
        max_group: usize,
    },
    #[error("absolute position embedding was trained for a {expected:?} grid, got {actual:?}")]
    GridMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
