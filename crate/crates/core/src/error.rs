use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("vector norm is below the degeneracy threshold")]
    ZeroNorm,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("need at least {needed} items, found {found}")]
    TooFew { needed: usize, found: usize },
    #[error("no clique prompt and no retained prompt to compose from")]
    NoPromptSource,
    #[error("no inference contexts to aggregate")]
    EmptyContexts,
    #[error("class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("sample {id} does not match the encoder mode")]
    ModeMismatch { id: u64 },
    #[error("duplicate sample id {0} in batch")]
    DuplicateSample(u64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
