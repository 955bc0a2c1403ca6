use thiserror::Error;

/// Every failure the library can report. Variant names double as the stable
/// error identifiers printed by the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("label '{0}' is assigned more than one parent")]
    MultipleParents(String),
    #[error("label '{0}' is referenced but never attached to the tree")]
    OrphanLabel(String),
    #[error("taxonomy contains a cycle through '{0}'")]
    CyclicTaxonomy(String),
    #[error("malformed taxonomy: {0}")]
    MalformedTaxonomy(String),
    #[error("unknown label {0}")]
    UnknownLabel(String),

    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("invalid sub-hierarchy: {0}")]
    InvalidSubHierarchy(String),
    #[error("cannot parse sequence: {0}")]
    ParseError(String),
    #[error("edge {0} -> {1} is not in the taxonomy")]
    InvalidEdge(String, String),
    #[error("label '{0}' occurs more than once in the sequence")]
    DuplicateLabel(String),

    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("backward already ran on this graph")]
    DoubleBackward,
    #[error("non-finite value: {0}")]
    NumericalError(String),

    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),

    #[error("level {level} exceeds the level table (max {max})")]
    LevelOverflow { level: usize, max: usize },
    #[error("position {0} does not hold a label token")]
    NotALabelPosition(usize),

    #[error("document {0} has no labels")]
    MissingLabels(usize),
    #[error("loss diverged at batch {batch} of epoch {epoch}")]
    NumericalDivergence { epoch: usize, batch: usize },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("checkpoint was trained on a different taxonomy")]
    TaxonomyMismatch,
    #[error("checkpoint is corrupt: {0}")]
    ChecksumError(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("gold and predicted lists differ in length ({gold} vs {pred})")]
    AlignmentError { gold: usize, pred: usize },

    #[error("invalid synthetic data spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn name(&self) -> &'static str {
        match self {
            Error::MultipleParents(_) => "MultipleParents",
            Error::OrphanLabel(_) => "OrphanLabel",
            Error::CyclicTaxonomy(_) => "CyclicTaxonomy",
            Error::MalformedTaxonomy(_) => "MalformedTaxonomy",
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::EmptyLabelSet => "EmptyLabelSet",
            Error::InvalidSubHierarchy(_) => "InvalidSubHierarchy",
            Error::ParseError(_) => "ParseError",
            Error::InvalidEdge(..) => "InvalidEdge",
            Error::DuplicateLabel(_) => "DuplicateLabel",
            Error::ShapeError(_) => "ShapeError",
            Error::DoubleBackward => "DoubleBackward",
            Error::NumericalError(_) => "NumericalError",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::UnknownToken(_) => "UnknownToken",
            Error::LevelOverflow { .. } => "LevelOverflow",
            Error::NotALabelPosition(_) => "NotALabelPosition",
            Error::MissingLabels(_) => "MissingLabels",
            Error::NumericalDivergence { .. } => "NumericalDivergence",
            Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            Error::TaxonomyMismatch => "TaxonomyMismatch",
            Error::ChecksumError(_) => "ChecksumError",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::AlignmentError { .. } => "AlignmentError",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
