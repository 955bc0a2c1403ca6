//! Hierarchical text classification by recursive sub-hierarchy decoding.
//!
//! A document is encoded by a bidirectional GRU; a masked attention decoder
//! then grows the document's sub-hierarchy of the label tree one level at a
//! time, assigning a label whenever its terminator token is selected.

pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod params;
pub mod taxonomy;
pub mod tensor;
pub mod training;

pub use corpus::Document;
pub use error::{Error, Result};
pub use model::{HiDec, ModelConfig};
pub use params::{AdamConfig, ParamId, ParameterStore};
pub use taxonomy::{Candidate, LabelId, Taxonomy};
pub use tensor::{Element, Graph, Var};
pub use training::{ModelBundle, Precision, TrainConfig};
