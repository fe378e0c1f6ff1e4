//! Verb/role/noun universe, annotated datasets and synthetic data.

mod dataset;
mod space;
mod swig;
mod synthetic;

pub use dataset::{
    dataset_to_jsonl, load_dataset, parse_dataset, save_dataset, FeatureGrid, FeatureStore, RoleEntry,
    SituationAnnotation,
};
pub use space::{FrameSpace, SpaceSummary, DEFAULT_MAX_ROLES, UNKNOWN_NOUN};
pub use swig::{import_swig_annotations, import_swig_space};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with, required_channels, synthetic_space, GridShape, Sample,
    SyntheticOptions,
};
