//! Dataset types, I/O, splitting, text cleaning and synthetic generation.

pub mod clean;
pub mod csv_io;
pub mod example;
pub mod labels;
pub mod split;
pub mod synthetic;

pub use clean::{clean_text, CleaningOptions};
pub use csv_io::{load_corpus, load_dataset, save_corpus, save_dataset, LoadOptions};
pub use example::LabeledExample;
pub use labels::{Task, TaskLabelSet, VECTOR_CATEGORY};
pub use split::{split_dataset, DatasetSplit, DEFAULT_RATIOS};
pub use synthetic::{generate_synthetic, generate_unlabeled, shifted_split, SyntheticSpec};
