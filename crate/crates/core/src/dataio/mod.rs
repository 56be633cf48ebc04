//! Dataset ingestion: IDX files (optionally gzip-compressed) and seeded
//! Gaussian-blob generators.

mod idx;
mod synthetic;

pub use idx::{load_idx, parse_idx, write_idx, IdxArray, IdxData};
pub use synthetic::{gen_synthetic, gen_synthetic_split, SyntheticSpec};
