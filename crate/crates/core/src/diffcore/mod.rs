//! Minimal reverse-mode differentiation over dense `f64` matrices, plus the
//! Adam optimizer and the parameter snapshot format used by every model.

mod adam;
mod matrix;
mod params;
mod snapshot;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{dot, Matrix};
pub use params::{Bound, Dense, Init, ParamId, ParamSet};
pub use snapshot::{decode_snapshot, encode_snapshot, load_snapshot, save_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use tape::{row_dots, Tape, Value, Var};
