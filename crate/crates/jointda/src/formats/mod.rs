//! On-disk formats: binary PNM images, `AFLW` flow fields, IDX arrays and
//! tensor checkpoints.

pub mod aflw;
pub mod checkpoint;
pub mod idx;
pub mod pnm;

pub use aflw::{decode_flow, encode_flow, read_flow, write_flow};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, restore, write_checkpoint};
pub use idx::{decode_idx, load_idx, read_idx, IdxArray};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm};
