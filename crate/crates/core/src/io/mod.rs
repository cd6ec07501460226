//! On-disk formats: UGB grids, UCKP checkpoints, key=value configs,
//! PGM/PPM image emission.

pub mod img;
pub mod kv;
pub mod uckp;
pub mod ugb;
