//! Tiled explicit radiance fields.
//!
//! A scene is split into a grid of camera-space cells. Each active cell owns a
//! submodel (triplanes, a low-resolution voxel grid and a lattice of tiny
//! deferred-shading MLPs) that is trained by distilling an oracle teacher,
//! baked into quantized gzip assets and rendered by marching through a
//! distance grid.

pub mod bake;
pub mod checkpoint;
pub mod config;
pub mod deferred;
pub mod error;
pub mod field;
pub mod math;
pub mod model;
pub mod render;
pub mod scene;
pub mod streamer;
pub mod teacher;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use math::Vec3;
pub use scene::{CellIndex, Ray, SceneLayout};
