//! Sensor encoders producing 3-channel network inputs.

mod events;
mod image;
mod polar;

pub use events::{group_panels, parse_events_csv, voxelize, voxelize_fine, Event, EventStream, VoxelGrid};
pub use image::{depth_encode, replicate3, thermal_encode};
pub use polar::{
    aolp, aolp_to_unit, aolp_value, dolp, dolp_value, polar_encode, stokes, AolpConvention, Chroma, PolarKind,
    PolarStack, StokesMaps, S0_EPS,
};
