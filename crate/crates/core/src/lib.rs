#![no_std]

extern crate alloc;

pub mod baseline;
pub mod datagen;
pub mod geometry;
pub mod inference;
pub mod linalg;
pub mod losses;
pub mod math;
pub mod net;
pub mod seed;
pub mod trainer;
