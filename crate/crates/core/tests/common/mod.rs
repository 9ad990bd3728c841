#![allow(dead_code)]

pub mod dsp;
pub mod fixtures;
pub mod grad;
pub mod losses;
pub mod repro;
