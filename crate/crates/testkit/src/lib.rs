//! Test support: hand-set toy classifiers, synthetic images and brute-force
//! reference implementations. Nothing here is used outside tests.

pub mod data;
pub mod fixtures;
pub mod oracles;
pub mod toys;
