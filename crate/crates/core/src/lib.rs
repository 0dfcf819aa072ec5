pub mod alphabet;
pub mod decoder;
pub mod frontend;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod scalar;
pub mod streaming;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;
