pub mod blobstore;
pub mod bundle;
pub mod catalog;
pub mod clock;
pub mod digest;
pub mod eval;
pub mod gate;
pub mod intake;
pub mod leaderboard;
pub mod registry;
pub mod serving;
pub mod store;

#[cfg(feature = "fixtures")]
pub mod fixtures;
