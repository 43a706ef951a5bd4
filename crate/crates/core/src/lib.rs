pub mod numerics;
pub mod types;
pub mod concept;
pub mod model;
pub mod matching;
pub mod losses;
pub mod weak;
pub mod benchmark;
pub mod train;
