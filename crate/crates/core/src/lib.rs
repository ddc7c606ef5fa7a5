pub mod audio;
pub mod blocks;
pub mod data;
pub mod edm;
pub mod eval;
pub mod generate;
pub mod semantic;
pub mod tensor;
pub mod training;
