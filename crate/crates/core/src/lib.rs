pub mod cli;
pub mod diffmath;
pub mod distributions;
pub mod evaluation;
pub mod gradcheck;
pub mod models;
pub mod sparse_data;
pub mod synthetic;
pub mod training;
