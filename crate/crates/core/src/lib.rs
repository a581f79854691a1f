pub mod data;
pub mod evaluation;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod training;
