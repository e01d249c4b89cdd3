pub mod backbone;
pub mod distillation;
pub mod evaluation;
pub mod geometry;
pub mod numerics;
pub mod pointcloud;
pub mod seeding;
pub mod spd;
pub mod training;
