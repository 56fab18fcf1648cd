pub mod carla;
pub mod game;
pub mod mechanism;
pub mod ne_solver;
pub mod queueing;
pub mod scenarios;
pub mod sim;
pub mod slicing;
