//! Selfish-mining simulator with a truth-state fork policy and an attack
//! economics calculator.

pub mod chain;
pub mod economics;
pub mod estimator;
pub mod policy;
pub mod sim;
pub mod strategy;
