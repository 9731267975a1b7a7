pub mod adversary;
pub mod baselines;
pub mod budget;
pub mod experiment;
pub mod grid;
pub mod mechanism;
pub mod mobility;
pub mod oracle;
pub mod pls;
