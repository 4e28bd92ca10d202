pub mod cell;
pub mod effective;
pub mod grid;
pub mod coeff;
pub mod control;
pub mod error;
pub mod oracle;
pub mod signal;
pub mod study;
pub mod floquet;
