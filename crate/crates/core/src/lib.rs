//! Multi-round relativistic bit commitment: field arithmetic, protocol
//! logic, planning, and tape/transcript storage.

mod clmul;
pub mod field;
pub mod planner;
pub mod protocol;
pub mod store;
