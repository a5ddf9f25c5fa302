//! Shared test support: finite differences, random instances and
//! independent loop oracles. Each criterion check returns a [`Check`] so
//! the acceptance runner and the focused tests share one implementation.
#![allow(dead_code)]

pub mod criteria;
pub mod fd;
pub mod oracle;
pub mod random;

/// Outcome of one measured property.
#[derive(Clone, Debug)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check {
            passed,
            detail: detail.into(),
        }
    }

    pub fn assert(&self) {
        assert!(self.passed, "{}", self.detail);
    }
}
