#![allow(dead_code)]

pub mod contracts;
pub mod grad;
pub mod pca;
pub mod schedule;

/// Outcome of one named check inside a suite.
#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), ok, detail: detail.into() }
    }
}

/// Panics with every failed check listed.
#[allow(dead_code)]
pub fn assert_all(checks: &[Check]) {
    let failed: Vec<String> = checks.iter().filter(|c| !c.ok).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    assert!(failed.is_empty(), "failed checks:\n{}", failed.join("\n"));
}
