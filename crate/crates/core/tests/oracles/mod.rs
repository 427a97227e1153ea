//! Oracle checks shared by the core integration tests and the acceptance
//! suite. Each check returns a one-line summary, or a description of the
//! first violation.

#![allow(dead_code)]

pub mod bits;
pub mod coverage;
pub mod distributions;
pub mod enumeration;
pub mod gradients;

pub type Outcome = Result<String, String>;

/// Runs every check of a group and joins the summaries.
pub fn all(checks: &[(&str, fn() -> Outcome)]) -> Outcome {
    let mut parts = Vec::with_capacity(checks.len());
    for (name, f) in checks {
        parts.push(format!("{name}: {}", f().map_err(|e| format!("{name}: {e}"))?));
    }
    Ok(parts.join("; "))
}
