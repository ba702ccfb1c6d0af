//! Acceptance checks for `sumcal`. The checks live in `tests/acceptance.rs`
//! and print one PASS/FAIL line per criterion:
//!
//! ```text
//! cargo test -p sumcal-conformance --test acceptance
//! ```
