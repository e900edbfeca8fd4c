//! Acceptance criteria for `rfsplat`, run as the `acceptance` test target.
//!
//! `cargo test -p rfsplat-validation --test acceptance -- --nocapture`
//! prints one PASS/FAIL line per criterion.
