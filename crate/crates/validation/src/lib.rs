//! Holds the acceptance suite (`tests/acceptance.rs`). It lives in its own
//! package so the long desk-scale runs come after every other test binary.
