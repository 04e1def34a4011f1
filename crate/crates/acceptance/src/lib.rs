//! Acceptance checks live in `tests/acceptance.rs`; run them with
//! `cargo test -p texturegan-acceptance`, optionally followed by `-- 3 7` to
//! pick criteria by number.
