//! Holds the acceptance run in `tests/acceptance.rs`. The package is kept
//! separate so that run comes after every other test in the workspace.
