//! CLI and file-format companion crate.
