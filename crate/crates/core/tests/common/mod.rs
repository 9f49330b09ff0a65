//! Locating the MNIST-format datasets used by data-driven tests.

use std::path::PathBuf;

/// `$LRRN_DATA_DIR/<name>`, defaulting to `<workspace>/data/<name>`.
pub fn data_dir(name: &str) -> PathBuf {
    let root = std::env::var_os("LRRN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let dir = root.join(name);
    assert!(
        dir.join("train-images-idx3-ubyte").exists(),
        "dataset {} not found; run `python3 scripts/fetch_data.py` or set LRRN_DATA_DIR",
        dir.display()
    );
    dir
}
