#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oppfl::dataset::{encode_idx, synth_blobs};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_oppfl")
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scenario(name: &str) -> PathBuf {
    repo_root().join("scenarios").join(name)
}

/// Runs the binary with an optional dataset root.
pub fn oppfl(args: &[&str], data_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    match data_dir {
        Some(d) => cmd.env("OPPFL_DATA_DIR", d),
        None => cmd.env_remove("OPPFL_DATA_DIR"),
    };
    cmd.output().expect("binary runs")
}

/// Blob images in IDX form under `root/mnist/`, named like the real files.
pub fn write_fake_mnist(root: &Path, train_per_label: usize, test_per_label: usize, seed: u64) {
    let pool = synth_blobs(10, train_per_label + test_per_label, 784, 0.5, seed).unwrap();
    let (train, test) = pool.split_per_label(test_per_label, seed + 1).unwrap();
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    for (pool, prefix) in [(train, "train"), (test, "t10k")] {
        let (images, labels) = encode_idx(&pool, 28, 28).unwrap();
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
    }
}
