use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use disagree_core::io::{file_digest, to_json_bytes, write_atomic};
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to replay a command: resolved configuration, input
/// digests and seeds. Free of timestamps and absolute output paths so that
/// reruns produce identical bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    /// Input path as given on the command line -> sha256.
    pub inputs: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Output path relative to the output directory -> sha256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            seeds,
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(self)
    }

    /// Digests every file already under `out_dir` and writes the manifest there.
    pub fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.outputs = digest_tree(out_dir)?;
        write_atomic(&out_dir.join(MANIFEST_FILE), &to_json_bytes(&self)?)?;
        Ok(())
    }
}

pub fn digest_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            // A stale manifest from an earlier run in the same directory.
            if rel != MANIFEST_FILE {
                out.insert(rel, file_digest(&path)?);
            }
        }
    }
    Ok(out)
}
