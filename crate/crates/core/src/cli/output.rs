use std::path::PathBuf;

use anyhow::{Context, Result};
use growthmix::io::OutputHeader;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::RunConfig;

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    header: &'a OutputHeader,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    header: &'a OutputHeader,
    command: &'a str,
    config: &'a RunConfig,
    files: Vec<FileEntry>,
}

/// Buffers every output of a command and writes them once the command has
/// finished, so partial results never reach disk out of order.
pub struct Outputs {
    pub header: OutputHeader,
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Outputs {
    pub fn new(cfg: &RunConfig, command: &str) -> Self {
        Self {
            header: OutputHeader::new(cfg.hash(command), cfg.seed),
            dir: cfg.out.clone(),
            files: Vec::new(),
        }
    }

    /// A CSV file with the header block as leading `#` rows.
    pub fn csv(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> growthmix::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        self.header.write_comments(&mut buf)?;
        body(&mut buf)?;
        self.files.push((name.to_string(), buf));
        Ok(())
    }

    /// A JSON document with the header block as its `header` field.
    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<()> {
        let doc = Document {
            header: &self.header,
            body,
        };
        let mut buf = serde_json::to_vec_pretty(&doc)?;
        buf.push(b'\n');
        self.files.push((name.to_string(), buf));
        Ok(())
    }

    /// Writes every buffered file and a manifest listing their digests.
    pub fn finish(self, command: &str, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let mut written = Vec::new();
        let mut entries = Vec::new();
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            entries.push(FileEntry {
                name: name.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len(),
            });
            written.push(path);
        }
        let stable = cfg.stable();
        let manifest = Manifest {
            header: &self.header,
            command,
            config: &stable,
            files: entries,
        };
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
        Ok(written)
    }
}
