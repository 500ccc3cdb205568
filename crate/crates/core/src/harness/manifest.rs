//! Run manifests: the resolved configuration of a command plus SHA-256
//! hashes of everything it read and wrote. No timestamps, so reruns with the
//! same inputs produce byte-identical manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            ..RunManifest::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    /// Records an input file under its file name.
    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        let hash = hash_file(path)?;
        self.inputs.push((display_name(path), hash));
        Ok(())
    }

    /// Records every regular file directly inside `dir`, in name order.
    pub fn input_dir(&mut self, dir: &Path) -> io::Result<()> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let base = display_name(dir);
        for f in files {
            let hash = hash_file(&f)?;
            self.inputs.push((format!("{base}/{}", display_name(&f)), hash));
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> io::Result<()> {
        let hash = hash_file(path)?;
        self.outputs.push((display_name(path), hash));
        Ok(())
    }

    /// SHA-256 over the command name, the sorted configuration, and the input hashes.
    pub fn run_id(&self) -> String {
        let mut text = format!("command={}\n", self.command);
        for (k, v) in &self.config {
            let _ = writeln!(text, "{k}={v}");
        }
        for (name, hash) in &self.inputs {
            let _ = writeln!(text, "input {name} {hash}");
        }
        sha256_hex(text.as_bytes())
    }

    pub fn render(&self) -> String {
        let mut out = format!("run_id={}\ncommand={}\n", self.run_id(), self.command);
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k}={v}");
        }
        for (name, hash) in &self.inputs {
            let _ = writeln!(out, "input.{name}={hash}");
        }
        for (name, hash) in &self.outputs {
            let _ = writeln!(out, "output.{name}={hash}");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> io::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.render())?;
        Ok(path)
    }
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
