//! CSV artifacts and the per-run manifest.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Shortest decimal that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> io::Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn text(&mut self, name: &str, content: &str) -> io::Result<()> {
        fs::write(self.dir.join(name), content)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.csv`: the scenario, the config hash and every emitted
    /// file with its SHA-256.
    pub fn finish(self, scenario: &str, config_hash: &str) -> io::Result<PathBuf> {
        let path = self.dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["kind", "name", "value"])?;
        w.write_record(["input", "scenario", scenario])?;
        w.write_record(["input", "config_sha256", config_hash])?;
        for f in &self.files {
            let digest = Sha256::digest(fs::read(self.dir.join(f))?);
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            w.write_record(["output", f.as_str(), hex.as_str()])?;
        }
        w.flush()?;
        Ok(path)
    }
}
