//! Files under `--out-dir`: written through a temporary name and renamed into
//! place, then listed in `manifest.json` together with the resolved config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    files: &'a [FileEntry],
    config: &'a RunConfig,
}

pub struct OutDir {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

/// Write `path` atomically: the content goes to a sibling temp file that is
/// renamed over the target once complete.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<u64> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        let mut out = BufWriter::new(file);
        fill(&mut out)?;
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(fs::metadata(path)?.len())
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(OutDir { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<PathBuf> {
        let path = self.path(name);
        let bytes = write_atomic(&path, fill)?;
        self.files.push(FileEntry { name: name.to_string(), bytes });
        Ok(path)
    }

    pub fn finish(self, command: &str, cfg: &RunConfig) -> Result<()> {
        let manifest = Manifest { command, files: &self.files, config: cfg };
        write_atomic(&self.dir.join("manifest.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)?;
            writeln!(w)?;
            Ok(())
        })?;
        Ok(())
    }
}
