//! Outputs are staged in memory and only written once a command succeeds.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    /// Writes every file through a temporary sibling and renames it into
    /// place. On error, everything written so far is removed.
    pub fn commit(self) -> io::Result<()> {
        let mut created_dirs = Vec::new();
        let mut done: Vec<PathBuf> = Vec::new();
        let result = (|| {
            for (path, bytes) in &self.files {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    if !parent.exists() {
                        fs::create_dir_all(parent)?;
                        created_dirs.push(parent.to_path_buf());
                    }
                }
                let tmp = temp_sibling(path);
                fs::write(&tmp, bytes).inspect_err(|_| {
                    let _ = fs::remove_file(&tmp);
                })?;
                fs::rename(&tmp, path)?;
                done.push(path.clone());
            }
            Ok(())
        })();
        if result.is_err() {
            for p in &done {
                let _ = fs::remove_file(p);
            }
            for d in created_dirs.iter().rev() {
                let _ = fs::remove_dir(d);
            }
        }
        result
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
