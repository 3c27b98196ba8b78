//! Writes a command's artifacts only after all of them have been computed.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// Named file contents produced by a command.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }
}

/// Exclusive lock on an output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(source) => Err(CliError::Io { path, source }),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `dir` if needed and writes every file via a temporary name and rename.
pub fn write_all(dir: &Path, outputs: &Outputs) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let _lock = Lock::acquire(dir)?;
    let mut staged = Vec::new();
    for (name, bytes) in &outputs.files {
        let tmp = dir.join(format!(".{name}.partial"));
        if let Err(e) = fs::write(&tmp, bytes).map_err(io(&tmp)) {
            for t in &staged {
                let _ = fs::remove_file(t);
            }
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
        staged.push(tmp);
    }
    for ((name, _), tmp) in outputs.files.iter().zip(&staged) {
        let dest = dir.join(name);
        fs::rename(tmp, &dest).map_err(io(&dest))?;
    }
    Ok(())
}
