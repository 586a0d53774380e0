//! Outputs that appear complete or not at all.
//!
//! Files are written next to their destination under a `.partial` name and
//! renamed into place; directories are filled under a staging name and
//! renamed on [`Staging::commit`]. Dropping an uncommitted [`Staging`]
//! removes it.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn sibling(dest: &Path, suffix: &str) -> Result<PathBuf> {
    let name = dest
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", dest.display())))?;
    let mut staged = std::ffi::OsString::from(".");
    staged.push(name);
    staged.push(suffix);
    Ok(dest.with_file_name(staged))
}

/// Replaces `path` with `bytes` in one rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = sibling(path, &format!(".{}.partial", std::process::id()))?;
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// A directory that becomes visible at `dest` only when committed.
#[derive(Debug)]
pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staging {
    /// Fails if `dest` exists and is not an empty directory.
    pub fn new(dest: impl AsRef<Path>) -> Result<Self> {
        let dest = dest.as_ref().to_path_buf();
        if dest.exists() {
            let empty = fs::read_dir(&dest).map(|mut d| d.next().is_none()).unwrap_or(false);
            if !empty {
                return Err(Error::Config(format!("{} already exists", dest.display())));
            }
        }
        let tmp = sibling(&dest, &format!(".{}.partial", std::process::id()))?;
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            tmp,
            dest,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.dest.exists() {
            fs::remove_dir(&self.dest).map_err(|e| Error::io(&self.dest, e))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(|e| Error::io(&self.dest, e))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn failed_write_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("a.txt");
        assert!(write_atomic(&p, b"x").is_err());
        assert!(!p.exists());
    }

    #[test]
    fn dropped_staging_disappears() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out");
        {
            let s = Staging::new(&dest).unwrap();
            fs::write(s.join("f"), b"1").unwrap();
        }
        assert!(!dest.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn committed_staging_moves_into_place() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out");
        fs::create_dir(&dest).unwrap();
        let s = Staging::new(&dest).unwrap();
        fs::write(s.join("f"), b"1").unwrap();
        s.commit().unwrap();
        assert_eq!(fs::read(dest.join("f")).unwrap(), b"1");
        assert!(Staging::new(&dest).is_err());
    }
}
