//! Writing a set of output files so that a failed run leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};

/// Files are staged under a `.partial` suffix and renamed into place by
/// [`OutputSet::commit`]. Dropping an uncommitted set removes the staged
/// files.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            staged: Vec::new(),
            committed: false,
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let target = self.dir.join(name);
        let partial = self.dir.join(format!("{name}.partial"));
        fs::write(&partial, contents).map_err(|e| HarnessError::io(&partial, e))?;
        self.staged.push((partial, target));
        Ok(())
    }

    /// Moves every staged file into place and returns the final paths.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::with_capacity(self.staged.len());
        for (partial, target) in &self.staged {
            if let Err(e) = fs::rename(partial, target) {
                for p in &done {
                    let _ = fs::remove_file(p);
                }
                return Err(HarnessError::io(target, e));
            }
            done.push(target.clone());
        }
        self.committed = true;
        Ok(done)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if !self.committed {
            for (partial, _) in &self.staged {
                let _ = fs::remove_file(partial);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_files_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut out = OutputSet::new(dir.path()).unwrap();
            out.write("a.csv", "x\n").unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

        let mut out = OutputSet::new(dir.path()).unwrap();
        out.write("a.csv", "x\n").unwrap();
        let paths = out.commit().unwrap();
        assert_eq!(fs::read_to_string(&paths[0]).unwrap(), "x\n");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
