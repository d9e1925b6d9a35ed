use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::{Error, Result};

/// Name of the results sub-directory inside a project.
pub const RESULTS_DIR: &str = "results";

/// An analyst's project directory: job scripts, data files and a results
/// sub-directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Project {
    pub root: PathBuf,
    pub name: String,
    /// Executable files and `.R` scripts, relative to `root`, sorted.
    pub scripts: Vec<PathBuf>,
    /// Every other regular file outside `results/`, relative to `root`, sorted.
    pub data_files: Vec<PathBuf>,
}

impl Project {
    pub fn open(dir: &Path) -> Result<Self> {
        let root = fs::canonicalize(dir).map_err(|e| {
            Error::InvalidArgument(format!("project directory {}: {e}", dir.display()))
        })?;
        if !root.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "project directory {} is not a directory",
                root.display()
            )));
        }
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::InvalidArgument("the filesystem root cannot be a project".into()))?;
        let mut scripts = Vec::new();
        let mut data_files = Vec::new();
        let walker = WalkDir::new(&root)
            .min_depth(1)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| !(e.depth() == 1 && e.file_name() == RESULTS_DIR));
        for entry in walker {
            let entry = entry.map_err(std::io::Error::other)?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&root).expect("under root").to_path_buf();
            let mode = entry.metadata().map_err(std::io::Error::other)?.permissions().mode();
            let is_r = rel.extension().is_some_and(|e| e == "R" || e == "r");
            if mode & 0o111 != 0 || is_r {
                scripts.push(rel);
            } else {
                data_files.push(rel);
            }
        }
        Ok(Self {
            root,
            name,
            scripts,
            data_files,
        })
    }

    /// The local results directory, created if missing.
    pub fn results_dir(&self) -> Result<PathBuf> {
        let dir = self.root.join(RESULTS_DIR);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn script_names(&self) -> Vec<String> {
        self.scripts
            .iter()
            .map(|s| s.to_string_lossy().into_owned())
            .collect()
    }
}
