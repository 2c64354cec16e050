//! Dataset manifest: a structured-text file listing subject volume paths
//! and their train/val/test split.
//!
//! ```text
//! dataset v1
//! grid 96 96
//! subject 0 train s0000.a.rvol s0000.b.rvol
//! subject 1 val   s0001.a.rvol s0001.b.rvol
//! ```
//!
//! Paths are relative to the manifest's directory.

use crate::error::{Error, Result};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: &str = "dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::format("split", format!("unknown split `{other}`"))),
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct SubjectEntry {
    pub id: u64,
    pub split: Split,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub grid: Vec<usize>,
    pub subjects: Vec<SubjectEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn subjects_in(&self, split: Split) -> Vec<&SubjectEntry> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str("grid ");
        out.push_str(
            &self
                .grid
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        );
        out.push('\n');
        for s in &self.subjects {
            out.push_str(&format!(
                "subject {} {} {} {}\n",
                s.id,
                s.split,
                s.path_a.display(),
                s.path_b.display()
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != MAGIC {
            return Err(Error::format(
                "magic",
                format!("expected `{MAGIC}`, found `{magic}`"),
            ));
        }
        let mut grid = None;
        let mut subjects = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.first().copied() {
                Some("grid") => {
                    let parsed: std::result::Result<Vec<usize>, _> =
                        tokens[1..].iter().map(|t| t.parse()).collect();
                    grid = Some(parsed.map_err(|e| Error::format("grid", e.to_string()))?);
                }
                Some("subject") => {
                    if tokens.len() != 5 {
                        return Err(Error::format(
                            "subject",
                            format!("expected 5 tokens, found {}", tokens.len()),
                        ));
                    }
                    subjects.push(SubjectEntry {
                        id: tokens[1]
                            .parse()
                            .map_err(|e: std::num::ParseIntError| {
                                Error::format("subject", e.to_string())
                            })?,
                        split: Split::parse(tokens[2])?,
                        path_a: PathBuf::from(tokens[3]),
                        path_b: PathBuf::from(tokens[4]),
                    });
                }
                Some(other) => {
                    return Err(Error::format(other.to_string(), "unknown manifest key"));
                }
                None => {}
            }
        }
        Ok(DatasetManifest {
            grid: grid.ok_or_else(|| Error::format("grid", "missing"))?,
            subjects,
            root,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let m = DatasetManifest {
            grid: vec![96, 96],
            subjects: vec![
                SubjectEntry {
                    id: 0,
                    split: Split::Train,
                    path_a: "s0.a.rvol".into(),
                    path_b: "s0.b.rvol".into(),
                },
                SubjectEntry {
                    id: 1,
                    split: Split::Test,
                    path_a: "s1.a.rvol".into(),
                    path_b: "s1.b.rvol".into(),
                },
            ],
            root: dir.path().to_path_buf(),
        };
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.grid, vec![96, 96]);
        assert_eq!(back.subjects.len(), 2);
        assert_eq!(back.subjects[1].split, Split::Test);
        assert_eq!(back.subjects_in(Split::Train).len(), 1);
    }
}
