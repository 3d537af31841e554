use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{load_image, ShadowPair};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub target: PathBuf,
    pub id: String,
}

/// Paired-image list. On disk: one `input<TAB>target<TAB>id` line per entry,
/// relative paths resolved against the manifest's directory, an optional
/// `# split: <tag>` line, other `#` lines ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub split: String,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut split = String::from("train");
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(tag) = rest.trim().strip_prefix("split:") {
                    split = tag.trim().to_string();
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [input, target, id] = fields[..] else {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    i + 1,
                    fields.len()
                )));
            };
            if !seen.insert(id.to_string()) {
                return Err(Error::Data(format!("manifest line {}: duplicate id {id:?}", i + 1)));
            }
            entries.push(ManifestEntry {
                input: input.into(),
                target: target.into(),
                id: id.to_string(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            split,
        })
    }

    /// Reads and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, root)?;
        let missing: Vec<String> = m
            .entries
            .iter()
            .flat_map(|e| [m.resolve(&e.input), m.resolve(&e.target)])
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "manifest references missing files: {}",
                missing.join(", ")
            )));
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# split: {}\n", self.split);
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.input.display(), e.target.display(), e.id);
        }
        s
    }

    pub fn load_pairs<T: Real>(&self) -> Result<Vec<ShadowPair<T>>> {
        self.entries
            .iter()
            .map(|e| {
                ShadowPair::new(
                    load_image(&self.resolve(&e.input))?,
                    load_image(&self.resolve(&e.target))?,
                    &e.id,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let text = "# split: test\na.png\tb.png\tx1\n\nc.png\td.png\tx2\n";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.split, "test");
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.resolve(&m.entries[1].target), PathBuf::from("/data/d.png"));
        assert_eq!(m.to_text(), text.replace("\n\n", "\n"));
        assert!(DatasetManifest::parse("a\tb\tx\nc\td\tx\n", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("a b x\n", Path::new(".")).is_err());
    }

    #[test]
    fn load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.tsv"), "a.png\tb.png\tx\n").unwrap();
        let err = DatasetManifest::load(&dir.path().join("m.tsv"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("a.png"), "{err}");
    }
}
