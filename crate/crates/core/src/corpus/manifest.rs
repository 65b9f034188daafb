//! JSON-lines corpus index.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Paired,
    Unpaired,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<PathBuf>,
    pub kind: EntryKind,
}

impl Entry {
    fn check(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        match self.kind {
            EntryKind::Paired if self.audio.is_none() => {
                Err(format!("paired entry {} has no audio path", self.id))
            }
            EntryKind::Generated if self.states.is_none() => {
                Err(format!("generated entry {} has no states path", self.id))
            }
            _ => Ok(()),
        }
    }
}

/// Ordered entries plus the directory that relative paths resolve against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<Entry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            e.check().map_err(Error::InvalidInput)?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate utterance id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn audio_path(&self, e: &Entry) -> Option<PathBuf> {
        e.audio.as_deref().map(|p| self.resolve(p))
    }

    pub fn states_path(&self, e: &Entry) -> Option<PathBuf> {
        e.states.as_deref().map(|p| self.resolve(p))
    }

    /// Entries with every path made absolute (or base-relative), so the
    /// manifest can be saved anywhere.
    pub fn with_resolved_paths(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| Entry {
                audio: self.audio_path(e),
                states: self.states_path(e),
                ..e.clone()
            })
            .collect();
        Self {
            entries,
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&Entry) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn texts(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.text.clone()).collect()
    }

    /// Writes paths relative to the manifest's own directory when they lie
    /// below it and absolute otherwise, so the file loads from anywhere.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.save_within(path, &dir)
    }

    /// Like [`Manifest::save`], but every path below `root` is written
    /// relative to the manifest's directory, so a tree under `root` can be
    /// moved as a whole.
    pub fn save_within(&self, path: &Path, root: &Path) -> Result<()> {
        let dir = absolute(path.parent().unwrap_or(Path::new("")))?;
        let root = absolute(root)?;
        let mut out = Vec::new();
        let rel = |p: Option<PathBuf>| -> Result<Option<PathBuf>> {
            let Some(p) = p else { return Ok(None) };
            let p = absolute(&p)?;
            Ok(Some(if p.starts_with(&root) && dir.starts_with(&root) {
                relative_path(&p, &dir)
            } else {
                p
            }))
        };
        for e in &self.entries {
            let e = Entry {
                audio: rel(self.audio_path(e))?,
                states: rel(self.states_path(e))?,
                ..e.clone()
            };
            serde_json::to_writer(&mut out, &e).map_err(|err| Error::Format(err.to_string()))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Absolute form of `p` with `.` and `..` resolved lexically.
fn absolute(p: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            c => out.push(c),
        }
    }
    Ok(out)
}

/// `target` as seen from `base`; both absolute and normalized.
fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let shared = target
        .components()
        .zip(base.components())
        .take_while(|(a, b)| a == b)
        .count();
    let ups = base.components().count() - shared;
    let mut out: PathBuf = std::iter::repeat(Component::ParentDir).take(ups).collect();
    out.extend(target.components().skip(shared));
    out
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Parses manifest text; `path` names the source in errors and anchors
/// relative paths.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let e: Entry = serde_json::from_str(line).map_err(|e| err(n, e.to_string()))?;
        e.check().map_err(|m| err(n, m))?;
        if !seen.insert(e.id.clone()) {
            return Err(err(n, format!("duplicate utterance id {}", e.id)));
        }
        entries.push(e);
    }
    Ok(Manifest {
        entries,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("/data/m.jsonl")
    }

    #[test]
    fn empty_text_is_empty_manifest() {
        assert_eq!(parse_manifest("", p()).unwrap().len(), 0);
    }

    #[test]
    fn paired_without_audio_names_the_line() {
        let text = "{\"id\":\"a\",\"text\":\"x\",\"kind\":\"unpaired\"}\n{\"id\":\"b\",\"text\":\"y\",\"kind\":\"paired\"}\n";
        match parse_manifest(text, p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_lines_fail() {
        assert!(matches!(parse_manifest("{", p()), Err(Error::Parse { line: 1, .. })));
        let dup = "{\"id\":\"a\",\"text\":\"x\",\"kind\":\"unpaired\"}\n{\"id\":\"a\",\"text\":\"y\",\"kind\":\"unpaired\"}";
        assert!(matches!(parse_manifest(dup, p()), Err(Error::Parse { line: 2, .. })));
        let gen = "{\"id\":\"a\",\"text\":\"x\",\"kind\":\"generated\"}";
        assert!(parse_manifest(gen, p()).is_err());
    }

    #[test]
    fn save_load_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            Entry { id: "u2".into(), text: "b".into(), audio: Some("wav/u2.wav".into()), states: None, kind: EntryKind::Paired },
            Entry { id: "u1".into(), text: "a c".into(), audio: None, states: None, kind: EntryKind::Unpaired },
            Entry { id: "u3".into(), text: "it's".into(), audio: None, states: Some("st/u3.bin".into()), kind: EntryKind::Generated },
        ];
        let m = Manifest::new(entries, dir.path()).unwrap();
        let path = dir.path().join("m.jsonl");
        m.save(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.audio_path(&back.entries[0]).unwrap(), dir.path().join("wav/u2.wav"));
    }

    #[test]
    fn save_within_keeps_trees_relocatable() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let outside = dir.path().join("corpus/a.wav");
        let entries = vec![Entry {
            id: "g".into(),
            text: "a".into(),
            audio: Some(outside.clone()),
            states: Some(run.join("x/./y/../y/g.bin")),
            kind: EntryKind::Paired,
        }];
        let path = run.join("z/m.jsonl");
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        Manifest::new(entries, "").unwrap().save_within(&path, &run).unwrap();
        let raw = parse_manifest(&std::fs::read_to_string(&path).unwrap(), Path::new("m.jsonl")).unwrap();
        assert_eq!(raw.entries[0].states.as_deref(), Some(Path::new("../x/y/g.bin")));
        assert_eq!(raw.entries[0].audio.as_deref(), Some(outside.as_path()));
        let back = load_manifest(&path).unwrap();
        assert_eq!(absolute(&back.states_path(&back.entries[0]).unwrap()).unwrap(), run.join("x/y/g.bin"));
    }

    #[test]
    fn relative_path_cases() {
        assert_eq!(relative_path(Path::new("/a/b/c"), Path::new("/a/b")), PathBuf::from("c"));
        assert_eq!(relative_path(Path::new("/a/x/c"), Path::new("/a/b/d")), PathBuf::from("../../x/c"));
        assert_eq!(relative_path(Path::new("/a"), Path::new("/a")), PathBuf::new());
    }
}
