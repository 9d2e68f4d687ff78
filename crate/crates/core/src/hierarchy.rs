//! Three-level label taxonomy (fine -> mid -> coarse) and cross-level mapping.
//!
//! A hierarchy is loaded from a tab-separated file with header `l1\tl2\tl3`
//! and one row per fine-grained label. Two-level labels repeat their fine
//! name at the middle level (`a\ta\tcoarse`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered set of labels, used for both targets and predictions.
pub type LabelSet = BTreeSet<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Fine = 1,
    Mid = 2,
    Coarse = 3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Fine, Level::Mid, Level::Coarse];

    pub fn number(self) -> u8 {
        self as u8
    }

    /// Zero-based position of the level in per-level arrays.
    pub fn slot(self) -> usize {
        self as usize - 1
    }

    pub fn from_number(n: u8) -> Result<Level> {
        match n {
            1 => Ok(Level::Fine),
            2 => Ok(Level::Mid),
            3 => Ok(Level::Coarse),
            other => Err(Error::Hierarchy(format!(
                "level must be 1, 2 or 3, got {other}"
            ))),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Labels of one hierarchy level in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    level: Level,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new(level: Level, labels: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut sorted: Vec<String> = labels.into_iter().collect();
        sorted.sort();
        let before = sorted.len();
        sorted.dedup();
        if sorted.len() != before {
            return Err(Error::Hierarchy(format!(
                "duplicate labels in level {level}"
            )));
        }
        if sorted.is_empty() {
            return Err(Error::Hierarchy(format!("empty level {level}")));
        }
        let index = sorted
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Ok(LabelSpace {
            level,
            labels: sorted,
            index,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    /// SHA-256 over the ordered label list. Checkpoints store this to detect
    /// a mismatched hierarchy at load time.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update([self.level.number()]);
        for label in &self.labels {
            hasher.update(label.as_bytes());
            hasher.update([b'\n']);
        }
        hex(&hasher.finalize())
    }

    /// Indices of `labels`, failing on the first label outside this space.
    pub fn indices<'a>(&self, labels: impl IntoIterator<Item = &'a String>) -> Result<Vec<usize>> {
        labels
            .into_iter()
            .map(|l| {
                self.position(l).ok_or_else(|| Error::UnknownLabel {
                    label: l.clone(),
                    level: self.level.number(),
                })
            })
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    levels: [LabelSpace; 3],
    /// For each L1 index, the index of its L2 parent.
    fine_to_mid: Vec<usize>,
    /// For each L2 index, the index of its L3 parent.
    mid_to_coarse: Vec<usize>,
}

impl Hierarchy {
    /// Builds a hierarchy from parent edges. Every child must appear exactly
    /// once (duplicates with identical parents are rejected as duplicates,
    /// with differing parents as ambiguous), and every referenced parent must
    /// itself be a child in the next edge list (or a coarse label).
    pub fn from_edges(
        fine_to_mid: &[(String, String)],
        mid_to_coarse: &[(String, String)],
    ) -> Result<Self> {
        let l1 = collect_function(fine_to_mid, Level::Fine)?;
        let l2 = collect_function(mid_to_coarse, Level::Mid)?;

        for (child, parent) in &l1 {
            if !l2.contains_key(parent) {
                return Err(Error::Hierarchy(format!(
                    "unknown parent reference: L1 label {child:?} points to {parent:?}, which is not an L2 label"
                )));
            }
        }
        let referenced: BTreeSet<&String> = l1.values().collect();
        if let Some(orphan) = l2.keys().find(|k| !referenced.contains(k)) {
            return Err(Error::Hierarchy(format!(
                "L2 label {orphan:?} has no L1 children"
            )));
        }

        check_acyclic(&l1, &l2)?;

        let s1 = LabelSpace::new(Level::Fine, l1.keys().cloned())?;
        let s2 = LabelSpace::new(Level::Mid, l2.keys().cloned())?;
        let s3 = LabelSpace::new(Level::Coarse, l2.values().cloned().collect::<BTreeSet<_>>())?;

        let fine_to_mid = s1
            .labels()
            .iter()
            .map(|l| s2.position(&l1[l]).expect("checked above"))
            .collect();
        let mid_to_coarse = s2
            .labels()
            .iter()
            .map(|l| s3.position(&l2[l]).expect("coarse set built from parents"))
            .collect();

        Ok(Hierarchy {
            levels: [s1, s2, s3],
            fine_to_mid,
            mid_to_coarse,
        })
    }

    pub fn from_tsv_str(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };

        let mut header_seen = false;
        let mut fine_to_mid = Vec::new();
        let mut mid_to_coarse: Vec<(String, String)> = Vec::new();
        let mut mid_rows: HashMap<String, (String, usize)> = HashMap::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
            if !header_seen {
                if fields != ["l1", "l2", "l3"] {
                    return Err(parse_err(
                        line_no,
                        format!("expected header \"l1\\tl2\\tl3\", found {trimmed:?}"),
                    ));
                }
                header_seen = true;
                continue;
            }
            if fields.len() != 3 {
                return Err(parse_err(
                    line_no,
                    format!("expected 3 tab-separated columns, found {}", fields.len()),
                ));
            }
            if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
                return Err(parse_err(line_no, format!("empty column l{}", pos + 1)));
            }
            let (a, b, c) = (fields[0], fields[1], fields[2]);
            if fine_to_mid.iter().any(|(l, _): &(String, String)| l == a) {
                let (_, prev_mid) = fine_to_mid.iter().find(|(l, _)| l == a).unwrap();
                let msg = if prev_mid == b {
                    format!("duplicate L1 label {a:?}")
                } else {
                    format!("ambiguous parent for L1 label {a:?}: {prev_mid:?} vs {b:?}")
                };
                return Err(parse_err(line_no, msg));
            }
            fine_to_mid.push((a.to_string(), b.to_string()));
            match mid_rows.get(b) {
                Some((prev, prev_line)) if prev != c => {
                    return Err(parse_err(
                        line_no,
                        format!(
                            "ambiguous parent for L2 label {b:?}: {prev:?} (line {prev_line}) vs {c:?}"
                        ),
                    ));
                }
                Some(_) => {}
                None => {
                    mid_rows.insert(b.to_string(), (c.to_string(), line_no));
                    mid_to_coarse.push((b.to_string(), c.to_string()));
                }
            }
        }
        if !header_seen {
            return Err(parse_err(0, "missing header \"l1\\tl2\\tl3\"".into()));
        }
        if fine_to_mid.is_empty() {
            return Err(Error::Hierarchy(format!(
                "{}: empty level (no data rows)",
                origin.display()
            )));
        }
        Hierarchy::from_edges(&fine_to_mid, &mid_to_coarse)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Hierarchy::from_tsv_str(&text, path)
    }

    /// Serializes back to the TSV format, one row per L1 label.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("l1\tl2\tl3\n");
        for (i, fine) in self.levels[0].labels().iter().enumerate() {
            let mid = self.fine_to_mid[i];
            let coarse = self.mid_to_coarse[mid];
            out.push_str(&format!(
                "{fine}\t{}\t{}\n",
                self.levels[1].label(mid),
                self.levels[2].label(coarse)
            ));
        }
        out
    }

    pub fn space(&self, level: Level) -> &LabelSpace {
        &self.levels[level.slot()]
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.levels[0].len(), self.levels[1].len(), self.levels[2].len()]
    }

    /// Maps a label index upward from `from` to `to`.
    pub fn ancestor_index(&self, idx: usize, from: Level, to: Level) -> Result<usize> {
        if to < from {
            return Err(Error::DownwardMapping {
                from: from.number(),
                to: to.number(),
            });
        }
        let mut level = from;
        let mut cur = idx;
        while level < to {
            cur = match level {
                Level::Fine => self.fine_to_mid[cur],
                Level::Mid => self.mid_to_coarse[cur],
                Level::Coarse => unreachable!(),
            };
            level = Level::from_number(level.number() + 1)?;
        }
        Ok(cur)
    }

    /// Returns the unique ancestor of `label` at level `to`.
    pub fn map_label(&self, label: &str, from: Level, to: Level) -> Result<&str> {
        if to < from {
            return Err(Error::DownwardMapping {
                from: from.number(),
                to: to.number(),
            });
        }
        let idx = self
            .space(from)
            .position(label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                level: from.number(),
            })?;
        let anc = self.ancestor_index(idx, from, to)?;
        Ok(self.space(to).label(anc))
    }

    /// Maps a set of labels at `from` to the deduplicated set of ancestors at `to`.
    pub fn map_set(&self, labels: &LabelSet, from: Level, to: Level) -> Result<LabelSet> {
        labels
            .iter()
            .map(|l| self.map_label(l, from, to).map(str::to_string))
            .collect()
    }

    /// Derives the mid and coarse label sets of a fine label set.
    pub fn derive_label_sets(&self, fine: &LabelSet) -> Result<(LabelSet, LabelSet)> {
        let mid = self.map_set(fine, Level::Fine, Level::Mid)?;
        let coarse = self.map_set(&mid, Level::Mid, Level::Coarse)?;
        Ok((mid, coarse))
    }

    /// Parent label of `label` one level up, or `None` at the coarse level.
    pub fn parent(&self, label: &str, level: Level) -> Option<&str> {
        let up = match level {
            Level::Fine => Level::Mid,
            Level::Mid => Level::Coarse,
            Level::Coarse => return None,
        };
        self.map_label(label, level, up).ok()
    }

    /// Table-style count line, e.g. `353 / 138 / 13`.
    pub fn stats_line(&self) -> String {
        let [a, b, c] = self.sizes();
        format!("{a} / {b} / {c}")
    }
}

fn collect_function(
    edges: &[(String, String)],
    level: Level,
) -> Result<BTreeMap<String, String>> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (child, parent) in edges {
        let child = child.trim().to_string();
        let parent = parent.trim().to_string();
        if child.is_empty() || parent.is_empty() {
            return Err(Error::Hierarchy(format!("empty label at level {level}")));
        }
        match map.get(&child) {
            Some(prev) if *prev == parent => {
                return Err(Error::Hierarchy(format!(
                    "duplicate L{level} label {child:?}"
                )))
            }
            Some(prev) => {
                return Err(Error::Hierarchy(format!(
                    "ambiguous parent for L{level} label {child:?}: {prev:?} vs {parent:?}"
                )))
            }
            None => {
                map.insert(child, parent);
            }
        }
    }
    if map.is_empty() {
        return Err(Error::Hierarchy(format!("empty level {level}")));
    }
    Ok(map)
}

/// Treats label names as graph nodes across levels. Self-edges are the
/// two-level repeat rule and are allowed; any other cycle is an error.
fn check_acyclic(l1: &BTreeMap<String, String>, l2: &BTreeMap<String, String>) -> Result<()> {
    let mut graph: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (c, p) in l1.iter().chain(l2.iter()) {
        if c != p {
            graph.entry(c.as_str()).or_default().insert(p.as_str());
        }
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Visiting,
        Done,
    }
    fn visit<'a>(
        node: &'a str,
        graph: &BTreeMap<&'a str, BTreeSet<&'a str>>,
        marks: &mut HashMap<&'a str, Mark>,
    ) -> Result<()> {
        match marks.get(node) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Visiting) => {
                return Err(Error::Hierarchy(format!("cycle through label {node:?}")))
            }
            None => {}
        }
        marks.insert(node, Mark::Visiting);
        if let Some(next) = graph.get(node) {
            for n in next {
                visit(n, graph, marks)?;
            }
        }
        marks.insert(node, Mark::Done);
        Ok(())
    }

    let mut marks = HashMap::new();
    for node in graph.keys() {
        visit(node, &graph, &mut marks)?;
    }
    Ok(())
}
