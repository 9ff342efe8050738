//! Split schema files and the bundled benchmark-shaped splits.
//!
//! A split file lists sessions by name: the attributes and objects each
//! session introduces and its seen/val/unseen composition pairs, together
//! with declared counts that the loader verifies against the listed entries.
//! Two shapes mirroring published benchmark statistics ship with the crate,
//! populated with synthetic concept names and deterministically drawn pairs.

use serde::{Deserialize, Serialize};

use crate::rng::{chacha, mix};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{build_space, Comp, CompositionSpace, SessionSpec, WorldError};

/// Declared per-session sizes; the loader rejects files where these disagree
/// with the listed entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredCounts {
    pub attrs: usize,
    pub objs: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFileSession {
    pub counts: DeclaredCounts,
    /// Attribute names first introduced in this session.
    pub attrs: Vec<String>,
    /// Object names first introduced in this session.
    pub objs: Vec<String>,
    /// Seen (training) compositions as `[attr, obj]` name pairs.
    pub seen: Vec<(String, String)>,
    pub val: Vec<(String, String)>,
    /// Unseen (zero-shot test) compositions.
    pub unseen: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub dataset: String,
    pub sessions: Vec<SplitFileSession>,
}

/// Parses split file text (JSON) into a space plus session specs, verifying
/// declared counts, name uniqueness, and introduction order.
pub fn parse_split_file(text: &str) -> Result<(CompositionSpace, Vec<SessionSpec>), WorldError> {
    let file: SplitFile =
        serde_json::from_str(text).map_err(|e| WorldError::Schema { detail: e.to_string() })?;
    resolve_split_file(&file)
}

/// Loads and parses a split schema file from disk.
pub fn load_table_splits(
    path: &std::path::Path,
) -> Result<(CompositionSpace, Vec<SessionSpec>), WorldError> {
    let text = std::fs::read_to_string(path)?;
    parse_split_file(&text)
}

fn resolve_split_file(file: &SplitFile) -> Result<(CompositionSpace, Vec<SessionSpec>), WorldError> {
    if file.sessions.is_empty() {
        return Err(WorldError::Schema { detail: "file declares no sessions".into() });
    }
    // Global name tables in introduction order.
    let mut attr_names: Vec<String> = Vec::new();
    let mut obj_names: Vec<String> = Vec::new();
    for (s, sess) in file.sessions.iter().enumerate() {
        for (field, declared, actual) in [
            ("attrs", sess.counts.attrs, sess.attrs.len()),
            ("objs", sess.counts.objs, sess.objs.len()),
            ("train", sess.counts.train, sess.seen.len()),
            ("val", sess.counts.val, sess.val.len()),
            ("test", sess.counts.test, sess.unseen.len()),
        ] {
            if declared != actual {
                return Err(WorldError::CountMismatch { session: s, field, declared, actual });
            }
        }
        for name in &sess.attrs {
            if attr_names.iter().any(|n| n == name) {
                return Err(WorldError::Schema {
                    detail: format!("session {s}: attribute {name:?} introduced twice"),
                });
            }
            attr_names.push(name.clone());
        }
        for name in &sess.objs {
            if obj_names.iter().any(|n| n == name) {
                return Err(WorldError::Schema {
                    detail: format!("session {s}: object {name:?} introduced twice"),
                });
            }
            obj_names.push(name.clone());
        }
    }

    let attr_index = |s: usize, name: &str| -> Result<usize, WorldError> {
        attr_names.iter().position(|n| n == name).ok_or_else(|| WorldError::Schema {
            detail: format!("session {s}: unknown attribute {name:?}"),
        })
    };
    let obj_index = |s: usize, name: &str| -> Result<usize, WorldError> {
        obj_names.iter().position(|n| n == name).ok_or_else(|| WorldError::Schema {
            detail: format!("session {s}: unknown object {name:?}"),
        })
    };

    let mut sessions = Vec::with_capacity(file.sessions.len());
    let mut all_comps: Vec<Comp> = Vec::new();
    let mut attr_cursor = 0usize;
    let mut obj_cursor = 0usize;
    for (s, sess) in file.sessions.iter().enumerate() {
        let resolve = |pairs: &[(String, String)]| -> Result<Vec<Comp>, WorldError> {
            pairs.iter().map(|(a, o)| Ok((attr_index(s, a)?, obj_index(s, o)?))).collect()
        };
        let seen = resolve(&sess.seen)?;
        let val = resolve(&sess.val)?;
        let unseen = resolve(&sess.unseen)?;
        all_comps.extend(seen.iter().chain(val.iter()).chain(unseen.iter()));

        let attrs: Vec<usize> = (attr_cursor..attr_cursor + sess.attrs.len()).collect();
        let objs: Vec<usize> = (obj_cursor..obj_cursor + sess.objs.len()).collect();
        attr_cursor += sess.attrs.len();
        obj_cursor += sess.objs.len();
        sessions.push(SessionSpec { index: s, attrs, objs, seen, unseen, val });
    }

    let space = build_space(attr_names, obj_names, Some(all_comps))?;
    Ok((space, sessions))
}

/// Renders a resolved split back into the file schema, for run artifacts.
pub fn to_split_file(
    dataset: &str,
    space: &CompositionSpace,
    sessions: &[SessionSpec],
) -> SplitFile {
    let name_pair = |&(a, o): &Comp| -> (String, String) {
        (space.attr_name(a).to_string(), space.obj_name(o).to_string())
    };
    SplitFile {
        dataset: dataset.to_string(),
        sessions: sessions
            .iter()
            .map(|s| SplitFileSession {
                counts: DeclaredCounts {
                    attrs: s.attrs.len(),
                    objs: s.objs.len(),
                    train: s.seen.len(),
                    val: s.val.len(),
                    test: s.unseen.len(),
                },
                attrs: s.attrs.iter().map(|&a| space.attr_name(a).to_string()).collect(),
                objs: s.objs.iter().map(|&o| space.obj_name(o).to_string()).collect(),
                seen: s.seen.iter().map(name_pair).collect(),
                val: s.val.iter().map(name_pair).collect(),
                unseen: s.unseen.iter().map(name_pair).collect(),
            })
            .collect(),
    }
}

/// Benchmark shapes bundled with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableDataset {
    UtZappos,
    Cgqa,
}

impl TableDataset {
    pub fn from_name(name: &str) -> Result<Self, WorldError> {
        match name {
            "utzappos" => Ok(TableDataset::UtZappos),
            "cgqa" => Ok(TableDataset::Cgqa),
            other => Err(WorldError::UnknownDataset { name: other.to_string() }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TableDataset::UtZappos => "utzappos",
            TableDataset::Cgqa => "cgqa",
        }
    }

    /// Per-session (attrs, objs, train, val, test) sizes.
    fn counts(&self) -> &'static [(usize, usize, usize, usize, usize)] {
        match self {
            TableDataset::UtZappos => {
                &[(8, 6, 24, 7, 9), (4, 3, 27, 10, 14), (4, 3, 32, 13, 13)]
            }
            TableDataset::Cgqa => &[
                (233, 363, 2392, 958, 730),
                (35, 58, 491, 168, 172),
                (32, 67, 772, 358, 265),
                (36, 64, 836, 366, 275),
                (39, 62, 562, 225, 166),
                (38, 60, 539, 217, 203),
            ],
        }
    }
}

const TAG_TABLE: u64 = 0x5441424c;
const TABLE_SEED: u64 = 0x53484150;

/// Generates the bundled split for a benchmark shape: synthetic concept
/// names, deterministic composition draws, every newly introduced primitive
/// used by at least one composition of its session.
pub fn table_shape(dataset: TableDataset) -> SplitFile {
    let counts = dataset.counts();
    let total_attrs: usize = counts.iter().map(|c| c.0).sum();
    let total_objs: usize = counts.iter().map(|c| c.1).sum();
    let attr_name = |i: usize| format!("attr{i:03}");
    let obj_name = |i: usize| format!("obj{i:03}");

    let mut rng = chacha(mix(TABLE_SEED, &[TAG_TABLE, counts.len() as u64, total_attrs as u64]));
    let mut used = std::collections::BTreeSet::<Comp>::new();
    let mut sessions = Vec::with_capacity(counts.len());
    let mut known_attrs = 0usize;
    let mut known_objs = 0usize;
    for &(n_attrs, n_objs, n_train, n_val, n_test) in counts {
        let new_attrs: Vec<usize> = (known_attrs..known_attrs + n_attrs).collect();
        let new_objs: Vec<usize> = (known_objs..known_objs + n_objs).collect();
        known_attrs += n_attrs;
        known_objs += n_objs;
        let needed = n_train + n_val + n_test;
        assert!(
            needed >= n_attrs.max(n_objs),
            "shape cannot cover every introduced primitive"
        );

        // Coverage pass: every new attribute and every new object appears in
        // at least one composition of this session.
        let mut comps: Vec<Comp> = Vec::with_capacity(needed);
        let mut covered_objs = vec![false; known_objs];
        for &a in &new_attrs {
            loop {
                let o = rng.gen_range(0..known_objs);
                if used.insert((a, o)) {
                    comps.push((a, o));
                    covered_objs[o] = true;
                    break;
                }
            }
        }
        for &o in &new_objs {
            if covered_objs[o] {
                continue;
            }
            loop {
                let a = rng.gen_range(0..known_attrs);
                if used.insert((a, o)) {
                    comps.push((a, o));
                    break;
                }
            }
        }

        // Fill pass.
        let remaining = needed - comps.len();
        let grid = known_attrs * known_objs;
        if grid <= 1 << 15 {
            let mut free: Vec<Comp> = (0..known_attrs)
                .flat_map(|a| (0..known_objs).map(move |o| (a, o)))
                .filter(|c| !used.contains(c))
                .collect();
            assert!(free.len() >= remaining, "shape exceeds the available grid");
            free.shuffle(&mut rng);
            for &c in free.iter().take(remaining) {
                used.insert(c);
                comps.push(c);
            }
        } else {
            let mut filled = 0usize;
            while filled < remaining {
                let c = (rng.gen_range(0..known_attrs), rng.gen_range(0..known_objs));
                if used.insert(c) {
                    comps.push(c);
                    filled += 1;
                }
            }
        }

        comps.shuffle(&mut rng);
        let name_pair = |&(a, o): &Comp| (attr_name(a), obj_name(o));
        sessions.push(SplitFileSession {
            counts: DeclaredCounts {
                attrs: n_attrs,
                objs: n_objs,
                train: n_train,
                val: n_val,
                test: n_test,
            },
            attrs: new_attrs.iter().map(|&a| attr_name(a)).collect(),
            objs: new_objs.iter().map(|&o| obj_name(o)).collect(),
            seen: comps[..n_train].iter().map(name_pair).collect(),
            val: comps[n_train..n_train + n_val].iter().map(name_pair).collect(),
            unseen: comps[n_train + n_val..].iter().map(name_pair).collect(),
        });
    }
    let _ = total_objs;
    SplitFile { dataset: dataset.name().to_string(), sessions }
}
