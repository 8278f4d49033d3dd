//! Relation and entity-type vocabularies plus the type-pair compatibility mask.
//!
//! Compatibility is read from MNRE-style relation names (`/per/org/member_of`
//! declares head type `per` and tail type `org`) unless an explicit entry list
//! overrides it. Deriving types from the name prefix is a convention, not
//! something the benchmark documents.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the catch-all relation that is compatible with every type pair.
pub const NONE_RELATION: &str = "None";

/// One explicit `(relation, head type, tail type)` compatibility entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatEntry {
    pub relation: String,
    pub head: String,
    pub tail: String,
}

/// On-disk schema layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaFile {
    pub relations: Vec<String>,
    pub entity_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compat: Option<Vec<CompatEntry>>,
}

/// Boolean tensor indexed `[head type][tail type][relation]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompatMask {
    n_types: usize,
    n_relations: usize,
    bits: Vec<bool>,
}

impl CompatMask {
    pub fn new(n_types: usize, n_relations: usize) -> Self {
        Self { n_types, n_relations, bits: vec![false; n_types * n_types * n_relations] }
    }

    #[inline]
    fn idx(&self, head: usize, tail: usize, rel: usize) -> usize {
        (head * self.n_types + tail) * self.n_relations + rel
    }

    pub fn get(&self, head: usize, tail: usize, rel: usize) -> bool {
        self.bits[self.idx(head, tail, rel)]
    }

    pub fn set(&mut self, head: usize, tail: usize, rel: usize, v: bool) {
        let i = self.idx(head, tail, rel);
        self.bits[i] = v;
    }

    /// The relation row for one type pair.
    pub fn pair(&self, head: usize, tail: usize) -> &[bool] {
        let start = self.idx(head, tail, 0);
        &self.bits[start..start + self.n_relations]
    }
}

/// Splits `/head/tail/name` into its two type prefixes.
pub fn parse_relation_types(name: &str) -> Option<(&str, &str)> {
    let mut parts = name.split('/').filter(|p| !p.is_empty());
    let head = parts.next()?;
    let tail = parts.next()?;
    parts.next()?;
    Some((head, tail))
}

/// Builds the compatibility mask. Relations listed in `overrides` take their
/// type pairs from there; every other relation must carry type prefixes.
pub fn build_compat_mask(
    relations: &[String],
    entity_types: &[String],
    overrides: &[CompatEntry],
) -> Result<CompatMask> {
    let type_ids: HashMap<&str, usize> =
        entity_types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let rel_ids: HashMap<&str, usize> =
        relations.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let lookup_type = |name: &str| {
        type_ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName { line: 0, kind: "entity type", name: name.to_string() })
    };

    let mut mask = CompatMask::new(entity_types.len(), relations.len());
    let mut overridden = vec![false; relations.len()];
    for entry in overrides {
        let r = *rel_ids.get(entry.relation.as_str()).ok_or_else(|| Error::UnknownName {
            line: 0,
            kind: "relation",
            name: entry.relation.clone(),
        })?;
        mask.set(lookup_type(&entry.head)?, lookup_type(&entry.tail)?, r, true);
        overridden[r] = true;
    }

    for (r, name) in relations.iter().enumerate() {
        if name == NONE_RELATION {
            for h in 0..entity_types.len() {
                for t in 0..entity_types.len() {
                    mask.set(h, t, r, true);
                }
            }
            continue;
        }
        if overridden[r] {
            continue;
        }
        let (h, t) = parse_relation_types(name).ok_or_else(|| Error::UnparseableRelation(name.clone()))?;
        match (type_ids.get(h), type_ids.get(t)) {
            (Some(&h), Some(&t)) => mask.set(h, t, r, true),
            _ => return Err(Error::UnparseableRelation(name.clone())),
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSchema {
    relations: Vec<String>,
    entity_types: Vec<String>,
    none_id: usize,
    compat: CompatMask,
}

impl RelationSchema {
    pub fn new(relations: Vec<String>, entity_types: Vec<String>, overrides: &[CompatEntry]) -> Result<Self> {
        let none_id = relations
            .iter()
            .position(|r| r == NONE_RELATION)
            .ok_or_else(|| Error::InvalidInput(format!("relation list must contain `{NONE_RELATION}`")))?;
        if entity_types.is_empty() {
            return Err(Error::InvalidInput("entity type list is empty".into()));
        }
        for (i, r) in relations.iter().enumerate() {
            if relations[..i].contains(r) {
                return Err(Error::InvalidInput(format!("duplicate relation `{r}`")));
            }
        }
        let compat = build_compat_mask(&relations, &entity_types, overrides)?;
        Ok(Self { relations, entity_types, none_id, compat })
    }

    pub fn from_file(file: SchemaFile) -> Result<Self> {
        Self::new(file.relations, file.entity_types, file.compat.as_deref().unwrap_or(&[]))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SchemaFile =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), line: 1, source: e })?;
        Self::from_file(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_file()).expect("schema serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Serializable form with every non-`None` compatibility spelled out.
    pub fn to_file(&self) -> SchemaFile {
        let mut compat = Vec::new();
        for (r, name) in self.relations.iter().enumerate() {
            if r == self.none_id {
                continue;
            }
            for h in 0..self.num_types() {
                for t in 0..self.num_types() {
                    if self.compat.get(h, t, r) {
                        compat.push(CompatEntry {
                            relation: name.clone(),
                            head: self.entity_types[h].clone(),
                            tail: self.entity_types[t].clone(),
                        });
                    }
                }
            }
        }
        SchemaFile { relations: self.relations.clone(), entity_types: self.entity_types.clone(), compat: Some(compat) }
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn none_id(&self) -> usize {
        self.none_id
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn type_id(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name)
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn type_name(&self, id: usize) -> &str {
        &self.entity_types[id]
    }

    pub fn compat(&self) -> &CompatMask {
        &self.compat
    }

    pub fn is_compatible(&self, head: usize, tail: usize, rel: usize) -> bool {
        self.compat.get(head, tail, rel)
    }

    /// Relations allowed for a head/tail type pair.
    pub fn allowed(&self, head: usize, tail: usize) -> &[bool] {
        self.compat.pair(head, tail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn mnre_like() -> RelationSchema {
        RelationSchema::new(
            names(&["None", "/per/org/member_of", "/per/per/peer", "/per/loc/place_of_birth"]),
            names(&["per", "org", "loc", "misc"]),
            &[],
        )
        .unwrap()
    }

    #[test]
    fn prefix_parsing_matches_pairs() {
        let s = mnre_like();
        let (per, org, loc) = (0, 1, 2);
        let member = s.relation_id("/per/org/member_of").unwrap();
        assert!(s.is_compatible(per, org, member));
        assert!(!s.is_compatible(loc, loc, member));
        assert!(!s.is_compatible(org, per, member));
    }

    #[test]
    fn none_is_compatible_everywhere() {
        let s = mnre_like();
        for h in 0..4 {
            for t in 0..4 {
                assert!(s.is_compatible(h, t, s.none_id()));
            }
        }
    }

    #[test]
    fn unparseable_name_without_mapping_fails() {
        let err = RelationSchema::new(names(&["None", "friend"]), names(&["per"]), &[]).unwrap_err();
        assert!(matches!(err, Error::UnparseableRelation(ref n) if n == "friend"));
    }

    #[test]
    fn override_entries_replace_prefix_parsing() {
        let overrides = vec![
            CompatEntry { relation: "friend".into(), head: "per".into(), tail: "per".into() },
            CompatEntry { relation: "friend".into(), head: "per".into(), tail: "org".into() },
        ];
        let s = RelationSchema::new(names(&["None", "friend"]), names(&["per", "org"]), &overrides).unwrap();
        assert!(s.is_compatible(0, 0, 1));
        assert!(s.is_compatible(0, 1, 1));
        assert!(!s.is_compatible(1, 1, 1));
    }

    #[test]
    fn file_round_trip_preserves_mask() {
        let s = mnre_like();
        let back = RelationSchema::from_file(s.to_file()).unwrap();
        assert_eq!(s, back);
    }
}
