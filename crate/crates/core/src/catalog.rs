//! Knowledge-unit catalog.
//!
//! The default catalog ships as `data/python_kus.json` and holds the 20
//! Python knowledge units with their capabilities. Capability ids are dense
//! `C1..Cn` within each unit. The Data Structure unit lists seven
//! capabilities whose last three were all labelled `C5` in the source table;
//! they are numbered `C5`, `C6`, `C7` here. The unlabelled third OOP
//! capability is `C3`.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const EMBEDDED_CATALOG: &str = include_str!("../data/python_kus.json");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("failed to read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("catalog record {index} ({id}): {reason}")]
    Schema { index: usize, id: String, reason: String },
    #[error("unknown knowledge unit `{0}`")]
    UnknownKu(String),
    #[error("invalid knowledge-unit id `{0}` (expected K<number>)")]
    InvalidId(String),
}

/// Identifier of a knowledge unit, `K1`, `K2`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KuId(u16);

impl KuId {
    pub fn new(number: u16) -> Result<Self, CatalogError> {
        if number == 0 {
            return Err(CatalogError::InvalidId(format!("K{number}")));
        }
        Ok(Self(number))
    }

    pub fn number(&self) -> u16 {
        self.0
    }
}

impl fmt::Display for KuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K{}", self.0)
    }
}

impl FromStr for KuId {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let digits = trimmed
            .strip_prefix('K')
            .or_else(|| trimmed.strip_prefix('k'))
            .ok_or_else(|| CatalogError::InvalidId(s.to_string()))?;
        let n: u16 = digits.parse().map_err(|_| CatalogError::InvalidId(s.to_string()))?;
        KuId::new(n).map_err(|_| CatalogError::InvalidId(s.to_string()))
    }
}

impl Serialize for KuId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KuId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capability {
    pub id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeUnit {
    pub id: KuId,
    pub name: String,
    pub definition: String,
    pub capabilities: Vec<Capability>,
    /// Alternative spellings accepted when matching model output.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CatalogDocument {
    version: String,
    language: String,
    units: Vec<serde_json::Value>,
}

/// An ordered, validated set of knowledge units.
///
/// Immutable after construction; position `i` in the catalog is the vector
/// index of unit `K{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    version: String,
    language: String,
    units: Vec<KnowledgeUnit>,
}

impl Catalog {
    /// The embedded 20-unit Python catalog.
    pub fn embedded() -> Self {
        Self::from_json(EMBEDDED_CATALOG).expect("embedded catalog is valid")
    }

    /// Loads `path` if given, otherwise the embedded default.
    pub fn load(path: Option<&Path>) -> Result<Self, CatalogError> {
        match path {
            None => Ok(Self::embedded()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| CatalogError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::from_json(&text)
            }
        }
    }

    /// Parses either a versioned catalog document or a bare array of units.
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let (version, language, records) = match value {
            serde_json::Value::Array(records) => ("custom".to_string(), "python".to_string(), records),
            other => {
                let doc: CatalogDocument = serde_json::from_value(other)?;
                (doc.version, doc.language, doc.units)
            }
        };
        let mut units = Vec::with_capacity(records.len());
        for (index, record) in records.into_iter().enumerate() {
            let id = record
                .get("id")
                .and_then(|v| v.as_str())
                .unwrap_or("<missing id>")
                .to_string();
            let unit: KnowledgeUnit = serde_json::from_value(record).map_err(|e| CatalogError::Schema {
                index,
                id: id.clone(),
                reason: e.to_string(),
            })?;
            units.push(unit);
        }
        let catalog = Self {
            version,
            language,
            units,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    fn validate(&self) -> Result<(), CatalogError> {
        if self.units.is_empty() {
            return Err(CatalogError::Schema {
                index: 0,
                id: "<none>".into(),
                reason: "catalog has no units".into(),
            });
        }
        for (index, unit) in self.units.iter().enumerate() {
            let schema = |reason: String| CatalogError::Schema {
                index,
                id: unit.id.to_string(),
                reason,
            };
            if usize::from(unit.id.number()) != index + 1 {
                return Err(schema(format!("ids must be dense, expected K{}", index + 1)));
            }
            if unit.name.trim().is_empty() {
                return Err(schema("empty name".into()));
            }
            if unit.capabilities.is_empty() {
                return Err(schema("unit has no capabilities".into()));
            }
            let mut seen = HashSet::new();
            for cap in &unit.capabilities {
                if !seen.insert(cap.id.as_str()) {
                    return Err(schema(format!("duplicate capability id {}", cap.id)));
                }
            }
        }
        Ok(())
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn units(&self) -> &[KnowledgeUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Zero-based vector index of `id`.
    pub fn ku_index(&self, id: &KuId) -> Result<usize, CatalogError> {
        let idx = usize::from(id.number()) - 1;
        if idx < self.units.len() {
            Ok(idx)
        } else {
            Err(CatalogError::UnknownKu(id.to_string()))
        }
    }

    /// Inverse of [`Catalog::ku_index`].
    pub fn id_at(&self, index: usize) -> Option<&KuId> {
        self.units.get(index).map(|u| &u.id)
    }

    pub fn get(&self, id: &KuId) -> Result<&KnowledgeUnit, CatalogError> {
        Ok(&self.units[self.ku_index(id)?])
    }

    /// Resolves a unit by id (`K9`) or by name, case- and
    /// whitespace-insensitively, also accepting aliases and plural forms.
    pub fn find(&self, key: &str) -> Option<&KnowledgeUnit> {
        if let Ok(id) = key.parse::<KuId>() {
            if let Ok(unit) = self.get(&id) {
                return Some(unit);
            }
        }
        let wanted = normalize_name(key);
        if wanted.is_empty() {
            return None;
        }
        self.units
            .iter()
            .find(|u| normalize_name(&u.name) == wanted || u.aliases.iter().any(|a| normalize_name(a) == wanted))
    }

    pub fn to_json(&self) -> String {
        let doc = CatalogDocument {
            version: self.version.clone(),
            language: self.language.clone(),
            units: self
                .units
                .iter()
                .map(|u| serde_json::to_value(u).expect("unit serializes"))
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("catalog serializes");
        s.push('\n');
        s
    }
}

/// Lowercases, maps punctuation to spaces, collapses whitespace and drops a
/// trailing plural `s` from every word.
pub fn normalize_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .map(|w| {
            if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") {
                &w[..w.len() - 1]
            } else {
                w
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(n: u16) -> KuId {
        KuId::new(n).unwrap()
    }

    #[test]
    fn embedded_catalog_has_twenty_units() {
        let cat = Catalog::load(None).unwrap();
        assert_eq!(cat.len(), 20);
        assert_eq!(cat.units()[0].id, k(1));
        assert_eq!(cat.units()[0].name, "Variable");
    }

    #[test]
    fn concurrency_has_four_capabilities() {
        let cat = Catalog::embedded();
        let unit = cat.get(&k(16)).unwrap();
        assert_eq!(unit.name, "Concurrency");
        let ids: Vec<_> = unit.capabilities.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["C1", "C2", "C3", "C4"]);
        assert!(unit.capabilities[0]
            .description
            .starts_with("Manage concurrent tasks using"));
    }

    #[test]
    fn data_structure_capabilities_are_renumbered() {
        let cat = Catalog::embedded();
        let unit = cat.get(&k(7)).unwrap();
        let ids: Vec<_> = unit.capabilities.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["C1", "C2", "C3", "C4", "C5", "C6", "C7"]);
    }

    #[test]
    fn custom_file_pass_through() {
        let text = r#"[
            {"id":"K1","name":"A","definition":"a","capabilities":[{"id":"C1","description":"x"}]},
            {"id":"K2","name":"B","definition":"b","capabilities":[{"id":"C1","description":"y"}]}
        ]"#;
        let cat = Catalog::from_json(text).unwrap();
        assert_eq!(cat.len(), 2);
    }

    #[test]
    fn malformed_record_is_named() {
        let text = r#"[
            {"id":"K1","name":"A","definition":"a","capabilities":[{"id":"C1","description":"x"}]},
            {"id":"K2","name":"B","capabilities":[]}
        ]"#;
        let err = Catalog::from_json(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 1") && msg.contains("K2"), "{msg}");
    }

    #[test]
    fn duplicate_capability_rejected() {
        let text = r#"[{"id":"K1","name":"A","definition":"a","capabilities":[
            {"id":"C1","description":"x"},{"id":"C1","description":"y"}]}]"#;
        assert!(matches!(Catalog::from_json(text), Err(CatalogError::Schema { .. })));
    }

    #[test]
    fn ku_index_bounds() {
        let cat = Catalog::embedded();
        assert_eq!(cat.ku_index(&k(1)).unwrap(), 0);
        assert_eq!(cat.ku_index(&k(20)).unwrap(), 19);
        assert!(matches!(cat.ku_index(&k(99)), Err(CatalogError::UnknownKu(_))));
        for i in 0..cat.len() {
            assert_eq!(cat.ku_index(cat.id_at(i).unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn serialization_is_byte_identical() {
        let cat = Catalog::embedded();
        assert_eq!(cat.to_json(), EMBEDDED_CATALOG);
        assert_eq!(Catalog::from_json(&cat.to_json()).unwrap(), cat);
    }

    #[test]
    fn find_by_name_alias_and_id() {
        let cat = Catalog::embedded();
        assert_eq!(cat.find("  concurrency ").unwrap().id, k(16));
        assert_eq!(cat.find("Object Oriented Programming").unwrap().id, k(9));
        assert_eq!(cat.find("OOP").unwrap().id, k(9));
        assert_eq!(cat.find("Variables").unwrap().id, k(1));
        assert_eq!(cat.find("context manager").unwrap().id, k(14));
        assert_eq!(cat.find("List Comprehension").unwrap().id, k(15));
        assert_eq!(cat.find("K12").unwrap().id, k(12));
        assert!(cat.find("Quantum Teleportation").is_none());
    }

    #[test]
    fn ku_id_parsing() {
        assert_eq!("K3".parse::<KuId>().unwrap(), k(3));
        assert!("X3".parse::<KuId>().is_err());
        assert!("K0".parse::<KuId>().is_err());
    }
}
