//! Versioned corruption catalog: name → group, default-pool exclusion and
//! five severity parameter tuples. The built-in catalog is compiled in from
//! `catalog.toml`; alternative catalogs can be parsed from text.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CATALOG_VERSION: u32 = 1;
pub const SEVERITY_LEVELS: usize = 5;
const BUILTIN: &str = include_str!("catalog.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Noise,
    Blur,
    Digital,
    Fourier,
    Weather,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Group::Noise => "Noise",
            Group::Blur => "Blur",
            Group::Digital => "Digital",
            Group::Fourier => "Fourier",
            Group::Weather => "Weather",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub group: Group,
    pub excluded: bool,
    pub params: Vec<String>,
    pub severity: Vec<Vec<f64>>,
}

impl CatalogEntry {
    /// Parameter tuple for a severity in `1..=5`.
    pub fn params_for(&self, severity: u8) -> Result<&[f64]> {
        if !(1..=SEVERITY_LEVELS as u8).contains(&severity) {
            return Err(Error::InvalidSeverity(severity));
        }
        Ok(&self.severity[severity as usize - 1])
    }

    pub fn param(&self, severity: u8, key: &str) -> Result<f64> {
        let idx = self
            .params
            .iter()
            .position(|p| p == key)
            .ok_or_else(|| Error::Config(format!("{} has no parameter `{key}`", self.name)))?;
        Ok(self.params_for(severity)?[idx])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    #[serde(rename = "corruption")]
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn parse(text: &str) -> Result<Self> {
        let catalog: Catalog =
            toml::from_str(text).map_err(|e| Error::Config(format!("catalog: {e}")))?;
        catalog.validate()?;
        Ok(catalog)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate catalog entry {}", e.name)));
            }
            if e.name == super::IDENTITY {
                return Err(Error::Config("`identity` is reserved".into()));
            }
            if e.severity.len() != SEVERITY_LEVELS {
                return Err(Error::Config(format!(
                    "{} lists {} severities",
                    e.name,
                    e.severity.len()
                )));
            }
            if e.severity.iter().any(|t| t.len() != e.params.len()) {
                return Err(Error::Config(format!("{} has ragged parameter tuples", e.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("catalog serializes")
    }
}

/// The compiled-in catalog.
pub fn builtin() -> &'static Catalog {
    static CATALOG: OnceLock<Catalog> = OnceLock::new();
    CATALOG.get_or_init(|| Catalog::parse(BUILTIN).expect("built-in catalog is valid"))
}
