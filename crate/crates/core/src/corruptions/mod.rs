//! Corruption catalog used to diversify a single source domain: Noise,
//! Blur, Digital and Fourier groups (plus Weather, kept for ablations), each
//! with five severity levels.
//!
//! Every corruption is a pure function of `(image, spec, seed)`.

mod blur;
pub mod catalog;
mod digital;
pub mod filters;
pub mod fourier;
mod noise;
mod weather;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use catalog::{builtin as builtin_catalog, Catalog, CatalogEntry, Group, SEVERITY_LEVELS};
pub use digital::ELASTIC_MAX_DISPLACEMENT;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

/// Reserved pool member that returns its input unchanged.
pub const IDENTITY: &str = "identity";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub name: String,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(name: impl Into<String>, severity: u8) -> Self {
        Self { name: name.into(), severity }
    }

    pub fn identity() -> Self {
        Self::new(IDENTITY, 1)
    }

    pub fn is_identity(&self) -> bool {
        self.name == IDENTITY
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.severity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogListing {
    pub group: Group,
    pub name: String,
    pub excluded_by_default: bool,
}

/// Full catalog as `(group, name)` pairs with the default-pool exclusion flag.
pub fn list_catalog() -> Vec<CatalogListing> {
    builtin_catalog()
        .entries
        .iter()
        .map(|e| CatalogListing {
            group: e.group,
            name: e.name.clone(),
            excluded_by_default: e.excluded,
        })
        .collect()
}

fn check_severity(severity: u8) -> Result<()> {
    if (1..=SEVERITY_LEVELS as u8).contains(&severity) {
        Ok(())
    } else {
        Err(Error::InvalidSeverity(severity))
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn apply_corruption(img: &ImageTensor, spec: &CorruptionSpec, seed: u64) -> Result<ImageTensor> {
    apply_with_catalog(builtin_catalog(), img, spec, seed)
}

pub fn apply_with_catalog(
    catalog: &Catalog,
    img: &ImageTensor,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<ImageTensor> {
    check_severity(spec.severity)?;
    if spec.is_identity() {
        return Ok(img.clone());
    }
    let entry = catalog
        .get(&spec.name)
        .ok_or_else(|| Error::UnknownCorruption(spec.name.clone()))?;
    let p = entry.params_for(spec.severity)?;
    let mut rng: ChaCha8Rng =
        rng::rng_from(&[seed, name_hash(&spec.name), spec.severity as u64]);
    let rng = &mut rng;
    match entry.name.as_str() {
        "gaussian_noise" => noise::gaussian(img, p[0], rng),
        "shot_noise" => noise::shot(img, p[0], rng),
        "impulse_noise" => noise::impulse(img, p[0], rng),
        "speckle_noise" => noise::speckle(img, p[0], rng),
        "gaussian_blur" => blur::gaussian(img, p[0]),
        "motion_blur" => blur::motion(img, p[0], rng),
        "glass_blur" => blur::glass(img, p[0], p[1] as usize, p[2] as usize, rng),
        "defocus_blur" => blur::defocus(img, p[0], p[1]),
        "zoom_blur" => blur::zoom(img, p[0], p[1]),
        "brightness" => digital::brightness(img, p[0]),
        "contrast" => digital::contrast(img, p[0]),
        "saturate" => digital::saturate(img, p[0], p[1]),
        "jpeg_compression" => digital::jpeg(img, p[0]),
        "pixelate" => digital::pixelate(img, p[0]),
        "elastic_transform" => digital::elastic(img, p[0], p[1], rng),
        "phase_scaling" => fourier::phase_scale(img, p[0]),
        "high_pass_filter" => fourier::high_pass(img, p[0]),
        "constant_amplitude" => fourier::constant_amplitude(img, p[0]),
        "snow" => weather::snow(img, p[0], p[1], p[2], rng),
        "frost" => weather::frost(img, p[0], p[1], rng),
        "fog" => weather::fog(img, p[0], p[1], rng),
        "spatter" => weather::spatter(img, p[0], p[1], rng),
        other => Err(Error::UnknownCorruption(other.to_string())),
    }
}

/// Phase scaling at the catalog's factor for `severity`.
pub fn fourier_phase_scale(img: &ImageTensor, severity: u8) -> Result<ImageTensor> {
    check_severity(severity)?;
    let factor = builtin_catalog()
        .get("phase_scaling")
        .expect("phase_scaling in catalog")
        .param(severity, "phase_factor")?;
    fourier::phase_scale(img, factor)
}

/// High-pass filtering at the catalog's cutoff radius for `severity`.
pub fn fourier_high_pass(img: &ImageTensor, severity: u8) -> Result<ImageTensor> {
    check_severity(severity)?;
    let radius = builtin_catalog()
        .get("high_pass_filter")
        .expect("high_pass_filter in catalog")
        .param(severity, "cutoff_radius")?;
    fourier::high_pass(img, radius)
}

/// The sampling set: ordered names, each with its allowed severities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionPool {
    specs: Vec<String>,
    severity_policy: BTreeMap<String, Vec<u8>>,
}

impl CorruptionPool {
    /// Pool over `names`, every member allowed severities 1..=5.
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let all: Vec<u8> = (1..=SEVERITY_LEVELS as u8).collect();
        let mut specs = Vec::with_capacity(names.len());
        let mut severity_policy = BTreeMap::new();
        for n in names {
            let n = n.as_ref();
            if n != IDENTITY && builtin_catalog().get(n).is_none() {
                return Err(Error::UnknownCorruption(n.to_string()));
            }
            if severity_policy.insert(n.to_string(), all.clone()).is_none() {
                specs.push(n.to_string());
            }
        }
        if specs.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(Self { specs, severity_policy })
    }

    /// Every catalog entry not flagged as excluded.
    pub fn default_pool() -> Self {
        let names: Vec<&str> = builtin_catalog()
            .entries
            .iter()
            .filter(|e| !e.excluded)
            .map(|e| e.name.as_str())
            .collect();
        Self::new(&names).expect("catalog has active entries")
    }

    /// Every catalog entry, including weather and constant amplitude.
    pub fn full_catalog_pool() -> Self {
        let names: Vec<&str> = builtin_catalog().entries.iter().map(|e| e.name.as_str()).collect();
        Self::new(&names).expect("catalog is nonempty")
    }

    pub fn identity() -> Self {
        Self::new(&[IDENTITY]).expect("identity pool")
    }

    /// Restricts one member to the given severities.
    pub fn with_severities(mut self, name: &str, severities: &[u8]) -> Result<Self> {
        if severities.is_empty() {
            return Err(Error::Config(format!("no severities allowed for {name}")));
        }
        for &s in severities {
            check_severity(s)?;
        }
        let slot = self
            .severity_policy
            .get_mut(name)
            .ok_or_else(|| Error::UnknownCorruption(name.to_string()))?;
        *slot = severities.to_vec();
        Ok(self)
    }

    /// Restricts every member to one fixed severity.
    pub fn with_fixed_severity(mut self, severity: u8) -> Result<Self> {
        check_severity(severity)?;
        for v in self.severity_policy.values_mut() {
            *v = vec![severity];
        }
        Ok(self)
    }

    pub fn names(&self) -> &[String] {
        &self.specs
    }

    pub fn severities(&self, name: &str) -> Option<&[u8]> {
        self.severity_policy.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn is_identity_only(&self) -> bool {
        self.specs.iter().all(|n| n == IDENTITY)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.severity_policy.contains_key(name)
    }
}

/// Draws a member uniformly, then one of its allowed severities uniformly.
pub fn sample_spec(pool: &CorruptionPool, rng: &mut impl Rng) -> Result<CorruptionSpec> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let name = &pool.specs[rng.random_range(0..pool.specs.len())];
    let allowed = &pool.severity_policy[name];
    let severity = allowed[rng.random_range(0..allowed.len())];
    Ok(CorruptionSpec::new(name.clone(), severity))
}
