//! Nuclear species constants for GaAs and their Larmor frequencies.
//!
//! Every frequency here is an ordinary frequency in Hz. Hyperfine constants
//! `A` are the material (whole-ensemble) constants; the single-nucleus
//! constant of a species is `A / N_species`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Hyperfine constant of 75As (ordinary frequency).
pub const A_AS75_HZ: f64 = 10.39e9;
/// Hyperfine constant of 69Ga, scaled from As with the literature ratio 36.9/43.5.
pub const A_GA69_HZ: f64 = 10.39e9 * 36.9 / 43.5;
/// Hyperfine constant of 71Ga, scaled from As with the literature ratio 46.9/43.5.
pub const A_GA71_HZ: f64 = 10.39e9 * 46.9 / 43.5;

pub const GAMMA_AS75_HZ_PER_T: f64 = 7.3150e6;
pub const GAMMA_GA69_HZ_PER_T: f64 = 10.2478e6;
pub const GAMMA_GA71_HZ_PER_T: f64 = 13.0208e6;

pub const ABUNDANCE_GA69: f64 = 0.604;
pub const ABUNDANCE_GA71: f64 = 0.396;

/// Calibrated cryostat field, tesla.
pub const DEFAULT_FIELD_T: f64 = 6.10620;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuclearSpecies {
    pub name: String,
    pub spin: f64,
    #[serde(rename = "hyperfine_A_hz")]
    pub hyperfine_a: f64,
    #[serde(rename = "gyromagnetic_hz_per_t")]
    pub gyromagnetic_ratio: f64,
    #[serde(rename = "abundance")]
    pub abundance_c: f64,
}

impl NuclearSpecies {
    pub fn new(name: &str, spin: f64, hyperfine_a: f64, gyromagnetic_ratio: f64, abundance_c: f64) -> Self {
        Self {
            name: name.to_string(),
            spin,
            hyperfine_a,
            gyromagnetic_ratio,
            abundance_c,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure(!self.name.is_empty(), || "species name must not be empty".into())?;
        ensure(self.spin > 0.0 && (2.0 * self.spin).fract() == 0.0, || {
            format!("{}: spin {} is not a positive half-integer", self.name, self.spin)
        })?;
        ensure(self.hyperfine_a > 0.0 && self.hyperfine_a.is_finite(), || {
            format!("{}: hyperfine constant must be positive", self.name)
        })?;
        ensure(self.gyromagnetic_ratio > 0.0 && self.gyromagnetic_ratio.is_finite(), || {
            format!("{}: gyromagnetic ratio must be positive", self.name)
        })?;
        ensure((0.0..=1.0).contains(&self.abundance_c), || {
            format!("{}: abundance {} outside [0, 1]", self.name, self.abundance_c)
        })
    }

    /// Larmor frequency at field `field_t`.
    pub fn larmor(&self, field_t: f64) -> Result<f64> {
        larmor_frequency(self, field_t)
    }
}

/// Returns `gamma * B` in Hz. Rejects non-positive fields.
pub fn larmor_frequency(species: &NuclearSpecies, field_t: f64) -> Result<f64> {
    if !(field_t > 0.0) || !field_t.is_finite() {
        return Err(Error::InvalidInput(format!(
            "magnetic field must be positive, got {field_t} T"
        )));
    }
    Ok(species.gyromagnetic_ratio * field_t)
}

/// Ordered set of species sharing one external field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeciesRegistry {
    species: Vec<NuclearSpecies>,
    field_t: f64,
}

#[derive(Deserialize)]
struct RegistryDoc {
    species: Vec<NuclearSpecies>,
    field_t: f64,
}

impl SpeciesRegistry {
    pub fn new(species: Vec<NuclearSpecies>, field_t: f64) -> Result<Self> {
        ensure(field_t > 0.0 && field_t.is_finite(), || {
            format!("magnetic field must be positive, got {field_t} T")
        })?;
        ensure(!species.is_empty(), || "registry needs at least one species".into())?;
        for (i, s) in species.iter().enumerate() {
            s.validate()?;
            if species[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::InvalidInput(format!("duplicate species name {}", s.name)));
            }
        }
        Ok(Self { species, field_t })
    }

    pub fn species(&self) -> &[NuclearSpecies] {
        &self.species
    }

    pub fn field_t(&self) -> f64 {
        self.field_t
    }

    pub fn get(&self, name: &str) -> Option<&NuclearSpecies> {
        self.species.iter().find(|s| s.name == name)
    }

    pub fn with_field(&self, field_t: f64) -> Result<Self> {
        Self::new(self.species.clone(), field_t)
    }

    /// Larmor frequencies in registry order.
    pub fn larmor_frequencies(&self) -> Vec<f64> {
        self.species
            .iter()
            .map(|s| s.gyromagnetic_ratio * self.field_t)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RegistryDoc = serde_json::from_str(text)?;
        Self::new(doc.species, doc.field_t)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

impl Default for SpeciesRegistry {
    fn default() -> Self {
        default_registry()
    }
}

/// 75As, 69Ga and 71Ga at the calibrated 6.10620 T field.
pub fn default_registry() -> SpeciesRegistry {
    SpeciesRegistry {
        species: vec![
            NuclearSpecies::new("75As", 1.5, A_AS75_HZ, GAMMA_AS75_HZ_PER_T, 1.0),
            NuclearSpecies::new("69Ga", 1.5, A_GA69_HZ, GAMMA_GA69_HZ_PER_T, ABUNDANCE_GA69),
            NuclearSpecies::new("71Ga", 1.5, A_GA71_HZ, GAMMA_GA71_HZ_PER_T, ABUNDANCE_GA71),
        ],
        field_t: DEFAULT_FIELD_T,
    }
}
