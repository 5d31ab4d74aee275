//! Multi-centre data manifest. See `docs/formats.md` for the schema.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, CenterShift, PhantomSpec};
use super::preprocess::preprocess_intensities;
use super::volume::Case;
use crate::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Adapt,
    Continual,
    /// Survival cohort for the prognosis stage.
    Prognosis,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Adapt => "adapt",
            Split::Continual => "continual",
            Split::Prognosis => "prognosis",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterEntry {
    pub name: String,
    pub split: Split,
    /// First case seed; case `i` uses `seed + i`, training cases first.
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    #[serde(default)]
    pub shift: CenterShift,
}

impl CenterEntry {
    pub fn case_seeds(&self, part: Part) -> Vec<u64> {
        let (start, len) = match part {
            Part::Train => (0, self.train),
            Part::Test => (self.train, self.test),
        };
        (start..start + len).map(|i| self.seed + i as u64).collect()
    }

    pub fn spec(&self, base: &PhantomSpec) -> PhantomSpec {
        PhantomSpec {
            shift: self.shift,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default)]
    pub phantom: PhantomSpec,
    pub centers: Vec<CenterEntry>,
}

impl Manifest {
    /// Eight centres: A-D for pre-training, E for adaptation, F and G for
    /// continual fine-tuning (G noisier and darker than the rest) and a
    /// survival cohort S.
    pub fn desk_default() -> Self {
        let entry = |name: &str, split, seed, train, test, shift| CenterEntry {
            name: name.into(),
            split,
            seed,
            train,
            test,
            shift,
        };
        let plain = CenterShift::default();
        let tilt = |off: f64, noise: f64, size: f64| CenterShift {
            intensity_offset: off,
            noise_scale: noise,
            lesion_size_bias: size,
        };
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            phantom: PhantomSpec::default(),
            centers: vec![
                entry("A", Split::Pretrain, 10_000, 6, 2, plain),
                entry("B", Split::Pretrain, 20_000, 6, 2, tilt(10.0, 1.1, 1.0)),
                entry("C", Split::Pretrain, 30_000, 6, 2, tilt(-10.0, 0.9, 1.05)),
                entry("D", Split::Pretrain, 40_000, 6, 2, tilt(5.0, 1.0, 0.95)),
                entry("E", Split::Adapt, 50_000, 12, 6, tilt(-5.0, 1.05, 1.0)),
                entry("F", Split::Continual, 60_000, 8, 6, tilt(15.0, 1.1, 1.0)),
                entry("G", Split::Continual, 70_000, 8, 6, tilt(-20.0, 1.6, 0.9)),
                entry("S", Split::Prognosis, 80_000, 120, 80, plain),
            ],
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(s).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("manifest: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "manifest schema_version {} (supported: {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.phantom.validate()?;
        let mut names = HashSet::new();
        let mut seen: HashMap<u64, &str> = HashMap::new();
        for c in &self.centers {
            if !names.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("centre `{}` listed twice", c.name)));
            }
            c.spec(&self.phantom).validate()?;
            for s in c.case_seeds(Part::Train).into_iter().chain(c.case_seeds(Part::Test)) {
                if let Some(other) = seen.insert(s, &c.name) {
                    return Err(Error::invalid(format!("case seed {s} used by `{other}` and `{}`", c.name)));
                }
            }
        }
        Ok(())
    }

    pub fn center(&self, name: &str) -> Result<&CenterEntry> {
        self.centers
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::invalid(format!("manifest has no centre `{name}`")))
    }

    pub fn centers_in(&self, split: Split) -> Vec<&CenterEntry> {
        self.centers.iter().filter(|c| c.split == split).collect()
    }

    /// Generates (and optionally preprocesses) one part of a centre.
    pub fn cases(&self, center: &str, part: Part, preprocess: bool) -> Result<Vec<Case>> {
        let c = self.center(center)?;
        let spec = c.spec(&self.phantom);
        c.case_seeds(part)
            .into_iter()
            .map(|seed| {
                let mut case = generate_phantom(seed, &spec, &c.name)?;
                if preprocess {
                    preprocess_intensities(&mut case)?;
                }
                Ok(case)
            })
            .collect()
    }

    pub fn split_cases(&self, split: Split, part: Part, preprocess: bool) -> Result<Vec<Case>> {
        let mut out = Vec::new();
        for c in self.centers_in(split) {
            out.extend(self.cases(&c.name, part, preprocess)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let m = Manifest::desk_default();
        m.validate().unwrap();
        let text = m.to_toml_string().unwrap();
        assert_eq!(Manifest::from_toml_str(&text).unwrap(), m);
        assert_eq!(m.centers_in(Split::Pretrain).len(), 4);
        assert_eq!(m.centers_in(Split::Continual).len(), 2);
    }

    #[test]
    fn overlapping_seeds_are_rejected() {
        let mut m = Manifest::desk_default();
        m.centers[1].seed = m.centers[0].seed + 3;
        assert!(m.validate().is_err());
    }

    #[test]
    fn minimal_toml() {
        let text = r#"
            schema_version = 1
            [phantom]
            side = 32
            [[centers]]
            name = "A"
            split = "pretrain"
            seed = 1
            train = 2
            test = 1
        "#;
        let m = Manifest::from_toml_str(text).unwrap();
        assert_eq!(m.phantom.side, 32);
        assert_eq!(m.center("A").unwrap().case_seeds(Part::Test), vec![3]);
        assert!(Manifest::from_toml_str(&text.replace("schema_version = 1", "schema_version = 2")).is_err());
        assert!(Manifest::from_toml_str(&text.replace("split = \"pretrain\"", "split = \"later\"")).is_err());
    }
}
