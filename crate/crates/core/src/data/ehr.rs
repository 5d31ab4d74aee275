//! Structured clinical fields: a text rendering and a masked feature vector.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FIELDS: [&str; 9] = [
    "gender",
    "age",
    "weight",
    "tobacco",
    "alcohol",
    "hpv",
    "performance_status",
    "surgery",
    "chemotherapy",
];

/// Length of [`EhrRecord::features`].
pub const EHR_FEATURE_DIM: usize = 28;

const AGE_MEAN: f64 = 61.0;
const AGE_SD: f64 = 9.0;
const WEIGHT_MEAN: f64 = 80.0;
const WEIGHT_SD: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

/// Every field is optional; absent fields are never imputed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EhrRecord {
    pub gender: Option<Gender>,
    pub age: Option<f64>,
    pub weight: Option<f64>,
    pub tobacco: Option<bool>,
    pub alcohol: Option<bool>,
    pub hpv_positive: Option<bool>,
    pub performance_status: Option<u8>,
    pub surgery: Option<bool>,
    pub chemotherapy: Option<bool>,
}

fn missing(v: &str) -> bool {
    matches!(v.trim().to_ascii_lowercase().as_str(), "" | "na" | "n/a" | "missing" | "unknown")
}

fn parse_bool(field: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" | "1" | "user" | "positive" => Ok(true),
        "no" | "n" | "false" | "0" | "non-user" | "negative" => Ok(false),
        other => Err(Error::Data(format!("field `{field}`: cannot read `{other}` as yes/no"))),
    }
}

fn parse_num(field: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("field `{field}`: `{v}` is not a number")))?;
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Data(format!("field `{field}`: {x} out of range")));
    }
    Ok(x)
}

impl EhrRecord {
    /// Builds a record from `name -> value` text pairs. Unknown names are an
    /// error; values such as `""` or `"NA"` mean the field is missing.
    pub fn from_fields(fields: &BTreeMap<String, String>) -> Result<Self> {
        let mut r = EhrRecord::default();
        for (name, value) in fields {
            let key = name.trim().to_ascii_lowercase();
            if !FIELDS.contains(&key.as_str()) && key != "hpv_status" {
                return Err(Error::invalid(format!("unknown EHR field `{name}`")));
            }
            if missing(value) {
                continue;
            }
            match key.as_str() {
                "gender" => {
                    r.gender = Some(match value.trim().to_ascii_lowercase().as_str() {
                        "female" | "f" => Gender::Female,
                        "male" | "m" => Gender::Male,
                        other => return Err(Error::Data(format!("field `gender`: `{other}`"))),
                    })
                }
                "age" => r.age = Some(parse_num(&key, value)?),
                "weight" => r.weight = Some(parse_num(&key, value)?),
                "tobacco" => r.tobacco = Some(parse_bool(&key, value)?),
                "alcohol" => r.alcohol = Some(parse_bool(&key, value)?),
                "hpv" | "hpv_status" => r.hpv_positive = Some(parse_bool(&key, value)?),
                "performance_status" => {
                    let ps = parse_num(&key, value)?;
                    if ps.fract() != 0.0 || ps > 4.0 {
                        return Err(Error::Data(format!("performance status {ps} outside 0..=4")));
                    }
                    r.performance_status = Some(ps as u8);
                }
                "surgery" => r.surgery = Some(parse_bool(&key, value)?),
                "chemotherapy" => r.chemotherapy = Some(parse_bool(&key, value)?),
                _ => unreachable!(),
            }
        }
        Ok(r)
    }

    /// One sentence describing the present fields, in a fixed clause order.
    pub fn sentence(&self) -> String {
        let mut s = String::from("This is a ");
        match self.gender {
            Some(Gender::Female) => s.push_str("female "),
            Some(Gender::Male) => s.push_str("male "),
            None => {}
        }
        s.push_str("head-and-neck cancer patient");

        let mut clauses: Vec<String> = Vec::new();
        if let Some(a) = self.age {
            clauses.push(format!("{a} years old"));
        }
        if let Some(w) = self.weight {
            clauses.push(format!("weighing {w} kg"));
        }
        if let Some(t) = self.tobacco {
            clauses.push(if t { "tobacco user" } else { "non-tobacco user" }.into());
        }
        if let Some(a) = self.alcohol {
            clauses.push(if a { "alcohol user" } else { "non-alcohol user" }.into());
        }
        if let Some(h) = self.hpv_positive {
            clauses.push(if h { "HPV positive" } else { "HPV negative" }.into());
        }
        if let Some(ps) = self.performance_status {
            clauses.push(format!("with performance status {ps}"));
        }
        if let Some(su) = self.surgery {
            clauses.push(if su { "who underwent surgery" } else { "who did not undergo surgery" }.into());
        }
        if let Some(c) = self.chemotherapy {
            let verb = if c { "received chemotherapy" } else { "did not receive chemotherapy" };
            if clauses.is_empty() {
                clauses.push(verb.into());
            } else {
                clauses.push(format!("and {verb}"));
            }
        }
        for c in clauses {
            s.push_str(", ");
            s.push_str(&c);
        }
        s.push('.');
        s
    }

    /// Masked encoding: every field contributes a presence flag followed by
    /// its one-hot block (categoricals) or standardised value (age, weight).
    pub fn features(&self) -> Vec<f32> {
        let mut f = Vec::with_capacity(EHR_FEATURE_DIM);
        let onehot = |present: Option<usize>, width: usize, f: &mut Vec<f32>| {
            f.push(present.is_some() as u8 as f32);
            for k in 0..width {
                f.push((present == Some(k)) as u8 as f32);
            }
        };
        onehot(self.gender.map(|g| g as usize), 2, &mut f);
        for (v, mean, sd) in [(self.age, AGE_MEAN, AGE_SD), (self.weight, WEIGHT_MEAN, WEIGHT_SD)] {
            f.push(v.is_some() as u8 as f32);
            f.push(v.map_or(0.0, |x| ((x - mean) / sd) as f32));
        }
        // yes -> slot 0, no -> slot 1
        let yn = |b: Option<bool>| b.map(|b| if b { 0 } else { 1 });
        onehot(yn(self.tobacco), 2, &mut f);
        onehot(yn(self.alcohol), 2, &mut f);
        onehot(yn(self.hpv_positive), 2, &mut f);
        onehot(yn(self.surgery), 2, &mut f);
        onehot(yn(self.chemotherapy), 2, &mut f);
        onehot(self.performance_status.map(usize::from), 5, &mut f);
        debug_assert_eq!(f.len(), EHR_FEATURE_DIM);
        f
    }

    /// Feature index range owned by `field`.
    pub fn feature_block(field: &str) -> Option<std::ops::Range<usize>> {
        let r = match field {
            "gender" => 0..3,
            "age" => 3..5,
            "weight" => 5..7,
            "tobacco" => 7..10,
            "alcohol" => 10..13,
            "hpv" => 13..16,
            "surgery" => 16..19,
            "chemotherapy" => 19..22,
            "performance_status" => 22..28,
            _ => return None,
        };
        Some(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn reference_sentence() {
        let r = EhrRecord::from_fields(&fields(&[
            ("gender", "female"),
            ("age", "62"),
            ("weight", "84"),
            ("tobacco", "yes"),
            ("alcohol", "yes"),
            ("hpv", "positive"),
            ("surgery", "yes"),
            ("chemotherapy", "yes"),
        ]))
        .unwrap();
        assert_eq!(
            r.sentence(),
            "This is a female head-and-neck cancer patient, 62 years old, weighing 84 kg, \
             tobacco user, alcohol user, HPV positive, who underwent surgery, and received chemotherapy."
        );
    }

    #[test]
    fn all_missing() {
        let r = EhrRecord::from_fields(&fields(&[("age", ""), ("hpv", "NA")])).unwrap();
        assert_eq!(r.sentence(), "This is a head-and-neck cancer patient.");
        assert_eq!(r.features(), vec![0.0; EHR_FEATURE_DIM]);
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(matches!(
            EhrRecord::from_fields(&fields(&[("blood_type", "A")])),
            Err(Error::Invalid(_))
        ));
        assert!(EhrRecord::from_fields(&fields(&[("age", "old")])).is_err());
    }

    #[test]
    fn missing_field_only_touches_its_block() {
        let full = EhrRecord {
            gender: Some(Gender::Male),
            age: Some(70.0),
            weight: Some(65.0),
            tobacco: Some(true),
            alcohol: Some(false),
            hpv_positive: Some(false),
            performance_status: Some(1),
            surgery: Some(false),
            chemotherapy: Some(true),
        };
        let full_f = full.features();
        for field in ["gender", "age", "weight", "tobacco", "alcohol", "hpv", "surgery", "chemotherapy", "performance_status"] {
            let mut r = full.clone();
            match field {
                "gender" => r.gender = None,
                "age" => r.age = None,
                "weight" => r.weight = None,
                "tobacco" => r.tobacco = None,
                "alcohol" => r.alcohol = None,
                "hpv" => r.hpv_positive = None,
                "surgery" => r.surgery = None,
                "chemotherapy" => r.chemotherapy = None,
                _ => r.performance_status = None,
            }
            let f = r.features();
            let block = EhrRecord::feature_block(field).unwrap();
            for i in 0..EHR_FEATURE_DIM {
                if block.contains(&i) {
                    assert_eq!(f[i], 0.0, "{field} slot {i}");
                } else {
                    assert_eq!(f[i], full_f[i], "{field} leaked into slot {i}");
                }
            }
            assert_ne!(f, full_f);
        }
    }
}
