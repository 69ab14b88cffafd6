use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "a")]
    Audio,
    #[serde(rename = "v")]
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn key(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Audio => "a",
            Modality::Visual => "v",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "t" | "text" => Ok(Modality::Text),
            "a" | "audio" => Ok(Modality::Audio),
            "v" | "visual" => Ok(Modality::Visual),
            other => Err(Error::config(
                "modalities",
                format!("unknown modality `{other}`"),
            )),
        }
    }
}

/// One value per modality, serialized as `{"t": .., "a": .., "v": ..}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub t: T,
    pub a: T,
    pub v: T,
}

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        PerModality {
            t: f(Modality::Text),
            a: f(Modality::Audio),
            v: f(Modality::Visual),
        }
    }

    pub fn splat(value: T) -> Self
    where
        T: Clone,
    {
        PerModality {
            t: value.clone(),
            a: value.clone(),
            v: value,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality::from_fn(|m| f(m, &self[m]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        Modality::ALL.into_iter().map(move |m| (m, &self[m]))
    }
}

impl<T> Index<Modality> for PerModality<T> {
    type Output = T;

    fn index(&self, m: Modality) -> &T {
        match m {
            Modality::Text => &self.t,
            Modality::Audio => &self.a,
            Modality::Visual => &self.v,
        }
    }
}

impl<T> IndexMut<Modality> for PerModality<T> {
    fn index_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Text => &mut self.t,
            Modality::Audio => &mut self.a,
            Modality::Visual => &mut self.v,
        }
    }
}

/// A nonempty subset of modalities, kept in canonical `t, a, v` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet([bool; 3]);

impl ModalitySet {
    pub const FULL: ModalitySet = ModalitySet([true; 3]);

    pub fn new(members: &[Modality]) -> Result<Self> {
        let mut flags = [false; 3];
        for m in members {
            flags[m.index()] = true;
        }
        if !flags.iter().any(|&f| f) {
            return Err(Error::config("modalities", "subset must not be empty"));
        }
        Ok(ModalitySet(flags))
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.contains(*m))
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_subset_of(&self, other: &ModalitySet) -> bool {
        self.iter().all(|m| other.contains(m))
    }

    /// Compact label such as `ta`.
    pub fn label(&self) -> String {
        self.iter().map(Modality::key).collect()
    }
}

impl Default for ModalitySet {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let keys: Vec<_> = self.iter().map(Modality::key).collect();
        f.write_str(&keys.join(","))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let members = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Modality>>>()?;
        ModalitySet::new(&members)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
