use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::study_io::{Availability, SequenceId};

/// Pathology encoder branches. C0 only feeds the anatomy prior network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EncoderId {
    #[serde(rename = "LGE")]
    Lge,
    T2,
    #[serde(rename = "mappings")]
    Mappings,
}

impl EncoderId {
    pub const ALL: [EncoderId; 3] = [EncoderId::Lge, EncoderId::T2, EncoderId::Mappings];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderId::Lge => "LGE",
            EncoderId::T2 => "T2",
            EncoderId::Mappings => "mappings",
        }
    }

    /// Image channels of this branch, in input order.
    pub fn sequences(self) -> &'static [SequenceId] {
        match self {
            EncoderId::Lge => &[SequenceId::Lge],
            EncoderId::T2 => &[SequenceId::T2],
            EncoderId::Mappings => &SequenceId::MAPPINGS,
        }
    }

    pub fn is_available(self, availability: &Availability) -> bool {
        self.sequences().iter().all(|s| availability.contains(*s))
    }
}

impl fmt::Display for EncoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderId::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown encoder '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathology {
    Scar,
    Edema,
}

/// Where a decoder takes its features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DecoderSource {
    /// One encoder's pyramid plus the max-fused pyramid of the others.
    Encoder(EncoderId),
    /// The max over every active encoder, with no own branch.
    Pooled,
}

/// A pathology decoder, e.g. `LGE_scar` or `pooled_edema`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DecoderId {
    pub source: DecoderSource,
    pub target: Pathology,
}

impl DecoderId {
    pub const fn new(encoder: EncoderId, target: Pathology) -> Self {
        DecoderId {
            source: DecoderSource::Encoder(encoder),
            target,
        }
    }

    pub const fn pooled(target: Pathology) -> Self {
        DecoderId {
            source: DecoderSource::Pooled,
            target,
        }
    }

    pub fn encoder(self) -> Option<EncoderId> {
        match self.source {
            DecoderSource::Encoder(e) => Some(e),
            DecoderSource::Pooled => None,
        }
    }
}

impl fmt::Display for DecoderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let src = match self.source {
            DecoderSource::Encoder(e) => e.as_str(),
            DecoderSource::Pooled => "pooled",
        };
        let tgt = match self.target {
            Pathology::Scar => "scar",
            Pathology::Edema => "edema",
        };
        write!(f, "{src}_{tgt}")
    }
}

impl FromStr for DecoderId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown decoder '{s}'"));
        let (src, tgt) = s.rsplit_once('_').ok_or_else(bad)?;
        let target = match tgt.to_ascii_lowercase().as_str() {
            "scar" => Pathology::Scar,
            "edema" => Pathology::Edema,
            _ => return Err(bad()),
        };
        let source = if src.eq_ignore_ascii_case("pooled") {
            DecoderSource::Pooled
        } else {
            DecoderSource::Encoder(src.parse().map_err(|_| bad())?)
        };
        Ok(DecoderId { source, target })
    }
}

impl TryFrom<String> for DecoderId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DecoderId> for String {
    fn from(d: DecoderId) -> String {
        d.to_string()
    }
}

/// Named decoder layouts: the four practical scenarios plus the four
/// alternative decoder sets compared against `F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioName {
    F,
    L,
    M,
    #[serde(rename = "mix")]
    Mix,
    /// One pooled scar decoder and one pooled edema decoder.
    #[serde(rename = "ablation1")]
    Ablation1,
    /// A scar and an edema decoder on every encoder.
    #[serde(rename = "ablation2")]
    Ablation2,
    /// `F` with an extra mappings edema decoder.
    #[serde(rename = "ablation3")]
    Ablation3,
    /// `F` with the mappings scar decoder swapped for an edema decoder.
    #[serde(rename = "ablation4")]
    Ablation4,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 8] = [
        ScenarioName::F,
        ScenarioName::L,
        ScenarioName::M,
        ScenarioName::Mix,
        ScenarioName::Ablation1,
        ScenarioName::Ablation2,
        ScenarioName::Ablation3,
        ScenarioName::Ablation4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::F => "F",
            ScenarioName::L => "L",
            ScenarioName::M => "M",
            ScenarioName::Mix => "mix",
            ScenarioName::Ablation1 => "ablation1",
            ScenarioName::Ablation2 => "ablation2",
            ScenarioName::Ablation3 => "ablation3",
            ScenarioName::Ablation4 => "ablation4",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario '{s}'")))
    }
}

/// Which encoders exist and which decoders make up the scar and edema sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    pub encoders: Vec<EncoderId>,
    pub d_scar: Vec<DecoderId>,
    pub d_edema: Vec<DecoderId>,
}

impl ScenarioConfig {
    pub fn new(name: ScenarioName) -> Self {
        use EncoderId::*;
        use Pathology::*;
        let (encoders, d_scar, d_edema) = match name {
            ScenarioName::F | ScenarioName::Mix => (
                vec![Lge, T2, Mappings],
                vec![DecoderId::new(Lge, Scar), DecoderId::new(Mappings, Scar)],
                vec![DecoderId::new(T2, Edema)],
            ),
            ScenarioName::L => (
                vec![Lge, T2],
                vec![DecoderId::new(Lge, Scar)],
                vec![DecoderId::new(T2, Edema)],
            ),
            ScenarioName::M => (
                vec![T2, Mappings],
                vec![DecoderId::new(Mappings, Scar)],
                vec![DecoderId::new(T2, Edema)],
            ),
            ScenarioName::Ablation1 => (
                vec![Lge, T2, Mappings],
                vec![DecoderId::pooled(Scar)],
                vec![DecoderId::pooled(Edema)],
            ),
            ScenarioName::Ablation2 => (
                vec![Lge, T2, Mappings],
                EncoderId::ALL
                    .iter()
                    .map(|&e| DecoderId::new(e, Scar))
                    .collect(),
                EncoderId::ALL
                    .iter()
                    .map(|&e| DecoderId::new(e, Edema))
                    .collect(),
            ),
            ScenarioName::Ablation3 => (
                vec![Lge, T2, Mappings],
                vec![DecoderId::new(Lge, Scar), DecoderId::new(Mappings, Scar)],
                vec![DecoderId::new(T2, Edema), DecoderId::new(Mappings, Edema)],
            ),
            ScenarioName::Ablation4 => (
                vec![Lge, T2, Mappings],
                vec![DecoderId::new(Lge, Scar)],
                vec![DecoderId::new(T2, Edema), DecoderId::new(Mappings, Edema)],
            ),
        };
        ScenarioConfig {
            name,
            encoders,
            d_scar,
            d_edema,
        }
    }

    pub fn is_mix(&self) -> bool {
        self.name == ScenarioName::Mix
    }

    /// Every decoder of the scenario, scar set first.
    pub fn decoders(&self) -> impl Iterator<Item = DecoderId> + '_ {
        self.d_scar.iter().chain(&self.d_edema).copied()
    }

    /// Input channels of the anatomy prior network in canonical order.
    pub fn mpc_sequences(&self) -> Vec<SequenceId> {
        SequenceId::ALL
            .into_iter()
            .filter(|s| {
                matches!(s, SequenceId::C0 | SequenceId::T2)
                    || self.encoders.iter().any(|e| e.sequences().contains(s))
            })
            .collect()
    }

    /// Encoders that run for data with `availability`.
    ///
    /// Fixed scenarios need every sequence they were built for. The mix
    /// scenario runs whatever encoders the data supports but needs at least
    /// one scar and one edema decoder.
    pub fn active_encoders(&self, availability: &Availability) -> Result<Vec<EncoderId>> {
        if !self.is_mix() {
            if let Some(missing) = self
                .mpc_sequences()
                .into_iter()
                .find(|s| !availability.contains(*s))
            {
                return Err(Error::MissingSequence(missing));
            }
            return Ok(self.encoders.clone());
        }
        let active: Vec<_> = self
            .encoders
            .iter()
            .copied()
            .filter(|e| e.is_available(availability))
            .collect();
        let has = |set: &[DecoderId]| {
            set.iter()
                .any(|d| d.encoder().is_none_or(|e| active.contains(&e)))
        };
        if !has(&self.d_scar) || !has(&self.d_edema) {
            let missing = [SequenceId::Lge, SequenceId::T2, SequenceId::T1m]
                .into_iter()
                .find(|s| !availability.contains(*s))
                .unwrap_or(SequenceId::Lge);
            return Err(Error::MissingSequence(missing));
        }
        Ok(active)
    }

    /// Decoders evaluated for data with `availability`, scar set first.
    pub fn active_decoders(&self, availability: &Availability) -> Result<Vec<DecoderId>> {
        let encoders = self.active_encoders(availability)?;
        Ok(self
            .decoders()
            .filter(|d| d.encoder().is_none_or(|e| encoders.contains(&e)))
            .collect())
    }

    /// Checks that `availability` is one of the three supported training
    /// patterns of the mix scenario.
    pub fn check_mix_pattern(availability: &Availability) -> Result<()> {
        let ok = [
            Availability::full(),
            Availability::lge_triple(),
            Availability::mapping_quad(),
        ]
        .contains(availability);
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(format!(
                "availability {availability} is not a supported mix pattern"
            )))
        }
    }
}

impl FromStr for ScenarioConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(ScenarioConfig::new(s.parse()?))
    }
}
