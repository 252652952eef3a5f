//! Declarative network descriptions and their variant names.

use serde::{Deserialize, Serialize};

use super::NetError;

/// Which skip links a network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkipMode {
    #[serde(rename = "none")]
    NoSkip,
    /// Encoder stage to mirrored decoder stage inside every ed block.
    #[serde(rename = "intra")]
    IntraSkip,
    /// Intra links plus encoder-to-encoder links between adjacent levels.
    #[serde(rename = "full")]
    FullSkip,
    #[serde(rename = "inter_ee")]
    InterSkipEncEnc,
    #[serde(rename = "inter_de")]
    InterSkipDecEnc,
}

impl SkipMode {
    pub const ALL: [SkipMode; 5] = [
        SkipMode::NoSkip,
        SkipMode::IntraSkip,
        SkipMode::FullSkip,
        SkipMode::InterSkipEncEnc,
        SkipMode::InterSkipDecEnc,
    ];

    pub fn key(self) -> &'static str {
        match self {
            SkipMode::NoSkip => "none",
            SkipMode::IntraSkip => "intra",
            SkipMode::FullSkip => "full",
            SkipMode::InterSkipEncEnc => "inter_ee",
            SkipMode::InterSkipDecEnc => "inter_de",
        }
    }

    pub fn has_intra(self) -> bool {
        matches!(self, SkipMode::IntraSkip | SkipMode::FullSkip)
    }

    pub fn has_inter_enc_enc(self) -> bool {
        matches!(self, SkipMode::FullSkip | SkipMode::InterSkipEncEnc)
    }

    pub fn has_inter_dec_enc(self) -> bool {
        self == SkipMode::InterSkipDecEnc
    }

    /// Whether the mode needs at least two levels to link.
    pub fn needs_enhancer(self) -> bool {
        self.has_inter_enc_enc() || self.has_inter_dec_enc()
    }
}

/// One encoder-decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdSpec {
    pub depth: usize,
    pub base_channels: usize,
    /// `NoSkip` or `IntraSkip`; inter-level links belong to the network.
    pub skip: SkipMode,
}

impl EdSpec {
    /// Channel width of encoder stage `i` (1-based); `i = 0` is the
    /// outermost decoder width. Doubles inward, capped at `4 * base`.
    pub fn channels(&self, i: usize) -> usize {
        let doublings = i.max(1) - 1;
        (self.base_channels << doublings.min(2)).min(4 * self.base_channels)
    }
}

/// A multi-level encoder-decoder network: a generator followed by up to
/// two enhancers at half and quarter resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MedSpec {
    pub generator_depth: usize,
    #[serde(default)]
    pub enhancer_depths: Vec<usize>,
    pub skip: SkipMode,
    #[serde(default)]
    pub cascade: bool,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_BASE_CHANNELS: usize = 32;

fn default_base_channels() -> usize {
    DEFAULT_BASE_CHANNELS
}

impl MedSpec {
    /// A single ed block (EDS-k with `IntraSkip`, ED-k with `NoSkip`).
    pub fn ed(depth: usize, skip: SkipMode) -> Self {
        MedSpec {
            generator_depth: depth,
            enhancer_depths: Vec::new(),
            skip,
            cascade: false,
            base_channels: DEFAULT_BASE_CHANNELS,
            seed: 0,
        }
    }

    pub fn med(
        generator_depth: usize,
        enhancer_depths: &[usize],
        skip: SkipMode,
        cascade: bool,
    ) -> Self {
        MedSpec {
            generator_depth,
            enhancer_depths: enhancer_depths.to_vec(),
            skip,
            cascade,
            base_channels: DEFAULT_BASE_CHANNELS,
            seed: 0,
        }
    }

    pub fn with_base_channels(mut self, base_channels: usize) -> Self {
        self.base_channels = base_channels;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn levels(&self) -> usize {
        1 + self.enhancer_depths.len()
    }

    /// Depth of level `l` (0 is the generator).
    pub fn depth(&self, level: usize) -> usize {
        if level == 0 {
            self.generator_depth
        } else {
            self.enhancer_depths[level - 1]
        }
    }

    pub fn block_skip(&self) -> SkipMode {
        if self.skip.has_intra() {
            SkipMode::IntraSkip
        } else {
            SkipMode::NoSkip
        }
    }

    pub fn generator(&self) -> EdSpec {
        self.block(0)
    }

    pub fn enhancers(&self) -> Vec<EdSpec> {
        (1..self.levels()).map(|l| self.block(l)).collect()
    }

    fn block(&self, level: usize) -> EdSpec {
        EdSpec {
            depth: self.depth(level),
            base_channels: self.base_channels,
            skip: self.block_skip(),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let invalid = |field: &str, reason: String| {
            Err(NetError::InvalidSpec {
                field: field.to_string(),
                reason,
            })
        };
        if self.generator_depth < 2 {
            return invalid(
                "generator_depth",
                format!("must be >= 2, got {}", self.generator_depth),
            );
        }
        if self.enhancer_depths.len() > 2 {
            return invalid(
                "enhancer_depths",
                format!("at most 2 enhancers, got {}", self.enhancer_depths.len()),
            );
        }
        for (i, &d) in self.enhancer_depths.iter().enumerate() {
            if d < 2 || d >= self.generator_depth {
                return invalid(
                    &format!("enhancer_depths[{i}]"),
                    format!("must lie in [2, {}), got {d}", self.generator_depth),
                );
            }
        }
        if self.base_channels == 0 {
            return invalid("base_channels", "must be >= 1".into());
        }
        if self.skip.needs_enhancer() && self.enhancer_depths.is_empty() {
            return invalid(
                "skip",
                format!(
                    "\"{}\" links levels but the network has no enhancers",
                    self.skip.key()
                ),
            );
        }
        if self.cascade && self.enhancer_depths.is_empty() {
            return invalid(
                "cascade",
                "needs at least one enhancer to inject into".into(),
            );
        }
        Ok(())
    }

    /// Spatial divisor the network input must satisfy.
    pub fn required_divisor(&self) -> usize {
        (0..self.levels())
            .map(|l| 1usize << (l + self.depth(l)))
            .max()
            .unwrap_or(1)
    }

    /// Display name: variant names for three levels, starred names for two,
    /// `EDS{k}` / `ED{k}` for a single block.
    pub fn variant_name(&self) -> String {
        if self.enhancer_depths.is_empty() {
            let base = if self.skip.has_intra() { "EDS" } else { "ED" };
            return format!("{base}{}", self.generator_depth);
        }
        let name = match classify(self.skip, self.cascade) {
            Ok(n) => n.to_string(),
            Err(_) => {
                let tag = if self.skip == SkipMode::InterSkipEncEnc {
                    "IEE"
                } else {
                    "IDE"
                };
                format!("MED-{tag}{}", if self.cascade { "C" } else { "" })
            }
        };
        if self.enhancer_depths.len() == 1 {
            format!("{name}*")
        } else {
            name
        }
    }
}

/// Variant name of a `(skip, cascade)` cell.
pub fn classify(skip: SkipMode, cascade: bool) -> Result<&'static str, NetError> {
    Ok(match (skip, cascade) {
        (SkipMode::NoSkip, false) => "MED",
        (SkipMode::IntraSkip, false) => "MEDS",
        (SkipMode::FullSkip, false) => "MEDSF",
        (SkipMode::NoSkip, true) => "MEDC",
        (SkipMode::IntraSkip, true) => "MEDSC",
        (SkipMode::FullSkip, true) => "MEDSFC",
        (other, _) => return Err(NetError::Unclassified(other)),
    })
}

/// Inverse of [`classify`].
pub fn from_name(name: &str) -> Option<(SkipMode, bool)> {
    VARIANT_NAMES
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|&(_, s, c)| (s, c))
}

pub const VARIANT_NAMES: [(&str, SkipMode, bool); 6] = [
    ("MED", SkipMode::NoSkip, false),
    ("MEDS", SkipMode::IntraSkip, false),
    ("MEDSF", SkipMode::FullSkip, false),
    ("MEDC", SkipMode::NoSkip, true),
    ("MEDSC", SkipMode::IntraSkip, true),
    ("MEDSFC", SkipMode::FullSkip, true),
];

/// Number of distinct network structures for generator depth `k`:
/// five skip modes, two cascade settings and `k - 1` compositions.
pub fn config_count(k: usize) -> Result<usize, NetError> {
    if k < 2 {
        return Err(NetError::InvalidSpec {
            field: "generator_depth".into(),
            reason: format!("must be >= 2, got {k}"),
        });
    }
    Ok(SkipMode::ALL.len() * 2 * (k - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_grid() {
        assert_eq!(classify(SkipMode::FullSkip, true).unwrap(), "MEDSFC");
        assert_eq!(classify(SkipMode::NoSkip, false).unwrap(), "MED");
        assert_eq!(classify(SkipMode::IntraSkip, true).unwrap(), "MEDSC");
        assert!(classify(SkipMode::InterSkipDecEnc, false).is_err());
        for (name, skip, cascade) in VARIANT_NAMES {
            assert_eq!(classify(skip, cascade).unwrap(), name);
            assert_eq!(from_name(name), Some((skip, cascade)));
        }
    }

    #[test]
    fn counts() {
        assert_eq!(config_count(5).unwrap(), 40);
        assert_eq!(config_count(2).unwrap(), 10);
        assert_eq!(config_count(11).unwrap(), 100);
        assert!(config_count(1).is_err());
    }

    #[test]
    fn channel_schedule() {
        let e = MedSpec::ed(6, SkipMode::NoSkip)
            .with_base_channels(8)
            .generator();
        let widths: Vec<_> = (0..=6).map(|i| e.channels(i)).collect();
        assert_eq!(widths, [8, 8, 16, 32, 32, 32, 32]);
    }

    #[test]
    fn names() {
        assert_eq!(MedSpec::ed(5, SkipMode::IntraSkip).variant_name(), "EDS5");
        assert_eq!(MedSpec::ed(4, SkipMode::NoSkip).variant_name(), "ED4");
        assert_eq!(
            MedSpec::med(5, &[4], SkipMode::FullSkip, false).variant_name(),
            "MEDSF*"
        );
        assert_eq!(
            MedSpec::med(5, &[4, 3], SkipMode::NoSkip, true).variant_name(),
            "MEDC"
        );
        assert_eq!(
            MedSpec::med(5, &[4, 3], SkipMode::InterSkipEncEnc, false).variant_name(),
            "MED-IEE"
        );
    }

    #[test]
    fn validation() {
        assert!(MedSpec::med(5, &[5], SkipMode::NoSkip, false)
            .validate()
            .is_err());
        assert!(MedSpec::med(5, &[4, 3, 2], SkipMode::NoSkip, false)
            .validate()
            .is_err());
        assert!(MedSpec::ed(5, SkipMode::FullSkip).validate().is_err());
        assert!(MedSpec::ed(5, SkipMode::IntraSkip)
            .with_base_channels(0)
            .validate()
            .is_err());
        assert!(MedSpec::med(5, &[4, 3], SkipMode::FullSkip, true)
            .validate()
            .is_ok());
    }

    #[test]
    fn json_keys() {
        let s = MedSpec::med(5, &[4, 3], SkipMode::InterSkipDecEnc, true).with_seed(u64::MAX);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(
            j,
            r#"{"generator_depth":5,"enhancer_depths":[4,3],"skip":"inter_de","cascade":true,"base_channels":32,"seed":18446744073709551615}"#
        );
        assert_eq!(serde_json::from_str::<MedSpec>(&j).unwrap(), s);
        assert!(
            serde_json::from_str::<MedSpec>(r#"{"generator_depth":5,"skip":"none","x":1}"#)
                .is_err()
        );
    }

    #[test]
    fn divisor() {
        assert_eq!(MedSpec::ed(5, SkipMode::NoSkip).required_divisor(), 32);
        assert_eq!(
            MedSpec::med(4, &[3, 2], SkipMode::NoSkip, false).required_divisor(),
            16
        );
        assert_eq!(
            MedSpec::med(4, &[3, 3], SkipMode::NoSkip, false).required_divisor(),
            32
        );
    }
}
