use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nets::checkpoint::{Checkpoint, CheckpointError, CheckpointHeader};
use crate::nets::{ExtractorParams, GruParams, LinearHead};
use crate::numerics::{ParamId, ParamStore};

use super::{SosError, ThresholdParam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    ImageLevel,
    PatchLevel,
    MultiScale,
    Rdms,
    Sos,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ImageLevel,
        Variant::PatchLevel,
        Variant::MultiScale,
        Variant::Rdms,
        Variant::Sos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ImageLevel => "image",
            Variant::PatchLevel => "patch",
            Variant::MultiScale => "multiscale",
            Variant::Rdms => "rdms",
            Variant::Sos => "sos",
        }
    }

    pub fn has_lowres_head(self) -> bool {
        !matches!(self, Variant::PatchLevel)
    }

    pub fn has_hrn(self) -> bool {
        !matches!(self, Variant::ImageLevel)
    }

    pub fn has_threshold(self) -> bool {
        matches!(self, Variant::Sos | Variant::MultiScale)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = SosError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| SosError::Usage(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Gru,
    Average,
    Max,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Gru => "gru",
            FusionMode::Average => "avg",
            FusionMode::Max => "max",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = SosError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(FusionMode::Gru),
            "avg" | "average" => Ok(FusionMode::Average),
            "max" => Ok(FusionMode::Max),
            _ => Err(SosError::Usage(format!("unknown fusion mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub classes: usize,
    pub patch_count: usize,
    pub k: usize,
    pub fusion: FusionMode,
    /// Output width of each conv block; the last entry is the feature width `d`.
    pub channels: Vec<usize>,
}

impl ModelConfig {
    pub fn new(variant: Variant, classes: usize, patch_count: usize, k: usize, fusion: FusionMode, d: usize) -> Self {
        Self {
            variant,
            classes,
            patch_count,
            k,
            fusion,
            channels: vec![8, 16, d],
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), SosError> {
        if self.classes == 0 {
            return Err(SosError::Usage("need at least one class".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(SosError::Usage(format!("bad channel list {:?}", self.channels)));
        }
        if self.k == 0 || self.k > self.patch_count {
            return Err(SosError::Usage(format!(
                "K = {} must lie in 1..={}",
                self.k, self.patch_count
            )));
        }
        Ok(())
    }

    fn label(&self) -> String {
        let channels: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        format!(
            "variant={} fusion={} k={} channels={}",
            self.variant,
            self.fusion,
            self.k,
            channels.join(",")
        )
    }

    fn from_header(header: &CheckpointHeader) -> Result<Self, CheckpointError> {
        let bad = || CheckpointError::Malformed(format!("unreadable model label {:?}", header.label));
        let mut variant = None;
        let mut fusion = None;
        let mut k = None;
        let mut channels = None;
        for field in header.label.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(bad)?;
            match key {
                "variant" => variant = Some(value.parse::<Variant>().map_err(|_| bad())?),
                "fusion" => fusion = Some(value.parse::<FusionMode>().map_err(|_| bad())?),
                "k" => k = Some(value.parse::<usize>().map_err(|_| bad())?),
                "channels" => {
                    channels = Some(
                        value
                            .split(',')
                            .map(str::parse)
                            .collect::<Result<Vec<usize>, _>>()
                            .map_err(|_| bad())?,
                    )
                }
                _ => return Err(bad()),
            }
        }
        let config = ModelConfig {
            variant: variant.ok_or_else(bad)?,
            classes: header.classes,
            patch_count: header.patch_count,
            k: k.ok_or_else(bad)?,
            fusion: fusion.ok_or_else(bad)?,
            channels: channels.ok_or_else(bad)?,
        };
        if config.feature_dim() != header.feature_dim || config.validate().is_err() {
            return Err(bad());
        }
        Ok(config)
    }
}

/// Attention head, patch extractor, fusion and classifier of the
/// high-resolution pathway.
#[derive(Clone, Debug)]
pub struct HrnParams {
    pub attention: LinearHead,
    pub patch: ExtractorParams,
    pub gru: Option<GruParams>,
    pub head: LinearHead,
    /// Whether `v` seeds the GRU and is concatenated into the fused vector.
    pub residual: bool,
}

/// Separate extractor and two-way head giving `π(a | s)`; action 1 zooms in.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub extractor: ExtractorParams,
    pub head: LinearHead,
}

#[derive(Clone, Debug)]
pub struct SosModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub lowres: ExtractorParams,
    pub lowres_head: Option<LinearHead>,
    pub hrn: Option<HrnParams>,
    pub threshold: Option<ThresholdParam>,
    pub policy: Option<PolicyParams>,
}

impl SosModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, SosError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (n, d, p) = (config.classes, config.feature_dim(), config.patch_count);
        let v = config.variant;

        let lowres = ExtractorParams::init(&mut store, &mut rng, "lowres", &config.channels);
        let lowres_head = v
            .has_lowres_head()
            .then(|| LinearHead::init(&mut store, &mut rng, "lowres_head", n, d));
        let hrn = v.has_hrn().then(|| {
            let residual = v != Variant::PatchLevel;
            let attention = LinearHead::init(&mut store, &mut rng, "attention", p, d);
            let patch = ExtractorParams::init(&mut store, &mut rng, "patch", &config.channels);
            let gru = (config.fusion == FusionMode::Gru).then(|| GruParams::init(&mut store, &mut rng, "gru", d));
            let fused = if residual { 2 * d } else { d };
            let head = LinearHead::init(&mut store, &mut rng, "highres_head", n, fused);
            HrnParams {
                attention,
                patch,
                gru,
                head,
                residual,
            }
        });
        let threshold = v
            .has_threshold()
            .then(|| ThresholdParam::init(&mut store, "threshold.theta"));
        let policy = (v == Variant::Rdms).then(|| PolicyParams {
            extractor: ExtractorParams::init(&mut store, &mut rng, "policy", &config.channels),
            head: LinearHead::init(&mut store, &mut rng, "policy_head", 2, d),
        });
        Ok(Self {
            config,
            store,
            lowres,
            lowres_head,
            hrn,
            threshold,
            policy,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn parameter_count(&self) -> usize {
        self.store.element_count()
    }

    /// Current threshold `c`, if the model has one.
    pub fn threshold_value(&self) -> Option<f64> {
        self.threshold.map(|t| t.value(&self.store))
    }

    /// Named parameter groups, in a fixed order.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut groups = vec![("lowres_extractor", self.lowres.param_ids())];
        if let Some(h) = &self.lowres_head {
            groups.push(("lowres_head", h.param_ids()));
        }
        if let Some(hrn) = &self.hrn {
            groups.push(("attention", hrn.attention.param_ids()));
            groups.push(("patch_extractor", hrn.patch.param_ids()));
            if let Some(g) = &hrn.gru {
                groups.push(("gru", g.param_ids()));
            }
            groups.push(("highres_head", hrn.head.param_ids()));
        }
        if let Some(t) = &self.threshold {
            groups.push(("threshold", vec![t.theta]));
        }
        if let Some(p) = &self.policy {
            let mut ids = p.extractor.param_ids();
            ids.extend(p.head.param_ids());
            groups.push(("policy", ids));
        }
        groups
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            CheckpointHeader {
                label: self.config.label(),
                feature_dim: self.config.feature_dim(),
                classes: self.config.classes,
                patch_count: self.config.patch_count,
            },
            &self.store,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.checkpoint().write(path)
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, CheckpointError> {
        let config = ModelConfig::from_header(&checkpoint.header)?;
        let mut model = SosModel::new(config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        checkpoint.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}
