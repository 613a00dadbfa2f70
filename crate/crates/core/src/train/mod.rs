//! Training loops for the gated model and the four baselines.
//!
//! A run directory holds `config.tsv`, `log.tsv` and one `epoch_<k>.bin`
//! checkpoint per epoch (`epoch_0.bin` when no epoch ran).

mod rdms;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{load_manifest, load_split, DataError, PreparedSlide, Split};
use crate::nets::checkpoint::CheckpointError;
use crate::numerics::{NumericsError, OptimizerKind, OptimizerState, Tape, Var};
use crate::sos::{
    hrn_forward, image_features, loss_cross_entropy, loss_total, lrn_forward, policy_forward, FusionMode,
    LossBreakdown, LossConfig, ModelConfig, PatchChoice, SosError, SosModel, Variant,
};

pub use crate::sos::PolicyParams;
pub use rdms::{rdms_policy_loss, rdms_reward, rdms_update, Episode, REWARD_FLOOR};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub k: usize,
    pub d: usize,
    pub fusion: FusionMode,
    pub loss: LossConfig,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Sos,
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 4,
            k: 4,
            d: 32,
            fusion: FusionMode::Gru,
            loss: LossConfig::default(),
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, classes: usize, patch_count: usize) -> ModelConfig {
        ModelConfig::new(self.variant, classes, patch_count, self.k, self.fusion, self.d)
    }

    pub fn validate(&self, patch_count: usize) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Usage("batch size must be at least 1".into()));
        }
        if self.k == 0 || self.k > patch_count {
            return Err(TrainError::Usage(format!("K = {} must lie in 1..={patch_count}", self.k)));
        }
        if self.d == 0 {
            return Err(TrainError::Usage("feature width must be positive".into()));
        }
        let rates = [self.learning_rate, self.loss.lambda1, self.loss.lambda2, self.loss.epsilon];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(TrainError::Usage("rates and loss weights must be positive".into()));
        }
        Ok(())
    }

    /// Key/value echo, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let optimizer = match self.optimizer {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd => "sgd",
        };
        vec![
            ("variant", self.variant.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("batch", self.batch_size.to_string()),
            ("k", self.k.to_string()),
            ("d", self.d.to_string()),
            ("fusion", self.fusion.to_string()),
            ("lambda1", self.loss.lambda1.to_string()),
            ("lambda2", self.loss.lambda2.to_string()),
            ("epsilon", self.loss.epsilon.to_string()),
            ("l2", self.loss.enable_l2.to_string()),
            ("l3", self.loss.enable_l3.to_string()),
            ("optimizer", optimizer.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, TrainError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .parse()
                .map_err(|_| TrainError::Usage(format!("bad value {value:?} for {key}")))
        }
        let mut c = TrainConfig::default();
        for (key, value) in pairs {
            match key {
                "variant" => c.variant = value.parse()?,
                "epochs" => c.epochs = num(key, value)?,
                "lr" => c.learning_rate = num(key, value)?,
                "batch" => c.batch_size = num(key, value)?,
                "k" => c.k = num(key, value)?,
                "d" => c.d = num(key, value)?,
                "fusion" => c.fusion = value.parse()?,
                "lambda1" => c.loss.lambda1 = num(key, value)?,
                "lambda2" => c.loss.lambda2 = num(key, value)?,
                "epsilon" => c.loss.epsilon = num(key, value)?,
                "l2" => c.loss.enable_l2 = num(key, value)?,
                "l3" => c.loss.enable_l3 = num(key, value)?,
                "optimizer" => {
                    c.optimizer = match value {
                        "adam" => OptimizerKind::default(),
                        "sgd" => OptimizerKind::Sgd,
                        _ => return Err(TrainError::Usage(format!("unknown optimizer {value:?}"))),
                    }
                }
                "seed" => c.seed = num(key, value)?,
                _ => {}
            }
        }
        Ok(c)
    }
}

/// Per-epoch means (weighted by batch size) plus RDMS policy statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub threshold: Option<f64>,
    pub reward_mean: f64,
    pub zoom_fraction: f64,
    pub reward_clamped: usize,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SosModel,
    pub log: Vec<EpochLog>,
}

#[derive(Default)]
struct BatchStats {
    loss: LossBreakdown,
    rewards: Vec<f64>,
    zooms: usize,
    clamped: usize,
}

fn clamped_ce(p: f64) -> f64 {
    -p.max(1e-12).ln()
}

fn forward_batch(
    tape: &mut Tape,
    model: &SosModel,
    batch: &[&PreparedSlide],
    lowres: bool,
    highres: bool,
) -> Result<(Vec<Var>, Vec<Var>), TrainError> {
    let (mut ns, mut nh) = (Vec::new(), Vec::new());
    for &s in batch {
        let v = image_features(tape, &model.store, &model.lowres, &s.lowres)?;
        if lowres {
            ns.push(lrn_forward(tape, model, v)?);
        }
        if highres {
            nh.push(hrn_forward(tape, model, v, s, &PatchChoice::TopK)?.dist);
        }
    }
    Ok((ns, nh))
}

/// Builds the objective of one batch on `tape`.
fn batch_objective<R: Rng>(
    tape: &mut Tape,
    model: &SosModel,
    batch: &[&PreparedSlide],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, BatchStats), TrainError> {
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let b = batch.len();
    let mut stats = BatchStats::default();
    let echo = |loss: &mut LossBreakdown| {
        loss.lambda1 = config.loss.lambda1;
        loss.lambda2 = config.loss.lambda2;
        loss.epsilon = config.loss.epsilon;
        loss.batch_size = b;
    };
    let total = match config.variant {
        Variant::Sos => {
            let (ns, nh) = forward_batch(tape, model, batch, true, true)?;
            let c = model.threshold.expect("sos model has a threshold").var(tape, &model.store);
            let (total, loss) = loss_total(tape, &ns, &nh, &labels, c, &config.loss)?;
            stats.loss = loss;
            total
        }
        Variant::ImageLevel => {
            let (ns, _) = forward_batch(tape, model, batch, true, false)?;
            let ce1 = loss_cross_entropy(tape, &ns, &labels)?;
            let l = tape.item(ce1);
            stats.loss = LossBreakdown {
                l_ce1: l,
                l1: l,
                l_total: l,
                ..Default::default()
            };
            ce1
        }
        Variant::PatchLevel | Variant::MultiScale => {
            let (_, nh) = forward_batch(tape, model, batch, false, true)?;
            let ce2 = loss_cross_entropy(tape, &nh, &labels)?;
            let l = tape.item(ce2);
            stats.loss = LossBreakdown {
                l_ce2: l,
                l1: l,
                l_total: l,
                ..Default::default()
            };
            ce2
        }
        Variant::Rdms => {
            let (ns, nh) = forward_batch(tape, model, batch, true, true)?;
            let mut terms = Vec::with_capacity(b);
            let mut policies = Vec::with_capacity(b);
            let mut episodes = Vec::with_capacity(b);
            let (mut ce1_sum, mut ce2_sum) = (0.0, 0.0);
            for (i, &s) in batch.iter().enumerate() {
                let pi = policy_forward(tape, model, &s.lowres)?;
                let p_zoom = tape.value(pi).data()[1];
                let action = usize::from(rng.random::<f64>() < p_zoom);
                let y = labels[i];
                let l1 = clamped_ce(tape.value(ns[i]).data()[y]);
                let l2 = clamped_ce(tape.value(nh[i]).data()[y]);
                ce1_sum += l1;
                ce2_sum += l2;
                let (reward, clamped) = rdms_reward(action, l1, l2);
                stats.clamped += usize::from(clamped);
                stats.zooms += action;
                stats.rewards.push(reward);
                let taken = if action == 1 { nh[i] } else { ns[i] };
                terms.push(loss_cross_entropy(tape, &[taken], &[y])?);
                policies.push(pi);
                episodes.push(Episode { action, reward });
            }
            let cls = tape.sum_scalars(&terms)?;
            let cls = tape.scale(cls, 1.0 / b as f64);
            let pol = rdms_policy_loss(tape, &policies, &episodes)?;
            let total = tape.add(cls, pol)?;
            stats.loss = LossBreakdown {
                l_ce1: ce1_sum / b as f64,
                l_ce2: ce2_sum / b as f64,
                l1: (ce1_sum + ce2_sum) / b as f64,
                l_total: tape.item(total),
                ..Default::default()
            };
            total
        }
    };
    echo(&mut stats.loss);
    Ok((total, stats))
}

/// Trains from a seeded initialization. `on_epoch` sees the model after every epoch.
pub fn train_with<F>(
    config: &TrainConfig,
    slides: &[PreparedSlide],
    classes: usize,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&SosModel, &EpochLog) -> Result<(), TrainError>,
{
    let patch_count = slides
        .first()
        .map(|s| s.patches.len())
        .ok_or_else(|| TrainError::Usage("no training slides".into()))?;
    config.validate(patch_count)?;
    if let Some(s) = slides.iter().find(|s| s.label >= classes || s.patches.len() != patch_count) {
        return Err(TrainError::Usage(format!("slide {} does not fit the dataset", s.slide_id)));
    }
    let mut model = SosModel::new(config.model_config(classes, patch_count), config.seed)?;
    let mut optimizer = OptimizerState::new(config.optimizer, config.learning_rate)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4531);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5244_4d53_4143_5431);
    let mut order: Vec<usize> = (0..slides.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 8];
        let mut rewards = Vec::new();
        let (mut zooms, mut clamped) = (0, 0);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedSlide> = chunk.iter().map(|&i| &slides[i]).collect();
            let mut tape = Tape::new();
            let (total, stats) = batch_objective(&mut tape, &model, &batch, config, &mut policy_rng)?;
            if !stats.loss.values().iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("{:?}", stats.loss),
                });
            }
            if tape.requires_grad(total) {
                tape.backward_into(total, &mut model.store)?;
            }
            optimizer.step(&mut model.store).map_err(|e| TrainError::NonFinite {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            model.store.zero_grads();
            for (s, v) in sums.iter_mut().zip(stats.loss.values()) {
                *s += v * batch.len() as f64;
            }
            rewards.extend(stats.rewards);
            zooms += stats.zooms;
            clamped += stats.clamped;
        }
        let n = slides.len() as f64;
        let m = sums.map(|s| s / n);
        let entry = EpochLog {
            epoch,
            loss: LossBreakdown {
                l_ce1: m[0],
                l_ce2: m[1],
                l1: m[2],
                l2: m[3],
                l_he: m[4],
                l_hu: m[5],
                l3: m[6],
                l_total: m[7],
                lambda1: config.loss.lambda1,
                lambda2: config.loss.lambda2,
                epsilon: config.loss.epsilon,
                batch_size: config.batch_size,
            },
            threshold: model.threshold_value(),
            reward_mean: if rewards.is_empty() {
                0.0
            } else {
                rewards.iter().sum::<f64>() / rewards.len() as f64
            },
            zoom_fraction: if config.variant == Variant::Rdms { zooms as f64 / n } else { 0.0 },
            reward_clamped: clamped,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&model, &entry)?;
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

pub fn train(config: &TrainConfig, slides: &[PreparedSlide], classes: usize) -> Result<TrainOutcome, TrainError> {
    train_with(config, slides, classes, |_, _| Ok(()))
}

pub const LOG_COLUMNS: [&str; 19] = [
    "epoch",
    "l_ce1",
    "l_ce2",
    "l1",
    "l2",
    "l_he",
    "l_hu",
    "l3",
    "l_total",
    "lambda1",
    "lambda2",
    "epsilon",
    "batch_size",
    "threshold",
    "reward_mean",
    "zoom_fraction",
    "reward_clamped",
    "wall_seconds",
    "variant",
];

pub fn log_row(entry: &EpochLog, variant: Variant) -> String {
    let mut row = entry.epoch.to_string();
    for v in entry.loss.values() {
        write!(row, "\t{v}").unwrap();
    }
    let l = &entry.loss;
    write!(
        row,
        "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        l.lambda1,
        l.lambda2,
        l.epsilon,
        l.batch_size,
        entry.threshold.map_or("NA".to_string(), |c| c.to_string()),
        entry.reward_mean,
        entry.zoom_fraction,
        entry.reward_clamped,
        entry.wall_seconds,
        variant
    )
    .unwrap();
    row
}

pub const CONFIG_FILE: &str = "config.tsv";
pub const LOG_FILE: &str = "log.tsv";

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("epoch_{epoch}.bin"))
}

/// Loads the manifest at `data_root`, trains on its train split, and fills `run_dir`.
pub fn train_run(config: &TrainConfig, data_root: &Path, run_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let manifest = load_manifest(data_root)?;
    let slides = load_split(data_root, &manifest, Split::Train)?;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;

    let mut echo = String::from("#sos-run\t1\n");
    for (k, v) in config.to_pairs() {
        writeln!(echo, "{k}\t{v}").unwrap();
    }
    writeln!(echo, "data\t{}", data_root.display()).unwrap();
    writeln!(echo, "data_seed\t{}", manifest.seed).unwrap();
    let config_path = run_dir.join(CONFIG_FILE);
    fs::write(&config_path, echo).map_err(io_err(&config_path))?;

    let log_path = run_dir.join(LOG_FILE);
    let mut log_text = LOG_COLUMNS.join("\t");
    log_text.push('\n');
    fs::write(&log_path, &log_text).map_err(io_err(&log_path))?;

    let outcome = train_with(config, &slides, manifest.class_count(), |model, entry| {
        model.save(&checkpoint_path(run_dir, entry.epoch))?;
        log_text.push_str(&log_row(entry, config.variant));
        log_text.push('\n');
        fs::write(&log_path, &log_text).map_err(io_err(&log_path))
    })?;
    if config.epochs == 0 {
        outcome.model.save(&checkpoint_path(run_dir, 0))?;
    }
    Ok(outcome)
}

/// Reads a run directory's config echo and its latest checkpoint.
pub fn load_run(run_dir: &Path) -> Result<(TrainConfig, SosModel), TrainError> {
    let config_path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
    let pairs = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .filter_map(|l| l.split_once('\t'));
    let config = TrainConfig::from_pairs(pairs)?;
    let latest = fs::read_dir(run_dir)
        .map_err(io_err(run_dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?.strip_suffix(".bin")?.parse::<usize>().ok()
        })
        .max()
        .ok_or_else(|| TrainError::Usage(format!("{} holds no checkpoint", run_dir.display())))?;
    let model = SosModel::load(&checkpoint_path(run_dir, latest))?;
    if model.variant() != config.variant {
        return Err(TrainError::Usage(format!(
            "{}: checkpoint variant {} disagrees with config {}",
            run_dir.display(),
            model.variant(),
            config.variant
        )));
    }
    Ok((config, model))
}

/// Squared gradient norm of every parameter group after one backward pass
/// over `batch` with the variant's training objective.
pub fn group_gradient_norms(
    model: &mut SosModel,
    config: &TrainConfig,
    batch: &[&PreparedSlide],
) -> Result<Vec<(&'static str, f64)>, TrainError> {
    model.store.zero_grads();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (total, _) = batch_objective(&mut tape, model, batch, config, &mut rng)?;
    if tape.requires_grad(total) {
        tape.backward_into(total, &mut model.store)?;
    }
    let norms = model
        .param_groups()
        .into_iter()
        .map(|(name, ids)| (name, model.store.grad_norm(&ids)))
        .collect();
    model.store.zero_grads();
    Ok(norms)
}
