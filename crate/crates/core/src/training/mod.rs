//! Joint training of all four modules from a single objective.

pub mod adam;
pub mod augment;
pub mod loss;

use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, make_sample, AugmentConfig, Sample};
pub use loss::{
    bce_weights, loss_cross_entropy, loss_euclidean, loss_weighted_bce, loss_whole, LossBreakdown, LossTerms,
    LossWeights,
};

use crate::data::Scene;
use crate::error::{arg_err, Error, Result};
use crate::groundtruth::{self, GroupBins};
use crate::model::checkpoint::Checkpoint;
use crate::model::{forward, ArchConfig, CatCnn, ForwardOptions};
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    /// Passes over the dataset; ignored once `max_steps` is reached.
    pub epochs: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Crop/flip/noise augmentation; when off every scene is one sample.
    /// Off by default: at desk scale whole-scene steps fit the evaluated
    /// full-image counts far better than quarter-area patches do.
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Emit a checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Defaults to a 10x drop for the last quarter of the run, which settles
    /// the count drift a constant rate leaves in the final weights.
    pub lr_schedule: LrSchedule,
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr * factor` once `at` of the planned steps are done.
    StepDecay { at: f64, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::StepDecay { at: 0.75, factor: 0.1 }
    }
}

impl LrSchedule {
    /// Multiplier for the optimizer step numbered `step` (from 0) of `total`.
    pub fn multiplier(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::StepDecay { at, factor } => {
                if (step as f64) < at * total as f64 {
                    1.0
                } else {
                    factor
                }
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            epochs: 100,
            max_steps: None,
            seed: 0,
            augment: false,
            augmentation: AugmentConfig::default(),
            checkpoint_every: None,
            lr_schedule: LrSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.loss.lambda1 > 0.0 && self.loss.lambda2 > 0.0 && self.adam.lr > 0.0) {
            return arg_err("lambda1, lambda2 and lr must be positive");
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.flip_p) || !(0.0..=1.0).contains(&a.noise_p) {
            return arg_err("augmentation probabilities must lie in [0, 1]");
        }
        if !(a.noise_amplitude >= 0.0) || a.crop_patches == 0 {
            return arg_err("noise_amplitude must be >= 0 and crop_patches >= 1");
        }
        if let LrSchedule::StepDecay { at, factor } = self.lr_schedule {
            if !(0.0..=1.0).contains(&at) || !(factor > 0.0) {
                return arg_err("lr decay point must lie in [0, 1] and the factor be positive");
            }
        }
        Ok(())
    }
}

/// Holds the model and optimizer state across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CatCnn,
    pub bins: GroupBins,
    pub adam: AdamState,
    config: TrainConfig,
    step: usize,
    /// Steps the run is planned for; drives the lr schedule.
    planned_steps: usize,
}

impl Trainer {
    /// Fits count groups to `train_counts` and initializes parameters from
    /// the config seed.
    pub fn new(config: TrainConfig, train_counts: &[usize]) -> Result<Self> {
        config.validate()?;
        let bins = groundtruth::compute_bins_or_single(train_counts, config.arch.groups)?;
        let mut arch = config.arch.clone();
        arch.groups = bins.groups();
        let model = CatCnn::new(arch, config.seed)?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            bins,
            adam,
            config,
            step: 0,
            planned_steps: usize::MAX,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            bins: self.bins.clone(),
        }
    }

    /// Forward pass and the four losses for one sample, with gradients
    /// accumulated into the model parameters. No optimizer update.
    pub fn accumulate(&mut self, sample: &Sample, opts: &ForwardOptions) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g);
        let image = g.constant(sample.image.clone());
        let out = forward(&mut g, image, &bound, &self.model.arch, opts)?;
        let l_fus = loss_euclidean(&mut g, out.final_density, &sample.density)?;
        let l_den = loss_euclidean(&mut g, out.est_density, &sample.density)?;
        let l_con = out
            .confidence
            .map(|c| loss_weighted_bce(&mut g, c, &sample.mask))
            .transpose()?;
        let l_mul = loss_cross_entropy(&mut g, out.class_logits, sample.group)?;
        let terms = LossTerms {
            l_fus,
            l_den,
            l_con,
            l_mul,
        };
        let (total, breakdown) = loss_whole(&mut g, &terms, self.config.loss)?;
        check_finite(&breakdown, self.step)?;
        g.backward(total)?;
        self.model.params.absorb_grads(&g, &bound)?;
        Ok(breakdown)
    }

    /// Sets the run length the lr schedule is measured against.
    pub fn plan_steps(&mut self, total: usize) {
        self.planned_steps = total;
    }

    pub fn current_lr(&self) -> f64 {
        self.config.adam.lr * self.config.lr_schedule.multiplier(self.step, self.planned_steps)
    }

    /// One optimizer step on one sample.
    pub fn step(&mut self, sample: &Sample) -> Result<LossBreakdown> {
        let b = self.accumulate(sample, &ForwardOptions::default())?;
        let adam = AdamConfig {
            lr: self.current_lr(),
            ..self.config.adam
        };
        adam_step(&mut self.model.params, &mut self.adam, &adam);
        self.step += 1;
        Ok(b)
    }
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    for (term, value) in [
        ("l_fus", b.l_fus),
        ("l_den", b.l_den),
        ("l_con", b.l_con),
        ("l_mul", b.l_mul),
        ("l_whole", b.l_whole),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { term, step, value });
        }
    }
    Ok(())
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossBreakdown>,
}

/// Training samples of one scene for one epoch.
pub fn scene_samples(scene: &Scene, config: &TrainConfig, bins: &GroupBins, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let divisor = config.arch.divisor();
    let area = (scene.height() * scene.width()) as f64;
    let patches = if config.augment {
        augment(scene, &config.augmentation, rng)?
    } else {
        vec![scene.clone()]
    };
    patches.iter().map(|p| make_sample(p, divisor, bins, area)).collect()
}

/// Deterministic loop: each epoch shuffles the scenes with the seeded
/// stream, augments each scene, and takes one Adam step per sample.
/// `on_step` sees the trainer after every step (e.g. for checkpoints).
pub fn train_with<F>(dataset: &[Scene], config: &TrainConfig, mut on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(&Trainer, &LossBreakdown) -> Result<()>,
{
    if dataset.is_empty() {
        return arg_err("training set is empty");
    }
    let counts: Vec<usize> = dataset.iter().map(Scene::count).collect();
    let mut trainer = Trainer::new(config.clone(), &counts)?;
    trainer.plan_steps(planned_steps(dataset, config));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_DA7A);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::new();
    let limit = config.max_steps.unwrap_or(usize::MAX);

    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            for sample in scene_samples(&dataset[i], config, &trainer.bins, &mut rng)? {
                if trainer.step >= limit {
                    break 'outer;
                }
                let b = trainer.step(&sample)?;
                trace.push(b);
                on_step(&trainer, &b)?;
            }
        }
        if let Some(last) = trace.last() {
            info!("epoch {epoch}: step {} l_whole {:.6}", trainer.step, last.l_whole);
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        trace,
    })
}

/// Steps a run will take: every sample of every epoch, capped by `max_steps`.
pub fn planned_steps(dataset: &[Scene], config: &TrainConfig) -> usize {
    let per_epoch: usize = dataset
        .iter()
        .map(|s| match config.augment {
            false => 1,
            true if s.height() >= 8 && s.width() >= 8 => config.augmentation.crop_patches,
            true => 0,
        })
        .sum();
    let total = per_epoch.saturating_mul(config.epochs);
    config.max_steps.map_or(total, |m| m.min(total))
}

pub fn train(dataset: &[Scene], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_, _| Ok(()))
}

/// CSV text of a loss trace, steps numbered from 1.
pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let mut s = String::from(LossBreakdown::CSV_HEADER);
    s.push('\n');
    for (i, b) in trace.iter().enumerate() {
        s.push_str(&b.csv_row(i + 1));
        s.push('\n');
    }
    s
}

pub fn write_trace(trace: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(trace_csv(trace).as_bytes())?;
    Ok(())
}
