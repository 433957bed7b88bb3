//! Experiment configuration: a TOML file with CLI overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetKind;
use crate::attacks::AttackConfig;
use crate::diffusion::Norm;
use crate::error::{Error, Result};
use crate::sampler::{PurifierConfig, SamplerKind};
use crate::schedule::NoiseSchedule;
use crate::tensor::Architecture;
use crate::training::{AdvNoiseConfig, ScheduleParams, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub size: usize,
    pub dim: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Gauss2,
            size: 1000,
            dim: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            hidden: vec![64, 64],
            train: TrainConfig::default(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSpec {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub schedule: ScheduleParams,
    pub pretrain: TrainConfig,
    /// Largest timestep sampled during pretraining; `None` means `N`.
    pub max_timestep: Option<usize>,
    /// Load this pretrained checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        DiffusionSpec {
            hidden: vec![128, 128],
            embed_dim: 16,
            schedule: ScheduleParams::of(&NoiseSchedule::default_linear()),
            pretrain: TrainConfig {
                steps: 4000,
                ..TrainConfig::default()
            },
            max_timestep: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSpec {
    pub train: TrainConfig,
    pub adv_noise: AdvNoiseConfig,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec {
            train: TrainConfig::finetune_from(&DiffusionSpec::default().pretrain),
            adv_noise: AdvNoiseConfig::default(),
        }
    }
}

/// Attack budget shared by every threat; radii default to
/// [`AttackConfig::for_dim`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub norms: Vec<Norm>,
    pub iters: usize,
    pub eot_samples: usize,
    pub votes: usize,
    pub eval_examples: usize,
    pub repeats: usize,
    pub linf_eps: Option<f64>,
    pub l1_eps: Option<f64>,
    pub l2_eps: Option<f64>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            norms: vec![Norm::Linf, Norm::L1, Norm::L2],
            iters: 200,
            eot_samples: 20,
            votes: 1,
            eval_examples: 100,
            repeats: 1,
            linf_eps: None,
            l1_eps: None,
            l2_eps: None,
        }
    }
}

impl AttackSpec {
    /// Fully resolved settings for one norm; an overridden radius scales
    /// the step size by the same factor.
    pub fn resolve(&self, norm: Norm, dim: usize, seed: u64) -> AttackConfig {
        let mut cfg = AttackConfig::for_dim(norm, dim);
        let eps = match norm {
            Norm::Linf => self.linf_eps,
            Norm::L1 => self.l1_eps,
            Norm::L2 => self.l2_eps,
        };
        if let Some(eps) = eps {
            // A zero radius keeps the reference step.
            if cfg.radius > 0.0 && eps > 0.0 {
                cfg.step_size *= eps / cfg.radius;
            }
            cfg.radius = eps;
        }
        AttackConfig {
            iters: self.iters,
            eot_samples: self.eot_samples,
            votes: self.votes,
            seed,
            ..cfg
        }
    }
}

/// Plot-data sweeps, run for both purifiers under `ℓ∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub forward_t: Vec<usize>,
    pub reverse_steps: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            forward_t: vec![100, 110, 120, 130, 140, 150],
            reverse_steps: vec![1, 2, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub classifier: ClassifierSpec,
    pub diffusion: DiffusionSpec,
    pub finetune: FinetuneSpec,
    pub purifier: PurifierConfig,
    pub attack: AttackSpec,
    pub sweeps: SweepSpec,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            classifier: ClassifierSpec::default(),
            diffusion: DiffusionSpec::default(),
            finetune: FinetuneSpec::default(),
            purifier: PurifierConfig::default(),
            attack: AttackSpec::default(),
            sweeps: SweepSpec::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

/// Stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub dataset: u64,
    pub classifier: u64,
    pub pretrain: u64,
    pub finetune: u64,
    pub attack: u64,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<DatasetKind>,
    pub seed: Option<u64>,
    pub norm: Option<Norm>,
    pub eps: Option<f64>,
    pub iters: Option<usize>,
    pub eot: Option<usize>,
    pub forward_t: Option<usize>,
    pub reverse_steps: Option<usize>,
    pub sampler: Option<SamplerKind>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot render config: {e}")))
    }

    /// Applies flag overrides. `--norm` restricts the threats to one norm and
    /// `--eps` sets that norm's radius (`ℓ∞` when no norm is given).
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(kind) = o.dataset {
            self.dataset.kind = kind;
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(norm) = o.norm {
            self.attack.norms = vec![norm];
        }
        if let Some(eps) = o.eps {
            match o.norm.unwrap_or(Norm::Linf) {
                Norm::Linf => self.attack.linf_eps = Some(eps),
                Norm::L1 => self.attack.l1_eps = Some(eps),
                Norm::L2 => self.attack.l2_eps = Some(eps),
            }
        }
        if let Some(iters) = o.iters {
            self.attack.iters = iters;
        }
        if let Some(eot) = o.eot {
            self.attack.eot_samples = eot;
        }
        if let Some(t) = o.forward_t {
            self.purifier.forward_t = t;
        }
        if let Some(sampler) = o.sampler {
            self.purifier.sampler = sampler;
            if sampler == SamplerKind::Ddpm {
                self.purifier.reverse_steps = self.purifier.forward_t;
            }
        }
        if let Some(s) = o.reverse_steps {
            self.purifier.reverse_steps = s;
        }
        if let Some(out) = &o.out {
            self.output = out.clone();
        }
    }

    pub fn stage_seeds(&self) -> StageSeeds {
        let s = self.seed;
        StageSeeds {
            dataset: s,
            classifier: s.wrapping_add(1),
            pretrain: s.wrapping_add(2),
            finetune: s.wrapping_add(3),
            attack: s.wrapping_add(4),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.diffusion.schedule.build()
    }

    pub fn classifier_architecture(&self) -> Architecture {
        Architecture::classifier(self.dataset.dim, &self.classifier.hidden, 2)
    }

    pub fn denoiser_architecture(&self) -> Architecture {
        Architecture::denoiser(
            self.dataset.dim,
            &self.diffusion.hidden,
            self.diffusion.schedule.num_steps,
            self.diffusion.embed_dim,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.size < 2 || self.dataset.dim < 2 {
            return Err(Error::invalid(format!(
                "dataset needs size >= 2 and dim >= 2, got {} x {}",
                self.dataset.size, self.dataset.dim
            )));
        }
        let sched = self.schedule()?;
        self.classifier.train.validate()?;
        self.diffusion.pretrain.validate()?;
        self.finetune.train.validate()?;
        self.finetune.adv_noise.validate(&sched)?;
        self.purifier.validate(&sched)?;
        if let Some(t) = self.diffusion.max_timestep {
            if t == 0 || t > sched.num_steps() {
                return Err(Error::invalid(format!("max_timestep {t} outside 1..={}", sched.num_steps())));
            }
        }
        for path in [&self.classifier.checkpoint, &self.diffusion.checkpoint].into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::invalid(format!("checkpoint {} does not exist", path.display())));
            }
        }
        if self.attack.eval_examples == 0 || self.attack.repeats == 0 {
            return Err(Error::invalid("eval_examples and repeats must be >= 1".to_owned()));
        }
        for &norm in &self.attack.norms {
            self.attack.resolve(norm, self.dataset.dim, 0).validate()?;
        }
        for &t in &self.sweeps.forward_t {
            PurifierConfig { forward_t: t, ..self.purifier.clone() }.validate(&sched)?;
        }
        for &s in &self.sweeps.reverse_steps {
            PurifierConfig::ddim(self.purifier.forward_t, s).validate(&sched)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults_and_flags_win() {
        let text = "seed = 5\n[attack]\niters = 50\n[purifier]\nforward_t = 120\n";
        let mut cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.attack.iters, 50);
        assert_eq!(cfg.attack.eot_samples, 20);
        assert_eq!(cfg.purifier.forward_t, 120);
        cfg.apply(&Overrides {
            iters: Some(7),
            norm: Some(Norm::L2),
            eps: Some(0.1),
            ..Default::default()
        });
        assert_eq!(cfg.attack.iters, 7);
        assert_eq!(cfg.attack.norms, vec![Norm::L2]);
        let a = cfg.attack.resolve(Norm::L2, 2, 3);
        assert_eq!((a.radius, a.seed, a.iters), (0.1, 3, 7));
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_checkpoint_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.diffusion.checkpoint = Some(PathBuf::from("/nonexistent/x.ckpt"));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overridden_radius_scales_the_step() {
        let mut spec = AttackSpec { linf_eps: Some(16.0 / 255.0), ..AttackSpec::default() };
        let base = AttackConfig::for_dim(Norm::Linf, 2);
        let doubled = spec.resolve(Norm::Linf, 2, 0);
        assert!((doubled.step_size - 2.0 * base.step_size).abs() < 1e-15);
        spec.linf_eps = Some(0.0);
        let zero = spec.resolve(Norm::Linf, 2, 0);
        assert_eq!((zero.radius, zero.step_size), (0.0, base.step_size));
        zero.validate().unwrap();
    }

    #[test]
    fn unknown_keys_fail_to_parse_types() {
        assert!(ExperimentConfig::from_toml_str("seed = \"zero\"").is_err());
    }
}
