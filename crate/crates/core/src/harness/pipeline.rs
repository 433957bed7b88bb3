//! End-to-end run: data, classifier, pretraining, bridge fine-tuning, then
//! attacks against both purifiers and the forward/reverse step sweeps.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, StageSeeds};
use super::{gen_dataset, Dataset};
use crate::attacks::{evaluate_robust_accuracy, Attack, AttackReport, Defense, Stat};
use crate::diffusion::Norm;
use crate::error::{Error, Result};
use crate::sampler::{Purifier, PurifierConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Mlp, Tensor};
use crate::training::{
    accuracy, finetune_adbm, pretrain_diffusion, train_classifier, Checkpoint, ClassifierReport, TrainConfig,
    TrainedDenoiser,
};

pub const DIFFPURE: &str = "diffpure";
pub const ADBM: &str = "adbm";

/// Trained models and data from the first four stages.
pub struct Artifacts {
    pub schedule: Arc<NoiseSchedule>,
    pub train: Dataset,
    pub test: Dataset,
    pub classifier: Mlp,
    pub classifier_report: ClassifierReport,
    pub pretrained: TrainedDenoiser,
    pub finetuned: TrainedDenoiser,
    /// Mean `ℓ∞` size of the fine-tuning noise.
    pub mean_noise_magnitude: f64,
}

impl Artifacts {
    pub fn denoiser(&self, defense: &str) -> &Mlp {
        if defense == ADBM {
            &self.finetuned.ema
        } else {
            &self.pretrained.ema
        }
    }

    pub fn defense(&self, defense: &str, purifier: &PurifierConfig) -> Result<Defense> {
        let p = Purifier::new(purifier.clone(), self.schedule.clone(), Arc::new(self.denoiser(defense).clone()))?;
        Ok(Defense::purified(p, self.classifier.clone()))
    }

    /// First `n` test points as an attack batch.
    pub fn eval_set(&self, n: usize) -> (Tensor, Vec<usize>) {
        let n = n.min(self.test.len());
        self.test.gather(&(0..n).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDigests {
    pub classifier: String,
    pub pretrained: String,
    pub finetuned: String,
    pub pretrain_rng: u64,
    pub finetune_rng: u64,
}

/// One table row: clean accuracy, robust accuracy per norm and their
/// average, each as mean ± std over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub defense: String,
    pub clean: Stat,
    pub linf: Option<Stat>,
    pub l1: Option<Stat>,
    pub l2: Option<Stat>,
    pub average: Option<Stat>,
}

impl TableRow {
    pub fn norm(&self, norm: Norm) -> Option<Stat> {
        match norm {
            Norm::Linf => self.linf,
            Norm::L1 => self.l1,
            Norm::L2 => self.l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub defense: String,
    pub forward_t: usize,
    pub reverse_steps: usize,
    pub clean: Stat,
    pub robust: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: ExperimentConfig,
    pub seeds: StageSeeds,
    pub classifier: ClassifierReport,
    pub digests: ModelDigests,
    pub table: Vec<TableRow>,
    pub evaluations: Vec<AttackReport>,
    pub forward_sweep: Vec<SweepPoint>,
    pub reverse_sweep: Vec<SweepPoint>,
    pub wall_clock_secs: f64,
}

impl PipelineReport {
    pub fn row(&self, defense: &str) -> Option<&TableRow> {
        self.table.iter().find(|r| r.defense == defense)
    }

    /// `pipeline.json`, `table.csv`, `forward_sweep.csv` and
    /// `reverse_sweep.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("pipeline.json"), serde_json::to_string_pretty(self)?)?;
        write_table_csv(&dir.join("table.csv"), &self.table)?;
        write_sweep_csv(&dir.join("forward_sweep.csv"), &self.forward_sweep)?;
        write_sweep_csv(&dir.join("reverse_sweep.csv"), &self.reverse_sweep)?;
        Ok(())
    }
}

fn fmt_opt(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [s.mean.to_string(), s.std.to_string()],
        None => [String::new(), String::new()],
    }
}

fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "defense",
        "clean_mean",
        "clean_std",
        "linf_mean",
        "linf_std",
        "l1_mean",
        "l1_std",
        "l2_mean",
        "l2_std",
        "average_mean",
        "average_std",
    ])?;
    for r in rows {
        let mut rec = vec![r.defense.clone()];
        rec.extend(fmt_opt(Some(r.clean)));
        for s in [r.linf, r.l1, r.l2, r.average] {
            rec.extend(fmt_opt(s));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "defense",
        "forward_t",
        "reverse_steps",
        "clean_mean",
        "clean_std",
        "robust_mean",
        "robust_std",
    ])?;
    for p in points {
        w.write_record([
            p.defense.clone(),
            p.forward_t.to_string(),
            p.reverse_steps.to_string(),
            p.clean.mean.to_string(),
            p.clean.std.to_string(),
            p.robust.mean.to_string(),
            p.robust.std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn mean_cross_entropy(net: &Mlp, data: &Dataset) -> Result<f64> {
    let logits = net.eval(&data.features(), None)?;
    let k = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks(k)
        .zip(data.labels())
        .map(|(row, y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
        })
        .sum();
    Ok(total / data.len() as f64)
}

fn stage<T>(name: &'static str, seed: u64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name,
        seed,
        source: Box::new(e),
    })
}

/// Data generation, classifier training, pretraining and fine-tuning.
/// Configured checkpoints replace the corresponding training stage.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let seeds = cfg.stage_seeds();
    let schedule = Arc::new(cfg.schedule()?);
    let (train, test) = stage("gen-data", seeds.dataset, || {
        gen_dataset(cfg.dataset.kind, cfg.dataset.size, cfg.dataset.dim, seeds.dataset)
    })?;

    let (classifier, classifier_report) = stage("train-classifier", seeds.classifier, || {
        let arch = cfg.classifier_architecture();
        match &cfg.classifier.checkpoint {
            Some(path) => {
                let ckpt = Checkpoint::load_expecting(path, &arch)?;
                let net = ckpt.model()?;
                let report = ClassifierReport {
                    steps: ckpt.step as usize,
                    final_loss: mean_cross_entropy(&net, &train)?,
                    train_accuracy: accuracy(&net, &train)?,
                    test_accuracy: accuracy(&net, &test)?,
                };
                Ok((net, report))
            }
            None => {
                let tc = TrainConfig {
                    seed: seeds.classifier,
                    ..cfg.classifier.train.clone()
                };
                train_classifier(arch, &train, &test, &tc)
            }
        }
    })?;

    let pretrained = stage("train-diffusion", seeds.pretrain, || match &cfg.diffusion.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load_expecting(path, &cfg.denoiser_architecture())?;
            if let Some(sp) = ckpt.schedule {
                if sp != cfg.diffusion.schedule {
                    return Err(Error::invalid(format!(
                        "checkpoint schedule {sp:?} differs from configured {:?}",
                        cfg.diffusion.schedule
                    )));
                }
            }
            TrainedDenoiser::from_checkpoint(&ckpt)
        }
        None => {
            let tc = TrainConfig {
                seed: seeds.pretrain,
                ..cfg.diffusion.pretrain.clone()
            };
            pretrain_diffusion(cfg.denoiser_architecture(), &schedule, &train, &tc, cfg.diffusion.max_timestep)
        }
    })?;

    let outcome = stage("finetune-adbm", seeds.finetune, || {
        let tc = TrainConfig {
            seed: seeds.finetune,
            ..cfg.finetune.train.clone()
        };
        finetune_adbm(&pretrained, &classifier, &schedule, &train, &tc, &cfg.finetune.adv_noise)
    })?;
    let mags = &outcome.noise_magnitude;
    let mean_noise_magnitude = if mags.is_empty() {
        0.0
    } else {
        mags.iter().sum::<f64>() / mags.len() as f64
    };

    Ok(Artifacts {
        schedule,
        train,
        test,
        classifier,
        classifier_report,
        pretrained,
        finetuned: outcome.model,
        mean_noise_magnitude,
    })
}

/// Robust accuracy of `defense` under `norm` with the configured budget.
pub fn evaluate_defense(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    defense: &str,
    purifier: &PurifierConfig,
    norm: Norm,
) -> Result<AttackReport> {
    let seed = cfg.stage_seeds().attack;
    stage("evaluate", seed, || {
        let def = art.defense(defense, purifier)?;
        let (x, y) = art.eval_set(cfg.attack.eval_examples);
        let acfg = cfg.attack.resolve(norm, cfg.dataset.dim, seed);
        evaluate_robust_accuracy(&def, defense, &x, &y, &Attack::PgdEot, &acfg, cfg.attack.repeats)
    })
}

fn per_repeat(rep: &AttackReport, f: impl Fn(&crate::attacks::RepeatOutcome) -> f64) -> Vec<f64> {
    rep.repeats.iter().map(f).collect()
}

fn table_row(defense: &str, reports: &[AttackReport]) -> Result<TableRow> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("no threats configured".to_owned()))?;
    let pick = |norm: Norm| -> Result<Option<Stat>> {
        reports
            .iter()
            .find(|r| r.config.norm == norm)
            .map(|r| Stat::of(&per_repeat(r, |o| o.robust_accuracy)))
            .transpose()
    };
    let repeats = first.repeats.len();
    let average: Vec<f64> = (0..repeats)
        .map(|i| reports.iter().map(|r| r.repeats[i].robust_accuracy).sum::<f64>() / reports.len() as f64)
        .collect();
    Ok(TableRow {
        defense: defense.to_owned(),
        clean: Stat::of(&per_repeat(first, |o| o.clean_accuracy))?,
        linf: pick(Norm::Linf)?,
        l1: pick(Norm::L1)?,
        l2: pick(Norm::L2)?,
        average: Some(Stat::of(&average)?),
    })
}

fn sweep_point(rep: &AttackReport, purifier: &PurifierConfig) -> SweepPoint {
    SweepPoint {
        defense: rep.defense.clone(),
        forward_t: purifier.forward_t,
        reverse_steps: purifier.reverse_steps,
        clean: rep.clean_accuracy,
        robust: rep.robust_accuracy,
    }
}

/// Attacks and sweeps over prepared artifacts; writes every report under
/// `cfg.output`.
pub fn evaluate(cfg: &ExperimentConfig, art: &Artifacts) -> Result<PipelineReport> {
    let start = Instant::now();
    let out = &cfg.output;
    std::fs::create_dir_all(out)?;
    let mut table = Vec::new();
    let mut evaluations = Vec::new();
    for defense in [DIFFPURE, ADBM] {
        let mut reports = Vec::new();
        for &norm in &cfg.attack.norms {
            let rep = evaluate_defense(cfg, art, defense, &cfg.purifier, norm)?;
            rep.save(&out.join("attacks"), &format!("{defense}_{}", norm.name()))?;
            reports.push(rep);
        }
        if !reports.is_empty() {
            table.push(table_row(defense, &reports)?);
        }
        evaluations.extend(reports);
    }

    let mut forward_sweep = Vec::new();
    let mut reverse_sweep = Vec::new();
    for defense in [DIFFPURE, ADBM] {
        for &t in &cfg.sweeps.forward_t {
            let pc = PurifierConfig {
                forward_t: t,
                reverse_steps: cfg.purifier.reverse_steps.min(t),
                ..cfg.purifier.clone()
            };
            let pc = if pc.sampler == crate::sampler::SamplerKind::Ddpm {
                PurifierConfig { reverse_steps: t, ..pc }
            } else {
                pc
            };
            let rep = evaluate_defense(cfg, art, defense, &pc, Norm::Linf)?;
            forward_sweep.push(sweep_point(&rep, &pc));
        }
        for &s in &cfg.sweeps.reverse_steps {
            let pc = PurifierConfig::ddim(cfg.purifier.forward_t, s);
            let rep = evaluate_defense(cfg, art, defense, &pc, Norm::Linf)?;
            reverse_sweep.push(sweep_point(&rep, &pc));
        }
    }

    let report = PipelineReport {
        config: cfg.clone(),
        seeds: cfg.stage_seeds(),
        classifier: art.classifier_report.clone(),
        digests: ModelDigests {
            classifier: art.classifier.digest(),
            pretrained: art.pretrained.ema.digest(),
            finetuned: art.finetuned.ema.digest(),
            pretrain_rng: art.pretrained.rng_digest,
            finetune_rng: art.finetuned.rng_digest,
        },
        table,
        evaluations,
        forward_sweep,
        reverse_sweep,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    report.save(out)?;
    Ok(report)
}

/// Runs every stage, saving the datasets, checkpoints and reports under
/// `cfg.output` together with the resolved config.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    let art = prepare(cfg)?;
    let out = &cfg.output;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    art.train.save(&out.join("train.adds"))?;
    art.test.save(&out.join("test.adds"))?;
    Checkpoint::of_model(&art.classifier, None, art.classifier_report.steps as u64, 0).save(&out.join("classifier.ckpt"))?;
    art.pretrained.checkpoint(&art.schedule).save(&out.join("pretrained.ckpt"))?;
    art.finetuned.checkpoint(&art.schedule).save(&out.join("adbm.ckpt"))?;
    evaluate(cfg, &art)
}

/// A configuration small enough for unit and smoke tests.
pub fn smoke_config(output: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        output: output.to_path_buf(),
        ..Default::default()
    };
    cfg.dataset.size = 200;
    cfg.classifier.hidden = vec![16];
    cfg.classifier.train.steps = 200;
    cfg.classifier.train.learning_rate = 1e-2;
    cfg.diffusion.hidden = vec![32];
    cfg.diffusion.embed_dim = 8;
    cfg.diffusion.pretrain.steps = 100;
    cfg.diffusion.pretrain.batch_size = 32;
    cfg.finetune.train.steps = 10;
    cfg.finetune.train.batch_size = 32;
    cfg.purifier = PurifierConfig::ddim(100, 2);
    cfg.attack.iters = 3;
    cfg.attack.eot_samples = 2;
    cfg.attack.eval_examples = 8;
    cfg.attack.repeats = 2;
    cfg.sweeps.forward_t = vec![100, 150];
    cfg.sweeps.reverse_steps = vec![1, 2];
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_pipeline_emits_table_and_sweeps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        let rep = run_pipeline(&cfg).unwrap();
        assert_eq!(rep.table.len(), 2);
        let row = rep.row(ADBM).unwrap();
        assert!(row.linf.is_some() && row.l1.is_some() && row.l2.is_some());
        let avg = (row.linf.unwrap().mean + row.l1.unwrap().mean + row.l2.unwrap().mean) / 3.0;
        assert!((row.average.unwrap().mean - avg).abs() < 1e-12);
        assert_eq!(rep.forward_sweep.len(), 4);
        assert_eq!(rep.reverse_sweep.len(), 4);
        for f in ["pipeline.json", "table.csv", "forward_sweep.csv", "reverse_sweep.csv", "config.toml", "adbm.ckpt"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let header = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert!(header.starts_with("defense,clean_mean,clean_std,linf_mean"));
        let back: PipelineReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("pipeline.json")).unwrap()).unwrap();
        let mut expected = rep.clone();
        expected.evaluations.iter_mut().for_each(|e| e.examples.clear());
        assert_eq!(back, expected);
    }

    #[test]
    fn stage_failure_names_stage_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke_config(dir.path());
        cfg.seed = 9;
        cfg.diffusion.pretrain.learning_rate = 1e300;
        match prepare(&cfg) {
            Err(Error::Stage { stage, seed, .. }) => assert_eq!((stage, seed), ("train-diffusion", 11)),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("diverging pretraining should fail"),
        }
    }
}
