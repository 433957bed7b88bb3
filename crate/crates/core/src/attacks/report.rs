//! Robust-accuracy evaluation and its serialised report.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pgd_eot_attack, spsa_attack, transfer_attack, AttackBatch, AttackConfig, Defense, SpsaConfig};
use crate::error::{Error, Result};
use crate::tensor::{Mlp, Tensor};

/// Which attack [`evaluate_robust_accuracy`] runs.
#[derive(Clone)]
pub enum Attack {
    PgdEot,
    Spsa(SpsaConfig),
    /// Adversarial examples crafted on this undefended source classifier.
    Transfer(Mlp),
}

impl Attack {
    pub fn name(&self) -> &'static str {
        match self {
            Attack::PgdEot => "pgd-eot",
            Attack::Spsa(_) => "spsa",
            Attack::Transfer(_) => "transfer",
        }
    }

    fn run(&self, defense: &Defense, x0: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackBatch> {
        match self {
            Attack::PgdEot => pgd_eot_attack(defense, x0, labels, cfg),
            Attack::Spsa(s) => spsa_attack(defense, x0, labels, cfg, s),
            Attack::Transfer(src) => transfer_attack(src, x0, labels, cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation; empty input is rejected.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to aggregate".to_owned()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub repeat: usize,
    pub index: usize,
    pub label: usize,
    pub clean_correct: bool,
    pub adv_correct: bool,
    pub final_perturbation_norm: f64,
    /// Inside the norm ball (with `1e-9` slack) and the `[0, 1]` box.
    pub feasible: bool,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub seed: u64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub defense: String,
    pub config: AttackConfig,
    pub seed: u64,
    pub num_examples: usize,
    pub clean_accuracy: Stat,
    pub robust_accuracy: Stat,
    pub max_perturbation_norm: f64,
    pub failed_examples: usize,
    pub infeasible_examples: usize,
    pub repeats: Vec<RepeatOutcome>,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub examples: Vec<ExampleOutcome>,
}

impl AttackReport {
    /// One JSON object per example.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes `<stem>.jsonl` (examples), `<stem>.json` (aggregate) and
    /// `<stem>.csv` (one table row).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.jsonl")))?))?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        let mut csv = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        csv.write_record([
            "attack",
            "defense",
            "norm",
            "radius",
            "clean_mean",
            "clean_std",
            "robust_mean",
            "robust_std",
        ])?;
        csv.write_record([
            self.attack.clone(),
            self.defense.clone(),
            self.config.norm.name().to_owned(),
            self.config.radius.to_string(),
            self.clean_accuracy.mean.to_string(),
            self.clean_accuracy.std.to_string(),
            self.robust_accuracy.mean.to_string(),
            self.robust_accuracy.std.to_string(),
        ])?;
        csv.flush()?;
        Ok(())
    }
}

/// Attacks every example `repeats` times with independent seeds
/// (`cfg.seed + r`). Within a repeat the clean and adversarial inputs are
/// classified under the same purification draws.
pub fn evaluate_robust_accuracy(
    defense: &Defense,
    defense_name: &str,
    x0: &Tensor,
    labels: &[usize],
    attack: &Attack,
    cfg: &AttackConfig,
    repeats: usize,
) -> Result<AttackReport> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset".to_owned()));
    }
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1".to_owned()));
    }
    let start = Instant::now();
    let n = labels.len();
    let mut outcomes = Vec::with_capacity(repeats);
    let mut examples = Vec::with_capacity(n * repeats);
    let mut max_norm: f64 = 0.0;
    let mut failed_total = 0;
    let mut infeasible = 0;
    for r in 0..repeats {
        let seed = cfg.seed.wrapping_add(r as u64);
        let run_cfg = AttackConfig { seed, ..cfg.clone() };
        // Clean and adversarial verdicts share purification draws.
        let verdict_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
        let clean_pred = defense.predict(x0, cfg.votes, &mut ChaCha8Rng::seed_from_u64(verdict_seed))?;
        let batch = attack.run(defense, x0, labels, &run_cfg)?;
        let adv_pred = defense.predict(&batch.x_adv, cfg.votes, &mut ChaCha8Rng::seed_from_u64(verdict_seed))?;
        let mut clean_hits = 0;
        let mut adv_hits = 0;
        for (i, ex) in batch.examples(x0, cfg.norm, cfg.radius).into_iter().enumerate() {
            let clean_correct = clean_pred[i] == labels[i];
            let adv_correct = adv_pred[i] == labels[i];
            clean_hits += clean_correct as usize;
            adv_hits += adv_correct as usize;
            let norm = ex.perturbation_norm();
            max_norm = max_norm.max(norm);
            failed_total += batch.failed[i] as usize;
            let feasible = ex.is_feasible(1e-9);
            infeasible += usize::from(!feasible);
            examples.push(ExampleOutcome {
                repeat: r,
                index: i,
                label: labels[i],
                clean_correct,
                adv_correct,
                final_perturbation_norm: norm,
                feasible,
                failed: batch.failed[i],
            });
        }
        outcomes.push(RepeatOutcome {
            seed,
            clean_accuracy: clean_hits as f64 / n as f64,
            robust_accuracy: adv_hits as f64 / n as f64,
        });
    }
    let clean: Vec<f64> = outcomes.iter().map(|o| o.clean_accuracy).collect();
    let robust: Vec<f64> = outcomes.iter().map(|o| o.robust_accuracy).collect();
    Ok(AttackReport {
        attack: attack.name().to_owned(),
        defense: defense_name.to_owned(),
        config: cfg.clone(),
        seed: cfg.seed,
        num_examples: n,
        clean_accuracy: Stat::of(&clean)?,
        robust_accuracy: Stat::of(&robust)?,
        max_perturbation_norm: max_norm,
        failed_examples: failed_total,
        infeasible_examples: infeasible,
        repeats: outcomes,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Norm;
    use crate::tensor::Architecture;

    fn setup() -> (Defense, Tensor, Vec<usize>) {
        let arch = Architecture::classifier(2, &[], 2);
        let w = Tensor::matrix(2, 2, vec![0.0, 10.0, 0.0, 10.0]).unwrap();
        let b = Tensor::vector(vec![0.0, -10.0]).unwrap();
        let cls = Mlp::from_params(arch, vec![w, b]).unwrap();
        let x0 = Tensor::from_rows(&[vec![0.2, 0.2], vec![0.8, 0.8], vec![0.49, 0.49], vec![0.52, 0.5]]).unwrap();
        (Defense::undefended(cls), x0, vec![0, 1, 0, 1])
    }

    #[test]
    fn report_aggregates_repeats() {
        let (def, x0, y) = setup();
        let cfg = AttackConfig {
            iters: 10,
            eot_samples: 1,
            ..AttackConfig::reference(Norm::Linf)
        };
        let rep = evaluate_robust_accuracy(&def, "none", &x0, &y, &Attack::PgdEot, &cfg, 3).unwrap();
        assert_eq!(rep.repeats.len(), 3);
        assert_eq!(rep.clean_accuracy.mean, 1.0);
        assert_eq!(rep.robust_accuracy.mean, 0.5);
        assert_eq!(rep.robust_accuracy.std, 0.0);
        assert!(rep.max_perturbation_norm <= cfg.radius + 1e-9);
        assert_eq!(rep.infeasible_examples, 0);
        assert_eq!(rep.examples.len(), 12);

        let dir = tempfile::tempdir().unwrap();
        rep.save(dir.path(), "r").unwrap();
        let back: AttackReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back.robust_accuracy, rep.robust_accuracy);
        let lines = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 12);
    }

    #[test]
    fn stat_handles_edges() {
        assert!(Stat::of(&[]).is_err());
        assert_eq!(Stat::of(&[0.4]).unwrap(), Stat { mean: 0.4, std: 0.0 });
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
