use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use adbm::attacks::{evaluate_robust_accuracy, Attack, Defense, SpsaConfig};
use adbm::diffusion::{DiracOracle, Norm};
use adbm::harness::{merge_reports, run_pipeline, Dataset, DatasetKind, ExperimentConfig, Overrides, Split};
use adbm::sampler::{Purifier, SamplerKind};
use adbm::tensor::{Mlp, Tensor};
use adbm::theory::{
    verify_bridge_identity, verify_elimination, verify_theorem1, verify_theorem2_core, Theorem2Mode, TheoremVerdict,
};
use adbm::training::{
    finetune_adbm, pretrain_diffusion, train_classifier, Checkpoint, TrainConfig, TrainedDenoiser,
};
use adbm::{harness, Error, Result};

#[derive(Parser)]
#[command(name = "adbm", version, about = "Adversarial diffusion bridge purification on toy data")]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    norm: Option<Norm>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    eot: Option<usize>,
    #[arg(long = "forward-t")]
    forward_t: Option<usize>,
    #[arg(long = "reverse-steps")]
    reverse_steps: Option<usize>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset,
            seed: self.seed,
            norm: self.norm,
            eps: self.eps,
            iters: self.iters,
            eot: self.eot,
            forward_t: self.forward_t,
            reverse_steps: self.reverse_steps,
            sampler: self.sampler,
            out: self.out.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    PgdEot,
    Spsa,
    Transfer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    Theorem1,
    Theorem2,
    Kt,
    Elimination,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.adds and test.adds.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train the classifier on <data>/train.adds.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Pretrain the denoiser on <data>/train.adds.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Bridge fine-tuning of a pretrained denoiser.
    FinetuneAdbm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
    },
    /// Purify a dataset file and write the result in the same format.
    Purify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
    },
    /// Attack a classifier, optionally behind a purifier.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Dataset file to attack (usually test.adds).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Purifier checkpoint; omit to attack the bare classifier.
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pgd-eot")]
        attack: AttackKind,
        /// Source classifier for transfer attacks.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Numerical checks of the bridge identities and the two bounds.
    Verify {
        #[arg(value_enum)]
        check: Check,
        #[command(flatten)]
        common: Common,
        /// Trained bridge checkpoint for theorem1; the Dirac oracle otherwise.
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
    },
    /// Every stage end to end.
    RunPipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Merge pipeline or attack reports into mean ± std tables.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(config: &Option<PathBuf>, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&common.overrides());
    eprintln!("# resolved config\n{}", cfg.to_toml_string()?);
    Ok(cfg)
}

fn out_path(cfg: &ExperimentConfig, file: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output)?;
    Ok(cfg.output.join(file))
}

fn load_model(path: &Path) -> Result<Mlp> {
    Checkpoint::load(path)?.model()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, &text)?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, size, dim } => {
            let mut cfg = resolve(&cli.config, &common)?;
            cfg.dataset.size = size.unwrap_or(cfg.dataset.size);
            cfg.dataset.dim = dim.unwrap_or(cfg.dataset.dim);
            let (train, test) = harness::gen_dataset(cfg.dataset.kind, cfg.dataset.size, cfg.dataset.dim, cfg.seed)?;
            train.save(&out_path(&cfg, "train.adds")?)?;
            test.save(&out_path(&cfg, "test.adds")?)?;
            println!("wrote {} train and {} test points to {}", train.len(), test.len(), cfg.output.display());
        }
        Command::TrainClassifier { common, data } => {
            let mut cfg = resolve(&cli.config, &common)?;
            let train = Dataset::load(&data.join("train.adds"), Split::Train)?;
            let test = Dataset::load(&data.join("test.adds"), Split::Test)?;
            cfg.dataset.dim = train.dim;
            let tc = TrainConfig {
                seed: cfg.stage_seeds().classifier,
                ..cfg.classifier.train.clone()
            };
            let (net, report) = train_classifier(cfg.classifier_architecture(), &train, &test, &tc)?;
            Checkpoint::of_model(&net, None, report.steps as u64, 0).save(&out_path(&cfg, "classifier.ckpt")?)?;
            write_json(&out_path(&cfg, "classifier.json")?, &report)?;
        }
        Command::TrainDiffusion { common, data } => {
            let mut cfg = resolve(&cli.config, &common)?;
            let train = Dataset::load(&data.join("train.adds"), Split::Train)?;
            cfg.dataset.dim = train.dim;
            let sched = cfg.schedule()?;
            let tc = TrainConfig {
                seed: cfg.stage_seeds().pretrain,
                ..cfg.diffusion.pretrain.clone()
            };
            let model = pretrain_diffusion(cfg.denoiser_architecture(), &sched, &train, &tc, cfg.diffusion.max_timestep)?;
            model.checkpoint(&sched).save(&out_path(&cfg, "pretrained.ckpt")?)?;
            println!("final loss {:.6}, rng digest {:016x}", model.losses.last().copied().unwrap_or(f64::NAN), model.rng_digest);
        }
        Command::FinetuneAdbm {
            common,
            data,
            classifier,
            diffusion,
        } => {
            let cfg = resolve(&cli.config, &common)?;
            let train = Dataset::load(&data.join("train.adds"), Split::Train)?;
            let cls = load_model(&classifier)?;
            let ckpt = Checkpoint::load(&diffusion)?;
            let sched = match ckpt.schedule {
                Some(sp) => sp.build()?,
                None => cfg.schedule()?,
            };
            let start = TrainedDenoiser::from_checkpoint(&ckpt)?;
            let tc = TrainConfig {
                seed: cfg.stage_seeds().finetune,
                ..cfg.finetune.train.clone()
            };
            let outcome = finetune_adbm(&start, &cls, &sched, &train, &tc, &cfg.finetune.adv_noise)?;
            outcome.model.checkpoint(&sched).save(&out_path(&cfg, "adbm.ckpt")?)?;
            println!("final loss {:.6}, rng digest {:016x}", outcome.model.losses.last().copied().unwrap_or(f64::NAN), outcome.model.rng_digest);
        }
        Command::Purify { common, input, diffusion } => {
            let cfg = resolve(&cli.config, &common)?;
            let data = Dataset::load(&input, Split::Test)?;
            let purifier = purifier_from(&diffusion, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let purified = purifier.purify(&data.features(), &mut rng, None)?;
            let mut out = data.clone();
            for (p, row) in out.points.iter_mut().zip(purified.data().chunks(data.dim)) {
                p.x0 = row.to_vec();
            }
            let path = out_path(&cfg, "purified.adds")?;
            out.save(&path)?;
            println!("purified {} points into {}", out.len(), path.display());
        }
        Command::Attack {
            common,
            data,
            classifier,
            diffusion,
            attack,
            source,
            examples,
            repeats,
        } => {
            let cfg = resolve(&cli.config, &common)?;
            let ds = Dataset::load(&data, Split::Test)?;
            let cls = load_model(&classifier)?;
            let (defense, name) = match &diffusion {
                Some(path) => (Defense::purified(purifier_from(path, &cfg)?, cls.clone()), "purified"),
                None => (Defense::undefended(cls.clone()), "none"),
            };
            let attack = match attack {
                AttackKind::PgdEot => Attack::PgdEot,
                AttackKind::Spsa => Attack::Spsa(SpsaConfig::default()),
                AttackKind::Transfer => Attack::Transfer(match &source {
                    Some(p) => load_model(p)?,
                    None => cls.clone(),
                }),
            };
            let n = examples.unwrap_or(cfg.attack.eval_examples).min(ds.len());
            let (x, y) = ds.gather(&(0..n).collect::<Vec<_>>());
            let norm = cfg.attack.norms.first().copied().unwrap_or(Norm::Linf);
            let acfg = cfg.attack.resolve(norm, ds.dim, cfg.stage_seeds().attack);
            let rep = evaluate_robust_accuracy(&defense, name, &x, &y, &attack, &acfg, repeats.unwrap_or(cfg.attack.repeats))?;
            let stem = format!("{}_{}_{}", attack.name(), name, norm.name());
            std::fs::create_dir_all(&cfg.output)?;
            rep.save(&cfg.output, &stem)?;
            println!(
                "{stem}: clean {:.4} ± {:.4}, robust {:.4} ± {:.4}",
                rep.clean_accuracy.mean, rep.clean_accuracy.std, rep.robust_accuracy.mean, rep.robust_accuracy.std
            );
        }
        Command::Verify {
            check,
            common,
            diffusion,
            data,
            draws,
        } => {
            let cfg = resolve(&cli.config, &common)?;
            let sched = cfg.schedule()?;
            let horizons = [10, 50, 100, 150, 200, 1000];
            let verdicts: Vec<TheoremVerdict> = match check {
                Check::Kt => vec![verify_bridge_identity(&sched, &horizons)?],
                Check::Elimination => vec![verify_elimination(&sched, &horizons, 0.01)?],
                Check::Theorem2 => {
                    let mut v = Vec::new();
                    let eps_a = vec![8.0 / 255.0; cfg.dataset.dim];
                    for &h in &[50, 100, 200] {
                        let coeffs = sched.bridge_closed_form(h)?;
                        for t in [1, h / 2, h - 1] {
                            v.push(verify_theorem2_core(&sched, &coeffs, t, &eps_a, Theorem2Mode::ClosedForm)?);
                        }
                        let mode = Theorem2Mode::MonteCarlo { draws, seed: cfg.seed };
                        v.push(verify_theorem2_core(&sched, &coeffs, h / 2, &eps_a, mode)?);
                    }
                    v
                }
                Check::Theorem1 => {
                    let horizon = cfg.purifier.forward_t;
                    let coeffs = sched.bridge_closed_form(horizon)?;
                    let x0 = match &data {
                        Some(p) => {
                            let ds = Dataset::load(p, Split::Test)?;
                            ds.gather(&(0..ds.len().min(64)).collect::<Vec<_>>()).0
                        }
                        None => Tensor::from_rows(&[vec![0.3; cfg.dataset.dim]])?,
                    };
                    let eps_a = Tensor::new(x0.shape().to_vec(), vec![8.0 / 255.0; x0.len()])?;
                    let verdict = match &diffusion {
                        Some(p) => verify_theorem1(&sched, &coeffs, &load_model(p)?, &x0, &eps_a, 200, cfg.seed)?,
                        None => {
                            let oracle = DiracOracle::new(x0.row(0).to_vec(), Arc::new(sched.clone()));
                            let first = Tensor::from_rows(&[x0.row(0).to_vec()])?;
                            let ea = Tensor::from_rows(&[eps_a.row(0).to_vec()])?;
                            verify_theorem1(&sched, &coeffs, &oracle, &first, &ea, 200, cfg.seed)?
                        }
                    };
                    vec![verdict]
                }
            };
            let all_pass = verdicts.iter().all(|v| v.pass);
            let name = format!("verify_{}.json", check.to_possible_value().map(|v| v.get_name().to_owned()).unwrap_or_default());
            write_json(&out_path(&cfg, &name)?, &verdicts)?;
            if !all_pass {
                return Err(Error::InvalidArgument("verification failed".to_owned()));
            }
        }
        Command::RunPipeline { common } => {
            let cfg = resolve(&cli.config, &common)?;
            let report = run_pipeline(&cfg)?;
            for row in &report.table {
                println!("{row:?}");
            }
            println!("reports in {}", cfg.output.display());
        }
        Command::Report { paths, out } => {
            let table = merge_reports(&paths)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                table.write_csv(&dir.join("merged.csv"))?;
                std::fs::write(dir.join("merged.md"), table.to_markdown())?;
            }
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn purifier_from(path: &Path, cfg: &ExperimentConfig) -> Result<Purifier> {
    let ckpt = Checkpoint::load(path)?;
    let sched = match ckpt.schedule {
        Some(sp) => sp.build()?,
        None => cfg.schedule()?,
    };
    Purifier::new(cfg.purifier.clone(), Arc::new(sched), Arc::new(ckpt.model()?))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
