use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use stegdetect::attacks::{self, AttackConfig, AttackKind, AttackMode};
use stegdetect::corpus::{self, DatasetManifest, Role};
use stegdetect::ensemble::{self, Class, EnsembleModel};
use stegdetect::pipeline::{self, Confusion, ExperimentConfig, FeatureKind, RowLabel};
use stegdetect::store::FeatureTable;
use stegdetect::victim::{self, VictimModel};

#[derive(Parser)]
#[command(name = "stegdetect", version, about = "Detect adversarial images with steganalysis features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        n_classes: Option<usize>,
    },
    /// Train the victim classifier on the train split.
    TrainVictim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Attack manifest images; adversarial files are written beside the originals.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        victim: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
        /// Targeted mode toward this class.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "train,test")]
        roles: Vec<Role>,
    },
    /// Compute modification probability maps for images.
    Mpm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        l: Option<usize>,
    },
    /// Extract a feature store (binary + CSV) with row labels.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        feature: FeatureKind,
        /// Needed for enhanced features.
        #[arg(long)]
        victim: Option<PathBuf>,
        #[command(flatten)]
        attack: AttackArgs,
        /// Also extract the adversarial counterparts with this tag, e.g. fgsm-eps8.
        #[arg(long)]
        adv_tag: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "train,test")]
        roles: Vec<Role>,
        #[arg(long)]
        l: Option<usize>,
    },
    /// Train an FLD-ensemble detector from a feature store.
    TrainDetector {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "train")]
        role: Role,
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate one detector, or a bank of detectors when several are given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// One feature store per model, same row order.
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "test")]
        role: Role,
    },
    /// Run the whole experiment with caching.
    Reproduce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attack: Option<AttackKind>,
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<FeatureKind>>,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        mpm_l: Option<usize>,
    },
}

#[derive(Args, Clone)]
struct AttackArgs {
    #[arg(long)]
    attack: Option<AttackKind>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
}

impl AttackArgs {
    fn resolve(&self, cfg: &mut ExperimentConfig) -> (AttackKind, AttackConfig) {
        if let Some(a) = self.attack {
            cfg.attack = a;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilons = vec![e];
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if self.max_iters.is_some() {
            cfg.max_iters = self.max_iters;
        }
        if let Some(k) = self.kappa {
            cfg.kappa = k;
        }
        let acfg = cfg.attack_settings().pop().expect("at least one setting");
        (cfg.attack, acfg)
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn init(&self) -> Result<()> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build_global()
            .context("starting worker pool")?;
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenCorpus {
            common,
            n_images,
            size,
            n_classes,
        } => {
            common.init()?;
            let mut cfg = common.load()?;
            cfg.corpus.n_images = n_images.unwrap_or(cfg.corpus.n_images);
            cfg.corpus.size = size.unwrap_or(cfg.corpus.size);
            cfg.corpus.n_classes = n_classes.unwrap_or(cfg.corpus.n_classes);
            let m = corpus::gen_synthetic_corpus(&cfg.corpus_params(), &common.out_dir)?;
            println!(
                "wrote {} images ({} train / {} val / {} test) to {}",
                m.entries.len(),
                m.count(Role::Train),
                m.count(Role::Val),
                m.count(Role::Test),
                common.out_dir.display()
            );
        }
        Command::TrainVictim {
            common,
            manifest,
            epochs,
            learning_rate,
        } => {
            common.init()?;
            let mut cfg = common.load()?;
            cfg.victim.epochs = epochs.unwrap_or(cfg.victim.epochs);
            cfg.victim.learning_rate = learning_rate.unwrap_or(cfg.victim.learning_rate);
            let m = DatasetManifest::load(&manifest)?;
            let (model, report) = victim::train_victim::<f64>(&m, &cfg.train_config())?;
            let path = common.out_dir.join("victim.bin");
            model.save(&path)?;
            println!("epoch,loss");
            for (i, l) in report.epoch_losses.iter().enumerate() {
                println!("{},{l}", i + 1);
            }
            println!("train accuracy {:.4}; checkpoint {}", report.train_accuracy, path.display());
        }
        Command::Attack {
            common,
            manifest,
            victim,
            attack,
            target,
            roles,
        } => {
            common.init()?;
            let mut cfg = common.load()?;
            let (kind, mut acfg) = attack.resolve(&mut cfg);
            if let Some(t) = target {
                acfg = acfg.targeted(t);
            }
            acfg.validate()?;
            let m = DatasetManifest::load(&manifest)?;
            let model = VictimModel::<f64>::load(&victim)?;
            let tag = match acfg.mode {
                AttackMode::Untargeted => attacks::param_tag(kind, &acfg),
                AttackMode::Targeted(t) => format!("{}-t{t}", attacks::param_tag(kind, &acfg)),
            };
            let csv = common.out_dir.join(format!("attack-{tag}.csv"));
            let results = pipeline::attack_manifest(&m, &model, kind, &acfg, &roles, &csv)?;
            let ok = results.iter().filter(|(_, r)| r.success).count();
            let mean_l2 = results.iter().map(|(_, r)| r.l2).sum::<f64>() / results.len().max(1) as f64;
            println!("attack    images  success  mean_l2");
            println!("{:<9} {:>6}  {:>7.4}  {:>7.2}", tag, results.len(), ok as f64 / results.len().max(1) as f64, mean_l2);
            println!("results: {}", csv.display());
        }
        Command::Mpm {
            common,
            victim,
            images,
            attack,
            l,
        } => {
            common.init()?;
            let mut cfg = common.load()?;
            cfg.mpm_l = l.unwrap_or(cfg.mpm_l);
            attack.resolve(&mut cfg);
            let spec = cfg.feature_spec();
            let model = VictimModel::<f64>::load(&victim)?;
            images.par_iter().enumerate().try_for_each(|(i, path)| -> Result<()> {
                let x = corpus::load_image(path)?;
                let p = pipeline::compute_mpm(&model, &x, &spec, i as u64)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                p.save(common.out_dir.join(format!("{stem}.pf1")))?;
                corpus::save_image(common.out_dir.join(format!("{stem}.mpm.pgm")), &p.to_visual())?;
                Ok(())
            })?;
            println!("wrote {} maps to {}", images.len(), common.out_dir.display());
        }
        Command::Extract {
            common,
            manifest,
            feature,
            victim,
            attack,
            adv_tag,
            roles,
            l,
        } => {
            common.init()?;
            let mut cfg = common.load()?;
            cfg.mpm_l = l.unwrap_or(cfg.mpm_l);
            attack.resolve(&mut cfg);
            let spec = cfg.feature_spec();
            let model = victim.map(VictimModel::<f64>::load).transpose()?;
            let m = DatasetManifest::load(&manifest)?;
            let mut sources: Vec<(PathBuf, Class, Role, u64)> = Vec::new();
            for (i, e) in m.entries.iter().enumerate().filter(|(_, e)| roles.contains(&e.role)) {
                sources.push((e.path.clone(), Class::Normal, e.role, i as u64));
                if let Some(tag) = &adv_tag {
                    sources.push((pipeline::adversarial_path(&e.path, tag), Class::Adversarial, e.role, i as u64));
                }
            }
            let images = sources
                .par_iter()
                .map(|s| corpus::load_image(m.root.join(&s.0)))
                .collect::<stegdetect::Result<Vec<_>>>()?;
            let items: Vec<_> = images.iter().zip(&sources).map(|(x, s)| (x, s.3)).collect();
            let table = pipeline::extract_batch(feature, &items, &spec, model.as_ref())?;
            let name = match &adv_tag {
                Some(t) => format!("{feature}-{t}"),
                None => feature.to_string(),
            };
            let base = common.out_dir.join(&name);
            table.save(base.with_extension("features.bin"))?;
            write(&base.with_extension("features.csv"), table.to_csv())?;
            let labels: Vec<RowLabel> = sources
                .iter()
                .map(|s| RowLabel {
                    path: s.0.display().to_string(),
                    class: s.1,
                    role: s.2,
                })
                .collect();
            pipeline::write_labels(&base.with_extension("labels.csv"), &labels)?;
            println!("{} rows x {} features ({}) -> {}.*", table.rows(), table.dim(), table.descriptor(), base.display());
        }
        Command::TrainDetector {
            common,
            features,
            labels,
            role,
            name,
        } => {
            common.init()?;
            let cfg = common.load()?;
            let (table, y) = select_rows(&features, &labels, role)?;
            let out = ensemble::ensemble_train(&table, &y, cfg.ensemble_seed(), &cfg.ensemble)?;
            let name = name.unwrap_or_else(|| table.descriptor().replace(':', "-"));
            let model_path = common.out_dir.join(format!("{name}.model.bin"));
            out.model.save(&model_path)?;
            let curve = pipeline::oob_curve_csv(&out.curve);
            write(&common.out_dir.join(format!("{name}.oob.csv")), curve.clone())?;
            print!("{curve}");
            println!(
                "selected d_sub={} L={} oob_error={:.4} (covered {}, skipped {}); model {}",
                out.model.d_sub,
                out.model.n_learners(),
                out.oob.error,
                out.oob.covered,
                out.oob.skipped,
                model_path.display()
            );
        }
        Command::Evaluate {
            common,
            models,
            features,
            labels,
            role,
        } => {
            common.init()?;
            if models.len() != features.len() {
                bail!("{} models but {} feature stores", models.len(), features.len());
            }
            let models = models
                .iter()
                .map(|p| EnsembleModel::<f64>::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let mut tables = Vec::new();
            let mut y = Vec::new();
            for f in &features {
                let (t, l) = select_rows(f, &labels, role)?;
                tables.push(t);
                y = l;
            }
            let (name, c) = if models.len() == 1 {
                (models[0].descriptor.clone(), pipeline::evaluate(&models[0], &tables[0], &y)?)
            } else {
                ("bank".to_string(), pipeline::evaluate_bank(&models, &tables, &y)?)
            };
            let csv = evaluation_csv(&name, &c);
            write(&common.out_dir.join("evaluation.csv"), csv)?;
            println!("detector              tn    fp    fn    tp   normal      adv  average");
            println!(
                "{:<20} {:>4}  {:>4}  {:>4}  {:>4}  {:>7.4}  {:>7.4}  {:>7.4}",
                name,
                c.tn,
                c.fp,
                c.fn_,
                c.tp,
                c.normal_accuracy(),
                c.adversarial_accuracy(),
                c.average()
            );
        }
        Command::Reproduce {
            common,
            attack,
            epsilons,
            features,
            n_images,
            size,
            mpm_l,
        } => {
            common.init()?;
            let mut cfg = common.load()?;
            if let Some(a) = attack {
                cfg.attack = a;
            }
            if let Some(e) = epsilons {
                cfg.epsilons = e;
            }
            if let Some(f) = features {
                cfg.features = f;
            }
            cfg.corpus.n_images = n_images.unwrap_or(cfg.corpus.n_images);
            cfg.corpus.size = size.unwrap_or(cfg.corpus.size);
            cfg.mpm_l = mpm_l.unwrap_or(cfg.mpm_l);
            let out = pipeline::run_experiment(&cfg, &common.out_dir)?;
            let reused = out.stages.iter().filter(|s| s.cached).count();
            println!("{}", out.report);
            println!(
                "stages: {} run, {} reused; report: {}",
                out.stages.len() - reused,
                reused,
                common.out_dir.join("report.csv").display()
            );
        }
    }
    Ok(())
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn select_rows(features: &Path, labels: &Path, role: Role) -> Result<(FeatureTable<f64>, Vec<Class>)> {
    let table = FeatureTable::<f64>::load(features)?;
    let rows = pipeline::read_labels(labels)?;
    if rows.len() != table.rows() {
        bail!("{} has {} rows but {} has {}", features.display(), table.rows(), labels.display(), rows.len());
    }
    let mut out = FeatureTable::new(table.descriptor(), table.dim());
    let mut y = Vec::new();
    for (i, r) in rows.iter().enumerate().filter(|(_, r)| r.role == role) {
        out.push(table.row(i))?;
        y.push(r.class);
    }
    Ok((out, y))
}

fn evaluation_csv(name: &str, c: &Confusion) -> String {
    format!(
        "detector,tn,fp,fn,tp,normal_accuracy,adversarial_accuracy,average\n{name},{},{},{},{},{},{},{}\n",
        c.tn,
        c.fp,
        c.fn_,
        c.tp,
        c.normal_accuracy(),
        c.adversarial_accuracy(),
        c.average()
    )
}
