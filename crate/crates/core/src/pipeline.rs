//! End-to-end experiment: corpus, victim, attacks, MPM, features, detectors
//! and the accuracy report, with every stage cached on disk by a digest of
//! its inputs.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackConfig, AttackKind, AttackResult};
use crate::corpus::{self, write_file, CorpusParams, DatasetManifest, GrayImage, Role};
use crate::ensemble::{self, Class, EnsembleConfig, EnsembleModel, OobPoint};
use crate::error::{Error, Result};
use crate::mpm::{self, MpmConfig, ProbMap};
use crate::richmodel::{self, RichModelConfig};
use crate::seed;
use crate::spam::{self, MarkovOrder, SpamConfig};
use crate::store::{FeatureTable, FeatureVector};
use crate::victim::{self, TrainConfig, VictimModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Spam,
    Espam,
    Srmlite,
    Esrm,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [FeatureKind::Spam, FeatureKind::Espam, FeatureKind::Srmlite, FeatureKind::Esrm];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Spam => "spam",
            FeatureKind::Espam => "espam",
            FeatureKind::Srmlite => "srmlite",
            FeatureKind::Esrm => "esrm",
        }
    }

    pub fn needs_mpm(self) -> bool {
        matches!(self, FeatureKind::Espam | FeatureKind::Esrm)
    }

    /// Feature kind a stored descriptor was produced by.
    pub fn from_descriptor(descriptor: &str) -> Result<Self> {
        descriptor
            .split(':')
            .next()
            .unwrap_or_default()
            .parse()
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown feature set {s:?} (spam|espam|srmlite|esrm)")))
    }
}

/// Everything needed to turn an image into a feature vector.
#[derive(Debug, Clone)]
pub struct FeatureSpec {
    pub spam: SpamConfig,
    pub rich: RichModelConfig,
    /// Attack family whose MPM construction is used for enhanced features.
    pub mpm_attack: AttackKind,
    pub mpm: MpmConfig,
    /// Attack parameters for difference MPMs (Deepfool, C&W).
    pub mpm_attack_cfg: AttackConfig,
}

impl FeatureSpec {
    fn descriptor(&self, kind: FeatureKind) -> String {
        match kind {
            FeatureKind::Spam => self.spam.descriptor(false),
            FeatureKind::Espam => self.spam.descriptor(true),
            FeatureKind::Srmlite => self.rich.descriptor(false),
            FeatureKind::Esrm => self.rich.descriptor(true),
        }
    }
}

/// MPM of `x` built the way the given attack family calls for: gradient
/// maps for FGSM/IGSM, a Deepfool difference, or targeted C&W differences.
/// `L` is clamped to `N - 1`.
pub fn compute_mpm(model: &VictimModel<f64>, x: &GrayImage, spec: &FeatureSpec, image_seed: u64) -> Result<ProbMap<f64>> {
    let cfg = MpmConfig {
        l: spec.mpm.l.min(model.n_classes() - 1),
        seed: seed::derive(spec.mpm.seed, image_seed),
    };
    match spec.mpm_attack {
        AttackKind::Fgsm | AttackKind::Igsm => mpm::mpm_gradient(model, x, &cfg),
        AttackKind::Deepfool => {
            let label = model.predict(x)?;
            let mut acfg = spec.mpm_attack_cfg.clone();
            acfg.mode = attacks::AttackMode::Untargeted;
            let r = attacks::deepfool(model, x, label, &acfg)?;
            mpm::mpm_untargeted_diff(x, &r.adversarial)
        }
        AttackKind::Cw => {
            let label = model.predict(x)?;
            mpm::mpm_difference(model, x, &cfg, |img, t| {
                attacks::cw_l2(model, img, label, &spec.mpm_attack_cfg.clone().targeted(t))
            })
        }
    }
}

/// Extracts one feature vector; `model` is required for enhanced kinds.
pub fn extract_features(
    kind: FeatureKind,
    x: &GrayImage,
    spec: &FeatureSpec,
    model: Option<&VictimModel<f64>>,
    image_seed: u64,
) -> Result<FeatureVector<f64>> {
    let p = if kind.needs_mpm() {
        let model = model.ok_or_else(|| Error::Config(format!("{kind} needs a victim model for its MPM")))?;
        Some(compute_mpm(model, x, spec, image_seed)?)
    } else {
        None
    };
    match (kind, p) {
        (FeatureKind::Spam, _) => spam::spam_features(x, &spec.spam),
        (FeatureKind::Srmlite, _) => richmodel::srm_features(x, &spec.rich),
        (FeatureKind::Espam, Some(p)) => spam::espam_features(x, &p, &spec.spam),
        (FeatureKind::Esrm, Some(p)) => richmodel::esrm_features(x, &p, &spec.rich),
        _ => unreachable!("enhanced features always have a map"),
    }
}

/// Extracts features for many images in input order.
pub fn extract_batch(
    kind: FeatureKind,
    images: &[(&GrayImage, u64)],
    spec: &FeatureSpec,
    model: Option<&VictimModel<f64>>,
) -> Result<FeatureTable<f64>> {
    let rows = images
        .par_iter()
        .map(|&(x, s)| extract_features(kind, x, spec, model, s))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(FeatureTable::new(spec.descriptor(kind), 0));
    }
    FeatureTable::from_vectors(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_images: usize,
    pub size: usize,
    pub n_classes: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_images: 800,
            size: 128,
            n_classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

impl Default for VictimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        VictimSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            hidden: t.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub victim: VictimSection,
    pub attack: AttackKind,
    /// Budgets for FGSM/IGSM, one detector each; ignored by Deepfool/C&W.
    pub epsilons: Vec<f64>,
    pub alpha: f64,
    /// Iteration budget; per-attack default when absent.
    pub max_iters: Option<usize>,
    pub kappa: f64,
    pub c_grid: Vec<f64>,
    pub features: Vec<FeatureKind>,
    pub mpm_l: usize,
    pub spam_t: u32,
    pub spam_order: MarkovOrder,
    pub srm_t: u32,
    pub ensemble: EnsembleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            victim: VictimSection::default(),
            attack: AttackKind::Fgsm,
            epsilons: vec![2.0, 4.0, 6.0, 8.0],
            alpha: 1.0,
            max_iters: None,
            kappa: 0.0,
            c_grid: vec![0.1, 1.0, 10.0],
            features: FeatureKind::ALL.to_vec(),
            mpm_l: 10,
            spam_t: 3,
            spam_order: MarkovOrder::Second,
            srm_t: 2,
            ensemble: EnsembleConfig::default(),
        }
    }
}

pub fn default_max_iters(kind: AttackKind) -> usize {
    match kind {
        AttackKind::Fgsm => 1,
        AttackKind::Igsm => 10,
        AttackKind::Deepfool => 50,
        AttackKind::Cw => 100,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus_params().validate()?;
        self.train_config().validate()?;
        if self.features.is_empty() {
            return Err(Error::Config("no feature sets selected".into()));
        }
        if self.features.iter().collect::<HashSet<_>>().len() != self.features.len() {
            return Err(Error::Config("duplicate feature sets".into()));
        }
        if self.attack.uses_epsilon() {
            if self.epsilons.is_empty() {
                return Err(Error::Config("empty epsilon grid".into()));
            }
            if let Some(e) = self.epsilons.iter().find(|e| !(**e >= 1.0 && e.fract() == 0.0)) {
                return Err(Error::Config(format!("epsilon must be a positive integer, got {e}")));
            }
        }
        if self.mpm_l == 0 {
            return Err(Error::Config("mpm_l must be >= 1".into()));
        }
        self.spam_config().validate()?;
        self.rich_config().validate()?;
        for a in self.attack_settings() {
            a.validate()?;
        }
        Ok(())
    }

    pub fn corpus_params(&self) -> CorpusParams {
        CorpusParams {
            n_images: self.corpus.n_images,
            size: self.corpus.size,
            n_classes: self.corpus.n_classes,
            seed: seed::derive(self.seed, 1),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.victim.epochs,
            batch_size: self.victim.batch_size,
            learning_rate: self.victim.learning_rate,
            seed: seed::derive(self.seed, 2),
            hidden: self.victim.hidden.clone(),
        }
    }

    pub fn spam_config(&self) -> SpamConfig {
        SpamConfig {
            t: self.spam_t,
            order: self.spam_order,
        }
    }

    pub fn rich_config(&self) -> RichModelConfig {
        RichModelConfig::with_t(self.srm_t)
    }

    fn base_attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilons.last().copied().unwrap_or(8.0),
            alpha: self.alpha,
            max_iters: self.max_iters.unwrap_or(default_max_iters(self.attack)),
            kappa: self.kappa,
            c_grid: self.c_grid.clone(),
            mode: attacks::AttackMode::Untargeted,
        }
    }

    /// One untargeted attack configuration per detector.
    pub fn attack_settings(&self) -> Vec<AttackConfig> {
        let base = self.base_attack();
        if self.attack.uses_epsilon() {
            self.epsilons
                .iter()
                .map(|&epsilon| AttackConfig { epsilon, ..base.clone() })
                .collect()
        } else {
            vec![base]
        }
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            spam: self.spam_config(),
            rich: self.rich_config(),
            mpm_attack: self.attack,
            mpm: MpmConfig {
                l: self.mpm_l,
                seed: seed::derive(self.seed, 3),
            },
            mpm_attack_cfg: self.base_attack(),
        }
    }

    pub fn ensemble_seed(&self) -> u64 {
        seed::derive(self.seed, 4)
    }
}

/// SHA-256 over the canonical JSON form of `value` (object keys sorted),
/// as 64 lowercase hex characters.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("serializable");
    let text = serde_json::to_string(&canonical).expect("serializable");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn cache_digest(cfg: &ExperimentConfig) -> String {
    digest_of(cfg)
}

/// Path of the adversarial counterpart of a corpus image, e.g.
/// `images/img-00001.adv-fgsm-eps8.pgm`.
pub fn adversarial_path(original: &Path, tag: &str) -> PathBuf {
    let stem = original.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    original.with_file_name(format!("{stem}.adv-{tag}.pgm"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub path: String,
    pub success: bool,
    pub linf: f64,
    pub l2: f64,
    pub iterations: usize,
}

pub fn write_attack_csv(path: &Path, records: &[AttackRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::format("attack results", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("attack results", e.to_string()))?;
    write_file(path, &bytes)
}

/// Attacks the manifest entries with the given roles, labelling each image
/// with the victim's own prediction, and writes the adversarial images
/// beside the originals plus a results CSV.
pub fn attack_manifest(
    manifest: &DatasetManifest,
    model: &VictimModel<f64>,
    kind: AttackKind,
    cfg: &AttackConfig,
    roles: &[Role],
    results_csv: &Path,
) -> Result<Vec<(usize, AttackResult)>> {
    let tag = attacks::param_tag(kind, cfg);
    let picked: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| roles.contains(&manifest.entries[i].role))
        .collect();
    let results = picked
        .par_iter()
        .map(|&i| {
            let entry = &manifest.entries[i];
            let x = corpus::load_image(manifest.resolve(entry))?;
            let label = model.predict(&x)?;
            let r = attacks::run_attack(kind, model, &x, label, cfg)?;
            corpus::save_image(manifest.root.join(adversarial_path(&entry.path, &tag)), &r.adversarial)?;
            Ok((i, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<AttackRecord> = results
        .iter()
        .map(|(i, r)| AttackRecord {
            path: adversarial_path(&manifest.entries[*i].path, &tag).display().to_string(),
            success: r.success,
            linf: r.linf,
            l2: r.l2,
            iterations: r.iterations,
        })
        .collect();
    write_attack_csv(results_csv, &records)?;
    Ok(results)
}

/// One row of a labelled feature store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    pub path: String,
    pub class: Class,
    pub role: Role,
}

pub fn write_labels(path: &Path, rows: &[RowLabel]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("labels", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("labels", e.to_string()))?;
    write_file(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<Vec<RowLabel>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format("labels", format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format("labels", e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Normal images classified normal.
    pub tn: usize,
    /// Normal images flagged adversarial.
    pub fp: usize,
    /// Adversarial images missed.
    pub fn_: usize,
    /// Adversarial images flagged.
    pub tp: usize,
}

impl Confusion {
    pub fn from_predictions(truth: &[Class], predicted: &[Class]) -> Self {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t, p) {
                (Class::Normal, Class::Normal) => c.tn += 1,
                (Class::Normal, Class::Adversarial) => c.fp += 1,
                (Class::Adversarial, Class::Normal) => c.fn_ += 1,
                (Class::Adversarial, Class::Adversarial) => c.tp += 1,
            }
        }
        c
    }

    pub fn normal_accuracy(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }

    pub fn adversarial_accuracy(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn average(&self) -> f64 {
        (self.normal_accuracy() + self.adversarial_accuracy()) / 2.0
    }

    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

fn check_two_classes(labels: &[Class]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let adv = labels.iter().filter(|&&c| c == Class::Adversarial).count();
    if adv == 0 {
        return Err(Error::SingleClass("single-class evaluation: empty adversarial set".into()));
    }
    if adv == labels.len() {
        return Err(Error::SingleClass("single-class evaluation: empty normal set".into()));
    }
    Ok(())
}

/// Confusion counts of `model` on labelled features.
pub fn evaluate(model: &EnsembleModel<f64>, features: &FeatureTable<f64>, labels: &[Class]) -> Result<Confusion> {
    if model.descriptor != features.descriptor() {
        return Err(Error::DescriptorMismatch {
            expected: model.descriptor.clone(),
            got: features.descriptor().to_string(),
        });
    }
    if labels.len() != features.rows() {
        return Err(Error::dims(features.rows(), labels.len()));
    }
    check_two_classes(labels)?;
    let predicted: Vec<Class> = model.predict_table(features)?.into_iter().map(|p| p.label).collect();
    Ok(Confusion::from_predictions(labels, &predicted))
}

/// Detector bank: a row is flagged adversarial if any detector fires.
/// `features[i]` holds the rows for `models[i]`, all in the same row order.
pub fn bank_predict(models: &[EnsembleModel<f64>], features: &[FeatureTable<f64>]) -> Result<Vec<Class>> {
    if models.is_empty() || models.len() != features.len() {
        return Err(Error::dims(format!("{} feature stores", models.len()), features.len()));
    }
    let n = features[0].rows();
    let mut out = vec![Class::Normal; n];
    for (m, f) in models.iter().zip(features) {
        if m.descriptor != f.descriptor() {
            return Err(Error::DescriptorMismatch {
                expected: m.descriptor.clone(),
                got: f.descriptor().to_string(),
            });
        }
        if f.rows() != n {
            return Err(Error::dims(n, f.rows()));
        }
        for (o, p) in out.iter_mut().zip(m.predict_table(f)?) {
            if p.label == Class::Adversarial {
                *o = Class::Adversarial;
            }
        }
    }
    Ok(out)
}

pub fn evaluate_bank(models: &[EnsembleModel<f64>], features: &[FeatureTable<f64>], labels: &[Class]) -> Result<Confusion> {
    let predicted = bank_predict(models, features)?;
    if labels.len() != predicted.len() {
        return Err(Error::dims(predicted.len(), labels.len()));
    }
    check_two_classes(labels)?;
    Ok(Confusion::from_predictions(labels, &predicted))
}

pub fn oob_curve_csv(curve: &[OobPoint]) -> String {
    let mut s = String::from("d_sub,L,oob_error\n");
    for p in curve {
        writeln!(s, "{},{},{}", p.d_sub, p.l, p.oob_error).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: AttackKind,
    pub setting: String,
    pub epsilon: Option<f64>,
    pub feature: FeatureKind,
    pub descriptor: String,
    pub attack_success_rate: f64,
    pub confusion: Confusion,
    pub normal_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub average: f64,
    pub oob_error: f64,
    pub d_sub: usize,
    pub n_learners: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub rows: Vec<ReportRow>,
}

/// Reference accuracies (normal, adversarial) measured at ImageNet scale
/// against VGG-16; printed next to desk results, not expected to match.
pub const REFERENCE: &[(AttackKind, Option<u32>, FeatureKind, f64, f64)] = &[
    (AttackKind::Fgsm, Some(2), FeatureKind::Spam, 0.9488, 0.9432),
    (AttackKind::Fgsm, Some(4), FeatureKind::Spam, 0.9570, 0.9559),
    (AttackKind::Fgsm, Some(6), FeatureKind::Spam, 0.9651, 0.9628),
    (AttackKind::Fgsm, Some(8), FeatureKind::Spam, 0.9713, 0.9709),
    (AttackKind::Fgsm, Some(2), FeatureKind::Espam, 0.9725, 0.9704),
    (AttackKind::Fgsm, Some(4), FeatureKind::Espam, 0.9758, 0.9719),
    (AttackKind::Fgsm, Some(6), FeatureKind::Espam, 0.9812, 0.9751),
    (AttackKind::Fgsm, Some(8), FeatureKind::Espam, 0.9868, 0.9806),
    (AttackKind::Fgsm, Some(2), FeatureKind::Srmlite, 0.9757, 0.9785),
    (AttackKind::Fgsm, Some(4), FeatureKind::Srmlite, 0.9814, 0.9822),
    (AttackKind::Fgsm, Some(6), FeatureKind::Srmlite, 0.9831, 0.9861),
    (AttackKind::Fgsm, Some(8), FeatureKind::Srmlite, 0.9887, 0.9903),
    (AttackKind::Fgsm, Some(2), FeatureKind::Esrm, 0.9809, 0.9811),
    (AttackKind::Fgsm, Some(4), FeatureKind::Esrm, 0.9839, 0.9866),
    (AttackKind::Fgsm, Some(6), FeatureKind::Esrm, 0.9900, 0.9905),
    (AttackKind::Fgsm, Some(8), FeatureKind::Esrm, 0.9931, 0.9938),
    (AttackKind::Igsm, Some(2), FeatureKind::Spam, 0.9402, 0.9411),
    (AttackKind::Igsm, Some(4), FeatureKind::Spam, 0.9485, 0.9474),
    (AttackKind::Igsm, Some(6), FeatureKind::Spam, 0.9559, 0.9545),
    (AttackKind::Igsm, Some(8), FeatureKind::Spam, 0.9606, 0.9601),
    (AttackKind::Igsm, Some(2), FeatureKind::Espam, 0.9708, 0.9638),
    (AttackKind::Igsm, Some(4), FeatureKind::Espam, 0.9737, 0.9675),
    (AttackKind::Igsm, Some(6), FeatureKind::Espam, 0.9749, 0.9725),
    (AttackKind::Igsm, Some(8), FeatureKind::Espam, 0.9760, 0.9745),
    (AttackKind::Igsm, Some(2), FeatureKind::Srmlite, 0.9667, 0.9697),
    (AttackKind::Igsm, Some(4), FeatureKind::Srmlite, 0.9706, 0.9724),
    (AttackKind::Igsm, Some(6), FeatureKind::Srmlite, 0.9753, 0.9762),
    (AttackKind::Igsm, Some(8), FeatureKind::Srmlite, 0.9802, 0.9812),
    (AttackKind::Igsm, Some(2), FeatureKind::Esrm, 0.9712, 0.9716),
    (AttackKind::Igsm, Some(4), FeatureKind::Esrm, 0.9754, 0.9767),
    (AttackKind::Igsm, Some(6), FeatureKind::Esrm, 0.9811, 0.9820),
    (AttackKind::Igsm, Some(8), FeatureKind::Esrm, 0.9878, 0.9879),
    (AttackKind::Deepfool, None, FeatureKind::Spam, 0.8553, 0.8481),
    (AttackKind::Deepfool, None, FeatureKind::Espam, 0.8870, 0.8629),
    (AttackKind::Deepfool, None, FeatureKind::Srmlite, 0.9445, 0.9491),
    (AttackKind::Deepfool, None, FeatureKind::Esrm, 0.9498, 0.9527),
    (AttackKind::Cw, None, FeatureKind::Spam, 0.6957, 0.6778),
    (AttackKind::Cw, None, FeatureKind::Espam, 0.8025, 0.8296),
    (AttackKind::Cw, None, FeatureKind::Srmlite, 0.8814, 0.9092),
    (AttackKind::Cw, None, FeatureKind::Esrm, 0.9233, 0.9341),
];

pub fn reference_for(attack: AttackKind, epsilon: Option<f64>, feature: FeatureKind) -> Option<(f64, f64)> {
    REFERENCE
        .iter()
        .find(|r| r.0 == attack && r.1.map(f64::from) == epsilon.filter(|_| attack.uses_epsilon()) && r.2 == feature)
        .map(|r| (r.3, r.4))
}

impl DetectionReport {
    pub fn find(&self, feature: FeatureKind, epsilon: Option<f64>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.feature == feature && r.epsilon == epsilon)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "attack,setting,epsilon,feature,descriptor,attack_success_rate,tn,fp,fn,tp,\
             normal_accuracy,adversarial_accuracy,average,oob_error,d_sub,n_learners\n",
        );
        for r in &self.rows {
            let eps = r.epsilon.map(|e| e.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.attack.name(),
                r.setting,
                eps,
                r.feature,
                r.descriptor,
                r.attack_success_rate,
                r.confusion.tn,
                r.confusion.fp,
                r.confusion.fn_,
                r.confusion.tp,
                r.normal_accuracy,
                r.adversarial_accuracy,
                r.average,
                r.oob_error,
                r.d_sub,
                r.n_learners
            )
            .unwrap();
        }
        s
    }
}

impl fmt::Display for DetectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<9} {:<18} {:<8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6}   reference normal/adv",
            "attack", "setting", "feature", "success", "normal", "adv", "average", "oob", "L"
        )?;
        for r in &self.rows {
            let reference = reference_for(r.attack, r.epsilon, r.feature)
                .map(|(n, a)| format!("{n:.4}/{a:.4}"))
                .unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<9} {:<18} {:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6.3} {:>6}   {}",
                r.attack.name(),
                r.setting,
                r.feature.name(),
                r.attack_success_rate,
                r.normal_accuracy,
                r.adversarial_accuracy,
                r.average,
                r.oob_error,
                r.n_learners,
                reference
            )?;
        }
        write!(
            f,
            "reference values come from ImageNet-scale runs against VGG-16 and are not reproducible at desk scale"
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub key: String,
    pub cached: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: DetectionReport,
    pub stages: Vec<StageStatus>,
}

struct Cache {
    root: PathBuf,
    stages: Vec<StageStatus>,
}

const DONE: &str = "DONE";

impl Cache {
    /// Runs `build` into `<root>/<name>-<key>/` unless a completed copy
    /// exists, then returns the directory.
    fn stage(
        &mut self,
        name: &'static str,
        label: &str,
        key: &str,
        build: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<PathBuf> {
        let dir = self.root.join(format!("{label}-{}", &key[..16]));
        let marker = dir.join(DONE);
        let cached = fs::read_to_string(&marker).is_ok_and(|k| k.trim() == key);
        if !cached {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            build(&dir).map_err(|e| Error::Stage {
                stage: name,
                source: Box::new(e),
            })?;
            write_file(&marker, format!("{key}\n").as_bytes())?;
        }
        self.stages.push(StageStatus {
            stage: label.to_string(),
            key: key.to_string(),
            cached,
        });
        Ok(dir)
    }
}

fn stage_err(stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("json", e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttackSummary {
    success_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectorSummary {
    oob_error: f64,
    oob_covered: usize,
    oob_skipped: usize,
    d_sub: usize,
    n_learners: usize,
}

/// Runs (or resumes from cache) the whole experiment under `out_dir` and
/// writes `report.csv` and `report.txt` there.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut cache = Cache {
        root: out_dir.join("cache"),
        stages: Vec::new(),
    };

    // corpus
    let corpus_params = cfg.corpus_params();
    let corpus_key = digest_of(&("corpus", &corpus_params));
    let corpus_dir = cache.stage("corpus", "corpus", &corpus_key, |dir| {
        corpus::gen_synthetic_corpus(&corpus_params, dir).map(|_| ())
    })?;
    let manifest = DatasetManifest::load(corpus_dir.join(DatasetManifest::FILE_NAME)).map_err(stage_err("corpus"))?;

    // victim
    let train_cfg = cfg.train_config();
    let victim_key = digest_of(&("victim", &corpus_key, &train_cfg));
    let victim_dir = cache.stage("victim", "victim", &victim_key, |dir| {
        let (model, report) = victim::train_victim::<f64>(&manifest, &train_cfg)?;
        model.save(dir.join("victim.bin"))?;
        write_json(&dir.join("train-report.json"), &report)
    })?;
    let model = VictimModel::<f64>::load(victim_dir.join("victim.bin")).map_err(stage_err("victim"))?;

    // rows used downstream: train and test splits, manifest order
    let used: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].role != Role::Val)
        .collect();
    let roles: Vec<Role> = used.iter().map(|&i| manifest.entries[i].role).collect();
    {
        let train: HashSet<&Path> = used
            .iter()
            .filter(|&&i| manifest.entries[i].role == Role::Train)
            .map(|&i| manifest.entries[i].path.as_path())
            .collect();
        if used
            .iter()
            .any(|&i| manifest.entries[i].role == Role::Test && train.contains(manifest.entries[i].path.as_path()))
        {
            return Err(Error::Config("train and test splits overlap".into()));
        }
    }
    let clean: Vec<GrayImage> = used
        .par_iter()
        .map(|&i| corpus::load_image(manifest.resolve(&manifest.entries[i])))
        .collect::<Result<_>>()
        .map_err(stage_err("corpus"))?;

    let spec = cfg.feature_spec();
    let features_key = |kind: FeatureKind, source: &str| {
        let mpm_part = kind.needs_mpm().then_some((&victim_key, spec.mpm_attack, spec.mpm, &spec.mpm_attack_cfg));
        digest_of(&("features", kind, spec.descriptor(kind), &corpus_key, source, mpm_part))
    };
    let extract_into = |kind: FeatureKind, images: &[GrayImage], dir: &Path| -> Result<()> {
        let items: Vec<(&GrayImage, u64)> = images.iter().zip(&used).map(|(x, &i)| (x, i as u64)).collect();
        let table = extract_batch(kind, &items, &spec, Some(&model))?;
        table.save(dir.join("features.bin"))
    };

    // clean features, shared by all attack settings
    let mut clean_tables = Vec::new();
    for &kind in &cfg.features {
        let key = features_key(kind, "clean");
        let dir = cache.stage("features", &format!("features-{kind}-clean"), &key, |dir| extract_into(kind, &clean, dir))?;
        clean_tables.push((key, FeatureTable::<f64>::load(dir.join("features.bin")).map_err(stage_err("features"))?));
    }

    let mut report = DetectionReport::default();
    for acfg in cfg.attack_settings() {
        let tag = attacks::param_tag(cfg.attack, &acfg);
        let attack_key = digest_of(&("attack", &victim_key, cfg.attack, &acfg));
        let attack_dir = cache.stage("attack", &format!("attack-{tag}"), &attack_key, |dir| {
            let results = clean
                .par_iter()
                .map(|x| {
                    let label = model.predict(x)?;
                    attacks::run_attack(cfg.attack, &model, x, label, &acfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut records = Vec::with_capacity(results.len());
            for (r, &i) in results.iter().zip(&used) {
                let rel = adversarial_path(&manifest.entries[i].path, &tag);
                corpus::save_image(dir.join(&rel), &r.adversarial)?;
                records.push(AttackRecord {
                    path: rel.display().to_string(),
                    success: r.success,
                    linf: r.linf,
                    l2: r.l2,
                    iterations: r.iterations,
                });
            }
            write_attack_csv(&dir.join("results.csv"), &records)?;
            let success_rate = results.iter().filter(|r| r.success).count() as f64 / results.len() as f64;
            write_json(&dir.join("summary.json"), &AttackSummary { success_rate })
        })?;
        let summary: AttackSummary = read_json(&attack_dir.join("summary.json")).map_err(stage_err("attack"))?;
        let adversarial: Vec<GrayImage> = used
            .par_iter()
            .map(|&i| corpus::load_image(attack_dir.join(adversarial_path(&manifest.entries[i].path, &tag))))
            .collect::<Result<_>>()
            .map_err(stage_err("attack"))?;

        for (&kind, (clean_key, clean_table)) in cfg.features.iter().zip(&clean_tables) {
            let key = features_key(kind, &attack_key);
            let dir = cache.stage("features", &format!("features-{kind}-{tag}"), &key, |dir| {
                extract_into(kind, &adversarial, dir)
            })?;
            let adv_table = FeatureTable::<f64>::load(dir.join("features.bin")).map_err(stage_err("features"))?;

            let split = |role: Role| -> Result<(FeatureTable<f64>, Vec<Class>)> {
                let mut t = FeatureTable::new(clean_table.descriptor(), clean_table.dim());
                let mut labels = Vec::new();
                for (r, _) in roles.iter().enumerate().filter(|(_, &ro)| ro == role) {
                    t.push(clean_table.row(r))?;
                    labels.push(Class::Normal);
                    t.push(adv_table.row(r))?;
                    labels.push(Class::Adversarial);
                }
                Ok((t, labels))
            };
            let (train_x, train_y) = split(Role::Train).map_err(stage_err("detector"))?;
            let (test_x, test_y) = split(Role::Test).map_err(stage_err("detector"))?;

            let det_key = digest_of(&("detector", clean_key, &key, &cfg.ensemble, cfg.ensemble_seed()));
            let det_dir = cache.stage("detector", &format!("detector-{kind}-{tag}"), &det_key, |dir| {
                let out = ensemble::ensemble_train(&train_x, &train_y, cfg.ensemble_seed(), &cfg.ensemble)?;
                out.model.save(dir.join("model.bin"))?;
                write_file(&dir.join("oob.csv"), oob_curve_csv(&out.curve).as_bytes())?;
                write_json(
                    &dir.join("summary.json"),
                    &DetectorSummary {
                        oob_error: out.oob.error,
                        oob_covered: out.oob.covered,
                        oob_skipped: out.oob.skipped,
                        d_sub: out.model.d_sub,
                        n_learners: out.model.n_learners(),
                    },
                )
            })?;
            let det = EnsembleModel::<f64>::load(det_dir.join("model.bin")).map_err(stage_err("detector"))?;
            let det_summary: DetectorSummary = read_json(&det_dir.join("summary.json")).map_err(stage_err("detector"))?;
            let confusion = evaluate(&det, &test_x, &test_y).map_err(stage_err("evaluate"))?;
            report.rows.push(ReportRow {
                attack: cfg.attack,
                setting: tag.clone(),
                epsilon: cfg.attack.uses_epsilon().then_some(acfg.epsilon),
                feature: kind,
                descriptor: det.descriptor.clone(),
                attack_success_rate: summary.success_rate,
                confusion,
                normal_accuracy: confusion.normal_accuracy(),
                adversarial_accuracy: confusion.adversarial_accuracy(),
                average: confusion.average(),
                oob_error: det_summary.oob_error,
                d_sub: det_summary.d_sub,
                n_learners: det_summary.n_learners,
            });
        }
    }

    write_file(&out_dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_file(&out_dir.join("report.txt"), format!("{report}\n").as_bytes())?;
    write_file(&out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(ExperimentOutcome {
        report,
        stages: cache.stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_shape_and_sensitivity() {
        let a = ExperimentConfig::default();
        let d = cache_digest(&a);
        assert_eq!(d.len(), 64);
        assert!(d.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(d, cache_digest(&a.clone()));
        let mut b = a.clone();
        b.epsilons[1] = 6.0;
        assert_ne!(d, cache_digest(&b));
    }

    #[test]
    fn digest_ignores_key_order() {
        let x = ExperimentConfig::from_toml("seed = 3\nmpm_l = 4\n[corpus]\nsize = 64\nn_images = 100\n").unwrap();
        let y = ExperimentConfig::from_toml("mpm_l = 4\nseed = 3\n[corpus]\nn_images = 100\nsize = 64\n").unwrap();
        assert_eq!(cache_digest(&x), cache_digest(&y));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::from_toml("epsilons = [2.5]").is_err());
        assert!(ExperimentConfig::from_toml("epsilons = [0.0]").is_err());
        assert!(ExperimentConfig::from_toml("features = []").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("attack = \"cw\"\nepsilons = []").is_ok());
        let cfg = ExperimentConfig::from_toml("features = [\"spam\", \"esrm\"]").unwrap();
        assert_eq!(cfg.features, vec![FeatureKind::Spam, FeatureKind::Esrm]);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ExperimentConfig::from_toml("[ensemble]\nl_step = 25\n[victim]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.ensemble.l_step, 25);
        assert_eq!(cfg.ensemble.l_max, EnsembleConfig::default().l_max);
        assert_eq!(cfg.victim.epochs, 3);
        assert_eq!(cfg.victim.hidden, VictimSection::default().hidden);
        assert!(ExperimentConfig::from_toml("[ensemble]\nlstep = 25\n").is_err());
    }

    #[test]
    fn adversarial_names() {
        assert_eq!(
            adversarial_path(Path::new("images/img-00003.pgm"), "fgsm-eps8"),
            PathBuf::from("images/img-00003.adv-fgsm-eps8.pgm")
        );
    }

    #[test]
    fn confusion_accuracies() {
        let truth = [Class::Normal, Class::Normal, Class::Adversarial, Class::Adversarial];
        let pred = [Class::Normal, Class::Adversarial, Class::Adversarial, Class::Adversarial];
        let c = Confusion::from_predictions(&truth, &pred);
        assert_eq!((c.tn, c.fp, c.fn_, c.tp), (1, 1, 0, 2));
        assert_eq!(c.normal_accuracy(), 0.5);
        assert_eq!(c.adversarial_accuracy(), 1.0);
        assert_eq!(c.average(), 0.75);
    }

    #[test]
    fn reference_lookup() {
        assert_eq!(reference_for(AttackKind::Cw, None, FeatureKind::Esrm), Some((0.9233, 0.9341)));
        assert_eq!(reference_for(AttackKind::Fgsm, Some(8.0), FeatureKind::Spam), Some((0.9713, 0.9709)));
        assert_eq!(reference_for(AttackKind::Fgsm, Some(3.0), FeatureKind::Spam), None);
        assert_eq!(FeatureKind::from_descriptor("esrm:v1:T2:n7").unwrap(), FeatureKind::Esrm);
    }
}
