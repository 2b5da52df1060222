//! AUC metrics, repeated stratified k-fold cross-validation and the
//! ablation grid.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ModelState;
use crate::corruption::derive_seed;
use crate::error::{invalid, Error, Result};
use crate::finetune::{
    combine_score, finetune, FinetuneConfig, InitMode, InputMode, PatientBag, ScoreRecord, Split, TaskSpec,
};
use crate::scalar::Scalar;

/// Mann-Whitney AUC by pair counting; ties count one half.
pub fn auc_binary(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(invalid(format!("binary label {l} not in {{0, 1}}")));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedAuc("labels hold a single category".into()));
    }
    // twice the win count, so ties stay integral
    let mut twice: u64 = 0;
    for &p in &pos {
        for &n in &neg {
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// Macro one-vs-rest AUC over the categories present in `labels`.
pub fn auc_multiclass(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(invalid(format!("{} rows for {} labels", probs.len(), labels.len())));
    }
    let c = probs.first().map(|r| r.len()).unwrap_or(0);
    for row in probs {
        if row.len() != c {
            return Err(invalid("probability rows differ in length"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("probability row sums to {s}")));
        }
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(invalid(format!("label {l} out of range for {c} categories")));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::UndefinedAuc("fewer than two categories present".into()));
    }
    if c == 2 {
        let col: Vec<f64> = probs.iter().map(|r| r[1]).collect();
        return auc_binary(&col, labels);
    }
    let mut total = 0.0;
    for &k in &present {
        let col: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let bin: Vec<usize> = labels.iter().map(|&l| (l == k) as usize).collect();
        total += auc_binary(&col, &bin)?;
    }
    Ok(total / present.len() as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    /// `splits[repeat][fold]`.
    pub splits: Vec<Vec<Split>>,
}

/// Stratified `k`-fold plan repeated `repeats` times.
///
/// Within each repeat every category is shuffled, categories are laid end to
/// end and patients are dealt to folds round-robin. From each fold's
/// training part `val_patients` patients of distinct categories (cycling
/// when there are fewer categories) are held out for model selection.
pub fn make_folds(
    patients: &[(String, usize)],
    k: usize,
    repeats: usize,
    val_patients: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Folds {
            k,
            msg: "at least two folds are needed for a held-out test split".into(),
        });
    }
    let mut by_cat: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, c) in patients {
        by_cat.entry(*c).or_default().push(id.clone());
    }
    for (c, ids) in &by_cat {
        if ids.len() < k {
            return Err(Error::Folds {
                k,
                msg: format!("category {c} has only {} patients", ids.len()),
            });
        }
    }
    for ids in by_cat.values_mut() {
        ids.sort();
    }
    let cat_of: HashMap<&str, usize> = patients.iter().map(|(id, c)| (id.as_str(), *c)).collect();

    let mut splits = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
        let mut slot = 0;
        for ids in by_cat.values() {
            let mut ids = ids.clone();
            ids.shuffle(&mut rng);
            for id in ids {
                folds[slot % k].push(id);
                slot += 1;
            }
        }
        let mut repeat = Vec::with_capacity(k);
        for f in 0..k {
            let mut train: Vec<String> = (0..k).filter(|&g| g != f).flat_map(|g| folds[g].clone()).collect();
            train.shuffle(&mut rng);
            let val = carve_validation(&mut train, &cat_of, val_patients);
            repeat.push(Split {
                train,
                val,
                test: folds[f].clone(),
            });
        }
        splits.push(repeat);
    }
    Ok(FoldPlan { k, repeats, seed, splits })
}

fn carve_validation(train: &mut Vec<String>, cat_of: &HashMap<&str, usize>, n: usize) -> Vec<String> {
    let mut val = Vec::with_capacity(n);
    while val.len() < n && train.len() > 1 {
        let used: Vec<usize> = val.iter().map(|id: &String| cat_of[id.as_str()]).collect();
        let pos = train
            .iter()
            .position(|id| !used.contains(&cat_of[id.as_str()]))
            .unwrap_or(0);
        val.push(train.remove(pos));
    }
    val
}

/// Anything that can be trained on a split and score its test patients.
pub trait CvLearner {
    /// Probabilities for each test patient of `split`, in split order.
    fn fit_predict(&mut self, task: &TaskSpec, split: &Split, repeat: usize, fold: usize) -> Result<Vec<Vec<f64>>>;
}

/// The fine-tuned classifier.
pub struct FinetuneLearner<'a, T> {
    pub patients: &'a [PatientBag<T>],
    pub labels: &'a [ScoreRecord],
    pub config: FinetuneConfig,
    pub checkpoint: Option<&'a ModelState>,
}

impl<T: Scalar> CvLearner for FinetuneLearner<'_, T> {
    fn fit_predict(&mut self, task: &TaskSpec, split: &Split, repeat: usize, fold: usize) -> Result<Vec<Vec<f64>>> {
        let config = FinetuneConfig {
            seed: derive_seed(self.config.seed, (repeat * 1000 + fold) as u64),
            ..self.config.clone()
        };
        let out = finetune(self.patients, self.labels, task, &config, split, self.checkpoint)?;
        Ok(out.test_probs.into_iter().map(|(_, p)| p).collect())
    }
}

/// Emits the same uniform vector for every patient.
pub struct ConstantLearner;

impl CvLearner for ConstantLearner {
    fn fit_predict(&mut self, task: &TaskSpec, split: &Split, _: usize, _: usize) -> Result<Vec<Vec<f64>>> {
        let c = task.num_categories;
        Ok(vec![vec![1.0 / c as f64; c]; split.test.len()])
    }
}

/// Emits one-hot true labels.
pub struct OracleLearner<'a> {
    pub labels: &'a [ScoreRecord],
}

impl CvLearner for OracleLearner<'_> {
    fn fit_predict(&mut self, task: &TaskSpec, split: &Split, _: usize, _: usize) -> Result<Vec<Vec<f64>>> {
        let cats = categories(self.labels, task)?;
        let lookup: HashMap<&str, usize> = cats.iter().map(|(id, c)| (id.as_str(), *c)).collect();
        split
            .test
            .iter()
            .map(|id| {
                let c = *lookup
                    .get(id.as_str())
                    .ok_or_else(|| invalid(format!("no labels for patient `{id}`")))?;
                let mut row = vec![0.0; task.num_categories];
                row[c] = 1.0;
                Ok(row)
            })
            .collect()
    }
}

/// `(patient_id, category)` for every record.
pub fn categories(labels: &[ScoreRecord], task: &TaskSpec) -> Result<Vec<(String, usize)>> {
    labels
        .iter()
        .map(|r| Ok((r.patient_id.clone(), combine_score(r, task)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub task: String,
    /// `fold_auc[repeat][fold]`, fractions in `[0, 1]`.
    pub fold_auc: Vec<Vec<f64>>,
    /// Mean over repeat-level means, percent.
    pub mean_auc: f64,
    /// Population std over repeat-level means, percent.
    pub std_auc: f64,
    pub reduction: String,
    pub std_over: String,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn repeat_means(&self) -> Vec<f64> {
        self.fold_auc.iter().map(|f| f.iter().sum::<f64>() / f.len() as f64).collect()
    }

    /// Mean and std (percent) recomputed from the stored fold values.
    pub fn recompute(&self) -> (f64, f64) {
        let (m, s) = mean_std(&self.repeat_means());
        (100.0 * m, 100.0 * s)
    }
}

/// Train and score every (repeat, fold) cell of `plan`.
pub fn run_cv(
    learner: &mut dyn CvLearner,
    labels: &[ScoreRecord],
    task: &TaskSpec,
    plan: &FoldPlan,
    method: &str,
    config_fingerprint: &str,
) -> Result<MetricsReport> {
    let cats = categories(labels, task)?;
    let lookup: HashMap<&str, usize> = cats.iter().map(|(id, c)| (id.as_str(), *c)).collect();
    let mut fold_auc = Vec::with_capacity(plan.repeats);
    for (r, repeat) in plan.splits.iter().enumerate() {
        let mut row = Vec::with_capacity(repeat.len());
        for (f, split) in repeat.iter().enumerate() {
            let probs = learner
                .fit_predict(task, split, r, f)
                .map_err(|e| Error::Training(format!("repeat {r} fold {f}: {e}")))?;
            let truth: Vec<usize> = split.test.iter().map(|id| lookup[id.as_str()]).collect();
            let auc = auc_multiclass(&probs, &truth)?;
            log::info!("{method} {} repeat {r} fold {f}: AUC {:.4}", task.task, auc);
            row.push(auc);
        }
        fold_auc.push(row);
    }
    let mut report = MetricsReport {
        method: method.to_string(),
        task: task.task.name().to_string(),
        fold_auc,
        mean_auc: 0.0,
        std_auc: 0.0,
        reduction: "macro one-vs-rest".into(),
        std_over: "repeat means".into(),
        config_fingerprint: config_fingerprint.to_string(),
    };
    (report.mean_auc, report.std_auc) = report.recompute();
    Ok(report)
}

/// SHA-256 of a value's JSON form.
pub fn fingerprint<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(json))
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub ssl: bool,
    /// Ignored when `ssl` is off.
    pub adv_loss: bool,
    pub input_mode: InputMode,
}

impl AblationCell {
    /// The six rows from scratch to the full method, in table order.
    pub fn standard_grid() -> Vec<AblationCell> {
        let cell = |ssl, adv_loss, input_mode| AblationCell {
            ssl,
            adv_loss,
            input_mode,
        };
        vec![
            cell(false, false, InputMode::Image),
            cell(false, false, InputMode::Lbp),
            cell(true, false, InputMode::Image),
            cell(true, false, InputMode::Lbp),
            cell(true, true, InputMode::Image),
            cell(true, true, InputMode::Lbp),
        ]
    }

    pub fn label(&self) -> String {
        match (self.ssl, self.adv_loss, self.input_mode) {
            (true, true, InputMode::Lbp) => "ours".into(),
            _ => format!(
                "ssl={} adv={} input={}",
                self.ssl,
                self.ssl && self.adv_loss,
                self.input_mode.name()
            ),
        }
    }

    /// The fine-tune configuration this cell runs with.
    pub fn finetune_config(&self, base: &FinetuneConfig) -> FinetuneConfig {
        FinetuneConfig {
            input_mode: self.input_mode,
            init_mode: if self.ssl { InitMode::SslCheckpoint } else { InitMode::Random },
            ..base.clone()
        }
    }
}

/// Source of pretrained encoders for the ssl-on cells.
pub trait CheckpointSource {
    fn load(&self, adversarial: bool) -> Result<ModelState>;
}

/// Two checkpoint files on disk; counts reads.
pub struct FileCheckpoints {
    pub with_adv: PathBuf,
    pub without_adv: PathBuf,
    reads: AtomicUsize,
}

impl FileCheckpoints {
    pub fn new(with_adv: impl Into<PathBuf>, without_adv: impl Into<PathBuf>) -> Self {
        FileCheckpoints {
            with_adv: with_adv.into(),
            without_adv: without_adv.into(),
            reads: AtomicUsize::new(0),
        }
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

impl CheckpointSource for FileCheckpoints {
    fn load(&self, adversarial: bool) -> Result<ModelState> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        ModelState::load(if adversarial { &self.with_adv } else { &self.without_adv })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSettings {
    pub k: usize,
    pub repeats: usize,
    pub val_patients: usize,
    pub seed: u64,
}

impl Default for FoldSettings {
    fn default() -> Self {
        FoldSettings {
            k: 3,
            repeats: 5,
            val_patients: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub task: String,
    pub config_fingerprint: String,
    pub report: Option<MetricsReport>,
    /// Why the cell has no report.
    pub unavailable: Option<String>,
}

/// Fingerprint of one grid cell's full configuration.
pub fn cell_fingerprint(cell: &AblationCell, task: &TaskSpec, base: &FinetuneConfig, folds: &FoldSettings) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        cell: &'a AblationCell,
        task: &'a TaskSpec,
        finetune: FinetuneConfig,
        folds: &'a FoldSettings,
    }
    let cell = AblationCell {
        adv_loss: cell.ssl && cell.adv_loss,
        ..*cell
    };
    fingerprint(&Key {
        cell: &cell,
        task,
        finetune: cell.finetune_config(base),
        folds,
    })
}

/// Cross-validate every `(cell, task)` pair. A checkpoint that cannot be
/// loaded marks its cells unavailable; other failures abort.
pub fn run_ablation_grid<T: Scalar>(
    patients: &[PatientBag<T>],
    labels: &[ScoreRecord],
    tasks: &[TaskSpec],
    grid: &[AblationCell],
    base: &FinetuneConfig,
    folds: &FoldSettings,
    checkpoints: &dyn CheckpointSource,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut cache: HashMap<bool, std::result::Result<ModelState, String>> = HashMap::new();
    for cell in grid {
        let ckpt = if cell.ssl {
            let entry = cache
                .entry(cell.adv_loss)
                .or_insert_with(|| checkpoints.load(cell.adv_loss).map_err(|e| e.to_string()));
            Some(entry.clone())
        } else {
            None
        };
        for task in tasks {
            let fp = cell_fingerprint(cell, task, base, folds);
            let mut row = AblationRow {
                cell: *cell,
                task: task.task.name().into(),
                config_fingerprint: fp.clone(),
                report: None,
                unavailable: None,
            };
            let state = match &ckpt {
                Some(Err(msg)) => {
                    row.unavailable = Some(msg.clone());
                    rows.push(row);
                    continue;
                }
                Some(Ok(st)) => Some(st),
                None => None,
            };
            let plan = make_folds(&categories(labels, task)?, folds.k, folds.repeats, folds.val_patients, folds.seed)?;
            let mut learner = FinetuneLearner {
                patients,
                labels,
                config: cell.finetune_config(base),
                checkpoint: state,
            };
            row.report = Some(run_cv(&mut learner, labels, task, &plan, &cell.label(), &fp)?);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_report_json(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::format("report", e))?;
    write_text(path, &json)
}

/// Method × task table of `mean±std` cells.
pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = String::from("method");
    for t in &tasks {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for m in &methods {
        out.push_str(m);
        for t in &tasks {
            out.push(',');
            if let Some(r) = reports.iter().find(|r| r.method == *m && r.task == *t) {
                let _ = write!(out, "{:.2}±{:.2}", r.mean_auc, r.std_auc);
            }
        }
        out.push('\n');
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("ssl,adv_loss,input_mode,task,mean_auc,std_auc\n");
    for row in rows {
        let (m, s) = match &row.report {
            Some(r) => (format!("{:.2}", r.mean_auc), format!("{:.2}", r.std_auc)),
            None => ("unavailable".into(), "unavailable".into()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{m},{s}",
            row.cell.ssl,
            row.cell.ssl && row.cell.adv_loss,
            row.cell.input_mode.name(),
            row.task
        );
    }
    out
}

pub fn write_report_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    write_text(path, &report_csv(reports))
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    write_text(path, &ablation_csv(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc_binary(&[0.3; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(matches!(auc_binary(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc(_))));
        assert!(auc_binary(&[0.1], &[2]).is_err());
    }

    #[test]
    fn multiclass_reductions() {
        let probs = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.5, 0.5]];
        let labels = [0, 1, 1];
        let bin = auc_binary(&[0.3, 0.6, 0.5], &labels).unwrap();
        assert_eq!(auc_multiclass(&probs, &labels).unwrap(), bin);
        let onehot = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(auc_multiclass(&onehot, &[0, 2, 1]).unwrap(), 1.0);
        assert!(auc_multiclass(&onehot, &[0, 0, 0]).is_err());
        assert!(auc_multiclass(&[vec![0.5, 0.6]], &[0]).is_err());
    }

    fn cohort(counts: &[usize]) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                v.push((format!("p{c}_{i}"), c));
            }
        }
        v
    }

    #[test]
    fn folds_are_stratified_partitions() {
        let pts = cohort(&[7, 10, 13]);
        let plan = make_folds(&pts, 3, 5, 2, 42).unwrap();
        for repeat in &plan.splits {
            let mut all: Vec<&String> = repeat.iter().flat_map(|s| &s.test).collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 30);
            for s in repeat {
                assert_eq!(s.test.len(), 10);
                assert_eq!(s.train.len() + s.val.len() + s.test.len(), 30);
                s.validate().unwrap();
                for (c, &n) in [7usize, 10, 13].iter().enumerate() {
                    let got = s.test.iter().filter(|id| id.starts_with(&format!("p{c}_"))).count() as f64;
                    assert!((got - n as f64 / 3.0).abs() <= 1.0);
                }
                let vc: Vec<&str> = s.val.iter().map(|id| &id[..2]).collect();
                assert_eq!(vc.len(), 2);
                assert_ne!(vc[0], vc[1]);
            }
        }
        assert_eq!(plan, make_folds(&pts, 3, 5, 2, 42).unwrap());
        assert!(make_folds(&pts, 1, 5, 2, 42).is_err());
        assert!(make_folds(&cohort(&[2, 10]), 3, 1, 2, 0).is_err());
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn grid_has_six_distinct_rows() {
        let g = AblationCell::standard_grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g[5].label(), "ours");
        assert_eq!(g[0].finetune_config(&FinetuneConfig::default()).init_mode, InitMode::Random);
    }
}
