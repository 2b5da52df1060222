//! Per-task fine-tuning of the pretrained encoder with the patient-level
//! classifier head.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelState;
use crate::corruption::derive_seed;
use crate::error::{invalid, Error, Result};
use crate::evaluation::auc_multiclass;
use crate::lbp::{lbp_slice, LbpSpec};
use crate::nets::{normalized_batch, ClassifierHead, ClassifierHeadSpec, Encoder, EncoderSpec, PatientClassifier};
use crate::nn::loss::{cross_entropy, softmax};
use crate::nn::optim::Adam;
use crate::preprocess::GraySlice;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Fibrosis,
    Steatosis,
    Lobular,
    Ballooning,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Fibrosis, Task::Steatosis, Task::Lobular, Task::Ballooning];

    pub fn name(self) -> &'static str {
        match self {
            Task::Fibrosis => "fibrosis",
            Task::Steatosis => "steatosis",
            Task::Lobular => "lobular",
            Task::Ballooning => "ballooning",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid(format!("unknown task `{s}`")))
    }
}

/// Raw histology scores for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub patient_id: String,
    pub fibrosis: f64,
    pub steatosis: u8,
    pub lobular: u8,
    pub ballooning: u8,
}

const FIBROSIS_STAGES: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 3.5, 4.0];

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: String| invalid(format!("patient `{}`: {what} score {v} out of range", self.patient_id));
        if !FIBROSIS_STAGES.contains(&self.fibrosis) {
            return Err(bad("fibrosis", self.fibrosis.to_string()));
        }
        if self.steatosis > 3 {
            return Err(bad("steatosis", self.steatosis.to_string()));
        }
        if self.lobular > 3 {
            return Err(bad("lobular", self.lobular.to_string()));
        }
        if self.ballooning > 2 {
            return Err(bad("ballooning", self.ballooning.to_string()));
        }
        Ok(())
    }

    pub fn raw(&self, task: Task) -> f64 {
        match task {
            Task::Fibrosis => self.fibrosis,
            Task::Steatosis => self.steatosis as f64,
            Task::Lobular => self.lobular as f64,
            Task::Ballooning => self.ballooning as f64,
        }
    }
}

/// Raw score → combined category for one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub num_categories: usize,
}

impl TaskSpec {
    pub fn new(task: Task) -> Self {
        let num_categories = match task {
            Task::Steatosis => 2,
            _ => 3,
        };
        TaskSpec { task, num_categories }
    }

    pub fn category(&self, raw: f64) -> Result<usize> {
        let out_of_range = || invalid(format!("{} score {raw} out of range", self.task));
        let c = match self.task {
            Task::Fibrosis => match raw {
                r if r == 0.0 => 0,
                r if r == 1.0 || r == 2.0 => 1,
                r if r == 3.0 || r == 3.5 || r == 4.0 => 2,
                _ => return Err(out_of_range()),
            },
            Task::Steatosis => match raw {
                r if r == 0.0 || r == 1.0 => 0,
                r if r == 2.0 || r == 3.0 => 1,
                _ => return Err(out_of_range()),
            },
            Task::Lobular => match raw {
                r if r == 0.0 => 0,
                r if r == 1.0 => 1,
                r if r == 2.0 || r == 3.0 => 2,
                _ => return Err(out_of_range()),
            },
            Task::Ballooning => match raw {
                r if r == 0.0 => 0,
                r if r == 1.0 => 1,
                r if r == 2.0 => 2,
                _ => return Err(out_of_range()),
            },
        };
        Ok(c)
    }
}

pub fn combine_score(record: &ScoreRecord, task: &TaskSpec) -> Result<usize> {
    record.validate()?;
    task.category(record.raw(task.task))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Image,
    #[default]
    Lbp,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Image => "image",
            InputMode::Lbp => "lbp",
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(InputMode::Image),
            "lbp" => Ok(InputMode::Lbp),
            _ => Err(invalid(format!("unknown input mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    SslCheckpoint,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_patients: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub input_mode: InputMode,
    pub init_mode: InitMode,
    /// Conv layers left trainable, counted from the top of the encoder.
    pub trainable_convs: usize,
    pub lbp: LbpSpec,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            lr: 1e-4,
            batch_patients: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            input_mode: InputMode::Lbp,
            init_mode: InitMode::SslCheckpoint,
            trainable_convs: 2,
            lbp: LbpSpec::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_patients == 0 {
            return Err(invalid("batch_patients must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        self.lbp.validate()
    }
}

/// Preprocessed slices of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientBag<T> {
    pub patient_id: String,
    pub slices: Vec<GraySlice<T>>,
}

/// Normalised network input for a bag, LBP-encoded first in LBP mode.
pub fn bag_input<T: Scalar>(bag: &PatientBag<T>, mode: InputMode, lbp: &LbpSpec) -> Result<Tensor<T>> {
    if bag.slices.is_empty() {
        return Err(Error::EmptyPatient(bag.patient_id.clone()));
    }
    match mode {
        InputMode::Image => normalized_batch(&bag.slices.iter().collect::<Vec<_>>()),
        InputMode::Lbp => {
            let coded = bag.slices.iter().map(|s| lbp_slice(s, lbp)).collect::<Result<Vec<_>>>()?;
            normalized_batch(&coded.iter().collect::<Vec<_>>())
        }
    }
}

/// Encoder (loaded or random) plus a fresh head, with the freeze policy applied.
pub fn build_classifier<T: Scalar>(
    encoder_ckpt: Option<&ModelState>,
    config: &FinetuneConfig,
    num_categories: usize,
) -> Result<PatientClassifier<T>> {
    let mut encoder = Encoder::<T>::new(EncoderSpec::default(), derive_seed(config.seed, 0x11));
    match (config.init_mode, encoder_ckpt) {
        (InitMode::SslCheckpoint, Some(st)) => st.component("encoder")?.restore(&mut encoder)?,
        (InitMode::SslCheckpoint, None) => {
            return Err(Error::Checkpoint("ssl_checkpoint init requires an encoder checkpoint".into()))
        }
        (InitMode::Random, _) => {}
    }
    encoder.freeze_all_but_last(config.trainable_convs);
    let head = ClassifierHead::new(ClassifierHeadSpec::new(num_categories), derive_seed(config.seed, 0x12));
    Ok(PatientClassifier::new(encoder, head))
}

/// Patient ids for training, model selection and testing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(invalid(format!("patient `{id}` appears in more than one split")));
            }
        }
        if self.train.is_empty() {
            return Err(invalid("training split is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

pub struct FinetuneOutcome<T: Scalar> {
    pub model: PatientClassifier<T>,
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// Softmax probabilities for each test patient, in split order.
    pub test_probs: Vec<(String, Vec<f64>)>,
}

impl<T: Scalar> FinetuneOutcome<T> {
    pub fn model_state(&self) -> ModelState {
        let mut st = ModelState::default();
        st.push("encoder", &self.model.encoder);
        st.push("head", &self.model.head);
        st.provenance.epoch = self.best_epoch;
        st.provenance.loss_curve = self.history.iter().map(|m| m.train_loss).collect();
        st
    }
}

/// Softmax probabilities for one patient.
pub fn predict<T: Scalar>(model: &mut PatientClassifier<T>, input: &Tensor<T>) -> Result<Vec<f64>> {
    let logits = model.forward(input)?;
    Ok(softmax(&logits).into_iter().map(|p| p.as_f64()).collect())
}

fn snapshot<T: Scalar>(model: &PatientClassifier<T>) -> Vec<Vec<T>> {
    model.params().iter().map(|p| p.value.clone()).collect()
}

fn load_snapshot<T: Scalar>(model: &mut PatientClassifier<T>, snap: &[Vec<T>]) {
    for (p, v) in model.params_mut().into_iter().zip(snap) {
        p.value.copy_from_slice(v);
    }
}

/// Mean loss and probabilities over `ids`.
fn evaluate_split<T: Scalar>(
    model: &mut PatientClassifier<T>,
    inputs: &HashMap<&str, Tensor<T>>,
    labels: &HashMap<&str, usize>,
    ids: &[String],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(ids.len());
    for id in ids {
        let logits = model.forward(&inputs[id.as_str()])?;
        loss += cross_entropy(&logits, labels[id.as_str()])?.0.as_f64();
        probs.push(softmax(&logits).into_iter().map(|p| p.as_f64()).collect());
    }
    Ok((loss / ids.len().max(1) as f64, probs))
}

/// Train one task's classifier on `split.train`, keep the epoch with the
/// best validation AUC (lower validation loss breaks ties; without a
/// validation split the last epoch is kept) and score `split.test`.
pub fn finetune<T: Scalar>(
    patients: &[PatientBag<T>],
    labels: &[ScoreRecord],
    task: &TaskSpec,
    config: &FinetuneConfig,
    split: &Split,
    encoder_ckpt: Option<&ModelState>,
) -> Result<FinetuneOutcome<T>> {
    config.validate()?;
    split.validate()?;
    let bags: HashMap<&str, &PatientBag<T>> = patients.iter().map(|b| (b.patient_id.as_str(), b)).collect();
    let records: HashMap<&str, &ScoreRecord> = labels.iter().map(|r| (r.patient_id.as_str(), r)).collect();

    let mut inputs = HashMap::new();
    let mut cats = HashMap::new();
    for id in split.train.iter().chain(&split.val).chain(&split.test) {
        let bag = bags
            .get(id.as_str())
            .ok_or_else(|| invalid(format!("no slices for patient `{id}`")))?;
        let rec = records
            .get(id.as_str())
            .ok_or_else(|| invalid(format!("no labels for patient `{id}`")))?;
        cats.insert(id.as_str(), combine_score(rec, task)?);
        inputs.insert(id.as_str(), bag_input(bag, config.input_mode, &config.lbp)?);
    }
    let val_labels: Vec<usize> = split.val.iter().map(|id| cats[id.as_str()]).collect();
    if !split.val.is_empty() && val_labels.iter().collect::<HashSet<_>>().len() < 2 {
        return Err(Error::UndefinedAuc(format!(
            "validation split for {} holds a single category",
            task.task
        )));
    }

    let mut model = build_classifier::<T>(encoder_ckpt, config, task.num_categories)?;
    let mut opt = Adam::<T>::new(config.lr, config.beta1, config.beta2, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x13));
    let mut order: Vec<&str> = split.train.iter().map(|s| s.as_str()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, usize, Vec<Vec<T>>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_patients) {
            model.zero_grad();
            let inv = T::one() / T::of(batch.len() as f64);
            for &id in batch {
                let logits = model.forward(&inputs[id])?;
                let (loss, grad) = cross_entropy(&logits, cats[id])?;
                total += loss.as_f64();
                model.backward(grad.into_iter().map(|g| g * inv).collect());
            }
            opt.step(model.params_mut());
        }
        let train_loss = total / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Training(format!("non-finite training loss at epoch {epoch}")));
        }

        let mut metrics = EpochMetrics {
            epoch,
            train_loss,
            val_loss: None,
            val_auc: None,
        };
        let better = if split.val.is_empty() {
            true
        } else {
            let (vl, vp) = evaluate_split(&mut model, &inputs, &cats, &split.val)?;
            let auc = auc_multiclass(&vp, &val_labels)?;
            metrics.val_loss = Some(vl);
            metrics.val_auc = Some(auc);
            match &best {
                None => true,
                Some((ba, bl, _, _)) => auc > *ba || (auc == *ba && vl < *bl),
            }
        };
        log::debug!(
            "{} epoch {epoch}: train {:.4} val_loss {:?} val_auc {:?}",
            task.task,
            train_loss,
            metrics.val_loss,
            metrics.val_auc
        );
        if better {
            best = Some((
                metrics.val_auc.unwrap_or(0.0),
                metrics.val_loss.unwrap_or(0.0),
                epoch,
                snapshot(&model),
            ));
        }
        history.push(metrics);
    }

    let best_epoch = match best {
        Some((_, _, e, snap)) => {
            load_snapshot(&mut model, &snap);
            e
        }
        None => 0,
    };
    let (_, probs) = evaluate_split(&mut model, &inputs, &cats, &split.test)?;
    let test_probs = split.test.iter().cloned().zip(probs).collect();
    Ok(FinetuneOutcome {
        model,
        history,
        best_epoch,
        test_probs,
    })
}
