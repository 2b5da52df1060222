//! Stage runners shared by the CLI subcommands and the `pipeline` command.
//!
//! Artifact layout under the pipeline output directory:
//!
//! ```text
//! config.resolved.toml
//! phantoms/<patient>/{volume.raw,mask.raw,meta.json}, phantoms/labels.csv
//! prep/index.json, prep/<patient>/slice_####.f32
//! pretrain/encoder.ckpt, pretrain/history.csv
//! finetune/<task>.ckpt, finetune/<task>.history.json
//! eval/report.json, eval/report.csv
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    categories, make_folds, run_ablation_grid, run_cv, write_ablation_csv, write_report_csv, write_report_json,
    AblationCell, AblationRow, FileCheckpoints, FinetuneLearner, MetricsReport,
};
use crate::finetune::{finetune, InitMode, PatientBag, ScoreRecord, Split, TaskSpec};
use crate::io::{read_dataset, read_labels, read_prep, write_prep};
use crate::lbp::lbp_slice;
use crate::phantom::{gen_phantom_dataset, write_phantom_dataset};
use crate::preprocess::preprocess_volume;
use crate::pretrain::{pretrain, PretrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Gen,
    Prep,
    Pretrain,
    Finetune,
    Eval,
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gen" => Ok(Stage::Gen),
            "prep" => Ok(Stage::Prep),
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "eval" => Ok(Stage::Eval),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Comma-separated stage list; empty input gives no stages.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Stage::from_str)
        .collect()
}

/// Paths of every pipeline artifact.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn phantoms(&self) -> PathBuf {
        self.root.join("phantoms")
    }
    pub fn labels(&self) -> PathBuf {
        self.phantoms().join("labels.csv")
    }
    pub fn prep(&self) -> PathBuf {
        self.root.join("prep")
    }
    pub fn pretrain_ckpt(&self) -> PathBuf {
        self.root.join("pretrain").join("encoder.ckpt")
    }
    pub fn finetune_ckpt(&self, task: &TaskSpec) -> PathBuf {
        self.root.join("finetune").join(format!("{}.ckpt", task.task))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json output", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generate the phantom dataset into `out`.
pub fn stage_gen(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let spec = cfg.phantom_spec();
    let data = gen_phantom_dataset(&spec)?;
    write_phantom_dataset(out, &spec, &data)?;
    Ok(data.volumes.len())
}

/// Preprocess every patient under `data` into a slice store at `out`.
/// Patients left without slices are dropped with a warning.
pub fn stage_prep(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<String>> {
    let spec = cfg.preprocess_spec();
    let mut bags = Vec::new();
    let mut dropped = Vec::new();
    for vol in read_dataset(data)? {
        match preprocess_volume::<f32>(&vol, &spec) {
            Ok(slices) => bags.push(PatientBag {
                patient_id: vol.patient_id.clone(),
                slices,
            }),
            Err(Error::EmptyPatient(id)) => {
                log::warn!("patient `{id}` has no usable slices; dropped");
                dropped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    write_prep(out, &bags)?;
    Ok(dropped)
}

/// LBP-encode a slice store into a new store with the same layout.
pub fn stage_lbp(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let spec = cfg.lbp_spec();
    spec.validate()?;
    let bags = read_prep(input)?
        .into_iter()
        .map(|b| {
            Ok(PatientBag {
                slices: b.slices.iter().map(|s| lbp_slice(s, &spec)).collect::<Result<Vec<_>>>()?,
                patient_id: b.patient_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_prep(out, &bags)
}

/// Pretrain on every slice of the store; writes the checkpoint and
/// `history.csv` beside it.
pub fn stage_pretrain(cfg: &RunConfig, prep: &Path, ckpt: &Path) -> Result<PretrainHistory> {
    let slices: Vec<_> = read_prep(prep)?.into_iter().flat_map(|b| b.slices).collect();
    let outcome = pretrain(&slices, &cfg.pretrain_config())?;
    let mut state = outcome.checkpoint();
    state.provenance.config_fingerprint = Some(cfg.fingerprint());
    state.save(ckpt)?;
    let hist = ckpt.with_file_name("history.csv");
    outcome.history.write_csv(&hist)?;
    Ok(outcome.history)
}

fn load_inputs(prep: &Path, labels: &Path) -> Result<(Vec<PatientBag<f32>>, Vec<ScoreRecord>)> {
    let bags = read_prep(prep)?;
    let labels = read_labels(labels)?;
    let have: std::collections::HashSet<&str> = bags.iter().map(|b| b.patient_id.as_str()).collect();
    // patients dropped by preprocessing cannot be scored
    let labels = labels.into_iter().filter(|r| have.contains(r.patient_id.as_str())).collect();
    Ok((bags, labels))
}

fn load_init(cfg: &RunConfig, init: Option<&Path>) -> Result<Option<ModelState>> {
    match cfg.finetune_config().init_mode {
        InitMode::Random => Ok(None),
        InitMode::SslCheckpoint => {
            let path = init.ok_or_else(|| Error::Config("ssl initialisation needs a checkpoint path".into()))?;
            ModelState::load(path).map(Some)
        }
    }
}

/// Default split for a single fine-tune: everyone trains except a
/// validation pair of distinct categories.
pub fn default_split(labels: &[ScoreRecord], task: &TaskSpec, val_patients: usize) -> Result<Split> {
    let cats = categories(labels, task)?;
    let mut by_cat: std::collections::BTreeMap<usize, Vec<String>> = Default::default();
    for (id, c) in &cats {
        by_cat.entry(*c).or_default().push(id.clone());
    }
    let mut val = Vec::new();
    'outer: while val.len() < val_patients {
        let before = val.len();
        for ids in by_cat.values_mut() {
            if val.len() == val_patients {
                break 'outer;
            }
            if ids.len() > 1 {
                val.push(ids.pop().expect("non-empty"));
            }
        }
        if val.len() == before {
            break;
        }
    }
    let train = cats.into_iter().map(|(id, _)| id).filter(|id| !val.contains(id)).collect();
    Ok(Split {
        train,
        val,
        test: Vec::new(),
    })
}

#[derive(Serialize)]
struct FinetuneRecord<'a> {
    task: String,
    best_epoch: usize,
    history: &'a [crate::finetune::EpochMetrics],
    test_probs: &'a [(String, Vec<f64>)],
    config_fingerprint: String,
}

/// Fine-tune one task and write `<out>` plus `<out stem>.history.json`.
pub fn stage_finetune(
    cfg: &RunConfig,
    prep: &Path,
    labels: &Path,
    task: &TaskSpec,
    init: Option<&Path>,
    split: Option<&Split>,
    out: &Path,
) -> Result<()> {
    let (bags, labels) = load_inputs(prep, labels)?;
    let init_state = load_init(cfg, init)?;
    let split = match split {
        Some(s) => s.clone(),
        None => default_split(&labels, task, cfg.usize("eval.val_patients"))?,
    };
    let outcome = finetune(&bags, &labels, task, &cfg.finetune_config(), &split, init_state.as_ref())?;
    let mut state = outcome.model_state();
    state.provenance.seed = cfg.seed();
    state.provenance.config_fingerprint = Some(cfg.fingerprint());
    state.save(out)?;
    write_json(
        &out.with_extension("history.json"),
        &FinetuneRecord {
            task: task.task.to_string(),
            best_epoch: outcome.best_epoch,
            history: &outcome.history,
            test_probs: &outcome.test_probs,
            config_fingerprint: cfg.fingerprint(),
        },
    )
}

pub fn read_split(path: &Path) -> Result<Split> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
}

/// Cross-validate every configured task; writes report.json and report.csv.
pub fn stage_eval(
    cfg: &RunConfig,
    prep: &Path,
    labels: &Path,
    init: Option<&Path>,
    out: &Path,
) -> Result<Vec<MetricsReport>> {
    let (bags, labels) = load_inputs(prep, labels)?;
    let init_state = load_init(cfg, init)?;
    let ft = cfg.finetune_config();
    let folds = cfg.fold_settings();
    let method = format!(
        "{}+{}",
        match ft.init_mode {
            InitMode::SslCheckpoint => "ssl",
            InitMode::Random => "scratch",
        },
        ft.input_mode.name()
    );
    let mut reports = Vec::new();
    for task in cfg.tasks()? {
        let plan = make_folds(&categories(&labels, &task)?, folds.k, folds.repeats, folds.val_patients, folds.seed)?;
        let mut learner = FinetuneLearner {
            patients: &bags,
            labels: &labels,
            config: ft.clone(),
            checkpoint: init_state.as_ref(),
        };
        reports.push(run_cv(&mut learner, &labels, &task, &plan, &method, &cfg.fingerprint())?);
    }
    write_report_json(&reports, &out.join("report.json"))?;
    write_report_csv(&reports, &out.join("report.csv"))?;
    Ok(reports)
}

/// Run the six-row ablation grid; writes ablation.csv and ablation.json.
pub fn stage_ablate(
    cfg: &RunConfig,
    prep: &Path,
    labels: &Path,
    ckpt_adv: &Path,
    ckpt_no_adv: &Path,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let (bags, labels) = load_inputs(prep, labels)?;
    let source = FileCheckpoints::new(ckpt_adv, ckpt_no_adv);
    let rows = run_ablation_grid(
        &bags,
        &labels,
        &cfg.tasks()?,
        &AblationCell::standard_grid(),
        &cfg.finetune_config(),
        &cfg.fold_settings(),
        &source,
    )?;
    write_ablation_csv(&rows, &out.join("ablation.csv"))?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}

/// Run `stages` in dependency order under `out`.
pub fn run_pipeline(stages: &[Stage], cfg: &RunConfig, out: &Path) -> Result<()> {
    if stages.is_empty() {
        return Ok(());
    }
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let layout = Layout::new(out);
    cfg.write_resolved(out)?;
    for stage in stages {
        log::info!("stage {stage:?}");
        match stage {
            Stage::Gen => {
                stage_gen(cfg, &layout.phantoms())?;
            }
            Stage::Prep => {
                require(&layout.phantoms())?;
                stage_prep(cfg, &layout.phantoms(), &layout.prep())?;
            }
            Stage::Pretrain => {
                require(&layout.prep().join("index.json"))?;
                stage_pretrain(cfg, &layout.prep(), &layout.pretrain_ckpt())?;
            }
            Stage::Finetune => {
                require(&layout.prep().join("index.json"))?;
                require(&layout.labels())?;
                let init = pretrain_init(cfg, &layout)?;
                for task in cfg.tasks()? {
                    stage_finetune(
                        cfg,
                        &layout.prep(),
                        &layout.labels(),
                        &task,
                        init.as_deref(),
                        None,
                        &layout.finetune_ckpt(&task),
                    )?;
                }
            }
            Stage::Eval => {
                for task in cfg.tasks()? {
                    require(&layout.finetune_ckpt(&task))?;
                }
                let init = pretrain_init(cfg, &layout)?;
                stage_eval(cfg, &layout.prep(), &layout.labels(), init.as_deref(), &layout.eval_dir())?;
            }
        }
    }
    Ok(())
}

fn pretrain_init(cfg: &RunConfig, layout: &Layout) -> Result<Option<PathBuf>> {
    match cfg.finetune_config().init_mode {
        InitMode::Random => Ok(None),
        InitMode::SslCheckpoint => {
            let p = layout.pretrain_ckpt();
            require(&p)?;
            Ok(Some(p))
        }
    }
}
