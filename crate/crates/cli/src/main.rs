use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fibrossl::config::RunConfig;
use fibrossl::pipeline::{self, parse_stages};
use fibrossl::Error;

#[derive(Parser, Debug)]
#[command(name = "fibrossl", version, about = "Self-supervised CT liver texture pretraining and fibrosis/NAS scoring")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config file; tables flatten to dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set pretrain.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Fixed reduction order for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labeled synthetic phantoms.
    GenPhantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        slices: Option<usize>,
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        categories: Option<usize>,
    },
    /// Window, mask, filter and resize volumes into a slice store.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
    },
    /// LBP-encode a slice store.
    LbpEncode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long)]
        neighbors: Option<usize>,
        /// strict | ge
        #[arg(long)]
        comparison: Option<String>,
    },
    /// Context-restoration pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; history.csv is written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long = "adv-weight")]
        adv_weight: Option<f64>,
        #[arg(long = "no-adv")]
        no_adv: bool,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        swaps: Option<usize>,
    },
    /// Fine-tune one task.
    Finetune {
        #[command(flatten)]
        ft: FinetuneArgs,
        #[arg(long)]
        task: Option<String>,
        /// JSON file with train/val/test patient id lists.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated stratified cross-validation; writes report.json and report.csv.
    Evaluate {
        #[command(flatten)]
        ft: FinetuneArgs,
        /// Comma-separated tasks.
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Six-row ablation grid; writes ablation.csv.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Checkpoint pretrained with the adversarial term.
        #[arg(long = "ckpt-adv")]
        ckpt_adv: PathBuf,
        /// Checkpoint pretrained without it.
        #[arg(long = "ckpt-no-adv")]
        ckpt_no_adv: PathBuf,
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run stages in dependency order under one output directory.
    Pipeline {
        /// Comma-separated subset of gen,prep,pretrain,finetune,eval.
        #[arg(long, default_value = "")]
        stages: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Checkpoint path, or `random`.
    #[arg(long)]
    init: Option<String>,
    /// image | lbp
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    wd: Option<f64>,
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn opt<V: ToString>(&mut self, key: &str, v: &Option<V>) {
        if let Some(v) = v {
            self.0.push((key.into(), v.to_string()));
        }
    }

    fn finetune(&mut self, a: &FinetuneArgs) -> Option<PathBuf> {
        self.opt("finetune.input", &a.input);
        self.opt("finetune.epochs", &a.epochs);
        self.opt("finetune.lr", &a.lr);
        self.opt("finetune.batch", &a.batch);
        self.opt("finetune.weight_decay", &a.wd);
        match a.init.as_deref() {
            Some("random") => {
                self.0.push(("finetune.init".into(), "random".into()));
                None
            }
            Some(path) => {
                self.0.push(("finetune.init".into(), "ssl".into()));
                Some(PathBuf::from(path))
            }
            None => None,
        }
    }
}

fn resolve(global: &Global, mut extra: Overrides) -> Result<RunConfig, Error> {
    let mut flags = Vec::new();
    for kv in &global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        flags.push((k.trim().to_string(), v.to_string()));
    }
    // dedicated flags take precedence over --set
    flags.append(&mut extra.0);
    if global.deterministic {
        flags.push(("deterministic".into(), "true".into()));
    }
    if let Some(seed) = global.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    let cfg = RunConfig::resolve_file(global.config.as_deref(), &flags)?;
    fibrossl::nn::set_deterministic(cfg.bool("deterministic"));
    Ok(cfg)
}


fn run(cli: Cli) -> Result<(), Error> {
    let mut o = Overrides(Vec::new());
    match &cli.command {
        Command::GenPhantoms {
            out,
            patients,
            slices,
            dims,
            categories,
        } => {
            o.opt("phantom.patients", patients);
            o.opt("phantom.slices", slices);
            o.opt("phantom.dims", dims);
            o.opt("phantom.categories", categories);
            let cfg = resolve(&cli.global, o)?;
            let n = pipeline::stage_gen(&cfg, out)?;
            cfg.write_resolved(out)?;
            log::info!("wrote {n} phantoms to {}", out.display());
        }
        Command::Preprocess { data, out, size } => {
            o.opt("preprocess.size", size);
            let cfg = resolve(&cli.global, o)?;
            let dropped = pipeline::stage_prep(&cfg, data, out)?;
            cfg.write_resolved(out)?;
            if !dropped.is_empty() {
                log::warn!("dropped {} patients without usable slices", dropped.len());
            }
        }
        Command::LbpEncode {
            input,
            out,
            radius,
            neighbors,
            comparison,
        } => {
            o.opt("lbp.radius", radius);
            o.opt("lbp.neighbors", neighbors);
            o.opt("lbp.comparison", comparison);
            let cfg = resolve(&cli.global, o)?;
            pipeline::stage_lbp(&cfg, input, out)?;
            cfg.write_resolved(out)?;
        }
        Command::Pretrain {
            data,
            out,
            epochs,
            batch,
            lr,
            adv_weight,
            no_adv,
            patch,
            swaps,
        } => {
            o.opt("pretrain.epochs", epochs);
            o.opt("pretrain.batch", batch);
            o.opt("pretrain.lr", lr);
            o.opt("pretrain.adv_weight", adv_weight);
            o.opt("pretrain.patch", patch);
            o.opt("pretrain.swaps", swaps);
            if *no_adv {
                o.0.push(("pretrain.adversarial".into(), "false".into()));
            }
            let cfg = resolve(&cli.global, o)?;
            let hist = pipeline::stage_pretrain(&cfg, data, out)?;
            cfg.write_resolved(out.parent().unwrap_or(std::path::Path::new(".")))?;
            if let (Some(first), Some(last)) = (hist.epochs.first(), hist.epochs.last()) {
                log::info!("rmse {:.5} -> {:.5}", first.rmse, last.rmse);
            }
        }
        Command::Finetune { ft, task, split, out } => {
            let init = o.finetune(ft);
            o.opt("finetune.task", task);
            let cfg = resolve(&cli.global, o)?;
            let split = split.as_deref().map(pipeline::read_split).transpose()?;
            pipeline::stage_finetune(&cfg, &ft.data, &ft.labels, &cfg.task(), init.as_deref(), split.as_ref(), out)?;
            cfg.write_resolved(out.parent().unwrap_or(std::path::Path::new(".")))?;
        }
        Command::Evaluate {
            ft,
            tasks,
            folds,
            repeats,
            out,
        } => {
            let init = o.finetune(ft);
            o.opt("eval.tasks", tasks);
            o.opt("eval.folds", folds);
            o.opt("eval.repeats", repeats);
            let cfg = resolve(&cli.global, o)?;
            let reports = pipeline::stage_eval(&cfg, &ft.data, &ft.labels, init.as_deref(), out)?;
            cfg.write_resolved(out)?;
            for r in reports {
                println!("{} {}: {:.2} ± {:.2}", r.method, r.task, r.mean_auc, r.std_auc);
            }
        }
        Command::Ablate {
            data,
            labels,
            ckpt_adv,
            ckpt_no_adv,
            tasks,
            out,
        } => {
            o.opt("eval.tasks", tasks);
            let cfg = resolve(&cli.global, o)?;
            let rows = pipeline::stage_ablate(&cfg, data, labels, ckpt_adv, ckpt_no_adv, out)?;
            cfg.write_resolved(out)?;
            print!("{}", fibrossl::evaluation::ablation_csv(&rows));
        }
        Command::Pipeline { stages, out } => {
            let stages = parse_stages(stages)?;
            let cfg = resolve(&cli.global, o)?;
            pipeline::run_pipeline(&stages, &cfg, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
