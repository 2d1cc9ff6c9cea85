use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tcens_core::ensemble::{EnsembleState, FusionMode, TaskScorer};
use tcens_core::harness::persist::{load_expert, load_model, load_scorer, save_model, Model};
use tcens_core::harness::{self, Method, ProtocolConfig, TaskNeeds, DATA_DIR_ENV};
use tcens_core::indomain::{embed, export_embeddings};
use tcens_core::merge::{distill_merge, merge_in_domain};
use tcens_core::metrics::{average_accuracy, membership_accuracy};
use tcens_core::{Error, Rng};

#[derive(Parser, Debug)]
#[command(name = "tcens", version, about = "Task-conditioned ensembles on Split MNIST")]
struct Cli {
    /// TOML file with protocol settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the expert and in-domain models of one task.
    Train {
        #[arg(long)]
        task: usize,
        /// Which run's random streams to use.
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long, default_value = "models")]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run the sequential protocol and write report files.
    RunProtocol {
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Also run the three-task merge comparison.
        #[arg(long)]
        merge_experiment: bool,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Evaluate saved models as an ensemble on the test sets of the given tasks.
    Eval {
        #[arg(long, value_delimiter = ',', required = true)]
        experts: Vec<PathBuf>,
        #[arg(long = "in-domain", value_delimiter = ',')]
        in_domain: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Dynamic)]
        mode: Mode,
        /// Test sets to evaluate (default: one per expert).
        #[arg(long = "test-tasks", value_delimiter = ',')]
        test_tasks: Vec<usize>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Write a task's embeddings under a saved in-domain model as CSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Distill two experts into one and average their in-domain models.
    Merge {
        #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
        experts: Vec<PathBuf>,
        #[arg(long = "in-domain", value_delimiter = ',', num_args = 1, required = true)]
        in_domain: Vec<PathBuf>,
        #[arg(long, default_value = "merged")]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Dynamic,
    Equal,
    Manual,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Split {
    Train,
    Test,
}

/// Flags mirroring [`ProtocolConfig`] fields.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods, e.g. fe_dm_lof,equal,manual.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    max_train: Option<usize>,
    #[arg(long)]
    max_test: Option<usize>,
    #[arg(long)]
    fe_epochs: Option<usize>,
    #[arg(long)]
    fe_lr: Option<f64>,
    #[arg(long)]
    batch_pairs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    lof_k: Option<usize>,
    /// Divide Mahalanobis distances by the square root of the embedding width.
    #[arg(long)]
    mahalanobis_per_dim: Option<bool>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    expert_epochs: Option<usize>,
    #[arg(long)]
    expert_lr: Option<f64>,
    #[arg(long)]
    expert_batch_size: Option<usize>,
    #[arg(long)]
    distill_samples: Option<usize>,
    #[arg(long)]
    distill_epochs: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    histogram_bins: Option<usize>,
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut ProtocolConfig) -> Result<()> {
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($field)+ = v;
                }
            };
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(ms) = &self.methods {
            cfg.methods = ms.iter().map(|m| m.trim().parse::<Method>()).collect::<Result<_, _>>()?;
        }
        if self.max_train.is_some() {
            cfg.max_train = self.max_train;
        }
        if self.max_test.is_some() {
            cfg.max_test = self.max_test;
        }
        set!(seed => seed);
        set!(runs => runs);
        set!(tasks => tasks);
        set!(fe_epochs => fe.loss.epochs);
        set!(fe_lr => fe.loss.lr);
        set!(batch_pairs => fe.loss.batch_pairs);
        set!(tau => fe.loss.tau);
        set!(embedding_dim => fe.embedding_dim);
        set!(lof_k => dm.k);
        set!(mahalanobis_per_dim => dm.mahalanobis_per_dim);
        set!(beta => beta);
        set!(expert_epochs => expert.epochs);
        set!(expert_lr => expert.optimizer.learning_rate);
        set!(expert_batch_size => expert.batch_size);
        set!(distill_samples => distill.samples_per_teacher);
        set!(distill_epochs => distill.epochs);
        set!(temperature => distill.temperature);
        set!(histogram_bins => histogram_bins);
        Ok(())
    }
}

fn load_config(path: Option<&Path>, flags: &ConfigFlags) -> Result<ProtocolConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => ProtocolConfig::default(),
    };
    flags.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn paths_of_two(v: &[PathBuf], what: &str) -> Result<(PathBuf, PathBuf)> {
    match v {
        [a, b] => Ok((a.clone(), b.clone())),
        _ => bail!(Error::InvalidArgument(format!("--{what} takes exactly two paths, got {}", v.len()))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train { task, run, out, flags } => {
            let cfg = load_config(config, &flags)?;
            let tasks = harness::load_tasks(&ProtocolConfig { tasks: 5, ..cfg.clone() })?;
            let data = tasks
                .get(task)
                .ok_or_else(|| Error::InvalidArgument(format!("task {task} outside 0..{}", tasks.len())))?;
            let mut needs = TaskNeeds::for_methods(&cfg.method_set());
            needs.expert = true;
            let models = harness::train_task(&cfg, &harness::protocol::run_rng(&cfg, run), data, needs)?;
            fs::create_dir_all(&out)?;
            let mut written = Vec::new();
            if let Some(e) = models.expert {
                let p = out.join(format!("expert_{task}.tcm"));
                save_model(&p, &Model::Expert(e))?;
                written.push(p);
            }
            for (name, m) in [
                ("lof", models.lof),
                ("mahalanobis", models.mahalanobis),
                ("pretrained", models.pretrained),
            ] {
                if let Some(m) = m {
                    let p = out.join(format!("in_domain_{task}_{name}.tcm"));
                    save_model(&p, &Model::InDomain(m))?;
                    written.push(p);
                }
            }
            for p in written {
                writeln!(stdout, "wrote {}", p.display())?;
            }
        }
        Command::RunProtocol {
            out,
            merge_experiment,
            flags,
        } => {
            let cfg = load_config(config, &flags)?;
            let tasks = harness::load_tasks(&cfg)?;
            let (report, timings) = harness::run_protocol_on(&cfg, &tasks)?;
            harness::emit_report(&report, Some(&timings), &out)?;
            write!(stdout, "{}", harness::report::summary_text(&report))?;
            if merge_experiment {
                let m = harness::run_merge_experiment(&cfg, &tasks)?;
                let text = harness::report::merge_summary(&m);
                fs::write(out.join("merge.txt"), &text)?;
                write!(stdout, "{text}")?;
            }
        }
        Command::Eval {
            experts,
            in_domain,
            mode,
            test_tasks,
            flags,
        } => {
            let cfg = load_config(config, &flags)?;
            let mode = match mode {
                Mode::Dynamic => FusionMode::Dynamic,
                Mode::Equal => FusionMode::Equal,
                Mode::Manual => FusionMode::Manual,
            };
            if mode == FusionMode::Dynamic && in_domain.len() != experts.len() {
                bail!(Error::InvalidArgument(format!(
                    "dynamic fusion needs one --in-domain model per expert ({} experts, {} in-domain)",
                    experts.len(),
                    in_domain.len()
                )));
            }
            let mut state = EnsembleState::new(mode, cfg.beta);
            for (i, e) in experts.iter().enumerate() {
                let scorer: Option<TaskScorer> = in_domain.get(i).map(|p| load_scorer(p)).transpose()?;
                state.push(load_expert(e)?, scorer);
            }
            let ids: Vec<usize> = if test_tasks.is_empty() {
                state.slots().iter().map(|s| s.expert.task_id).collect()
            } else {
                test_tasks
            };
            let all = harness::load_tasks(&ProtocolConfig { tasks: 5, ..cfg.clone() })?;
            let mut accs = Vec::new();
            let mut selected = Vec::new();
            for &t in &ids {
                let data = all
                    .get(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("task {t} outside 0..{}", all.len())))?;
                // Manual fusion needs the slot holding this task's expert.
                let slot = state.slots().iter().position(|s| s.expert.task_id == t);
                let task_ids = match (mode, slot) {
                    (FusionMode::Manual, None) => bail!(Error::MissingTaskId),
                    (_, s) => s.map(|s| vec![s; data.test.len()]),
                };
                let preds = state.predict_batch(data.test.inputs(), task_ids.as_deref())?;
                let correct = preds
                    .iter()
                    .zip(data.test.labels())
                    .filter(|(p, &y)| tcens_core::ensemble::argmax(&p.fused) == y)
                    .count();
                let acc = 100.0 * correct as f64 / data.test.len().max(1) as f64;
                writeln!(stdout, "task_{t}.accuracy={acc:.2}")?;
                accs.push(acc);
                selected.push(data.clone());
            }
            writeln!(stdout, "average={:.2}", average_accuracy(&accs)?)?;
            let one_slot_per_task = state.len() == selected.len() && selected.iter().enumerate().all(|(i, t)| t.task_id == i);
            if mode == FusionMode::Dynamic && one_slot_per_task {
                let m = membership_accuracy(&state, &selected, cfg.histogram_bins)?;
                writeln!(stdout, "membership_accuracy={:.2}", m.accuracy)?;
            }
        }
        Command::ExportEmbeddings {
            model,
            task,
            split,
            out,
            flags,
        } => {
            let cfg = load_config(config, &flags)?;
            let m = match load_model(&model)? {
                Model::InDomain(m) => m,
                other => bail!(Error::KindMismatch {
                    expected: "in_domain".into(),
                    found: other.kind_name().into(),
                }),
            };
            let all = harness::load_tasks(&ProtocolConfig { tasks: 5, ..cfg })?;
            let data = all
                .get(task)
                .ok_or_else(|| Error::InvalidArgument(format!("task {task} outside 0..{}", all.len())))?;
            let samples = match split {
                Split::Train => &data.train,
                Split::Test => &data.test,
            };
            let emb = embed(m.fe(), samples.inputs())?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut w = std::io::BufWriter::new(fs::File::create(&out)?);
            export_embeddings(&mut w, task, samples, emb.view())?;
            w.flush()?;
            writeln!(stdout, "wrote {} rows to {}", samples.len(), out.display())?;
        }
        Command::Merge {
            experts,
            in_domain,
            out,
            flags,
        } => {
            let cfg = load_config(config, &flags)?;
            let (ea, eb) = paths_of_two(&experts, "experts")?;
            let (da, db) = paths_of_two(&in_domain, "in-domain")?;
            let (ta, tb) = (load_expert(&ea)?, load_expert(&eb)?);
            let student = distill_merge(
                &ta,
                &tb,
                ta.input_stats.as_ref(),
                tb.input_stats.as_ref(),
                &cfg.distill,
                &mut Rng::new(cfg.seed),
            )?;
            let single = |p: &Path| -> Result<_> {
                match load_scorer(p)? {
                    TaskScorer::Single(m) => Ok(m),
                    TaskScorer::Merged(_) => bail!(Error::KindMismatch {
                        expected: "in_domain".into(),
                        found: "merged_in_domain".into(),
                    }),
                }
            };
            let merged = merge_in_domain(single(&da)?, single(&db)?);
            fs::create_dir_all(&out)?;
            let pe = out.join("merged_expert.tcm");
            let pd = out.join("merged_in_domain.tcm");
            save_model(&pe, &Model::Expert(student))?;
            save_model(&pd, &Model::MergedInDomain(merged))?;
            writeln!(stdout, "wrote {}", pe.display())?;
            writeln!(stdout, "wrote {}", pd.display())?;
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(core) = e.downcast_ref::<Error>() {
        return core.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}
