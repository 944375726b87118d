//! `modmask` command-line driver: data generation, pre-training, caption
//! training, evaluation, ablation grids and report tables.
//!
//! Every command resolves its configuration (preset or file, then `--set`
//! overrides), writes the resolved snapshot as `config.toml` into its output
//! directory, and logs to both stderr and `run.log` there.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use modmask_core::config::{ConfigError, ExperimentConfig};
use modmask_core::corpus::{manifest_dump, read_store, write_store, ClipSource, Corpus, Split};
use modmask_core::encoders::{ModalityId, Model, MODALITIES};
use modmask_core::eval::{
    ablate, evaluate_split, read_results_csv, write_report, write_results_csv, AblationKind, EvalError, Experiment,
    ResultRow,
};
use modmask_core::trainer::{
    crop_config, finetune, fingerprint, run_pretrain, AdamState, Checkpoint, Phase, TrainConfig, TrainError, Trainer,
};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "MODMASK_OUT_ROOT";
const DEFAULT_OUT_ROOT: &str = "runs";

pub const CONFIG_FILE: &str = "config.toml";
pub const DATA_STORE: &str = "data.mmf";
pub const PRETRAIN_STORE: &str = "pretrain.mmf";
/// Model to use downstream: final pre-trained weights, or the
/// validation-selected caption model.
pub const MODEL_CKPT: &str = "model.ckpt";
/// Full trainer state at the last step (resumable).
pub const STATE_CKPT: &str = "state.ckpt";

/// Error categories, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit 2.
    #[error("config error{}: {msg}", key.as_deref().map(|k| format!(" at `{k}`")).unwrap_or_default())]
    Config { key: Option<String>, msg: String },
    /// A required input does not exist; exit 3.
    #[error("missing input: {0}")]
    Missing(PathBuf),
    /// Anything that fails while running; exit 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Missing(_) => 3,
            Self::Runtime(_) => 1,
        }
    }

    fn config(msg: impl Into<String>) -> Self {
        Self::Config {
            key: None,
            msg: msg.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { path, .. } => Self::Missing(path.into()),
            other => Self::Config {
                key: other.key().map(str::to_string),
                msg: other.to_string(),
            },
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(TrainError, EvalError, modmask_core::corpus::CorpusError, std::io::Error, serde_json::Error);

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "modmask", version, about = "Modality-masking pre-training for text-to-video retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the pre-training and captioned corpora into feature stores.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Masked-modality pre-training of the video encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data; the corpora are regenerated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a saved trainer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even when the config fingerprint differs from the checkpoint's.
        #[arg(long)]
        force: bool,
        /// Save the trainer state every N steps (default: the validation interval).
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Stop at this step (resumable later) instead of the configured total.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Caption training with validation-driven model selection.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-training output directory or checkpoint; trains from scratch when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Text-to-video retrieval metrics of a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training output directory or checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Comma-separated video modalities (rgb, audio, asr) or `all`.
        #[arg(long, default_value = "all", value_parser = parse_modalities)]
        modalities: Modalities,
    },
    /// Grid of pre-train + caption-training runs over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// p_sweep, partial_mask or single_modality.
        #[arg(long, value_parser = parse_kind)]
        kind: AblationKind,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Number of seeds (0..N) or a comma-separated seed list.
        #[arg(long, default_value = "3", value_parser = parse_seeds)]
        seeds: Seeds,
        /// Also run caption training from scratch for each seed.
        #[arg(long)]
        with_scratch: bool,
    },
    /// Mean/std tables from stored results CSVs.
    Report {
        /// Results CSVs to combine.
        #[arg(long = "results", required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file; its optional `preset` key picks the base (toy by default).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `masking.p=1.0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (default: `$MODMASK_OUT_ROOT/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modalities(pub Vec<ModalityId>);

#[derive(Debug, Clone, PartialEq)]
pub struct Seeds(pub Vec<u64>);

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
    }
}

fn parse_modalities(s: &str) -> std::result::Result<Modalities, String> {
    if s == "all" {
        return Ok(Modalities(MODALITIES.to_vec()));
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let m = ModalityId::parse(part.trim()).ok_or_else(|| format!("unknown modality `{part}`"))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    out.sort();
    Ok(Modalities(out))
}

fn parse_kind(s: &str) -> std::result::Result<AblationKind, String> {
    AblationKind::parse(s).ok_or_else(|| format!("unknown ablation `{s}` (expected p_sweep, partial_mask or single_modality)"))
}

fn parse_seeds(s: &str) -> std::result::Result<Seeds, String> {
    let bad = |_| format!("seeds must be a count or a comma-separated list, got `{s}`");
    if s.contains(',') {
        return s.split(',').map(|v| v.trim().parse::<u64>().map_err(bad)).collect::<std::result::Result<_, _>>().map(Seeds);
    }
    let n: u64 = s.trim().parse().map_err(bad)?;
    if n == 0 {
        return Err("at least one seed is required".into());
    }
    Ok(Seeds((0..n).collect()))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Pretrain {
            common,
            data,
            resume,
            force,
            checkpoint_every,
            until,
        } => pretrain_cmd(&common, data.as_deref(), resume.as_deref(), force, checkpoint_every, until),
        Command::Finetune { common, data, init } => finetune_cmd(&common, data.as_deref(), init.as_deref()),
        Command::Eval {
            common,
            data,
            model,
            split,
            modalities,
        } => eval_cmd(&common, data.as_deref(), &model, split, &modalities.0),
        Command::Ablate {
            common,
            data,
            kind,
            grid,
            seeds,
            with_scratch,
        } => ablate_cmd(&common, data.as_deref(), kind, &grid, &seeds.0, with_scratch),
        Command::Report { results, out } => report_cmd(&results, out.as_deref()),
    }
}

/// `$MODMASK_OUT_ROOT/<command>` unless `--out` is given.
fn out_dir(explicit: Option<&Path>, command: &str) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUT_ROOT.into());
        root.join(command)
    })
}

/// Writes log lines to stderr and to a file.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.0.flush()
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let log = File::create(dir.join("run.log"))?;
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee(log))))
        .try_init();
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

/// Base config: `--config`, else the snapshot of the first upstream run
/// directory that has one, else the toy preset; then `--set` overrides.
fn resolve_config(common: &Common, upstream: &[Option<&Path>]) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => {
            require(path)?;
            ExperimentConfig::from_file(path)?
        }
        None => {
            let snapshot = upstream.iter().flatten().map(|p| run_dir(p).join(CONFIG_FILE)).find(|p| p.exists());
            match snapshot {
                Some(path) => {
                    info!("config from {}", path.display());
                    ExperimentConfig::from_file(&path)?
                }
                None => ExperimentConfig::toy(),
            }
        }
    };
    Ok(base.with_overrides(&common.set)?)
}

/// A run directory, or the directory holding a checkpoint file.
fn run_dir(p: &Path) -> PathBuf {
    if p.is_file() {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        p.to_path_buf()
    }
}

fn write_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    info!("resolved config {} written to {}", &cfg.fingerprint()[..12], dir.display());
    Ok(())
}

/// Loads one corpus from a gen-data directory, or regenerates both from
/// the config. The stored generator settings must match the config.
fn load_corpus(cfg: &ExperimentConfig, data: Option<&Path>, pretraining: bool) -> Result<Corpus> {
    let Some(dir) = data else {
        let (pre, down) = cfg.generate_corpora()?;
        return Ok(if pretraining { pre } else { down });
    };
    let (name, expected) = if pretraining {
        (PRETRAIN_STORE, cfg.pretrain_generator())
    } else {
        (DATA_STORE, cfg.data.clone())
    };
    let path = dir.join(name);
    require(&path)?;
    let corpus = read_store(&path)?.load_all()?;
    if corpus.manifest.generator != expected {
        return Err(CliError::config(format!(
            "{} was generated with different data settings than the resolved config",
            path.display()
        )));
    }
    info!("loaded {} clips from {}", corpus.manifest.clip_count(), path.display());
    Ok(corpus)
}

/// A checkpoint file, or the model checkpoint inside a run directory.
fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    let path = if p.is_dir() { p.join(MODEL_CKPT) } else { p.to_path_buf() };
    require(&path)?;
    Ok(Checkpoint::load(&path)?)
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = resolve_config(common, &[])?;
    let out = out_dir(common.out.as_deref(), "gen-data");
    prepare_out(&out)?;
    write_snapshot(&cfg, &out)?;
    let (pre, data) = cfg.generate_corpora()?;
    for (corpus, name) in [(&pre, PRETRAIN_STORE), (&data, DATA_STORE)] {
        write_store(&corpus.manifest, &corpus.records, &out.join(name))?;
        let stem = name.trim_end_matches(".mmf");
        std::fs::write(out.join(format!("{stem}.manifest.jsonl")), manifest_dump(corpus)?)?;
        let counts = [Split::Train, Split::Val, Split::Test].map(|s| corpus.manifest.split_ids(s).len());
        info!("{name}: {} clips, train/val/test {counts:?}", corpus.manifest.clip_count());
    }
    Ok(())
}

fn write_train_log(trainer: &Trainer, dir: &Path) -> Result<()> {
    let mut text = String::from("step,loss,objective\n");
    let first = trainer.step - trainer.log.losses.len() as u64;
    for (i, (loss, obj)) in trainer.log.losses.iter().zip(&trainer.log.objectives).enumerate() {
        text.push_str(&format!("{},{loss},{}\n", first + i as u64 + 1, obj.name()));
    }
    std::fs::write(dir.join("train_log.csv"), text)?;
    let mut val = String::from("step,value\n");
    for v in &trainer.log.val {
        val.push_str(&format!("{},{}\n", v.step, v.value));
    }
    std::fs::write(dir.join("val_log.csv"), val)?;
    Ok(())
}

fn pretrain_cmd(
    common: &Common,
    data: Option<&Path>,
    resume: Option<&Path>,
    force: bool,
    checkpoint_every: Option<u64>,
    until: Option<u64>,
) -> Result<()> {
    let cfg = resolve_config(common, &[resume, data])?;
    let out = out_dir(common.out.as_deref(), "pretrain");
    prepare_out(&out)?;
    write_snapshot(&cfg, &out)?;
    let corpus = load_corpus(&cfg, data, true)?;
    let tcfg = cfg.pretrain_train();
    let mut trainer = match resume {
        Some(path) => {
            let path = if path.is_dir() { path.join(STATE_CKPT) } else { path.to_path_buf() };
            require(&path)?;
            let ckpt = Checkpoint::load(&path)?;
            let t = Trainer::resume(&ckpt, Some(&fingerprint(&cfg.model, &tcfg)), force).map_err(|e| match e {
                TrainError::Fingerprint { .. } => CliError::config(format!("{e}; the resolved config differs from the one {} was trained with (use --force to resume anyway)", path.display())),
                other => other.into(),
            })?;
            info!("resumed from {} at step {}", path.display(), t.step);
            t
        }
        None => {
            let m = corpus.manifest();
            Trainer::new(Model::new(&cfg.model, m.dims, &m.codebook_tensor(), tcfg.seed).map_err(TrainError::from)?, tcfg.clone())?
        }
    };
    let every = checkpoint_every.unwrap_or(tcfg.eval_every_steps).max(1);
    let stop = until.map_or(tcfg.total_steps, |u| u.min(tcfg.total_steps));
    while trainer.step < stop {
        let next = ((trainer.step / every + 1) * every).min(stop);
        run_pretrain(&mut trainer, &corpus, next)?;
        trainer.checkpoint().save(&out.join(STATE_CKPT))?;
    }
    let ckpt = trainer.checkpoint();
    ckpt.save(&out.join(STATE_CKPT))?;
    write_train_log(&trainer, &out)?;
    if trainer.step < tcfg.total_steps {
        info!("stopped at step {} of {}; continue with --resume", trainer.step, tcfg.total_steps);
    } else {
        ckpt.save(&out.join(MODEL_CKPT))?;
        info!("pre-training finished at step {}", trainer.step);
    }
    Ok(())
}

fn finetune_cmd(common: &Common, data: Option<&Path>, init: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(common, &[init, data])?;
    let out = out_dir(common.out.as_deref(), "finetune");
    prepare_out(&out)?;
    write_snapshot(&cfg, &out)?;
    let corpus = load_corpus(&cfg, data, false)?;
    let (phase, model) = match init {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.model_config != cfg.model {
                return Err(CliError::Config {
                    key: Some("model".into()),
                    msg: format!("{} was trained with a different model config", p.display()),
                });
            }
            let model = Model::from_params(&ckpt.model_config, ckpt.dims, &ckpt.params).map_err(TrainError::from)?;
            (Phase::Finetune, model)
        }
        None => {
            let m = corpus.manifest();
            let seed = cfg.finetune.seed;
            (Phase::Scratch, Model::new(&cfg.model, m.dims, &m.codebook_tensor(), seed).map_err(TrainError::from)?)
        }
    };
    let tcfg = cfg.finetune_train(phase);
    let outcome = finetune(&corpus, model, &tcfg)?;
    let state = outcome.trainer.checkpoint();
    state.save(&out.join(STATE_CKPT))?;
    selected_checkpoint(&outcome.model, &tcfg, outcome.best_step.unwrap_or(state.step)).save(&out.join(MODEL_CKPT))?;
    write_train_log(&outcome.trainer, &out)?;
    if let (Some(step), Some(m)) = (outcome.best_step, outcome.best_val) {
        info!("selected step {step}: val R@1 {:.3} R@5 {:.3} R@10 {:.3}", m.r1, m.r5, m.r10);
    }
    Ok(())
}

/// Checkpoint of the validation-selected parameters; its optimizer state is
/// fresh because only the parameters are retained at selection time.
fn selected_checkpoint(model: &Model, cfg: &TrainConfig, step: u64) -> Checkpoint {
    let mut t = Trainer::new(model.clone(), cfg.clone()).expect("config validated by training");
    t.step = step;
    t.adam = AdamState::new(&model.params);
    t.checkpoint()
}

fn eval_cmd(common: &Common, data: Option<&Path>, model_path: &Path, split: Split, modalities: &[ModalityId]) -> Result<()> {
    let ckpt = load_checkpoint(model_path)?;
    let cfg = resolve_config(common, &[Some(model_path), data])?;
    let out = common.out.clone().unwrap_or_else(|| run_dir(model_path));
    prepare_out(&out)?;
    let corpus = load_corpus(&cfg, data, false)?;
    let model = Model::from_params(&ckpt.model_config, ckpt.dims, &ckpt.params).map_err(TrainError::from)?;
    let ids = corpus.manifest().split_ids(split);
    let crop = crop_config(&model.cfg, cfg.finetune.crop_s);
    let mask = MODALITIES.map(|m| modalities.contains(&m));
    let m = evaluate_split(&model, &corpus, &ids, &crop, mask)?;
    let t = &ckpt.train_config;
    let (p, f) = match t.phase {
        Phase::Scratch => (None, None),
        _ => (Some(t.masking.p), Some(t.masking.mask_fraction)),
    };
    let label = if modalities.len() == 3 {
        "all".to_string()
    } else {
        modalities.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
    };
    let row = ResultRow::new(t.phase.name(), p, f, &label, t.seed, &m);
    let path = out.join(format!("metrics_{}.csv", split.name()));
    write_results_csv(&path, std::slice::from_ref(&row))?;
    std::fs::write(out.join(format!("eval_{}.toml", split.name())), cfg.to_toml())?;
    info!(
        "{} split ({} clips): R@1 {:.3} R@5 {:.3} R@10 {:.3} MdR {} MnR {:.1}",
        split.name(),
        ids.len(),
        m.r1,
        m.r5,
        m.r10,
        m.mdr,
        m.mnr
    );
    println!("{}", path.display());
    Ok(())
}

fn ablate_cmd(
    common: &Common,
    data: Option<&Path>,
    kind: AblationKind,
    grid: &[f64],
    seeds: &[u64],
    with_scratch: bool,
) -> Result<()> {
    let cfg = resolve_config(common, &[data])?;
    let out = out_dir(common.out.as_deref(), "ablate");
    prepare_out(&out)?;
    write_snapshot(&cfg, &out)?;
    let pre = load_corpus(&cfg, data, true)?;
    let down = load_corpus(&cfg, data, false)?;
    let exp = Experiment::new(&pre, &down, cfg.model.clone(), cfg.pretrain_train(), cfg.finetune_train(Phase::Finetune));
    let mut rows = Vec::new();
    if with_scratch {
        for &s in seeds {
            rows.push(exp.run(&modmask_core::eval::RunSpec::scratch(s))?);
        }
    }
    rows.extend(ablate(&exp, kind, grid, seeds)?);
    write_results_csv(&out.join("results.csv"), &rows)?;
    write_report(&rows, &out)?;
    print!("{}", std::fs::read_to_string(out.join("table.txt"))?);
    Ok(())
}

fn report_cmd(results: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for path in results {
        require(path)?;
        rows.extend(read_results_csv(path)?);
    }
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => results[0].parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_report(&rows, &out)?;
    print!("{}", std::fs::read_to_string(out.join("table.txt"))?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_parse_as_count_or_list() {
        assert_eq!(parse_seeds("3").unwrap(), Seeds(vec![0, 1, 2]));
        assert_eq!(parse_seeds("4,7").unwrap(), Seeds(vec![4, 7]));
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn modalities_parse_in_canonical_order() {
        assert_eq!(parse_modalities("all").unwrap().0, MODALITIES.to_vec());
        assert_eq!(parse_modalities("asr,rgb").unwrap().0, vec![ModalityId::Rgb, ModalityId::Asr]);
        assert!(parse_modalities("video").is_err());
    }

    #[test]
    fn config_errors_keep_their_key_path() {
        let err: CliError = ExperimentConfig::toy().with_overrides(&["masking.q=1"]).unwrap_err().into();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("masking.q"), "{err}");
        let missing: CliError = ExperimentConfig::from_file(Path::new("/nonexistent/x.toml")).unwrap_err().into();
        assert_eq!(missing.exit_code(), 3);
    }

    #[test]
    fn default_output_goes_under_the_root() {
        assert_eq!(out_dir(Some(Path::new("x")), "pretrain"), PathBuf::from("x"));
        assert!(out_dir(None, "pretrain").ends_with("pretrain"));
    }

    #[test]
    fn parse_errors_exit_with_two() {
        assert_eq!(run(["modmask", "bogus"]), 2);
        assert_eq!(run(["modmask", "ablate", "--kind", "nope", "--grid", "1"]), 2);
    }
}
