//! Command-line surface: argument parsing and one function per subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use atp_core::adapters::Adapters;
use atp_core::compactor::checkpoint::{
    adapters_checkpoint, adapters_from_checkpoint, check_adapters_fit, model_checkpoint, model_from_checkpoint,
    Checkpoint,
};
use atp_core::compactor::{build_plan, compact, verify_equivalence};
use atp_core::harness::config::{load_run_config, Manifest};
use atp_core::harness::data::{copy_task_corpus, decode, encode, sha256_hex, Corpus, BOS};
use atp_core::harness::eval::{decision_diff_ratio, generate, layer_ratio_report, perplexity, ModelView, SamplingConfig};
use atp_core::model::{DecisionSet, Model, ModelConfig, Token};
use atp_core::numerics::rng::{stream, Stream};
use atp_core::trainer::{atp_run, log_to_csv, pretrain, two_stage_run, PretrainConfig, RunConfig, RunOutput};
use atp_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONTRACT: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "atp", version, about = "One-stage structured pruning with LoRA on a byte-level toy decoder")]
pub struct Cli {
    /// Where to write the run manifest (defaults next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the dense base model.
    Pretrain(PretrainArgs),
    /// Joint decision search and adapter training.
    Atp(RunArgs),
    /// Decision search first, then adapter training with frozen decisions.
    TwoStage(RunArgs),
    /// Merge, slice and verify a compact model.
    Export(ExportArgs),
    /// Print perplexity on a corpus.
    Eval(EvalArgs),
    /// Sample text.
    Gen(GenArgs),
    /// Write the per-layer pruning-ratio CSV of a decision file.
    Decisions(DecisionsArgs),
    /// Print the normalized Hamming distance between two decision files.
    Diff(DiffArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelSize {
    Toy,
    Small,
}

impl ModelSize {
    fn config(self) -> ModelConfig {
        match self {
            ModelSize::Toy => ModelConfig::toy(),
            ModelSize::Small => ModelConfig::small(),
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// UTF-8 text file to train on.
    #[arg(long, conflicts_with = "copy_task")]
    pub corpus: Option<PathBuf>,
    /// Generate a synthetic copy-task corpus with this many lines instead.
    #[arg(long)]
    pub copy_task: Option<usize>,
    /// Seed of the copy-task generator.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "toy")]
    pub model: ModelSize,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// key=value run config; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base checkpoint. Without it a freshly initialized model is used.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Size of the fresh model when no base is given.
    #[arg(long, value_enum, default_value = "toy")]
    pub model: ModelSize,
    #[command(flatten)]
    pub data: DataArgs,
    /// Calibration text; defaults to the training corpus.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Number of leading calibration windows to cycle through.
    #[arg(long, default_value_t = 64)]
    pub calib_windows: usize,
    /// Output directory for adapters, decisions, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapters: PathBuf,
    #[arg(long)]
    pub decisions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    #[arg(long, default_value_t = 16)]
    pub probe_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Dense,
    Masked,
    Compact,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Base checkpoint (dense, masked) or compact checkpoint (compact).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "dense")]
    pub mode: EvalMode,
    /// Adapters checkpoint, required in masked mode.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    /// Decision file, required in masked mode.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    #[arg(long, default_value_t = 0.9)]
    pub temperature: f64,
    #[arg(long, default_value_t = 50)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DecisionsArgs {
    pub decisions: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    pub a: PathBuf,
    pub b: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONTRACT } else { EXIT_OK };
        }
    };
    match dispatch(cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Verification(_) => EXIT_VERIFICATION,
        _ => EXIT_CONTRACT,
    }
}

struct Ctx {
    manifest: Manifest,
    path: PathBuf,
    start: Instant,
}

impl Ctx {
    fn new(command: &str, argv: &[String], explicit: Option<PathBuf>, default: PathBuf) -> Self {
        Self {
            manifest: Manifest::new(command, argv),
            path: explicit.unwrap_or(default),
            start: Instant::now(),
        }
    }

    fn file(&mut self, name: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.set_digest(name, path, &sha256_hex(&bytes));
        Ok(bytes)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.set("wall_ms", self.start.elapsed().as_millis());
        self.manifest.write(&self.path)
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn dispatch(cli: Cli, argv: &[String]) -> Result<()> {
    let explicit = cli.manifest;
    match cli.command {
        Command::Pretrain(a) => {
            let ctx = Ctx::new("pretrain", argv, explicit, with_suffix(&a.out, ".manifest"));
            cmd_pretrain(a, ctx)
        }
        Command::Atp(a) => {
            let ctx = Ctx::new("atp", argv, explicit, a.out.join("manifest.txt"));
            cmd_run(a, ctx, false)
        }
        Command::TwoStage(a) => {
            let ctx = Ctx::new("two-stage", argv, explicit, a.out.join("manifest.txt"));
            cmd_run(a, ctx, true)
        }
        Command::Export(a) => {
            let ctx = Ctx::new("export", argv, explicit, with_suffix(&a.out, ".manifest"));
            cmd_export(a, ctx)
        }
        Command::Eval(a) => {
            let ctx = Ctx::new("eval", argv, explicit, PathBuf::from("atp-eval.manifest"));
            cmd_eval(a, ctx)
        }
        Command::Gen(a) => {
            let ctx = Ctx::new("gen", argv, explicit, PathBuf::from("atp-gen.manifest"));
            cmd_gen(a, ctx)
        }
        Command::Decisions(a) => {
            let default = a
                .out
                .as_ref()
                .map_or_else(|| PathBuf::from("atp-decisions.manifest"), |o| with_suffix(o, ".manifest"));
            let ctx = Ctx::new("decisions", argv, explicit, default);
            cmd_decisions(a, ctx)
        }
        Command::Diff(a) => {
            let ctx = Ctx::new("diff", argv, explicit, PathBuf::from("atp-diff.manifest"));
            cmd_diff(a, ctx)
        }
    }
}

fn load_corpus(data: &DataArgs, ctx: &mut Ctx) -> Result<Corpus> {
    match (&data.corpus, data.copy_task) {
        (Some(path), _) => {
            let corpus = Corpus::from_file(path)?;
            ctx.manifest.set_digest("train", path, &corpus.digest());
            Ok(corpus)
        }
        (None, Some(lines)) => {
            let corpus = copy_task_corpus(lines, &mut stream(data.data_seed, Stream::Data));
            ctx.manifest.set("data.train.copy_task_lines", lines);
            ctx.manifest.set("data.train.copy_task_seed", data.data_seed);
            ctx.manifest.set("data.train.sha256", corpus.digest());
            Ok(corpus)
        }
        (None, None) => Err(Error::Contract("give --corpus FILE or --copy-task LINES".into())),
    }
}

fn windows(corpus: &Corpus, seq_len: usize, what: &str) -> Result<Vec<Vec<Token>>> {
    let w = corpus.windows(seq_len);
    if w.is_empty() {
        return Err(Error::Input(format!("{what} corpus is shorter than one {seq_len}-token window")));
    }
    Ok(w)
}

fn cmd_pretrain(a: PretrainArgs, mut ctx: Ctx) -> Result<()> {
    let config = a.model.config();
    if a.seq_len < 2 || a.seq_len > config.max_seq {
        return Err(Error::Contract(format!("--seq-len must lie in [2, {}]", config.max_seq)));
    }
    let corpus = load_corpus(&a.data, &mut ctx)?;
    let train = windows(&corpus, a.seq_len, "training")?;
    let pc = PretrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        seed: a.seed,
        grad_clip: a.grad_clip,
    };
    for (k, v) in [
        ("model", format!("{:?}", a.model).to_lowercase()),
        ("steps", a.steps.to_string()),
        ("lr", a.lr.to_string()),
        ("batch", a.batch.to_string()),
        ("seq_len", a.seq_len.to_string()),
        ("seed", a.seed.to_string()),
        ("grad_clip", a.grad_clip.to_string()),
    ] {
        ctx.manifest.set(&format!("pretrain.{k}"), v);
    }
    let (model, losses) = pretrain::<f32>(&config, &pc, &train)?;
    model_checkpoint(&model).write(&a.out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(with_suffix(&a.out, ".loss.csv"), csv)?;
    let last = losses.last().copied().unwrap_or(f64::NAN);
    ctx.manifest.set("final_loss", last);
    println!("final_loss={last}");
    ctx.finish()
}

fn read_model(path: &Path, ctx: &mut Ctx, name: &str) -> Result<Model<f32>> {
    let bytes = ctx.file(name, path)?;
    model_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
}

fn read_adapters(path: &Path, ctx: &mut Ctx) -> Result<Adapters<f32>> {
    let bytes = ctx.file("adapters", path)?;
    adapters_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
}

fn read_decisions(path: &Path, ctx: &mut Ctx, name: &str) -> Result<DecisionSet> {
    let bytes = ctx.file(name, path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Input(format!("{} is not UTF-8", path.display())))?;
    DecisionSet::from_text(&text)
}

fn cmd_run(a: RunArgs, mut ctx: Ctx, two_stage: bool) -> Result<()> {
    let config = match &a.config {
        Some(path) => {
            ctx.file("config", path)?;
            load_run_config(path)?
        }
        None => RunConfig::default(),
    };
    let base = match &a.base {
        Some(path) => read_model(path, &mut ctx, "base")?,
        None => {
            ctx.manifest.set("base.fresh", format!("{:?}", a.model).to_lowercase());
            Model::init(a.model.config(), config.seed)?
        }
    };
    if config.seq_len > base.config.max_seq {
        return Err(Error::Config(format!("seq_len exceeds the model's max_seq {}", base.config.max_seq)));
    }
    let corpus = load_corpus(&a.data, &mut ctx)?;
    let train = windows(&corpus, config.seq_len, "training")?;
    let calib_corpus = match &a.calib {
        Some(path) => {
            let c = Corpus::from_file(path)?;
            ctx.manifest.set_digest("calib", path, &c.digest());
            c
        }
        None => corpus.clone(),
    };
    let mut calib = windows(&calib_corpus, config.seq_len, "calibration")?;
    calib.truncate(a.calib_windows.max(1));
    ctx.manifest.set("calib_windows", calib.len());
    ctx.manifest.set_run_config(&config);
    ctx.manifest.set("seed", config.seed);

    let out: RunOutput<f32> = if two_stage {
        two_stage_run(&config, &base, &train, &calib)?
    } else {
        atp_run(&config, &base, &train, &calib)?
    };
    std::fs::create_dir_all(&a.out)?;
    adapters_checkpoint(&out.adapters).write(a.out.join("adapters.ckpt"))?;
    std::fs::write(a.out.join("decisions.txt"), out.decisions.to_text())?;
    std::fs::write(a.out.join("log.csv"), log_to_csv(&out.log))?;
    std::fs::write(a.out.join("layer_ratios.csv"), layer_ratio_report(&out.decisions))?;
    ctx.manifest.set("remain_ratio", out.remain_ratio);
    ctx.manifest.set("sparsity_warning", out.sparsity_warning);
    println!("remain_ratio={}", out.remain_ratio);
    if out.sparsity_warning {
        eprintln!("warning: remain_ratio is not within 10% of the target {}", 1.0 - config.p);
    }
    ctx.finish()
}

fn cmd_export(a: ExportArgs, mut ctx: Ctx) -> Result<()> {
    let base = read_model(&a.base, &mut ctx, "base")?;
    let adapters = read_adapters(&a.adapters, &mut ctx)?;
    let decisions = read_decisions(&a.decisions, &mut ctx, "decisions")?;
    check_adapters_fit(&base, &adapters)?;
    let plan = build_plan(&decisions, &base.config)?;
    ctx.manifest.set("probes", a.probes);
    ctx.manifest.set("probe_len", a.probe_len);
    ctx.manifest.set("seed", a.seed);

    // exact algebra first, then the shipped precision
    let (base64, adapters64) = (base.cast::<f64>(), adapters.cast::<f64>());
    let compact64 = compact(&base64, &adapters64, &plan)?;
    let mut report = String::from("[float64]\n");
    let result = verify_equivalence(&base64, &adapters64, &decisions, &compact64, a.probes, a.probe_len, 1e-10, a.seed)
        .and_then(|r64| {
            report.push_str(&r64.to_text());
            let slim = compact(&base, &adapters, &plan)?;
            let r32 = verify_equivalence(&base, &adapters, &decisions, &slim, a.probes, a.probe_len, 1e-5, a.seed)?;
            report.push_str("[float32]\n");
            report.push_str(&r32.to_text());
            Ok((slim, r64.max_deviation, r32.max_deviation))
        });
    let report_path = with_suffix(&a.out, ".verify.txt");
    match result {
        Ok((slim, d64, d32)) => {
            std::fs::write(&report_path, report)?;
            model_checkpoint(&slim).write(&a.out)?;
            ctx.manifest.set("max_deviation_f64", d64);
            ctx.manifest.set("max_deviation_f32", d32);
            ctx.manifest.set("decoder_params", slim.decoder_param_count());
            ctx.manifest.set("verification", "pass");
            println!("verification=pass max_deviation_f64={d64:e} max_deviation_f32={d32:e}");
            println!("decoder_params={} of {}", slim.decoder_param_count(), base.config.total_decoder_params());
            ctx.finish()
        }
        Err(e) => {
            report.push_str(&format!("status=fail\n{e}\n"));
            std::fs::write(&report_path, report)?;
            ctx.manifest.set("verification", "fail");
            ctx.finish()?;
            Err(e)
        }
    }
}

struct Loaded {
    model: Model<f32>,
    adapters: Option<Adapters<f32>>,
    decisions: Option<DecisionSet>,
    mode: EvalMode,
}

impl Loaded {
    fn view(&self) -> ModelView<'_, f32> {
        match (&self.adapters, &self.decisions) {
            (Some(ad), Some(d)) => ModelView::masked(&self.model, ad, d),
            _ => ModelView::dense(&self.model),
        }
    }
}

fn load_for_eval(m: &ModelArgs, ctx: &mut Ctx) -> Result<Loaded> {
    let model = read_model(&m.model, ctx, "model")?;
    ctx.manifest.set("mode", format!("{:?}", m.mode).to_lowercase());
    let (adapters, decisions) = match m.mode {
        EvalMode::Masked => {
            let (Some(ap), Some(dp)) = (&m.adapters, &m.decisions) else {
                return Err(Error::Contract("masked mode needs --adapters and --decisions".into()));
            };
            let ad = read_adapters(ap, ctx)?;
            check_adapters_fit(&model, &ad)?;
            let d = read_decisions(dp, ctx, "decisions")?;
            d.validate(&model.config)?;
            (Some(ad), Some(d))
        }
        EvalMode::Dense | EvalMode::Compact => {
            if m.adapters.is_some() || m.decisions.is_some() {
                return Err(Error::Contract("--adapters and --decisions only apply to masked mode".into()));
            }
            (None, None)
        }
    };
    Ok(Loaded {
        model,
        adapters,
        decisions,
        mode: m.mode,
    })
}

fn cmd_eval(a: EvalArgs, mut ctx: Ctx) -> Result<()> {
    let loaded = load_for_eval(&a.model, &mut ctx)?;
    let corpus = Corpus::from_file(&a.corpus)?;
    ctx.manifest.set_digest("eval", &a.corpus, &corpus.digest());
    ctx.manifest.set("seq_len", a.seq_len);
    let ppl = perplexity(loaded.view(), &corpus, a.seq_len)?;
    ctx.manifest.set("perplexity", ppl);
    println!("mode={:?} perplexity={ppl}", loaded.mode);
    ctx.finish()
}

fn cmd_gen(a: GenArgs, mut ctx: Ctx) -> Result<()> {
    let loaded = load_for_eval(&a.model, &mut ctx)?;
    let cfg = SamplingConfig {
        temperature: a.temperature,
        top_k: a.top_k,
        top_p: a.top_p,
        max_new: a.max_new,
        seed: a.seed,
    };
    for (k, v) in [
        ("temperature", a.temperature.to_string()),
        ("top_k", a.top_k.to_string()),
        ("top_p", a.top_p.to_string()),
        ("max_new", a.max_new.to_string()),
        ("seed", a.seed.to_string()),
        ("prompt_sha256", sha256_hex(a.prompt.as_bytes())),
    ] {
        ctx.manifest.set(k, v);
    }
    let mut prompt = vec![BOS];
    prompt.extend(encode(a.prompt.as_bytes()));
    let new = generate(loaded.view(), &prompt, &cfg)?;
    println!("{}{}", a.prompt, String::from_utf8_lossy(&decode(&new)));
    ctx.finish()
}

fn cmd_decisions(a: DecisionsArgs, mut ctx: Ctx) -> Result<()> {
    let d = read_decisions(&a.decisions, &mut ctx, "decisions")?;
    let csv = layer_ratio_report(&d);
    match &a.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    ctx.finish()
}

fn cmd_diff(a: DiffArgs, mut ctx: Ctx) -> Result<()> {
    let da = read_decisions(&a.a, &mut ctx, "a")?;
    let db = read_decisions(&a.b, &mut ctx, "b")?;
    let diff = decision_diff_ratio(&da, &db)?;
    println!("{:?}", diff.overall);
    for (n, d) in diff.per_layer.iter().enumerate() {
        println!("layer {n}: {d}");
    }
    ctx.manifest.set("diff", diff.overall);
    ctx.finish()
}
