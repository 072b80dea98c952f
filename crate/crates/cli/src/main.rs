//! `scst`: generate toy captioning data, pretrain with cross entropy,
//! fine-tune with sequence-level policy gradients, decode, and evaluate.
//!
//! Thread count is taken from the `SCST_THREADS` environment variable when
//! set; runs are bit-reproducible for a fixed seed either way.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use scst_core::checkpoint;
use scst_core::data::{self, GenConfig};
use scst_core::decode::BeamConfig;
use scst_core::metrics::NGramStats;
use scst_core::train::{
    self, decode_to_lines, eval_csv, eval_models, per_example_csv, rl_log_csv, sweep_beam,
    sweep_csv, xe_log_csv, DecodeLine, TrainConfig,
};
use scst_core::{Model, Vocab};

#[derive(Parser)]
#[command(name = "scst", version, about = "Sequence-level policy-gradient training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene-captioning dataset directory.
    GenData(GenDataArgs),
    /// Cross-entropy pretraining with scheduled sampling.
    TrainXe(TrainXeArgs),
    /// RL fine-tuning from an XE checkpoint.
    TrainRl(TrainRlArgs),
    /// Decode a split with one model or an ensemble.
    Decode(DecodeArgs),
    /// Evaluate checkpoints on a split, or score a candidates file.
    Eval(EvalArgs),
    /// CIDEr-D on a split for every beam width up to a bound.
    SweepBeam(SweepBeamArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_val: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    /// Attention locations per scene.
    #[arg(long, default_value_t = 9)]
    locations: usize,
    /// References per scene.
    #[arg(long, default_value_t = 5)]
    refs: usize,
    /// Words rarer than this in the training references map to UNK.
    #[arg(long, default_value_t = 5)]
    min_count: u64,
}

#[derive(Args, Clone)]
struct CommonTrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// TOML config; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainXeArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Architecture: fc, att2in or att2all.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TrainRlArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// XE checkpoint to initialize from.
    #[arg(long)]
    init: PathBuf,
    /// reinforce | baseline | mixer | scst | td-scst | true-scst
    #[arg(long)]
    estimator: Option<String>,
    /// cider | bleu | rouge
    #[arg(long)]
    reward: Option<String>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Single checkpoint to decode with.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated checkpoints decoded as a posterior-averaged ensemble.
    #[arg(long, value_delimiter = ',')]
    ensemble: Vec<PathBuf>,
    /// Beam width; omit for greedy decoding.
    #[arg(long)]
    beam: Option<usize>,
    /// Log-probability pruning margin for beam search.
    #[arg(long, default_value_t = 5.0)]
    prune_margin: f64,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (checkpoint mode).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated checkpoints to evaluate (checkpoint mode).
    #[arg(long, value_delimiter = ',')]
    ckpt: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    #[arg(long, default_value_t = 5.0)]
    prune_margin: f64,
    /// Candidates JSONL from `decode` (file mode).
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// References JSONL, one dataset line per image (file mode).
    #[arg(long)]
    references: Option<PathBuf>,
    /// Vocabulary JSON (file mode).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepBeamArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8)]
    max_width: usize,
    #[arg(long, default_value_t = 5.0)]
    prune_margin: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    if let Ok(threads) = std::env::var("SCST_THREADS") {
        let n: usize = threads.parse().context("SCST_THREADS must be an integer")?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match Cli::parse().cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::TrainXe(args) => train_xe(args),
        Cmd::TrainRl(args) => train_rl(args),
        Cmd::Decode(args) => decode(args),
        Cmd::Eval(args) => eval(args),
        Cmd::SweepBeam(args) => sweep(args),
    }
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let cfg = GenConfig {
        seed: args.seed,
        n_train: args.n_train,
        n_val: args.n_val,
        n_test: args.n_test,
        n_locations: args.locations,
        refs_per_scene: args.refs,
        min_count: args.min_count,
    };
    let paths = data::generate_to_dir(&cfg, &args.out)?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn load_config(common: &CommonTrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::new(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(b) = common.batch_size {
        cfg.batch_size = b;
    }
    Ok(cfg)
}

fn split_of<'a>(data: &'a data::GeneratedData, name: &str) -> anyhow::Result<&'a [data::SceneExample]> {
    match name {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => bail!("unknown split '{other}' (expected train, val or test)"),
    }
}

fn train_xe(args: TrainXeArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(arch) = args.arch {
        cfg.model.arch = arch;
    }
    if let Some(h) = args.hidden {
        cfg.model.hidden_dim = h;
    }
    if let Some(t) = args.max_len {
        cfg.model.max_len = t;
    }
    if let Some(e) = args.common.epochs {
        cfg.xe.epochs = e;
    }
    if let Some(lr) = args.common.lr {
        cfg.xe.lr = lr;
    }
    let dataset = data::load_dir(&args.common.data)?;
    std::fs::create_dir_all(&args.common.out)?;

    let out = train::train_xe(&cfg, &dataset.train, &dataset.val, &dataset.vocab)?;
    let ckpt = args.common.out.join("xe.ckpt");
    checkpoint::save(&out.best, &ckpt)?;
    std::fs::write(args.common.out.join("xe_log.csv"), xe_log_csv(&out.log))?;
    std::fs::write(args.common.out.join("xe_config.toml"), cfg.to_toml())?;
    println!(
        "best validation cider {} at epoch {}; checkpoint {}",
        out.best_val_cider,
        out.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn train_rl(args: TrainRlArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(est) = args.estimator {
        cfg.rl.estimator = est;
    }
    if let Some(r) = args.reward {
        cfg.rl.reward = r;
    }
    if let Some(e) = args.common.epochs {
        cfg.rl.epochs = e;
    }
    if let Some(lr) = args.common.lr {
        cfg.rl.lr = lr;
    }
    cfg.estimator()?;
    cfg.reward_kind()?;
    let dataset = data::load_dir(&args.common.data)?;
    let init = checkpoint::load(&args.init)?;
    std::fs::create_dir_all(&args.common.out)?;

    let out = train::train_rl(&cfg, &init, &dataset.train, &dataset.val, &dataset.vocab)?;
    let tag = cfg.rl.estimator.clone();
    let ckpt = args.common.out.join(format!("rl_{tag}.ckpt"));
    checkpoint::save(&out.best, &ckpt)?;
    std::fs::write(args.common.out.join(format!("rl_{tag}_diag.csv")), rl_log_csv(&out.log))?;
    std::fs::write(args.common.out.join(format!("rl_{tag}_config.toml")), cfg.to_toml())?;
    println!(
        "best validation cider {} at epoch {}; checkpoint {}",
        out.best_val_cider,
        out.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn gather_models(ckpt: Option<&Path>, ensemble: &[PathBuf]) -> anyhow::Result<Vec<Model>> {
    let mut paths: Vec<PathBuf> = Vec::new();
    if let Some(c) = ckpt {
        paths.push(c.to_path_buf());
    }
    paths.extend(ensemble.iter().cloned());
    if paths.is_empty() {
        bail!("give --ckpt or --ensemble");
    }
    paths.iter().map(|p| Ok(checkpoint::load(p)?)).collect()
}

fn decode(args: DecodeArgs) -> anyhow::Result<()> {
    let dataset = data::load_dir(&args.data)?;
    let examples = split_of(&dataset, &args.split)?;
    let models = gather_models(args.ckpt.as_deref(), &args.ensemble)?;
    let refs: Vec<&Model> = models.iter().collect();
    let beam_cfg = args.beam.map(|width| BeamConfig {
        width,
        prune_margin: args.prune_margin,
        max_len: models[0].cfg.max_len,
    });
    let lines = decode_to_lines(&refs, examples, &dataset.vocab, beam_cfg.as_ref())?;
    let mut text = String::new();
    for line in &lines {
        text.push_str(&serde_json::to_string(line)?);
        text.push('\n');
    }
    std::fs::write(&args.out, text)?;
    println!("wrote {} decodes to {}", lines.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let csv = match (&args.candidates, &args.data) {
        (Some(cands), None) => eval_candidates_file(&args, cands)?,
        (None, Some(dir)) => {
            let dataset = data::load_dir(dir)?;
            let examples = split_of(&dataset, &args.split)?;
            if args.ckpt.is_empty() {
                bail!("give --ckpt in dataset mode");
            }
            let mut named = Vec::new();
            for p in &args.ckpt {
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                named.push((name, checkpoint::load(p)?));
            }
            let beam = BeamConfig {
                width: args.beam,
                prune_margin: args.prune_margin,
                max_len: named[0].1.cfg.max_len,
            };
            eval_csv(&eval_models(&named, examples, &dataset.vocab, &beam)?)
        }
        _ => bail!("use either --candidates/--references/--vocab or --data/--ckpt"),
    };
    std::fs::write(&args.out, csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn eval_candidates_file(args: &EvalArgs, cands_path: &Path) -> anyhow::Result<String> {
    let refs_path =
        args.references.as_ref().ok_or_else(|| anyhow!("--references required"))?;
    let vocab_path = args.vocab.as_ref().ok_or_else(|| anyhow!("--vocab required"))?;
    let vocab = Vocab::load(vocab_path)?;
    let ref_examples = data::read_jsonl(refs_path)?;
    let by_id: HashMap<&str, &data::SceneExample> =
        ref_examples.iter().map(|ex| (ex.id.as_str(), ex)).collect();

    let text = std::fs::read_to_string(cands_path)?;
    let mut ids = Vec::new();
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: DecodeLine = serde_json::from_str(line).context("parsing candidate line")?;
        let ex = by_id
            .get(parsed.id.as_str())
            .ok_or_else(|| anyhow!("candidate id '{}' not in the reference file", parsed.id))?;
        ids.push(parsed.id.clone());
        cands.push(parsed.tokens.clone());
        refs.push(ex.encoded_refs(&vocab));
    }
    // corpus statistics from the whole reference file
    let all_refs: Vec<Vec<Vec<scst_core::TokenId>>> =
        ref_examples.iter().map(|ex| ex.encoded_refs(&vocab)).collect();
    let stats = NGramStats::from_refs(&all_refs)?;
    Ok(per_example_csv(&ids, &cands, &refs, &stats)?)
}

fn sweep(args: SweepBeamArgs) -> anyhow::Result<()> {
    let dataset = data::load_dir(&args.data)?;
    let examples = split_of(&dataset, &args.split)?;
    let model = checkpoint::load(&args.ckpt)?;
    let rows = sweep_beam(&model, examples, &dataset.vocab, args.max_width, args.prune_margin)?;
    std::fs::write(&args.out, sweep_csv(&rows))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
