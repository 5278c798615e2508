//! Command-line front end: subword learning/application, training,
//! ensemble translation, language modeling, re-ranking, scoring and
//! significance testing. Data goes to standard output or `-o`; progress
//! goes to standard error.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nmt_core::bpe;
use nmt_core::decoding::{self, EnsembleSpec};
use nmt_core::eval::{self, BpMode, CaseMode};
use nmt_core::lm::{self, InterpolatedLM, NGramLM};
use nmt_core::model::init_params;
use nmt_core::pipeline::{
    self, load_checkpoint, save_checkpoint, DirLock, RunConfig, Vocab,
};
use nmt_core::rerank::{self, LmScorer, RerankWeights};
use nmt_core::training::{self, Checkpoint};

#[derive(Parser)]
#[command(name = "nmt", about = "Attention-based encoder-decoder translation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file (TOML); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => Ok(RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct ScoreModeArgs {
    /// Brevity-penalty reference: shortest or closest
    #[arg(long)]
    bp_mode: Option<String>,
    /// Case handling: sensitive or insensitive
    #[arg(long)]
    case_mode: Option<String>,
}

impl ScoreModeArgs {
    fn resolve(&self, cfg: &RunConfig) -> Result<(BpMode, CaseMode)> {
        let bp = match self.bp_mode.as_deref() {
            None => cfg.eval.bp_mode,
            Some("shortest") => BpMode::Shortest,
            Some("closest") => BpMode::Closest,
            Some(other) => bail!("unknown bp mode '{other}' (use shortest or closest)"),
        };
        let case = match self.case_mode.as_deref() {
            None => cfg.eval.case_mode,
            Some("sensitive") => CaseMode::Sensitive,
            Some("insensitive") => CaseMode::Insensitive,
            Some(other) => bail!("unknown case mode '{other}' (use sensitive or insensitive)"),
        };
        Ok((bp, case))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn byte-pair merges from tokenized text
    BpeLearn {
        /// Tokenized training text
        #[arg(long)]
        input: PathBuf,
        /// Number of merge operations
        #[arg(long)]
        merges: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Segment tokenized text with learned merges
    BpeApply {
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train one model from the run configuration
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Lowercase the corpora while loading
        #[arg(long)]
        lowercase: bool,
        /// Override the config's update cap
        #[arg(long)]
        max_updates: Option<usize>,
        /// Override the config's training seed
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the checkpoint and vocabularies (defaults to the
        /// config's checkpoint_dir)
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Translate with one checkpoint or an ensemble of several
    Translate {
        #[command(flatten)]
        config: ConfigArg,
        /// Model checkpoint(s); several form an ensemble
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Directory holding src.vocab / tgt.vocab (defaults to the first
        /// checkpoint's directory)
        #[arg(long)]
        vocab_dir: Option<PathBuf>,
        #[arg(long)]
        merges: Option<PathBuf>,
        /// Tokenized source text
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Also write the k-best list here
        #[arg(long)]
        kbest: Option<PathBuf>,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train an n-gram language model
    LmTrain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        order: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Tune interpolation weights for several language models
    LmInterpolate {
        /// Component LM files (repeat)
        #[arg(long, required = true)]
        lm: Vec<PathBuf>,
        /// Development text for perplexity tuning
        #[arg(long)]
        dev: PathBuf,
        /// Output: `weight<TAB>lm_path` per line
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Re-rank a k-best list with a language model
    Rerank {
        #[arg(long)]
        kbest: PathBuf,
        /// Single LM file, or an interpolation file from lm-interpolate
        #[arg(long)]
        lm: PathBuf,
        /// Weights as `nmt,lm,len`
        #[arg(long, default_value = "1,0,0")]
        weights: String,
        /// Top-1 detokenized translations
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Re-ranked k-best list with feature columns
        #[arg(long)]
        kbest_out: Option<PathBuf>,
    },
    /// Grid-search re-ranking weights on a development set
    RerankTune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        kbest: PathBuf,
        /// Reference translations, one line per k-best sentence
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[command(flatten)]
        modes: ScoreModeArgs,
    },
    /// Corpus BLEU of a hypothesis file against reference file(s)
    Score {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        hyp: PathBuf,
        /// Reference file (repeat for multiple references)
        #[arg(long = "ref", required = true)]
        references: Vec<PathBuf>,
        #[command(flatten)]
        modes: ScoreModeArgs,
    },
    /// Paired bootstrap significance between two systems
    Significance {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        hyp_a: PathBuf,
        #[arg(long)]
        hyp_b: PathBuf,
        #[arg(long = "ref", required = true)]
        references: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        modes: ScoreModeArgs,
    },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_output(output: &Option<PathBuf>, content: &str) -> Result<()> {
    match output {
        Some(p) => std::fs::write(p, content).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(content.as_bytes())?,
    }
    Ok(())
}

fn refsets(paths: &[PathBuf]) -> Result<Vec<Vec<String>>> {
    let mut per_file = Vec::new();
    for p in paths {
        per_file.push(read_lines(p)?);
    }
    let n = per_file[0].len();
    for (p, f) in paths.iter().zip(&per_file) {
        if f.len() != n {
            bail!("reference {} has {} lines, expected {}", p.display(), f.len(), n);
        }
    }
    Ok((0..n).map(|i| per_file.iter().map(|f| f[i].clone()).collect()).collect())
}

/// Load either a plain LM file or an interpolation file (weight<TAB>path
/// lines) into a single scorer.
fn load_scorer(path: &Path) -> Result<Box<dyn LmScorer>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.starts_with("\\data\\") {
        return Ok(Box::new(NGramLM::from_text(&text)?));
    }
    let mut components = Vec::new();
    let mut weights = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (w, p) = line
            .split_once('\t')
            .with_context(|| format!("{} line {}: expected weight<TAB>path", path.display(), lineno + 1))?;
        weights.push(w.trim().parse::<f64>()?);
        let lm_path = path.parent().unwrap_or(Path::new(".")).join(p.trim());
        components.push(NGramLM::from_text(&std::fs::read_to_string(&lm_path)?)?);
    }
    if components.is_empty() {
        bail!("{}: neither an LM file nor an interpolation file", path.display());
    }
    Ok(Box::new(InterpolatedLM { components, weights }))
}

fn word_freqs(lines: &[String]) -> HashMap<String, u64> {
    let mut freqs = HashMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *freqs.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    freqs
}

fn cmd_train(
    config: &ConfigArg,
    lowercase: bool,
    max_updates: Option<usize>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> Result<()> {
    let cfg = config.load()?;
    let paths = &cfg.paths;
    let (Some(train_src), Some(train_tgt), Some(dev_src), Some(dev_tgt)) =
        (&paths.train_src, &paths.train_tgt, &paths.dev_src, &paths.dev_tgt)
    else {
        bail!("config must set paths.train_src/train_tgt/dev_src/dev_tgt");
    };
    let out_dir = out_dir
        .or_else(|| paths.checkpoint_dir.clone())
        .context("set paths.checkpoint_dir or --out-dir")?;
    std::fs::create_dir_all(&out_dir)?;
    let _lock = DirLock::acquire(&out_dir)?;

    let train = pipeline::load_parallel(train_src, train_tgt, lowercase)?;
    let dev = pipeline::load_parallel(dev_src, dev_tgt, lowercase)?;
    let mut tc = cfg.train.clone();
    if let Some(m) = max_updates {
        tc.max_updates = Some(m);
    }
    if let Some(s) = seed {
        tc.seed = s;
    }
    let (train, dropped) = pipeline::filter_by_length(&train, tc.max_len)?;
    eprintln!("train: {} pairs ({} dropped by length)", train.len(), dropped);

    let reserved = nmt_core::model::RESERVED_TOKENS;
    let cap = |v: usize| if v > reserved { Some(v) } else { None };
    let src_vocab = Vocab::build(train.pairs.iter().flat_map(|(s, _)| s.iter()), cap(cfg.model.src_vocab));
    let tgt_vocab = Vocab::build(train.pairs.iter().flat_map(|(_, t)| t.iter()), cap(cfg.model.tgt_vocab));
    let mut mc = cfg.model.clone();
    mc.src_vocab = src_vocab.len();
    mc.tgt_vocab = tgt_vocab.len();
    std::fs::write(out_dir.join("src.vocab"), src_vocab.to_text())?;
    std::fs::write(out_dir.join("tgt.vocab"), tgt_vocab.to_text())?;

    let train_ids = pipeline::encode_corpus(&train, &src_vocab, &tgt_vocab);
    let dev_ids = pipeline::encode_corpus(&dev, &src_vocab, &tgt_vocab);
    let params = init_params(&mc, tc.seed)?;
    let best: Checkpoint = training::train(
        params,
        &mc,
        &train_ids,
        Some(&train.weights),
        &dev_ids,
        &tc,
        |updates, train_loss, dev_loss| {
            eprintln!("update {}: train loss {:.4}, dev loss {:.4}", updates, train_loss, dev_loss);
        },
    )?;
    eprintln!("best checkpoint: update {} (dev loss {:.4})", best.update_count, best.dev_loss);
    save_checkpoint(&best, &out_dir.join("model.ckpt"))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_translate(
    config: &ConfigArg,
    checkpoints: &[PathBuf],
    vocab_dir: Option<PathBuf>,
    merges: Option<PathBuf>,
    input: &Path,
    output: &Option<PathBuf>,
    kbest_path: Option<PathBuf>,
    beam_size: Option<usize>,
    k: Option<usize>,
) -> Result<()> {
    let cfg = config.load()?;
    let beam_size = beam_size.unwrap_or(cfg.decode.beam_size);
    let k = k.unwrap_or(cfg.decode.k).min(beam_size);
    let vocab_dir = vocab_dir
        .or_else(|| checkpoints[0].parent().map(Path::to_path_buf))
        .context("cannot determine the vocabulary directory")?;
    let src_vocab = Vocab::from_text(&std::fs::read_to_string(vocab_dir.join("src.vocab"))?);
    let tgt_vocab = Vocab::from_text(&std::fs::read_to_string(vocab_dir.join("tgt.vocab"))?);
    let merges = match merges.or_else(|| cfg.paths.merges.clone()) {
        Some(p) => bpe::merges_from_string(&std::fs::read_to_string(&p)?)?,
        None => bpe::MergeList::default(),
    };
    let members = checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|cp| (cp.params, cp.config)))
        .collect::<nmt_core::Result<Vec<_>>>()?;
    let spec = EnsembleSpec::new(members)?;
    let lines = read_lines(input)?;
    let (translations, kbest) = decoding::translate_corpus(
        &spec,
        &merges,
        &src_vocab,
        &tgt_vocab,
        &lines,
        beam_size,
        k,
        cfg.decode.max_len_factor,
    )?;
    write_output(output, &(translations.join("\n") + "\n"))?;
    if let Some(p) = kbest_path {
        std::fs::write(&p, decoding::kbest_to_string(&kbest))?;
    }
    Ok(())
}

fn parse_weights(s: &str) -> Result<RerankWeights> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        bail!("weights must be `nmt,lm,len`");
    }
    let w = RerankWeights {
        nmt: parts[0].trim().parse()?,
        lm: parts[1].trim().parse()?,
        len: parts[2].trim().parse()?,
    };
    w.validate()?;
    Ok(w)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BpeLearn { input, merges, output } => {
            let lines = read_lines(&input)?;
            let learned = bpe::learn_bpe(&word_freqs(&lines), merges)?;
            write_output(&output, &bpe::merges_to_string(&learned))
        }
        Command::BpeApply { merges, input, output } => {
            let list = bpe::merges_from_string(&std::fs::read_to_string(&merges)?)?;
            let mut out = String::new();
            for line in read_lines(&input)? {
                let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
                out.push_str(&bpe::tokens_to_line(&bpe::apply_bpe(&list, &words)));
                out.push('\n');
            }
            write_output(&output, &out)
        }
        Command::Train { config, lowercase, max_updates, seed, out_dir } => {
            cmd_train(&config, lowercase, max_updates, seed, out_dir)
        }
        Command::Translate {
            config,
            checkpoint,
            vocab_dir,
            merges,
            input,
            output,
            kbest,
            beam_size,
            k,
        } => cmd_translate(&config, &checkpoint, vocab_dir, merges, &input, &output, kbest, beam_size, k),
        Command::LmTrain { input, order, output } => {
            let lm = lm::train_lm(&read_lines(&input)?, order)?;
            write_output(&output, &lm.to_text())
        }
        Command::LmInterpolate { lm: lm_paths, dev, output } => {
            let mut components = Vec::new();
            for p in &lm_paths {
                components.push(NGramLM::from_text(&std::fs::read_to_string(p)?)?);
            }
            let dev_lines = read_lines(&dev)?;
            let mix = lm::tune_interpolation(components, &dev_lines)?;
            eprintln!("dev perplexity: {:.4}", mix.perplexity(&dev_lines)?);
            let mut out = String::new();
            for (w, p) in mix.weights.iter().zip(&lm_paths) {
                out.push_str(&format!("{:.8}\t{}\n", w, p.display()));
            }
            write_output(&output, &out)
        }
        Command::Rerank { kbest, lm, weights, output, kbest_out } => {
            let list = decoding::kbest_from_string(&std::fs::read_to_string(&kbest)?)?;
            let scorer = load_scorer(&lm)?;
            let w = parse_weights(&weights)?;
            let ranked = rerank::rerank(&list, scorer.as_ref(), w)?;
            if let Some(p) = kbest_out {
                let with_features = rerank::append_features(&ranked, scorer.as_ref());
                std::fs::write(&p, decoding::kbest_to_string(&with_features))?;
            }
            write_output(&output, &(rerank::top_lines(&ranked).join("\n") + "\n"))
        }
        Command::RerankTune { config, kbest, references, lm, modes } => {
            let cfg = config.load()?;
            let (bp, case) = modes.resolve(&cfg)?;
            let list = decoding::kbest_from_string(&std::fs::read_to_string(&kbest)?)?;
            let refs = read_lines(&references)?;
            let scorer = load_scorer(&lm)?;
            let (w, score) = rerank::tune_rerank_weights(&list, &refs, scorer.as_ref(), bp, case)?;
            println!("{},{},{}", w.nmt, w.lm, w.len);
            eprintln!("dev BLEU = {:.2}", score);
            Ok(())
        }
        Command::Score { config, hyp, references, modes } => {
            let cfg = config.load()?;
            let (bp, case) = modes.resolve(&cfg)?;
            let hyps = read_lines(&hyp)?;
            let refs = refsets(&references)?;
            let score = eval::bleu(&hyps, &refs, bp, case)?;
            println!("{}", score.report_line());
            Ok(())
        }
        Command::Significance { config, hyp_a, hyp_b, references, resamples, seed, modes } => {
            let cfg = config.load()?;
            let (bp, case) = modes.resolve(&cfg)?;
            let a = read_lines(&hyp_a)?;
            let b = read_lines(&hyp_b)?;
            let refs = refsets(&references)?;
            let r = eval::bootstrap_significance(&a, &b, &refs, resamples, seed, bp, case)?;
            println!(
                "p = {:.4} (A - B = {:.2} BLEU, {} resamples)",
                r.p_value, r.score_difference, r.n_resamples
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}
