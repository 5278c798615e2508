//! Corpus ingestion, vocabularies, checkpoint serialization, run
//! configuration, and the advisory lock used by the command-line tools.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{BpMode, CaseMode};
use crate::model::{ModelConfig, ModelParams, RESERVED_TOKENS, UNK_ID};
use crate::tensor::Tensor;
use crate::training::{Checkpoint, Pair, TrainConfig};

/// Line-aligned sentence pairs of subword tokens, each with an integer
/// weight multiplier (logical duplication).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub weights: Vec<u32>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn read_utf8_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    let mut lines = Vec::new();
    for (lineno, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| {
            Error::Format(format!("{}: invalid UTF-8 on line {}", path.display(), lineno + 1))
        })?;
        lines.push(line.to_string());
    }
    // drop the phantom line after a trailing newline
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

/// Load a line-aligned bitext. Pairs where either side is empty are
/// dropped; lowercasing is applied to both sides when flagged.
pub fn load_parallel(src_path: &Path, tgt_path: &Path, lowercase: bool) -> Result<ParallelCorpus> {
    let src = read_utf8_lines(src_path)?;
    let tgt = read_utf8_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Format(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let mut corpus = ParallelCorpus::default();
    for (s, t) in src.iter().zip(&tgt) {
        let tok = |line: &str| -> Vec<String> {
            line.split_whitespace()
                .map(|w| if lowercase { w.to_lowercase() } else { w.to_string() })
                .collect()
        };
        let (s, t) = (tok(s), tok(t));
        if s.is_empty() || t.is_empty() {
            continue;
        }
        corpus.pairs.push((s, t));
        corpus.weights.push(1);
    }
    Ok(corpus)
}

/// Drop every pair where either side exceeds `max_subwords` tokens
/// (inclusive boundary: exactly `max_subwords` is kept). Returns the
/// surviving corpus and the number of dropped pairs.
pub fn filter_by_length(corpus: &ParallelCorpus, max_subwords: usize) -> Result<(ParallelCorpus, usize)> {
    if max_subwords < 1 {
        return Err(Error::Arg("maximum length must be at least 1".into()));
    }
    let mut kept = ParallelCorpus::default();
    let mut dropped = 0;
    for ((s, t), &w) in corpus.pairs.iter().zip(&corpus.weights) {
        if s.len() <= max_subwords && t.len() <= max_subwords {
            kept.pairs.push((s.clone(), t.clone()));
            kept.weights.push(w);
        } else {
            dropped += 1;
        }
    }
    Ok((kept, dropped))
}

/// Concatenate corpora, multiplying each one's pair weights — the
/// logical equivalent of physically duplicating a corpus `multiplier`
/// times in every epoch.
pub fn weight_corpora(corpora: &[(ParallelCorpus, u32)]) -> Result<ParallelCorpus> {
    let mut out = ParallelCorpus::default();
    for (corpus, multiplier) in corpora {
        if *multiplier < 1 {
            return Err(Error::Arg("corpus multiplier must be at least 1".into()));
        }
        for ((s, t), &w) in corpus.pairs.iter().zip(&corpus.weights) {
            out.pairs.push((s.clone(), t.clone()));
            out.weights.push(w * multiplier);
        }
    }
    Ok(out)
}

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token-to-id mapping with the reserved sentence-begin, sentence-end and
/// unknown symbols at fixed low ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from token occurrences: most frequent first, ties broken
    /// lexicographically, optionally capped to `max_size` total entries
    /// (reserved symbols included).
    pub fn build<'a>(tokens: impl Iterator<Item = &'a String>, max_size: Option<usize>) -> Vocab {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            ranked.truncate(cap.saturating_sub(RESERVED_TOKENS));
        }
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    fn from_tokens(tokens: impl Iterator<Item = String>) -> Vocab {
        let mut list: Vec<String> =
            vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        list.extend(tokens);
        let index = list.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens: list, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Disk form: one non-reserved token per line in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens[RESERVED_TOKENS..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(s: &str) -> Vocab {
        Self::from_tokens(s.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}

/// Map a token corpus side to ids (unknowns collapse to the reserved id).
pub fn encode_corpus(corpus: &ParallelCorpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<Pair> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| {
            (
                s.iter().map(|w| src_vocab.id(w)).collect(),
                t.iter().map(|w| tgt_vocab.id(w)).collect(),
            )
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NMTC";
const CHECKPOINT_VERSION: u32 = 1;

/// Versioned binary checkpoint: magic, version, JSON config block, run
/// counters, then per-parameter shape headers and little-endian f64 data
/// (full precision, so reload is bit-exact).
pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let mut w: Vec<u8> = Vec::new();
    w.extend_from_slice(CHECKPOINT_MAGIC);
    w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&cp.config).map_err(|e| Error::Format(e.to_string()))?;
    w.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    w.extend_from_slice(&cfg);
    w.extend_from_slice(&cp.update_count.to_le_bytes());
    w.extend_from_slice(&cp.dev_loss.to_le_bytes());
    w.extend_from_slice(&(cp.params.len() as u64).to_le_bytes());
    for (name, t) in cp.params.iter() {
        w.extend_from_slice(&(name.len() as u64).to_le_bytes());
        w.extend_from_slice(name.as_bytes());
        w.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            w.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&w)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated or corrupt".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (this build reads {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let cfg_len = r.u64()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Format(e.to_string()))?;
    let update_count = r.u64()?;
    let dev_loss = r.f64()?;
    let n_params = r.u64()? as usize;
    let mut params = ModelParams::default();
    for _ in 0..n_params {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("checkpoint parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f64()?);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }
    Ok(Checkpoint { params, config, update_count, dev_loss })
}

/// Decode-time settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub k: usize,
    pub max_len_factor: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 12, k: 50, max_len_factor: 3 }
    }
}

/// Scoring settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bp_mode: BpMode,
    pub case_mode: CaseMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bp_mode: BpMode::Shortest, case_mode: CaseMode::Sensitive }
    }
}

/// File paths a run may reference. All are optional; whichever are set
/// must exist when the config is loaded.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_ref: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub lm_files: Vec<PathBuf>,
}

/// One experiment's full configuration (TOML on disk). Unknown keys are
/// rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: RunPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: RunPaths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Every path that is set must exist.
    pub fn check_paths(&self) -> Result<()> {
        let p = &self.paths;
        let singles = [
            &p.train_src,
            &p.train_tgt,
            &p.dev_src,
            &p.dev_tgt,
            &p.test_src,
            &p.test_ref,
            &p.merges,
            &p.checkpoint_dir,
        ];
        for path in singles.into_iter().flatten().chain(p.lm_files.iter()) {
            if !path.exists() {
                return Err(Error::Config(format!("configured path does not exist: {}", path.display())));
            }
        }
        Ok(())
    }
}

/// Advisory directory lock: created exclusively, removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Arg(format!(
                "directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
