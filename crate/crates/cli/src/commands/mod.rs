//! Subcommand implementations. Each returns a one-line summary for stdout.

mod checkerboard;
mod eval;
mod oracle;
mod sample;
mod train;

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rand::Rng;
use serde_json::json;
use stepflow::denoiser::{load_checkpoint, NeuralDenoiser};
use stepflow::path_data::{CharVocab, CheckerboardData, CheckerboardSpec, Dataset, PackedCorpus, Sequence, Token, Vocab};

use crate::config::{DatasetKind, RunConfig};

pub use checkerboard::{cmd_checkerboard, SettledExact};
pub use eval::cmd_eval;
pub use oracle::{cmd_oracle_check, OracleCheck};
pub use sample::{cmd_recover, cmd_sample};
pub use train::{cmd_finetune, cmd_train};

/// Raised when an acceptance battery fails; maps to exit code 3.
#[derive(Debug)]
pub struct AcceptanceFailure(pub String);

impl std::fmt::Display for AcceptanceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "acceptance failure: {}", self.0)
    }
}

impl std::error::Error for AcceptanceFailure {}

/// How tokens are shown in text outputs and timelines.
#[derive(Debug, Clone)]
pub enum Decoder {
    Ids,
    Chars(CharVocab),
}

impl Decoder {
    pub fn pieces(&self, tokens: &[Token], vocab: Vocab) -> Vec<String> {
        match self {
            Decoder::Ids => tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let sep = if i == 0 { "" } else { " " };
                    if vocab.is_mask(t) {
                        format!("{sep}[MASK]")
                    } else {
                        format!("{sep}{t}")
                    }
                })
                .collect(),
            Decoder::Chars(chars) => tokens
                .iter()
                .map(|&t| if vocab.is_mask(t) { "\u{2588}".to_string() } else { chars.decode(&[t]) })
                .collect(),
        }
    }

    pub fn text(&self, tokens: &[Token], vocab: Vocab) -> String {
        self.pieces(tokens, vocab).concat()
    }
}

pub enum Data {
    Board(CheckerboardData),
    Text(PackedCorpus),
}

impl Data {
    pub fn vocab(&self) -> Vocab {
        match self {
            Data::Board(d) => d.vocab,
            Data::Text(c) => c.vocab,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Data::Board(d) => d.seq_len(),
            Data::Text(c) => c.seq_len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        match self {
            Data::Board(d) => d.sample(rng),
            Data::Text(c) => c.sample(rng),
        }
    }
}

fn read_corpus(cfg: &RunConfig) -> Result<String> {
    let path = cfg.corpus.as_ref().ok_or_else(|| anyhow!("the corpus dataset needs `corpus` set to a text file"))?;
    fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))
}

/// Dataset for training from scratch; the corpus vocabulary is fitted here.
pub fn fresh_data(cfg: &RunConfig) -> Result<(Data, Decoder)> {
    match cfg.dataset {
        DatasetKind::Checkerboard => {
            Ok((Data::Board(CheckerboardData::new(CheckerboardSpec::default(), cfg.source)), Decoder::Ids))
        }
        DatasetKind::Corpus => {
            let text = read_corpus(cfg)?;
            let chars = CharVocab::fit(text.lines(), cfg.max_vocab, cfg.source == stepflow::path_data::SourceKind::Mask)?;
            let corpus = PackedCorpus::from_text(&text, &chars, cfg.seq_len)?;
            Ok((Data::Text(corpus), Decoder::Chars(chars)))
        }
    }
}

/// A checkpoint with the decoder stored next to it.
pub struct Loaded {
    pub model: NeuralDenoiser,
    pub decoder: Decoder,
    pub metadata: serde_json::Value,
}

pub fn load_model(path: &Path) -> Result<Loaded> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let decoder = match ckpt.metadata.get("chars") {
        Some(v) if !v.is_null() => Decoder::Chars(serde_json::from_value(v.clone()).context("checkpoint vocabulary")?),
        _ => Decoder::Ids,
    };
    Ok(Loaded { model: ckpt.model, decoder, metadata: ckpt.metadata })
}

/// Dataset matching a loaded model: the corpus is re-encoded with the
/// vocabulary stored in the checkpoint.
pub fn data_for(cfg: &RunConfig, loaded: &Loaded) -> Result<Data> {
    let data = match &loaded.decoder {
        Decoder::Ids => Data::Board(CheckerboardData::new(CheckerboardSpec::default(), cfg.source)),
        Decoder::Chars(chars) => {
            let text = read_corpus(cfg)?;
            Data::Text(PackedCorpus::from_text(&text, chars, loaded.model.spec().seq_len)?)
        }
    };
    check_compatible(&data, &loaded.model)?;
    Ok(data)
}

pub fn check_compatible(data: &Data, model: &NeuralDenoiser) -> Result<()> {
    let spec = model.spec();
    if data.vocab() != spec.vocab || data.seq_len() != spec.seq_len {
        bail!(
            "dataset (vocabulary {:?}, length {}) does not match the checkpoint (vocabulary {:?}, length {}); check `source`",
            data.vocab(),
            data.seq_len(),
            spec.vocab,
            spec.seq_len
        );
    }
    Ok(())
}

pub fn checkpoint_metadata(cfg: &RunConfig, phase: &str, decoder: &Decoder) -> serde_json::Value {
    let chars = match decoder {
        Decoder::Chars(c) => serde_json::to_value(c).expect("vocabulary serializes"),
        Decoder::Ids => serde_json::Value::Null,
    };
    json!({ "phase": phase, "config": cfg, "chars": chars })
}
