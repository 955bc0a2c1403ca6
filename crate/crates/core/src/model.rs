//! Encoder and decoder wired together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{GruEncoder, MeanPoolEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::taxonomy::Taxonomy;
use crate::tensor::{Element, Graph, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderKind {
    #[default]
    Gru,
    MeanPool,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(EncoderKind::Gru),
            "mean" => Ok(EncoderKind::MeanPool),
            _ => Err(Error::InvalidConfig(format!("unknown encoder {s:?}"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Gru => "gru",
            EncoderKind::MeanPool => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { encoder: EncoderKind::Gru, embed_dim: 64, hidden: 64, decoder: DecoderConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Gru(GruEncoder),
    MeanPool(MeanPoolEncoder),
}

impl TextEncoder for Encoder {
    fn output_dim(&self) -> usize {
        match self {
            Encoder::Gru(e) => e.output_dim(),
            Encoder::MeanPool(e) => e.output_dim(),
        }
    }

    fn encode_batch<F: Element>(&self, g: &mut Graph<'_, F>, docs: &[&[usize]]) -> Result<Vec<Var>> {
        match self {
            Encoder::Gru(e) => e.encode_batch(g, docs),
            Encoder::MeanPool(e) => e.encode_batch(g, docs),
        }
    }
}

/// The full classifier. Parameters live in a separate [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct HiDec {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl HiDec {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init<F: Element>(
        config: ModelConfig,
        vocab_size: usize,
        taxonomy: &Taxonomy,
        seed: u64,
    ) -> Result<(Self, ParameterStore<F>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::default();
        let encoder = match config.encoder {
            EncoderKind::Gru => Encoder::Gru(GruEncoder::register(
                &mut store,
                vocab_size,
                config.embed_dim,
                config.hidden,
                &mut rng,
            )?),
            EncoderKind::MeanPool => Encoder::MeanPool(MeanPoolEncoder::register(
                &mut store,
                vocab_size,
                config.embed_dim,
                &mut rng,
            )?),
        };
        let decoder =
            Decoder::register(&mut store, config.decoder.clone(), taxonomy, encoder.output_dim(), &mut rng)?;
        Ok((HiDec { config, encoder, decoder }, store))
    }

    /// Binds to parameters that already exist in `store`, e.g. after loading
    /// a checkpoint.
    pub fn bind<F: Element>(config: ModelConfig, store: &ParameterStore<F>, taxonomy: &Taxonomy) -> Result<Self> {
        let encoder = match config.encoder {
            EncoderKind::Gru => Encoder::Gru(GruEncoder::lookup(store)?),
            EncoderKind::MeanPool => Encoder::MeanPool(MeanPoolEncoder::lookup(store)?),
        };
        let decoder = Decoder::lookup(store, config.decoder.clone(), taxonomy)?;
        Ok(HiDec { config, encoder, decoder })
    }

    pub fn text_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}
