//! Encoder stand-in with frozen random embeddings and no context mixing.
//! Lets every head be tested (including finite-difference gradient checks)
//! without pretrained weights.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Batch, DropoutRng, EncoderBackend, ModelError};
use crate::tokenizer::WordPieceTokenizer;

#[derive(Debug, Clone)]
pub struct StubEncoder {
    tokenizer: WordPieceTokenizer,
    embeddings: Tensor,
    hidden: usize,
    max_len: usize,
    dtype: DType,
    device: Device,
}

impl StubEncoder {
    pub fn new(
        tokenizer: WordPieceTokenizer,
        hidden: usize,
        max_len: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = tokenizer.vocab_size() * hidden;
        let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let device = Device::Cpu;
        let embeddings = Tensor::from_vec(values, (tokenizer.vocab_size(), hidden), &device)?.to_dtype(dtype)?;
        Ok(StubEncoder {
            tokenizer,
            embeddings,
            hidden,
            max_len,
            dtype,
            device,
        })
    }
}

impl EncoderBackend for StubEncoder {
    fn tokenizer(&self) -> &WordPieceTokenizer {
        &self.tokenizer
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn dropout(&self) -> f32 {
        0.0
    }

    fn set_dropout(&mut self, _p: f32) {}

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn forward(&self, batch: &Batch, _rng: DropoutRng<'_>) -> Result<Tensor, ModelError> {
        let (b, t) = batch.input_ids.dims2()?;
        let flat = batch.input_ids.flatten_all()?;
        Ok(self.embeddings.index_select(&flat, 0)?.reshape((b, t, self.hidden))?)
    }
}
