//! Trainable state: encoder, decoder and codebooks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, MlpParams};
use crate::rq::Codebooks;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub d: usize,
    pub depth: usize,
    pub codebook_size: usize,
}

impl ModelDims {
    pub fn encoder_dims(&self) -> [usize; 3] {
        [self.d_in, 2 * self.d, self.d]
    }

    pub fn decoder_dims(&self) -> [usize; 3] {
        [self.d, 2 * self.d, self.d_in]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub codebooks: Codebooks,
}

/// Gradients shaped like [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub codebooks: Vec<Matrix>,
}

impl ModelState {
    /// Random encoder/decoder; codebooks start at zero until initialized from
    /// warmup embeddings.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.depth == 0 || dims.codebook_size == 0 {
            return Err(Error::Config(format!(
                "need L >= 1 and K >= 1, got L={} K={}",
                dims.depth, dims.codebook_size
            )));
        }
        let encoder = MlpParams::init(&dims.encoder_dims(), rng)?;
        let decoder = MlpParams::init(&dims.decoder_dims(), rng)?;
        let codebooks = Codebooks::new(vec![Matrix::zeros(dims.codebook_size, dims.d); dims.depth])?;
        Ok(Self {
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.encoder.in_dim(),
            d: self.encoder.out_dim(),
            depth: self.codebooks.depth(),
            codebook_size: self.codebooks.size(),
        }
    }

    /// Every parameter tensor in a fixed order: encoder, decoder, codebooks.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        out.extend(self.decoder.tensors());
        out.extend(self.codebooks.layers().iter().map(Matrix::data));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        out.extend(self.codebooks.tensors_mut());
        out
    }

    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = self.encoder.tensor_shapes();
        out.extend(self.decoder.tensor_shapes());
        out.extend(self.codebooks.layers().iter().map(Matrix::shape));
        out
    }

    /// Which tensors receive weight decay.
    pub fn decay_mask(&self, decay_codebooks: bool) -> Vec<bool> {
        let nets = self.encoder.tensors().len() + self.decoder.tensors().len();
        let mut mask = vec![true; nets];
        mask.extend(std::iter::repeat_n(decay_codebooks, self.codebooks.depth()));
        mask
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.len()).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!("{} values for {total} parameters", flat.len())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        out.extend(self.decoder.tensors());
        out.extend(self.codebooks.iter().map(Matrix::data));
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}
