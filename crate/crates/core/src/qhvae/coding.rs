use std::collections::HashMap;

use super::model::{Mode, Qhvae};
use super::rate::bin_rate;
use super::{QhvaeError, Result};
use crate::codec::{rans_decode, rans_encode, residual_table, Bitstream, LevelShape, PmfTable};
use crate::tensor::{Ctx, ParamStore, Tape, Tensor};

/// Residual tables keyed by the exact scale value.
#[derive(Default)]
struct Tables(HashMap<u64, PmfTable>);

impl Tables {
    fn fill(&mut self, sigmas: &[f64]) {
        for &s in sigmas {
            self.0.entry(s.to_bits()).or_insert_with(|| residual_table(s));
        }
    }

    fn refs<'a>(&'a self, sigmas: &[f64]) -> Vec<&'a PmfTable> {
        sigmas.iter().map(|s| &self.0[&s.to_bits()]).collect()
    }
}

pub struct Compressed {
    pub bitstream: Bitstream,
    pub bytes: Vec<u8>,
    pub recon: Tensor<f32>,
    /// Decoder states per level, as returned by [`decompress`].
    pub features: Vec<Tensor<f32>>,
    /// `Σ -log2 p(z | μ̂, σ̂)` over all coded latents.
    pub model_bits: f64,
    pub clamped: usize,
}

pub struct Decompressed {
    pub recon: Tensor<f32>,
    pub features: Vec<Tensor<f32>>,
}

fn single(patch: &Tensor<f32>) -> Result<Tensor<f32>> {
    match patch.shape() {
        [3, h, w] => Ok(patch.reshape(vec![1, 3, *h, *w])?),
        [1, 3, _, _] => Ok(patch.clone()),
        s => Err(QhvaeError::Config(format!("compress takes one [3, H, W] patch, got {:?}", s))),
    }
}

/// Quantizes the latents of one patch and codes each level as its own
/// segment, coarsest first, symbols in `[C, H, W]` order.
pub fn compress(model: &Qhvae, store: &ParamStore<f32>, patch: &Tensor<f32>) -> Result<Compressed> {
    let x = single(patch)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let pass = model.forward(&ctx, tape.constant(x), Mode::Compress)?;
    let mut tables = Tables::default();
    let mut levels = Vec::with_capacity(pass.latents.len());
    let mut model_bits = 0.0;
    let mut clamped = 0;
    for lat in &pass.latents {
        let residual = lat.residual.as_ref().expect("compress mode records residuals");
        let sig: Vec<f64> = lat.sigma_hat.value().data().iter().map(|&s| s as f64).collect();
        tables.fill(&sig);
        let payload = rans_encode(residual, &tables.refs(&sig))?;
        model_bits += residual.iter().zip(&sig).map(|(&r, &s)| bin_rate(r as f64, s).0).sum::<f64>();
        clamped += lat.clamped;
        let [_, c, h, w] = lat.z.shape()[..] else { unreachable!("latents are 4-d") };
        let dim = |v: usize| u16::try_from(v).map_err(|_| QhvaeError::Config(format!("latent extent {} exceeds u16", v)));
        levels.push((LevelShape { height: dim(h)?, width: dim(w)?, channels: dim(c)? }, payload));
    }
    let bitstream = Bitstream::new(levels);
    let bytes = bitstream.to_bytes()?;
    Ok(Compressed {
        bitstream,
        bytes,
        recon: pass.recon.value(),
        features: pass.states.iter().map(|s| s.value()).collect(),
        model_bits,
        clamped,
    })
}

pub fn decompress(model: &Qhvae, store: &ParamStore<f32>, bytes: &[u8]) -> Result<Decompressed> {
    let stream = Bitstream::parse(bytes)?;
    let cfg = &model.cfg;
    let n = cfg.levels;
    if stream.levels.len() != n {
        return Err(QhvaeError::HeaderMismatch(format!("{} levels in stream, model has {}", stream.levels.len(), n)));
    }
    let top = stream.levels[0].0;
    let (height, width) = ((top.height as usize) << n, (top.width as usize) << n);
    if height == 0 || width == 0 {
        return Err(QhvaeError::HeaderMismatch("empty latent extent".into()));
    }
    for (i, (shape, _)) in stream.levels.iter().enumerate() {
        let l = n - i;
        let want = LevelShape {
            height: (height >> l) as u16,
            width: (width >> l) as u16,
            channels: cfg.latent_channels[l - 1] as u16,
        };
        if *shape != want {
            return Err(QhvaeError::HeaderMismatch(format!("level {} is {:?}, expected {:?}", l, shape, want)));
        }
    }
    let mut tables = Tables::default();
    let mut source = |level: usize, sig: &[f64]| -> Result<Vec<i32>> {
        tables.fill(sig);
        let payload = &stream.levels[n - level].1;
        Ok(rans_decode(payload, &tables.refs(sig), sig.len())?)
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let pass = model.decode(&ctx, None, 1, height, width, Mode::Decompress(&mut source))?;
    Ok(Decompressed { recon: pass.recon.value(), features: pass.states.iter().map(|s| s.value()).collect() })
}
