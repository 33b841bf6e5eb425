//! Full multi-modal network: encoders, projection heads and the co-attention
//! block, all sharing one [`ParamStore`].

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoders::{GridDims, ImageEncoder, ProjectionHead, TextEncoder};
use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::CoAttentionBlock;
use crate::params::{Bound, ParamStore};
use crate::rng;

pub const IMAGE_ENCODER: &str = "image_encoder";
pub const TEXT_ENCODER: &str = "text_encoder";
pub const IMAGE_HEAD: &str = "image_head";
pub const TEXT_HEAD: &str = "text_head";
pub const COATTENTION: &str = "coattention";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: GridDims,
    pub vocab: usize,
    pub image_hidden: usize,
    pub d_enc: usize,
    pub d_tok: usize,
    pub head_hidden: usize,
    /// Width of the common embedding space.
    pub dim: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridDims {
                height: 8,
                width: 8,
                channels: 1,
            },
            vocab: 64,
            image_hidden: 64,
            d_enc: 32,
            d_tok: 32,
            head_hidden: 64,
            dim: 512,
            heads: 4,
        }
    }
}

impl ModelConfig {
    /// Same architecture with a 32-wide common space.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.grid.height,
            self.grid.width,
            self.grid.channels,
            self.vocab,
            self.image_hidden,
            self.d_enc,
            self.d_tok,
            self.head_hidden,
            self.dim,
            self.heads,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary needs a padding id plus tokens".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "common dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        [
            ("grid_h", self.grid.height),
            ("grid_w", self.grid.width),
            ("grid_c", self.grid.channels),
            ("vocab", self.vocab),
            ("image_hidden", self.image_hidden),
            ("d_enc", self.d_enc),
            ("d_tok", self.d_tok),
            ("head_hidden", self.head_hidden),
            ("dim", self.dim),
            ("heads", self.heads),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint meta lacks {k}")))?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint meta {k} is not an integer")))
        };
        let cfg = Self {
            grid: GridDims {
                height: get("grid_h")?,
                width: get("grid_w")?,
                channels: get("grid_c")?,
            },
            vocab: get("vocab")?,
            image_hidden: get("image_hidden")?,
            d_enc: get("d_enc")?,
            d_tok: get("d_tok")?,
            head_hidden: get("head_hidden")?,
            dim: get("dim")?,
            heads: get("heads")?,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub coattention: CoAttentionBlock,
}

/// Encoder outputs and common-space projections for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub image_rep: Var,
    pub text_rep: Var,
}

impl Model {
    fn layout(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            params: ParamStore::new(),
            image_encoder: ImageEncoder::new(IMAGE_ENCODER, config.grid, config.image_hidden, config.d_enc),
            text_encoder: TextEncoder::new(TEXT_ENCODER, config.vocab, config.d_tok, config.d_enc),
            image_head: ProjectionHead::new(IMAGE_HEAD, config.d_enc, config.head_hidden, config.dim),
            text_head: ProjectionHead::new(TEXT_HEAD, config.d_enc, config.head_hidden, config.dim),
            coattention: CoAttentionBlock::new(COATTENTION, config.dim, config.heads),
        }
    }

    /// Xavier-uniform weights and zero biases, deterministic per seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut m = Self::layout(&config);
        let mut r = rng::stream(seed, "init");
        m.image_encoder.init(&mut m.params, &mut r);
        m.text_encoder.init(&mut m.params, &mut r);
        m.image_head.init(&mut m.params, &mut r);
        m.text_head.init(&mut m.params, &mut r);
        m.coattention.init(&mut m.params, &mut r);
        Ok(m)
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (k, t) in reference.params.iter() {
            let got = params
                .get(k)
                .map_err(|_| Error::Format(format!("missing parameter {k}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {k} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let mut m = Self::layout(&config);
        m.params = params;
        Ok(m)
    }

    /// Marks the encoders frozen; heads and co-attention stay trainable.
    pub fn freeze_encoders(&mut self) {
        self.params.freeze(IMAGE_ENCODER);
        self.params.freeze(TEXT_ENCODER);
    }

    pub fn encoders_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(IMAGE_ENCODER) || k.starts_with(TEXT_ENCODER))
            .all(|(k, _)| self.params.is_frozen(k))
    }

    /// Digest of the encoder parameters only.
    pub fn encoder_digest(&self) -> String {
        let mut enc = ParamStore::new();
        for (k, t) in self.params.iter() {
            if k.starts_with(IMAGE_ENCODER) || k.starts_with(TEXT_ENCODER) {
                enc.insert(k.clone(), t.clone());
            }
        }
        enc.digest()
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: Var,
        tokens: &[&[usize]],
    ) -> Result<Encoded> {
        Ok(Encoded {
            image_rep: self.image_encoder.forward(g, p, images)?,
            text_rep: self.text_encoder.forward(g, p, tokens)?,
        })
    }

    /// Frozen `[N, 2*d_enc]` features `(image_rep ; text_rep)`.
    pub fn representations(&self, images: &Tensor, tokens: &[&[usize]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g);
        let x = g.constant(images.clone());
        let enc = self.encode(&mut g, &p, x, tokens)?;
        let both = g.concat_cols(&[enc.image_rep, enc.text_rep])?;
        Ok(g.value(both).clone())
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = self.config.to_meta();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let (params, meta) = ParamStore::load(path)?;
        let cfg = ModelConfig::from_meta(&meta)?;
        Ok((Self::from_params(cfg, params)?, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let a = Model::new(ModelConfig::desk(), 4).unwrap();
        let b = Model::new(ModelConfig::desk(), 4).unwrap();
        let c = Model::new(ModelConfig::desk(), 5).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
        assert_ne!(a.params.digest(), c.params.digest());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::new(ModelConfig::desk(), 1).unwrap();
        let extra: BTreeMap<_, _> = [("method".to_string(), "mm_simclr".to_string())].into();
        m.save(&path, &extra).unwrap();
        let (back, meta) = Model::load(&path).unwrap();
        assert_eq!(back.params.digest(), m.params.digest());
        assert_eq!(back.config, m.config);
        assert_eq!(meta["method"], "mm_simclr");
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig {
            dim: 30,
            heads: 4,
            ..ModelConfig::desk()
        };
        assert!(Model::new(cfg, 0).is_err());
    }
}
