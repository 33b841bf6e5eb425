//! Synthetic paired image/text data with a cross-modal dependence knob.
//!
//! Each sample draws a latent `z ~ N(0, I_k)`. The label is the argmax of a
//! fixed class projection of `z`; the image is a fixed linear map of `z`
//! blended with gaussian noise; the tokens are drawn from a softmax over a
//! fixed vocabulary projection of `z`, mixed with a uniform distribution.
//! `eta` sets both blend weights: `0` ties the modalities to `z` completely,
//! `1` makes them pure noise.
//!
//! Vocabulary ids `2m-1` and `2m` share one topic direction, so they behave
//! as synonyms (see [`crate::augment::SynonymLexicon::paired`]).

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::{GridDims, PAD};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::params::{parse_key_values, parse_list, write_atomic};
use crate::rng::{self, Rng};

pub const DATASET_MAGIC: &str = "mmssl-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Scale of the vocabulary logits; larger values make tokens more informative.
const TOKEN_LOGIT_SCALE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: u64,
    /// `[H, W, C]` feature grid.
    pub image: Tensor,
    /// Fixed-length token ids, padded with [`PAD`].
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub n_samples: usize,
    pub latent_dim: usize,
    pub classes: usize,
    pub grid: GridDims,
    pub vocab: usize,
    pub seq_len: usize,
    /// Cross-modal noise in `[0, 1]`.
    pub eta: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            latent_dim: 8,
            classes: 2,
            grid: GridDims {
                height: 8,
                width: 8,
                channels: 1,
            },
            vocab: 64,
            seq_len: 12,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0,1], got {}", self.eta)));
        }
        let dims = [
            self.latent_dim,
            self.classes,
            self.grid.height,
            self.grid.width,
            self.grid.channels,
            self.seq_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary needs at least one non-padding id".into()));
        }
        Ok(())
    }
}

/// Dataset plus the dimensions every sample shares.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridDims,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_samples(&self, samples: Vec<PairedSample>) -> Self {
        Self {
            samples,
            ..self.clone()
        }
    }
}

/// Fixed projections drawn once per seed.
pub struct Generator {
    spec: GenSpec,
    /// `[k, H*W*C]`
    image_map: Tensor,
    /// `[k, classes]`
    class_map: Tensor,
    /// `[vocab - 1, k]`, row `t - 1` belongs to token `t`
    token_dirs: Tensor,
}

fn normal_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Generator {
    pub fn new(spec: GenSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.latent_dim;
        let mut r = rng::stream(spec.seed, "projections");
        let image_map = normal_tensor(&mut r, &[k, spec.grid.numel()], 1.0 / (k as f64).sqrt());
        let class_map = normal_tensor(&mut r, &[k, spec.classes], 1.0);
        let topics = (spec.vocab - 1).div_ceil(2);
        let topic_dirs = normal_tensor(&mut r, &[topics, k], 1.0 / (k as f64).sqrt());
        let mut token_dirs = Vec::with_capacity((spec.vocab - 1) * k);
        for t in 1..spec.vocab {
            token_dirs.extend_from_slice(topic_dirs.row((t - 1) / 2));
        }
        let token_dirs = Tensor::new(vec![spec.vocab - 1, k], token_dirs)?;
        Ok(Self {
            spec,
            image_map,
            class_map,
            token_dirs,
        })
    }

    pub fn spec(&self) -> &GenSpec {
        &self.spec
    }

    pub fn label_of(&self, z: &[f64]) -> usize {
        let zt = Tensor::new(vec![1, z.len()], z.to_vec()).expect("latent");
        let scores = zt.matmul(&self.class_map).expect("class map");
        let mut best = 0;
        for (c, &s) in scores.data().iter().enumerate() {
            if s > scores.data()[best] {
                best = c;
            }
        }
        best
    }

    /// Noise-free image signal `z A` as a flat vector.
    pub fn image_signal(&self, z: &[f64]) -> Vec<f64> {
        let zt = Tensor::new(vec![1, z.len()], z.to_vec()).expect("latent");
        zt.matmul(&self.image_map).expect("image map").into_data()
    }

    /// Distribution over ids `0..vocab` (padding has probability 0).
    pub fn token_distribution(&self, z: &[f64]) -> Vec<f64> {
        let v = self.spec.vocab;
        let logits: Vec<f64> = (0..v - 1)
            .map(|t| {
                TOKEN_LOGIT_SCALE
                    * self.token_dirs.row(t).iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        let eta = self.spec.eta;
        let uniform = 1.0 / (v - 1) as f64;
        std::iter::once(0.0)
            .chain(exps.iter().map(|e| (1.0 - eta) * e / total + eta * uniform))
            .collect()
    }

    pub fn sample(&self, id: u64, z: &[f64], r: &mut Rng) -> PairedSample {
        let spec = &self.spec;
        let eta = spec.eta;
        let image = self
            .image_signal(z)
            .into_iter()
            .map(|s| {
                let e: f64 = StandardNormal.sample(r);
                (1.0 - eta) * s + eta * e
            })
            .collect();
        let image = Tensor::new(spec.grid.shape().to_vec(), image).expect("grid");

        let probs = self.token_distribution(z);
        let len = r.random_range(spec.seq_len.div_ceil(2)..=spec.seq_len);
        let mut tokens = vec![PAD; spec.seq_len];
        for slot in tokens.iter_mut().take(len) {
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut pick = spec.vocab - 1;
            for (t, p) in probs.iter().enumerate().skip(1) {
                acc += p;
                if u < acc {
                    pick = t;
                    break;
                }
            }
            *slot = pick;
        }
        PairedSample {
            id,
            image,
            tokens,
            label: self.label_of(z),
        }
    }
}

/// Draws a full dataset; deterministic per `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    let generator = Generator::new(spec.clone())?;
    let mut r = rng::stream(spec.seed, "samples");
    let mut samples = Vec::with_capacity(spec.n_samples);
    for id in 0..spec.n_samples as u64 {
        let z: Vec<f64> = (0..spec.latent_dim).map(|_| StandardNormal.sample(&mut r)).collect();
        samples.push(generator.sample(id, &z, &mut r));
    }
    Ok(Dataset {
        grid: spec.grid,
        vocab: spec.vocab,
        seq_len: spec.seq_len,
        classes: spec.classes,
        samples,
    })
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn to_text(ds: &Dataset) -> String {
    let mut out = format!("{DATASET_MAGIC} {DATASET_VERSION}\n");
    let _ = writeln!(
        out,
        "dims h={} w={} c={} vocab={} seq_len={} classes={} count={}",
        ds.grid.height,
        ds.grid.width,
        ds.grid.channels,
        ds.vocab,
        ds.seq_len,
        ds.classes,
        ds.samples.len()
    );
    for s in &ds.samples {
        let _ = writeln!(
            out,
            "s id={} label={} tokens={} image={}",
            s.id,
            s.label,
            join(&s.tokens),
            join(s.image.data())
        );
    }
    out.push_str("end\n");
    out
}

pub fn from_text(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty dataset file"))?;
    match header.split_once(' ') {
        Some((DATASET_MAGIC, v)) if v == DATASET_VERSION.to_string() => {}
        Some((DATASET_MAGIC, v)) => {
            return Err(Error::Format(format!(
                "dataset version {v}, expected {DATASET_VERSION}"
            )))
        }
        _ => return Err(Error::Format("not a dataset file".into())),
    }
    let (ln, dims) = lines.next().ok_or_else(|| Error::parse(2, "missing dims line"))?;
    let dims = dims
        .strip_prefix("dims ")
        .ok_or_else(|| Error::parse(ln, "expected dims line"))?;
    let kv = parse_key_values(dims, ln)?;
    let get = |k: &str| -> Result<usize> {
        kv.get(k)
            .ok_or_else(|| Error::parse(ln, format!("missing {k}")))?
            .parse()
            .map_err(|_| Error::parse(ln, format!("bad {k}")))
    };
    let grid = GridDims {
        height: get("h")?,
        width: get("w")?,
        channels: get("c")?,
    };
    let (vocab, seq_len, classes, count) =
        (get("vocab")?, get("seq_len")?, get("classes")?, get("count")?);

    let mut samples = Vec::with_capacity(count);
    let mut last = ln;
    for (ln, line) in lines.by_ref() {
        last = ln;
        if line == "end" {
            if samples.len() != count {
                return Err(Error::parse(ln, format!("expected {count} records, found {}", samples.len())));
            }
            return Ok(Dataset {
                grid,
                vocab,
                seq_len,
                classes,
                samples,
            });
        }
        samples.push(parse_record(line, ln, grid, vocab, seq_len, classes)?);
    }
    Err(Error::parse(last + 1, "unexpected end of file (truncated dataset)"))
}

fn parse_record(
    line: &str,
    ln: usize,
    grid: GridDims,
    vocab: usize,
    seq_len: usize,
    classes: usize,
) -> Result<PairedSample> {
    let body = line
        .strip_prefix("s ")
        .ok_or_else(|| Error::parse(ln, "expected sample record"))?;
    let kv = parse_key_values(body, ln)?;
    let field = |k: &str| kv.get(k).ok_or_else(|| Error::parse(ln, format!("missing field {k}")));
    let id = field("id")?.parse().map_err(|_| Error::parse(ln, "bad id"))?;
    let label: usize = field("label")?.parse().map_err(|_| Error::parse(ln, "bad label"))?;
    if label >= classes {
        return Err(Error::parse(ln, format!("label {label} with {classes} classes")));
    }
    let tokens = parse_list::<usize>(field("tokens")?, ln)?;
    if tokens.len() != seq_len || tokens.iter().any(|&t| t >= vocab) {
        return Err(Error::parse(ln, "token field inconsistent with dims"));
    }
    let image = parse_list::<f64>(field("image")?, ln)?;
    let image = Tensor::new(grid.shape().to_vec(), image).map_err(|e| Error::parse(ln, e.to_string()))?;
    Ok(PairedSample {
        id,
        image,
        tokens,
        label,
    })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, to_text(ds).as_bytes())
}

pub fn load(path: &Path) -> Result<Dataset> {
    from_text(&std::fs::read_to_string(path)?)
}

/// Stratified split: for every class, a seed-fixed shuffle of its samples is
/// cut at `round(fraction * class_count)`. Cuts of the same seed are nested
/// across fractions. Both halves keep dataset order.
pub fn label_fraction_split(
    samples: &[PairedSample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0,1], got {fraction}")));
    }
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut take = vec![false; samples.len()];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == c).collect();
        if idx.is_empty() {
            continue;
        }
        let mut r = Rng::from_seed_indexed(seed, c as u64);
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = r.random_range(0..=i);
            idx.swap(i, j);
        }
        let k = (fraction * idx.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::Stratification(format!(
                "fraction {fraction} leaves class {c} ({} samples) empty",
                idx.len()
            )));
        }
        for &i in &idx[..k.min(idx.len())] {
            take[i] = true;
        }
    }
    let (labeled, heldout): (Vec<_>, Vec<_>) = samples.iter().zip(&take).partition(|(_, &t)| t);
    Ok((
        labeled.into_iter().map(|(s, _)| s.clone()).collect(),
        heldout.into_iter().map(|(s, _)| s.clone()).collect(),
    ))
}

trait IndexedSeed {
    fn from_seed_indexed(seed: u64, class: u64) -> Rng;
}

impl IndexedSeed for Rng {
    fn from_seed_indexed(seed: u64, class: u64) -> Rng {
        rng::from_draw(rng::derive_indexed(seed, "stratified-split", &[class]))
    }
}

/// Flattened images `[N, H*W*C]` of a sample slice.
pub fn image_matrix(samples: &[&PairedSample]) -> Result<Tensor> {
    let width = samples.first().map_or(1, |s| s.image.numel());
    let mut data = Vec::with_capacity(samples.len() * width);
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(vec![samples.len(), width], data)
}
