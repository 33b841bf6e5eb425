//! Cross-modal fusion: multi-headed co-attention and max-pool view fusion.
//!
//! Each sample contributes one text and one image vector, so every query
//! attends over a length-1 key sequence and each head's softmax weight is
//! exactly 1. Fusing therefore merges the two value projections, and the
//! query and key maps cannot affect the output or its gradients. They remain
//! parameters of the block, and [`CoAttentionBlock::attention_weights`]
//! evaluates the full per-head scores.

use crate::augment::{augment_image, AugmentPolicy};
use crate::data::PairedSample;
use crate::encoders::Linear;
use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::EmbeddingBank;
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
struct Direction {
    query: Linear,
    key: Linear,
    value: Linear,
}

impl Direction {
    fn new(prefix: &str, dim: usize) -> Self {
        Self {
            query: Linear::new(format!("{prefix}.query"), dim, dim),
            key: Linear::new(format!("{prefix}.key"), dim, dim),
            value: Linear::new(format!("{prefix}.value"), dim, dim),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.query.init(store, rng);
        self.key.init(store, rng);
        self.value.init(store, rng);
    }
}

/// Text-to-image and image-to-text multi-head attention merged to `[d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoAttentionBlock {
    pub dim: usize,
    pub heads: usize,
    text_to_image: Direction,
    image_to_text: Direction,
    merge: Linear,
}

/// Projections of one modality's rows.
struct Side {
    query: Var,
    key: Var,
    value: Var,
}

/// Attended outputs plus the per-head attention weights (`[N, keys]` each).
struct Attended {
    // only the full-attention comparison in the tests reads the output
    #[cfg_attr(not(test), allow(dead_code))]
    out: Var,
    weights: Vec<Var>,
}

impl CoAttentionBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            text_to_image: Direction::new(&format!("{prefix}.t2i"), dim),
            image_to_text: Direction::new(&format!("{prefix}.i2t"), dim),
            merge: Linear::new(format!("{prefix}.merge"), 2 * dim, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.text_to_image.init(store, rng);
        self.image_to_text.init(store, rng);
        self.merge.init(store, rng);
    }

    /// Projections of the text that do not depend on the image: its queries
    /// toward the image and its keys and values for image queries.
    fn project_text(&self, g: &mut Graph, p: &Bound, text: Var) -> Result<Side> {
        Ok(Side {
            query: self.text_to_image.query.forward(g, p, text)?,
            key: self.image_to_text.key.forward(g, p, text)?,
            value: self.image_to_text.value.forward(g, p, text)?,
        })
    }

    fn project_image(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Side> {
        Ok(Side {
            query: self.image_to_text.query.forward(g, p, image)?,
            key: self.text_to_image.key.forward(g, p, image)?,
            value: self.text_to_image.value.forward(g, p, image)?,
        })
    }

    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Attended> {
        let head_dim = self.dim / self.heads;
        let (n, _) = g.value(q).dims2()?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * head_dim;
            let qh = g.slice_cols(q, start, head_dim)?;
            let kh = g.slice_cols(k, start, head_dim)?;
            let vh = g.slice_cols(v, start, head_dim)?;
            // one key per query row: score is the row-wise dot product
            let prod = g.mul(qh, kh)?;
            let score = g.sum(prod, Some(1))?;
            let score = g.reshape(score, vec![n, 1])?;
            let score = g.scale(score, 1.0 / (head_dim as f64).sqrt());
            let w = g.softmax_rows(score)?;
            outs.push(g.mul_col(vh, w)?);
            weights.push(w);
        }
        let out = g.concat_cols(&outs)?;
        Ok(Attended { out, weights })
    }

    /// Text-to-image then image-to-text attention.
    fn both_directions(&self, g: &mut Graph, text: &Side, image: &Side) -> Result<(Attended, Attended)> {
        let t2i = self.attend(g, text.query, image.key, image.value)?;
        let i2t = self.attend(g, image.query, text.key, text.value)?;
        Ok((t2i, i2t))
    }

    /// Fusion through the full per-head attention, for comparison with the
    /// single-key shortcut taken by [`Self::coattend_each`].
    #[cfg(test)]
    fn merged_full(&self, g: &mut Graph, p: &Bound, text: Var, image: Var) -> Result<Var> {
        let text = self.project_text(g, p, text)?;
        let image = self.project_image(g, p, image)?;
        let (t2i, i2t) = self.both_directions(g, &text, &image)?;
        let both = g.concat_cols(&[t2i.out, i2t.out])?;
        self.merge.forward(g, p, both)
    }

    fn check_inputs(&self, g: &Graph, text: Var, image: Var) -> Result<()> {
        let (nt, dt) = g.value(text).dims2()?;
        let (ni, di) = g.value(image).dims2()?;
        if nt != ni || dt != self.dim || di != self.dim {
            return Err(Error::dim(format!(
                "co-attention expects two [N x {}] inputs, got [{nt}x{dt}] and [{ni}x{di}]",
                self.dim
            )));
        }
        Ok(())
    }

    /// Fuses `[N, d]` text and image rows into `[N, d]`.
    ///
    /// Text queries attend over the image and image queries over the text; the
    /// two results are concatenated in that order and merged linearly.
    pub fn coattend(&self, g: &mut Graph, p: &Bound, text: Var, image: Var) -> Result<Var> {
        Ok(self.coattend_each(g, p, text, &[image])?.remove(0))
    }

    /// `coattend(text, image)` for every image, projecting the shared text
    /// only once.
    pub fn coattend_each(&self, g: &mut Graph, p: &Bound, text: Var, images: &[Var]) -> Result<Vec<Var>> {
        for &image in images {
            self.check_inputs(g, text, image)?;
        }
        // text-to-image attention returns the image values, image-to-text
        // attention the text values
        let text_values = self.image_to_text.value.forward(g, p, text)?;
        images
            .iter()
            .map(|&image| {
                let image_values = self.text_to_image.value.forward(g, p, image)?;
                let both = g.concat_cols(&[image_values, text_values])?;
                self.merge.forward(g, p, both)
            })
            .collect()
    }

    /// Attention weights of every head in both directions (text-to-image first).
    pub fn attention_weights(&self, store: &ParamStore, text: &Tensor, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let t = g.constant(text.clone());
        let i = g.constant(image.clone());
        self.check_inputs(&g, t, i)?;
        let ts = self.project_text(&mut g, &p, t)?;
        let is = self.project_image(&mut g, &p, i)?;
        let (a, b) = self.both_directions(&mut g, &ts, &is)?;
        Ok(a.weights
            .iter()
            .chain(&b.weights)
            .map(|w| g.value(*w).clone())
            .collect())
    }

    /// Single-sample convenience over `[d]` vectors.
    pub fn coattend_vectors(&self, store: &ParamStore, text: &Tensor, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let t = g.constant(text.reshape(vec![1, text.numel()])?);
        let i = g.constant(image.reshape(vec![1, image.numel()])?);
        let y = self.coattend(&mut g, &p, t, i)?;
        Ok(Tensor::vector(g.value(y).data().to_vec()))
    }
}

/// Elementwise maximum of two views.
pub fn fuse_views(g: &mut Graph, view1: Var, view2: Var) -> Result<Var> {
    g.maximum(view1, view2)
}

/// Normalized banks feeding the fused-view objective.
#[derive(Clone, Copy, Debug)]
pub struct FusionEmbeddings {
    pub f1: EmbeddingBank,
    pub f2: EmbeddingBank,
    pub f: EmbeddingBank,
    pub image: EmbeddingBank,
    pub text: EmbeddingBank,
}

/// Stacks augmented views of every sample grid into `[N, H*W*C]`.
pub fn augmented_batch(samples: &[&PairedSample], policy: &AugmentPolicy, seed: u64, label: &str) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let draw = rng::derive_indexed(seed, label, &[s.id]);
        rows.push(augment_image(&s.image, policy, draw)?.into_data());
    }
    let width = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![samples.len(), width], rows.concat())
}

/// Two augmented image views through the image encoder and head, text through
/// its encoder and head, then co-attention and max-pool fusion.
///
/// `f1`/`f2` fuse the text with each view, `f` fuses the text with the pooled
/// view, and `image` is the pooled projected view itself.
pub fn ext_pie_forward(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    samples: &[&PairedSample],
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<FusionEmbeddings> {
    let view1 = g.constant(augmented_batch(samples, policy, seed, "view1")?);
    let view2 = g.constant(augmented_batch(samples, policy, seed, "view2")?);
    let tokens: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();

    let rep1 = model.image_encoder.forward(g, p, view1)?;
    let rep2 = model.image_encoder.forward(g, p, view2)?;
    let z1 = model.image_head.forward(g, p, rep1)?;
    let z2 = model.image_head.forward(g, p, rep2)?;
    let trep = model.text_encoder.forward(g, p, &tokens)?;
    let t = model.text_head.forward(g, p, trep)?;

    let pooled = fuse_views(g, z1, z2)?;
    let fused = model.coattention.coattend_each(g, p, t, &[z1, z2, pooled])?;
    let (f1, f2, f) = (fused[0], fused[1], fused[2]);

    Ok(FusionEmbeddings {
        f1: EmbeddingBank::normalize(g, f1)?,
        f2: EmbeddingBank::normalize(g, f2)?,
        f: EmbeddingBank::normalize(g, f)?,
        image: EmbeddingBank::normalize(g, pooled)?,
        text: EmbeddingBank::normalize(g, t)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn block(dim: usize, heads: usize, seed: u64) -> (CoAttentionBlock, ParamStore) {
        let b = CoAttentionBlock::new("co", dim, heads);
        let mut s = ParamStore::new();
        b.init(&mut s, &mut Rng::seed_from_u64(seed));
        (b, s)
    }

    #[test]
    fn identity_maps_single_head_merge_concat() {
        let (b, mut s) = block(3, 1, 0);
        for dir in ["t2i", "i2t"] {
            for m in ["query", "key", "value"] {
                s.insert(format!("co.{dir}.{m}.weight"), Tensor::eye(3));
            }
        }
        let text = Tensor::vector(vec![0.1, -0.4, 2.0]);
        let image = Tensor::vector(vec![1.5, 0.2, -0.3]);
        let out = b.coattend_vectors(&s, &text, &image).unwrap();

        let concat: Vec<f64> = image.data().iter().chain(text.data()).copied().collect();
        let merged = Tensor::new(vec![1, 6], concat)
            .unwrap()
            .matmul(s.get("co.merge.weight").unwrap())
            .unwrap();
        for (a, e) in out.data().iter().zip(merged.data()) {
            assert!((a - e).abs() < 1e-14);
        }
        let w = b
            .attention_weights(&s, &text.reshape(vec![1, 3]).unwrap(), &image.reshape(vec![1, 3]).unwrap())
            .unwrap();
        assert!(w.iter().all(|t| t.data() == [1.0]));
    }

    #[test]
    fn swapping_inputs_changes_output() {
        let (b, s) = block(4, 2, 1);
        let mut r = Rng::seed_from_u64(2);
        let t = random(&mut r, &[4]);
        let i = random(&mut r, &[4]);
        assert_ne!(b.coattend_vectors(&s, &t, &i).unwrap(), b.coattend_vectors(&s, &i, &t).unwrap());
    }

    #[test]
    fn shared_text_projection_matches_separate_calls() {
        let (b, s) = block(6, 3, 4);
        let mut r = Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let p = s.bind_constant(&mut g);
        let t = g.constant(random(&mut r, &[3, 6]));
        let images: Vec<Var> = (0..3).map(|_| g.constant(random(&mut r, &[3, 6]))).collect();
        let each = b.coattend_each(&mut g, &p, t, &images).unwrap();
        for (&image, fused) in images.iter().zip(each) {
            let single = b.coattend(&mut g, &p, t, image).unwrap();
            assert_eq!(g.value(single), g.value(fused));
        }
    }

    #[test]
    fn single_key_shortcut_matches_full_attention() {
        let (b, s) = block(8, 4, 11);
        let mut r = Rng::seed_from_u64(12);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let t = g.param(random(&mut r, &[5, 8]));
        let i = g.param(random(&mut r, &[5, 8]));
        let w = g.constant(random(&mut r, &[5, 8]));
        let mut outputs = Vec::new();
        let mut losses = Vec::new();
        for full in [false, true] {
            let y = if full {
                b.merged_full(&mut g, &p, t, i).unwrap()
            } else {
                b.coattend(&mut g, &p, t, i).unwrap()
            };
            let yw = g.mul(y, w).unwrap();
            losses.push(g.sum(yw, None).unwrap());
            outputs.push(g.value(y).clone());
        }
        assert_eq!(outputs[0].to_bits(), outputs[1].to_bits());
        let (short, full) = (g.backward(losses[0]).unwrap(), g.backward(losses[1]).unwrap());
        for v in [t, i] {
            assert_eq!(short.wrt(v), full.wrt(v));
        }
        for name in p.names() {
            let v = p.get(name).unwrap();
            if name.contains(".query.") || name.contains(".key.") {
                assert!(full.wrt(v).data().iter().all(|x| *x == 0.0), "{name}");
            } else {
                assert_eq!(short.wrt(v), full.wrt(v), "{name}");
            }
        }
    }

    #[test]
    fn matches_hand_composed_attention() {
        let (b, s) = block(4, 2, 3);
        let mut r = Rng::seed_from_u64(4);
        let t = random(&mut r, &[1, 4]);
        let i = random(&mut r, &[1, 4]);
        let lin = |x: &Tensor, name: &str| {
            let y = x.matmul(s.get(&format!("{name}.weight")).unwrap()).unwrap();
            y.zip_map(&s.get(&format!("{name}.bias")).unwrap().reshape(vec![1, y.numel()]).unwrap(), |a, b| a + b)
                .unwrap()
        };
        let direction = |from: &Tensor, over: &Tensor, pre: &str| -> Vec<f64> {
            let q = lin(from, &format!("co.{pre}.query"));
            let k = lin(over, &format!("co.{pre}.key"));
            let v = lin(over, &format!("co.{pre}.value"));
            let mut out = Vec::new();
            for h in 0..2 {
                let cols = h * 2..h * 2 + 2;
                let score: f64 = cols.clone().map(|c| q.data()[c] * k.data()[c]).sum::<f64>() / 2f64.sqrt();
                // softmax over a single key
                let w = (score - score).exp() / (score - score).exp();
                out.extend(cols.map(|c| w * v.data()[c]));
            }
            out
        };
        let mut cat = direction(&t, &i, "t2i");
        cat.extend(direction(&i, &t, "i2t"));
        let expected = lin(&Tensor::new(vec![1, 8], cat).unwrap(), "co.merge");
        let got = b
            .coattend_vectors(&s, &Tensor::vector(t.data().to_vec()), &Tensor::vector(i.data().to_vec()))
            .unwrap();
        for (a, e) in got.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-13);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (b, s) = block(8, 4, 7);
        let mut r = Rng::seed_from_u64(8);
        for _ in 0..10 {
            let t = random(&mut r, &[5, 8]).map(|v| v * 100.0);
            let i = random(&mut r, &[5, 8]);
            for w in b.attention_weights(&s, &t, &i).unwrap() {
                let (m, n) = w.dims2().unwrap();
                for row in 0..m {
                    let sum: f64 = (0..n).map(|c| w.at(row, c)).sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradients_reach_both_modalities() {
        let (b, s) = block(4, 2, 9);
        let mut r = Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let t = g.param(random(&mut r, &[2, 4]));
        let i = g.param(random(&mut r, &[2, 4]));
        let y = b.coattend(&mut g, &p, t, i).unwrap();
        let w = g.constant(random(&mut r, &[2, 4]));
        let yw = g.mul(y, w).unwrap();
        let l = g.sum(yw, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(t).data().iter().any(|v| *v != 0.0));
        assert!(grads.wrt(i).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn fuse_views_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, -2.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 5.0]));
        let ab = fuse_views(&mut g, a, b).unwrap();
        let ba = fuse_views(&mut g, b, a).unwrap();
        let aa = fuse_views(&mut g, a, a).unwrap();
        assert_eq!(g.value(ab).data(), &[1.0, 5.0]);
        assert_eq!(g.value(ab), g.value(ba));
        assert_eq!(g.value(aa), g.value(a));
        let c = g.constant(Tensor::vector(vec![1.0]));
        assert!(fuse_views(&mut g, a, c).is_err());
    }

    #[test]
    fn mismatched_widths_rejected() {
        let (b, s) = block(4, 2, 0);
        assert!(b.coattend_vectors(&s, &Tensor::zeros(&[4]), &Tensor::zeros(&[3])).is_err());
    }
}
