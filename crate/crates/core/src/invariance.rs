//! Symmetry checks for the embedding objectives.
//!
//! Every objective sees its banks only through cosine similarities, so a
//! common orthogonal rotation, positive per-row rescaling and a consistent
//! permutation of the batch must leave its value unchanged. Cross-entropy is
//! only checked under permutation, since its logits are not embeddings.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::engine::{Graph, Tensor};
use crate::error::Result;
use crate::losses::{
    cross_entropy, ext_pie_loss, mm_infonce, mm_simclr_loss, nt_xent, weighted_hinge,
    EmbeddingBank, LossConfig, NegativeMode,
};
use crate::rng::{self, Rng};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

const N: usize = 5;
const D: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Rotation,
    RowRescale,
    Permutation,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::Rotation => "rotation",
            Transform::RowRescale => "row_rescale",
            Transform::Permutation => "permutation",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceOutcome {
    pub loss: &'static str,
    pub transform: Transform,
    pub seed: u64,
    /// Absolute change of the loss value.
    pub change: f64,
}

/// Raw banks of one instance: `views` has `2N` rows, each of `paired` has `N`.
struct Instance {
    views: Tensor,
    paired: Vec<Tensor>,
}

impl Instance {
    fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        Self {
            views: f(&self.views),
            paired: self.paired.iter().map(&f).collect(),
        }
    }
}

fn normal(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// `D x D` orthogonal matrix by Gram-Schmidt on gaussian columns.
fn rotation(r: &mut Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(D);
    while cols.len() < D {
        let mut v: Vec<f64> = (0..D).map(|_| StandardNormal.sample(r)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut q = vec![0.0; D * D];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            q[i * D + j] = *v;
        }
    }
    Tensor::new(vec![D, D], q).expect("shape")
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
    Tensor::from_rows(&rows).expect("rows")
}

fn loss_values(x: &Instance) -> Result<Vec<(&'static str, f64)>> {
    let sum = LossConfig::default();
    let hardest = LossConfig {
        negative_mode: NegativeMode::Hardest,
        ..LossConfig::default()
    };
    let mut out = Vec::new();
    let mut g = Graph::new();
    let views = EmbeddingBank::from_tensor(&mut g, x.views.clone())?;
    let p = x
        .paired
        .iter()
        .map(|t| EmbeddingBank::from_tensor(&mut g, t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let values = [
        ("nt_xent", nt_xent(&mut g, &views, sum.temperature)?),
        ("weighted_hinge_sum", weighted_hinge(&mut g, &p[0], &p[1], &sum)?),
        ("weighted_hinge_hardest", weighted_hinge(&mut g, &p[0], &p[1], &hardest)?),
        ("mm_infonce", mm_infonce(&mut g, &p[0], &p[1], sum.temperature, sum.lambda)?),
        ("mm_simclr_loss", mm_simclr_loss(&mut g, &views, &p[0], &p[1], &sum)?),
        ("ext_pie_loss", ext_pie_loss(&mut g, &p[0], &p[1], &p[2], &p[3], &p[4], &sum)?),
        (
            "ext_pie_loss_hardest",
            ext_pie_loss(&mut g, &p[0], &p[1], &p[2], &p[3], &p[4], &hardest)?,
        ),
    ];
    for (name, v) in values {
        out.push((name, g.value(v).item()));
    }
    Ok(out)
}

fn compare(
    base: &[(&'static str, f64)],
    moved: &[(&'static str, f64)],
    transform: Transform,
    seed: u64,
) -> Vec<InvarianceOutcome> {
    base.iter()
        .zip(moved)
        .map(|(&(loss, a), &(_, b))| InvarianceOutcome {
            loss,
            transform,
            seed,
            change: (a - b).abs(),
        })
        .collect()
}

fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let l = cross_entropy(&mut g, v, labels)?;
    Ok(g.value(l).item())
}

/// All three transforms applied to one random instance.
pub fn check_seed(seed: u64) -> Result<Vec<InvarianceOutcome>> {
    let mut r = rng::from_draw(rng::derive_seed(seed, "invariance"));
    let x = Instance {
        views: normal(&mut r, 2 * N, D),
        paired: (0..5).map(|_| normal(&mut r, N, D)).collect(),
    };
    let base = loss_values(&x)?;
    let mut out = Vec::new();

    let q = rotation(&mut r);
    let rotated = x.map(|t| t.matmul(&q).expect("rotation shape"));
    out.extend(compare(&base, &loss_values(&rotated)?, Transform::Rotation, seed));

    let mut scale_rows = |t: &Tensor| {
        let mut s = t.clone();
        for row in s.data_mut().chunks_mut(D) {
            let k: f64 = r.random_range(0.05..20.0);
            row.iter_mut().for_each(|v| *v *= k);
        }
        s
    };
    let scaled = Instance {
        views: scale_rows(&x.views),
        paired: x.paired.iter().map(&mut scale_rows).collect(),
    };
    out.extend(compare(&base, &loss_values(&scaled)?, Transform::RowRescale, seed));

    let mut perm: Vec<usize> = (0..N).collect();
    for i in (1..N).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let view_perm: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|p| p + N)).collect();
    let permuted = Instance {
        views: permute_rows(&x.views, &view_perm),
        paired: x.paired.iter().map(|t| permute_rows(t, &perm)).collect(),
    };
    out.extend(compare(&base, &loss_values(&permuted)?, Transform::Permutation, seed));

    let labels: Vec<usize> = (0..N).map(|_| r.random_range(0..D)).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
    let a = cross_entropy_value(&x.paired[0], &labels)?;
    let b = cross_entropy_value(&permute_rows(&x.paired[0], &perm), &moved)?;
    out.push(InvarianceOutcome {
        loss: "cross_entropy",
        transform: Transform::Permutation,
        seed,
        change: (a - b).abs(),
    });
    Ok(out)
}

/// [`check_seed`] for seeds `0..seeds`.
pub fn invariance_suite(seeds: u64) -> Result<Vec<InvarianceOutcome>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        out.extend(check_seed(seed)?);
    }
    Ok(out)
}
