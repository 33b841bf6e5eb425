//! Finite-difference gradient suite over every objective and trainable block.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::encoders::{GridDims, ImageEncoder, TextEncoder};
use crate::engine::gradcheck::{self, DEFAULT_STEP};
use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::CoAttentionBlock;
use crate::losses::{
    cross_entropy, ext_pie_loss, mm_infonce, mm_simclr_loss, nt_xent, weighted_hinge,
    EmbeddingBank, LossConfig, NegativeMode,
};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Rng};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: u64 = 10;

/// Every operation the suite covers, in report order.
pub const SUITE_OPS: [&str; 10] = [
    "nt_xent",
    "weighted_hinge_sum",
    "weighted_hinge_hardest",
    "mm_infonce",
    "mm_simclr_loss",
    "ext_pie_loss",
    "cross_entropy",
    "coattend",
    "image_encoder",
    "text_encoder",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

const N: usize = 4;
const D: usize = 5;

fn normal(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn bank(g: &mut Graph, v: Var) -> Result<EmbeddingBank> {
    EmbeddingBank::normalize(g, v)
}

/// Weighted sum of `out` with fixed random weights, giving a scalar whose
/// gradient exercises every output entry.
fn project_scalar(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod, None)
}

/// Checks a block whose parameters live in `store`, with extra leading inputs.
fn check_with_params<F>(store: &ParamStore, extra: Vec<Tensor>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs = extra;
    let n_extra = inputs.len();
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let res = gradcheck::check(&inputs, DEFAULT_STEP, |g, vars| {
        let bound: BTreeMap<String, Var> = names.iter().cloned().zip(vars[n_extra..].iter().copied()).collect();
        f(g, &Bound::from_vars(bound), &vars[..n_extra])
    })?;
    Ok(res.max_rel_error)
}

/// Runs one operation's check for one seed.
pub fn check_op(op: &str, seed: u64) -> Result<CheckOutcome> {
    let name = SUITE_OPS
        .into_iter()
        .find(|o| *o == op)
        .ok_or_else(|| Error::Config(format!("no gradient check named {op:?}")))?;
    let mut r = rng::from_draw(rng::derive_indexed(seed, name, &[]));
    let cfg = LossConfig::default();
    let err = match name {
        "nt_xent" => {
            let x = normal(&mut r, &[2 * N, D]);
            gradcheck::check(&[x], DEFAULT_STEP, |g, v| {
                let b = bank(g, v[0])?;
                nt_xent(g, &b, cfg.temperature)
            })?
            .max_rel_error
        }
        "weighted_hinge_sum" | "weighted_hinge_hardest" => {
            let mode = if name.ends_with("sum") {
                NegativeMode::Sum
            } else {
                NegativeMode::Hardest
            };
            let cfg = LossConfig {
                negative_mode: mode,
                ..cfg.clone()
            };
            let (u, v) = (normal(&mut r, &[N, D]), normal(&mut r, &[N, D]));
            gradcheck::check(&[u, v], DEFAULT_STEP, |g, x| {
                let (u, v) = (bank(g, x[0])?, bank(g, x[1])?);
                weighted_hinge(g, &u, &v, &cfg)
            })?
            .max_rel_error
        }
        "mm_infonce" => {
            let (u, v) = (normal(&mut r, &[N, D]), normal(&mut r, &[N, D]));
            gradcheck::check(&[u, v], DEFAULT_STEP, |g, x| {
                let (u, v) = (bank(g, x[0])?, bank(g, x[1])?);
                mm_infonce(g, &u, &v, cfg.temperature, 0.3)
            })?
            .max_rel_error
        }
        "mm_simclr_loss" => {
            let inputs = vec![normal(&mut r, &[2 * N, D]), normal(&mut r, &[N, D]), normal(&mut r, &[N, D])];
            gradcheck::check(&inputs, DEFAULT_STEP, |g, x| {
                let views = bank(g, x[0])?;
                let (u, v) = (bank(g, x[1])?, bank(g, x[2])?);
                mm_simclr_loss(g, &views, &u, &v, &cfg)
            })?
            .max_rel_error
        }
        "ext_pie_loss" => {
            let inputs: Vec<Tensor> = (0..5).map(|_| normal(&mut r, &[N, D])).collect();
            gradcheck::check(&inputs, DEFAULT_STEP, |g, x| {
                let b = x.iter().map(|&v| bank(g, v)).collect::<Result<Vec<_>>>()?;
                ext_pie_loss(g, &b[0], &b[1], &b[2], &b[3], &b[4], &cfg)
            })?
            .max_rel_error
        }
        "cross_entropy" => {
            let logits = normal(&mut r, &[N, 3]);
            let labels = [0, 2, 1, 2];
            gradcheck::check(&[logits], DEFAULT_STEP, |g, x| cross_entropy(g, x[0], &labels))?.max_rel_error
        }
        "coattend" => {
            let block = CoAttentionBlock::new("co", 4, 2);
            let mut store = ParamStore::new();
            block.init(&mut store, &mut r);
            let (t, i, w) = (normal(&mut r, &[3, 4]), normal(&mut r, &[3, 4]), normal(&mut r, &[3, 4]));
            check_with_params(&store, vec![t, i], |g, p, x| {
                let out = block.coattend(g, p, x[0], x[1])?;
                project_scalar(g, out, &w)
            })?
        }
        "image_encoder" => {
            let grid = GridDims {
                height: 2,
                width: 2,
                channels: 1,
            };
            let enc = ImageEncoder::new("img", grid, 3, 2);
            let mut store = ParamStore::new();
            enc.init(&mut store, &mut r);
            let (x, w) = (normal(&mut r, &[3, 4]), normal(&mut r, &[3, 2]));
            check_with_params(&store, vec![x], |g, p, x| {
                let out = enc.forward(g, p, x[0])?;
                project_scalar(g, out, &w)
            })?
        }
        "text_encoder" => {
            let enc = TextEncoder::new("txt", 6, 3, 2);
            let mut store = ParamStore::new();
            enc.init(&mut store, &mut r);
            let w = normal(&mut r, &[3, 2]);
            let tokens: [&[usize]; 3] = [&[1, 2, 0], &[5, 5, 3], &[4, 0, 0]];
            check_with_params(&store, vec![], |g, p, _| {
                let out = enc.forward(g, p, &tokens)?;
                project_scalar(g, out, &w)
            })?
        }
        _ => unreachable!("listed in SUITE_OPS"),
    };
    Ok(CheckOutcome {
        op: name,
        seed,
        max_rel_error: err,
    })
}

/// Every operation for seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(SUITE_OPS.len() * seeds as usize);
    for op in SUITE_OPS {
        for seed in 0..seeds {
            out.push(check_op(op, seed)?);
        }
    }
    Ok(out)
}
