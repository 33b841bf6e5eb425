//! Every objective is unchanged by a common rotation of the embedding space,
//! by positive per-row rescaling before normalization, and by a consistent
//! permutation of the batch.

use mmssl::losses::{
    cross_entropy, ext_pie_loss, mm_infonce, mm_simclr_loss, nt_xent, weighted_hinge,
    EmbeddingBank, LossConfig, NegativeMode,
};
use mmssl::rng::from_draw;
use mmssl::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const TOL: f64 = 1e-9;
const N: usize = 5;
const D: usize = 6;

/// Raw (unnormalized) banks of one problem instance. Banks listed in
/// `paired` have `N` rows; `views` has `2N` rows arranged `(a_1..a_N, b_1..b_N)`.
#[derive(Clone, Debug)]
struct Instance {
    views: Tensor,
    paired: Vec<Tensor>,
}

fn normal(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

fn instance(seed: u64) -> Instance {
    let mut r = from_draw(seed);
    Instance {
        views: normal(&mut r, 2 * N, D),
        paired: (0..5).map(|_| normal(&mut r, N, D)).collect(),
    }
}

/// Orthogonal `D x D` matrix from Gram-Schmidt on a gaussian matrix.
fn rotation(seed: u64) -> Tensor {
    let mut r = from_draw(seed ^ 0x5eed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < D {
        let mut v: Vec<f64> = (0..D).map(|_| StandardNormal.sample(&mut r)).collect();
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
    Tensor::new(vec![D, D], q).unwrap()
}

fn scale_rows(t: &Tensor, r: &mut impl Rng) -> Tensor {
    let (n, d) = t.dims2().unwrap();
    let mut out = t.clone();
    for i in 0..n {
        let s: f64 = r.random_range(0.05..20.0);
        out.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= s);
    }
    out
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let (_, d) = t.dims2().unwrap();
    let mut data = Vec::with_capacity(perm.len() * d);
    for &p in perm {
        data.extend_from_slice(t.row(p));
    }
    Tensor::new(vec![perm.len(), d], data).unwrap()
}

fn permutation(seed: u64) -> Vec<usize> {
    let mut r = from_draw(seed ^ 0xbeef);
    let mut p: Vec<usize> = (0..N).collect();
    for i in (1..N).rev() {
        p.swap(i, r.random_range(0..=i));
    }
    p
}

fn banks(g: &mut Graph, ts: &[Tensor]) -> Vec<EmbeddingBank> {
    ts.iter()
        .map(|t| {
            let v = g.constant(t.clone());
            EmbeddingBank::normalize(g, v).unwrap()
        })
        .collect()
}

/// Value of every embedding objective on one instance.
fn all_losses(x: &Instance) -> Vec<(&'static str, f64)> {
    let sum = LossConfig::default();
    let hardest = LossConfig {
        negative_mode: NegativeMode::Hardest,
        ..LossConfig::default()
    };
    let mut out = Vec::new();
    let mut eval = |name: &'static str, f: &dyn Fn(&mut Graph, &EmbeddingBank, &[EmbeddingBank]) -> mmssl::Var| {
        let mut g = Graph::new();
        let views = banks(&mut g, std::slice::from_ref(&x.views)).remove(0);
        let p = banks(&mut g, &x.paired);
        let l = f(&mut g, &views, &p);
        out.push((name, g.value(l).item()));
    };
    eval("nt_xent", &|g, v, _| nt_xent(g, v, 0.1).unwrap());
    eval("hinge_sum", &|g, _, p| weighted_hinge(g, &p[0], &p[1], &sum).unwrap());
    eval("hinge_hardest", &|g, _, p| weighted_hinge(g, &p[0], &p[1], &hardest).unwrap());
    eval("mm_infonce", &|g, _, p| mm_infonce(g, &p[0], &p[1], 0.1, 0.3).unwrap());
    eval("mm_simclr", &|g, v, p| mm_simclr_loss(g, v, &p[0], &p[1], &sum).unwrap());
    eval("ext_pie", &|g, _, p| ext_pie_loss(g, &p[0], &p[1], &p[2], &p[3], &p[4], &sum).unwrap());
    eval("ext_pie_hardest", &|g, _, p| {
        ext_pie_loss(g, &p[0], &p[1], &p[2], &p[3], &p[4], &hardest).unwrap()
    });
    out
}

fn assert_same(a: &[(&str, f64)], b: &[(&str, f64)]) {
    for ((name, x), (_, y)) in a.iter().zip(b) {
        assert!((x - y).abs() < TOL, "{name}: {x} vs {y}");
    }
}

fn map(x: &Instance, f: impl Fn(&Tensor) -> Tensor) -> Instance {
    Instance {
        views: f(&x.views),
        paired: x.paired.iter().map(&f).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_invariance(seed in any::<u64>()) {
        let x = instance(seed);
        let q = rotation(seed);
        let rotated = map(&x, |t| t.matmul(&q).unwrap());
        assert_same(&all_losses(&x), &all_losses(&rotated));
    }

    #[test]
    fn row_rescaling_invariance(seed in any::<u64>()) {
        let x = instance(seed);
        let mut r = from_draw(seed ^ 0x5ca1e);
        let scaled = Instance {
            views: scale_rows(&x.views, &mut r),
            paired: x.paired.iter().map(|t| scale_rows(t, &mut r)).collect(),
        };
        assert_same(&all_losses(&x), &all_losses(&scaled));
    }

    #[test]
    fn batch_permutation_invariance(seed in any::<u64>()) {
        let x = instance(seed);
        let perm = permutation(seed);
        let view_perm: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|p| p + N)).collect();
        let permuted = Instance {
            views: permute_rows(&x.views, &view_perm),
            paired: x.paired.iter().map(|t| permute_rows(t, &perm)).collect(),
        };
        assert_same(&all_losses(&x), &all_losses(&permuted));

        let logits = x.paired[0].clone();
        let labels: Vec<usize> = (0..N).map(|i| (i * 7 + seed as usize) % D).collect();
        let plabels: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
        let ce = |t: &Tensor, y: &[usize]| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = cross_entropy(&mut g, v, y).unwrap();
            g.value(l).item()
        };
        let a = ce(&logits, &labels);
        let b = ce(&permute_rows(&logits, &perm), &plabels);
        prop_assert!((a - b).abs() < TOL);
    }
}
