//! Small trainable encoders and projection heads.
//!
//! Every layer reads its weights by name from a [`ParamStore`] bound to the
//! current graph, so the same struct serves training (differentiable leaves)
//! and frozen inference (constants).

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;

/// Token id reserved for padding.
pub const PAD: usize = 0;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Xavier-uniform weight, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.insert_xavier(&self.weight_name(), self.in_dim, self.out_dim, rng);
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.in_dim {
            return Err(Error::dim(format!(
                "{} expects width {}, got {d}",
                self.name, self.in_dim
            )));
        }
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Runs `f` on a throwaway graph with constant parameters and returns row 0.
fn single_row(
    store: &ParamStore,
    input: Tensor,
    f: impl FnOnce(&mut Graph, &Bound, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let x = g.constant(input);
    let y = f(&mut g, &p, x)?;
    let out = g.value(y);
    let (_, d) = out.dims2()?;
    Ok(Tensor::vector(out.data()[..d].to_vec()))
}

/// Feature-grid dimensions `H x W x C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridDims {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Two-layer perceptron over a flattened feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub grid: GridDims,
    hidden: Linear,
    out: Linear,
}

impl ImageEncoder {
    pub fn new(prefix: &str, grid: GridDims, hidden: usize, d_enc: usize) -> Self {
        Self {
            grid,
            hidden: Linear::new(format!("{prefix}.fc1"), grid.numel(), hidden),
            out: Linear::new(format!("{prefix}.fc2"), hidden, d_enc),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.hidden.init(store, rng);
        self.out.init(store, rng);
    }

    /// Encodes a batch of flattened grids `[N, H*W*C]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, grids: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, grids)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }

    /// Encodes one `[H, W, C]` grid.
    pub fn encode(&self, store: &ParamStore, grid: &Tensor) -> Result<Tensor> {
        if grid.shape() != self.grid.shape() {
            return Err(Error::dim(format!(
                "grid shape {:?}, encoder expects {:?}",
                grid.shape(),
                self.grid.shape()
            )));
        }
        let flat = grid.reshape(vec![1, self.grid.numel()])?;
        single_row(store, flat, |g, p, x| self.forward(g, p, x))
    }
}

/// Embedding table, padding-aware mean pool, then one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    table: String,
    pub vocab: usize,
    pub d_tok: usize,
    out: Linear,
}

impl TextEncoder {
    pub fn new(prefix: &str, vocab: usize, d_tok: usize, d_enc: usize) -> Self {
        Self {
            table: format!("{prefix}.embedding"),
            vocab,
            d_tok,
            out: Linear::new(format!("{prefix}.fc"), d_tok, d_enc),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.insert_xavier(&self.table, self.vocab, self.d_tok, rng);
        self.out.init(store, rng);
    }

    /// `[N, V]` matrix whose row `n` averages the one-hot codes of the
    /// non-padding tokens of sequence `n`.
    pub fn pooling_matrix(&self, batch: &[&[usize]]) -> Result<Tensor> {
        let v = self.vocab;
        let mut pool = Tensor::zeros(&[batch.len(), v]);
        for (n, seq) in batch.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&t| t >= v) {
                return Err(Error::Index(format!("token id {bad} with vocabulary {v}")));
            }
            let count = seq.iter().filter(|&&t| t != PAD).count();
            if count == 0 {
                return Err(Error::DegenerateInput(format!(
                    "sequence {n} contains only padding"
                )));
            }
            let w = 1.0 / count as f64;
            for &t in seq.iter().filter(|&&t| t != PAD) {
                pool.data_mut()[n * v + t] += w;
            }
        }
        Ok(pool)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&[usize]]) -> Result<Var> {
        let pool = g.constant(self.pooling_matrix(batch)?);
        let table = p.get(&self.table)?;
        let pooled = g.matmul(pool, table)?;
        self.out.forward(g, p, pooled)
    }

    pub fn encode(&self, store: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let y = self.forward(&mut g, &p, &[tokens])?;
        Ok(Tensor::vector(g.value(y).data().to_vec()))
    }
}

/// `d_enc -> hidden -> d` perceptron with ReLU; outputs are un-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    hidden: Linear,
    out: Linear,
}

impl ProjectionHead {
    pub fn new(prefix: &str, d_enc: usize, hidden: usize, dim: usize) -> Self {
        Self {
            hidden: Linear::new(format!("{prefix}.fc1"), d_enc, hidden),
            out: Linear::new(format!("{prefix}.fc2"), hidden, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.hidden.init(store, rng);
        self.out.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, rep: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, rep)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }

    pub fn project(&self, store: &ParamStore, rep: &Tensor) -> Result<Tensor> {
        if rep.shape() != [self.hidden.in_dim] {
            return Err(Error::dim(format!(
                "representation shape {:?}, head expects [{}]",
                rep.shape(),
                self.hidden.in_dim
            )));
        }
        let x = rep.reshape(vec![1, rep.numel()])?;
        single_row(store, x, |g, p, x| self.forward(g, p, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn grid2() -> GridDims {
        GridDims {
            height: 2,
            width: 2,
            channels: 1,
        }
    }

    #[test]
    fn zero_grid_gives_zero_rep() {
        let enc = ImageEncoder::new("img", grid2(), 3, 2);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut Rng::seed_from_u64(1));
        let out = enc.encode(&store, &Tensor::zeros(&[2, 2, 1])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        assert!(enc.encode(&store, &Tensor::zeros(&[2, 3, 1])).is_err());
    }

    #[test]
    fn image_encoder_hand_composition() {
        let enc = ImageEncoder::new("img", grid2(), 2, 1);
        let mut store = ParamStore::new();
        // fc1: 4 -> 2, fc2: 2 -> 1
        let w1 = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        store.insert("img.fc1.weight", Tensor::new(vec![4, 2], w1.clone()).unwrap());
        store.insert("img.fc1.bias", Tensor::vector(vec![0.05, -0.05]));
        store.insert("img.fc2.weight", Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap());
        store.insert("img.fc2.bias", Tensor::vector(vec![0.25]));
        let x = [1.0, 2.0, -1.0, 0.5];
        let grid = Tensor::new(vec![2, 2, 1], x.to_vec()).unwrap();

        let mut h = [0.05, -0.05];
        for (i, xi) in x.iter().enumerate() {
            h[0] += xi * w1[i * 2];
            h[1] += xi * w1[i * 2 + 1];
        }
        let h: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
        let expected = 0.25 + 1.5 * h[0] - 2.0 * h[1];
        let out = enc.encode(&store, &grid).unwrap();
        assert!((out.item() - expected).abs() < 1e-14);
        assert_eq!(out, enc.encode(&store, &grid).unwrap());
    }

    #[test]
    fn text_encoder_pooling() {
        let enc = TextEncoder::new("txt", 6, 4, 3);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut Rng::seed_from_u64(2));
        let a = enc.encode(&store, &[3, 5]).unwrap();
        let b = enc.encode(&store, &[5, 3]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(
            enc.encode(&store, &[4, PAD, PAD]).unwrap(),
            enc.encode(&store, &[4]).unwrap()
        );

        // single token: perceptron applied to that embedding row
        let table = store.get("txt.embedding").unwrap();
        let w = store.get("txt.fc.weight").unwrap();
        let row = Tensor::new(vec![1, 4], table.row(2).to_vec()).unwrap();
        let expected = row.matmul(w).unwrap();
        let got = enc.encode(&store, &[2]).unwrap();
        for (x, y) in got.data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-15);
        }

        assert!(matches!(enc.encode(&store, &[PAD, PAD]), Err(Error::DegenerateInput(_))));
        assert!(matches!(enc.encode(&store, &[1, 6]), Err(Error::Index(_))));
    }

    #[test]
    fn projection_head_cases() {
        let head = ProjectionHead::new("head", 3, 3, 2);
        let mut store = ParamStore::new();
        head.init(&mut store, &mut Rng::seed_from_u64(5));
        let z = head.project(&store, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        assert!(head.project(&store, &Tensor::zeros(&[4])).is_err());

        // identity first layer, positive input: output is x W2
        store.insert("head.fc1.weight", Tensor::eye(3));
        let w2 = store.get("head.fc2.weight").unwrap().clone();
        let x = Tensor::vector(vec![0.3, 1.2, 0.7]);
        let out = head.project(&store, &x).unwrap();
        let expected = x.reshape(vec![1, 3]).unwrap().matmul(&w2).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn init_biases_zero_and_deterministic() {
        let enc = ImageEncoder::new("img", grid2(), 8, 4);
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        enc.init(&mut s1, &mut Rng::seed_from_u64(9));
        enc.init(&mut s2, &mut Rng::seed_from_u64(9));
        assert_eq!(s1, s2);
        for (k, t) in s1.iter() {
            if k.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}
