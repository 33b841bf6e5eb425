//! Contrastive, ranking and classification objectives.
//!
//! Every loss works on [`EmbeddingBank`]s, whose rows are unit-normalized on
//! construction, so all similarities are cosine similarities. Batch losses are
//! means over anchors, which keeps magnitudes independent of batch size.

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Batch of unit-norm embeddings recorded on a graph.
///
/// As an augmented-view bank with `2N` rows, rows `i` and `i + N` are the two
/// views of sample `i`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingBank {
    rows: Var,
    len: usize,
    dim: usize,
}

impl EmbeddingBank {
    /// Normalizes every row of `raw` (an `[n, d]` node) to unit length.
    pub fn normalize(g: &mut Graph, raw: Var) -> Result<Self> {
        let (len, dim) = g.value(raw).dims2()?;
        let rows = g.l2_normalize(raw)?;
        Ok(Self { rows, len, dim })
    }

    pub fn from_tensor(g: &mut Graph, t: Tensor) -> Result<Self> {
        let raw = g.constant(t);
        Self::normalize(g, raw)
    }

    /// Stacks two banks so that row `i` of `a` pairs with row `i` of `b`.
    pub fn stack_views(g: &mut Graph, a: &Self, b: &Self) -> Result<Self> {
        if a.len != b.len || a.dim != b.dim {
            return Err(Error::dim(format!(
                "view banks [{}x{}] and [{}x{}] differ",
                a.len, a.dim, b.len, b.dim
            )));
        }
        let rows = g.concat_rows(&[a.rows, b.rows])?;
        Ok(Self {
            rows,
            len: a.len * 2,
            dim: a.dim,
        })
    }

    pub fn var(&self) -> Var {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// How the hinge loss aggregates violating negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NegativeMode {
    /// Sum over every in-batch negative (VSE).
    #[default]
    Sum,
    /// Only the most violating negative (VSE++).
    Hardest,
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "hardest" => Ok(Self::Hardest),
            other => Err(Error::Config(format!("unknown negative mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Hardest => "hardest",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    /// Weight of the image-to-text direction in the cross-modal InfoNCE.
    pub lambda: f64,
    pub lambda_u2v: f64,
    pub lambda_v2u: f64,
    pub lambda_f2f: f64,
    pub lambda_f2i: f64,
    pub lambda_f2t: f64,
    pub negative_mode: NegativeMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            margin: 0.2,
            lambda: 0.5,
            lambda_u2v: 0.5,
            lambda_v2u: 0.5,
            lambda_f2f: 0.6,
            lambda_f2i: 0.2,
            lambda_f2t: 0.2,
            negative_mode: NegativeMode::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        let weights = [
            self.lambda_u2v,
            self.lambda_v2u,
            self.lambda_f2f,
            self.lambda_f2i,
            self.lambda_f2t,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_f2f + self.lambda_f2i + self.lambda_f2t <= 0.0 {
            return Err(Error::Config("fusion loss weights sum to zero".into()));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be > 0, got {tau}")))
    }
}

fn similarity(g: &mut Graph, a: &EmbeddingBank, b: &EmbeddingBank) -> Result<Var> {
    if a.dim != b.dim {
        return Err(Error::dim(format!("embedding width {} vs {}", a.dim, b.dim)));
    }
    let bt = g.transpose(b.rows)?;
    g.matmul(a.rows, bt)
}

fn same_len(a: &EmbeddingBank, b: &EmbeddingBank) -> Result<usize> {
    if a.len != b.len {
        return Err(Error::dim(format!("bank sizes {} vs {}", a.len, b.len)));
    }
    Ok(a.len)
}

/// NT-Xent over a `2N`-row view bank, averaged over both directions of every
/// positive pair.
pub fn nt_xent(g: &mut Graph, bank: &EmbeddingBank, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let rows = bank.len;
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::Pairing(format!(
            "view bank needs an even, non-zero row count, got {rows}"
        )));
    }
    let n = rows / 2;
    let sim = similarity(g, bank, bank)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let targets: Vec<usize> = (0..rows).map(|i| (i + n) % rows).collect();
    let mut self_mask = vec![false; rows * rows];
    for i in 0..rows {
        self_mask[i * rows + i] = true;
    }
    let per_row = g.softmax_cross_entropy(logits, &targets, Some(&self_mask))?;
    g.mean(per_row, None)
}

/// Bidirectional margin loss between paired banks `u` and `v`.
///
/// For anchor pair `i`, the `u -> v` term ranks every other `u_k` against
/// `v_i` and the `v -> u` term ranks every other `v_k` against `u_i`.
pub fn weighted_hinge(
    g: &mut Graph,
    u: &EmbeddingBank,
    v: &EmbeddingBank,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = same_len(u, v)?;
    if n < 2 {
        return Err(Error::NoNegatives(n));
    }
    let sim = similarity(g, u, v)?;
    let pos = g.diag(sim)?;
    let neg_pos = g.neg(pos);
    let mut off_diag = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        off_diag.data_mut()[i * n + i] = 0.0;
    }
    let off_diag = g.constant(off_diag);

    // column i holds the candidates for anchor i
    let sim_t = g.transpose(sim)?;
    let mut directions = Vec::with_capacity(2);
    for (cand, weight) in [(sim, cfg.lambda_u2v), (sim_t, cfg.lambda_v2u)] {
        let shifted = g.add_row(cand, neg_pos)?;
        let shifted = g.add_scalar(shifted, cfg.margin);
        let clamped = g.relu(shifted);
        let costs = g.mul(clamped, off_diag)?;
        let per_anchor = match cfg.negative_mode {
            NegativeMode::Sum => g.sum(costs, Some(0))?,
            NegativeMode::Hardest => g.max(costs, 0)?,
        };
        directions.push(g.scale(per_anchor, weight));
    }
    let total = g.add(directions[0], directions[1])?;
    g.mean(total, None)
}

/// Cross-modal InfoNCE with direction weight `lambda` on `u -> v`.
pub fn mm_infonce(
    g: &mut Graph,
    u: &EmbeddingBank,
    v: &EmbeddingBank,
    temperature: f64,
    lambda: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0,1], got {lambda}")));
    }
    let n = same_len(u, v)?;
    if n == 0 {
        return Err(Error::dim("empty banks"));
    }
    let sim = similarity(g, u, v)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let logits_t = g.transpose(logits)?;
    let targets: Vec<usize> = (0..n).collect();
    let u2v = g.softmax_cross_entropy(logits, &targets, None)?;
    let v2u = g.softmax_cross_entropy(logits_t, &targets, None)?;
    let u2v = g.scale(u2v, lambda);
    let v2u = g.scale(v2u, 1.0 - lambda);
    let total = g.add(u2v, v2u)?;
    g.mean(total, None)
}

/// Image-view NT-Xent plus cross-modal InfoNCE.
pub fn mm_simclr_loss(
    g: &mut Graph,
    image_views: &EmbeddingBank,
    u: &EmbeddingBank,
    v: &EmbeddingBank,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = same_len(u, v)?;
    if image_views.len != 2 * n {
        return Err(Error::dim(format!(
            "{} view rows for {n} paired samples",
            image_views.len
        )));
    }
    let cross = mm_infonce(g, u, v, cfg.temperature, cfg.lambda)?;
    let views = nt_xent(g, image_views, cfg.temperature)?;
    g.add(cross, views)
}

/// Fused-view NT-Xent plus image/text hinge terms against the fused
/// representation. Components with zero weight are not evaluated.
pub fn ext_pie_loss(
    g: &mut Graph,
    f1: &EmbeddingBank,
    f2: &EmbeddingBank,
    f: &EmbeddingBank,
    image: &EmbeddingBank,
    text: &EmbeddingBank,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = f.len;
    for b in [f1, f2, image, text] {
        if b.len != n || b.dim != f.dim {
            return Err(Error::dim(format!(
                "bank [{}x{}] does not match [{}x{}]",
                b.len, b.dim, n, f.dim
            )));
        }
    }
    let mut terms = Vec::with_capacity(3);
    if cfg.lambda_f2f != 0.0 {
        let views = EmbeddingBank::stack_views(g, f1, f2)?;
        let l = nt_xent(g, &views, cfg.temperature)?;
        terms.push(g.scale(l, cfg.lambda_f2f));
    }
    if cfg.lambda_f2i != 0.0 {
        let l = weighted_hinge(g, image, f, cfg)?;
        terms.push(g.scale(l, cfg.lambda_f2i));
    }
    if cfg.lambda_f2t != 0.0 {
        let l = weighted_hinge(g, text, f, cfg)?;
        terms.push(g.scale(l, cfg.lambda_f2t));
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::Config("fusion loss weights sum to zero".into()))?;
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(total)
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, classes) = g.value(logits).dims2()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index(format!("label {bad} with {classes} classes")));
    }
    let per_row = g.softmax_cross_entropy(logits, labels, None)?;
    g.mean(per_row, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(g: &mut Graph, rows: &[&[f64]]) -> EmbeddingBank {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        EmbeddingBank::from_tensor(g, t).unwrap()
    }

    #[test]
    fn nt_xent_single_pair_is_zero() {
        for tau in [0.05, 0.1, 1.0, 7.0] {
            let mut g = Graph::new();
            let b = bank(&mut g, &[&[0.3, 0.4, 1.0], &[0.3, 0.4, 1.0]]);
            let l = nt_xent(&mut g, &b, tau).unwrap();
            assert_eq!(g.value(l).item(), 0.0);
        }
    }

    #[test]
    fn nt_xent_orthogonal_is_ln3() {
        let mut g = Graph::new();
        let eye = Tensor::eye(4);
        let b = EmbeddingBank::from_tensor(&mut g, eye).unwrap();
        let l = nt_xent(&mut g, &b, 1.0).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_errors() {
        let mut g = Graph::new();
        let b = bank(&mut g, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(nt_xent(&mut g, &b, 0.1), Err(Error::Pairing(_))));
        let b = bank(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(nt_xent(&mut g, &b, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn hinge_hand_case() {
        let mut g = Graph::new();
        let u = bank(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = bank(&mut g, &[&[0.6, 0.8], &[0.0, 1.0]]);
        let cfg = LossConfig {
            margin: 0.2,
            lambda_u2v: 0.5,
            lambda_v2u: 0.5,
            ..LossConfig::default()
        };
        let l = weighted_hinge(&mut g, &u, &v, &cfg).unwrap();
        assert!((g.value(l).item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn hinge_identity_alignment_is_zero() {
        for mode in [NegativeMode::Sum, NegativeMode::Hardest] {
            let mut g = Graph::new();
            let u = EmbeddingBank::from_tensor(&mut g, Tensor::eye(3)).unwrap();
            let cfg = LossConfig {
                margin: 1.0,
                negative_mode: mode,
                ..LossConfig::default()
            };
            let l = weighted_hinge(&mut g, &u, &u, &cfg).unwrap();
            assert_eq!(g.value(l).item(), 0.0);
        }
    }

    #[test]
    fn hinge_errors() {
        let mut g = Graph::new();
        let one = bank(&mut g, &[&[1.0, 0.0]]);
        let two = bank(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = LossConfig::default();
        assert!(matches!(weighted_hinge(&mut g, &one, &one, &cfg), Err(Error::NoNegatives(1))));
        assert!(matches!(weighted_hinge(&mut g, &one, &two, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn infonce_analytic_cases() {
        let mut g = Graph::new();
        let u = bank(&mut g, &[&[0.2, -0.7]]);
        let v = bank(&mut g, &[&[5.0, 1.0]]);
        let l = mm_infonce(&mut g, &u, &v, 0.1, 0.3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let e = EmbeddingBank::from_tensor(&mut g, Tensor::eye(2)).unwrap();
        let l = mm_infonce(&mut g, &e, &e, 1.0, 0.5).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        assert!(mm_infonce(&mut g, &e, &e, -1.0, 0.5).is_err());
    }

    #[test]
    fn mm_simclr_degenerate_is_zero() {
        let mut g = Graph::new();
        let views = bank(&mut g, &[&[1.0, 2.0], &[1.0, 2.0]]);
        let u = bank(&mut g, &[&[0.0, 1.0]]);
        let v = bank(&mut g, &[&[0.0, 3.0]]);
        let l = mm_simclr_loss(&mut g, &views, &u, &v, &LossConfig::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn ext_pie_vanishes_on_identical_orthonormal_banks() {
        // The hinge terms are exactly 0; the NT-Xent term is ln(1 + 2(N-1)e^{-1/tau})
        // which underflows to 0 at small temperature.
        let mut g = Graph::new();
        let e = EmbeddingBank::from_tensor(&mut g, Tensor::eye(3)).unwrap();
        let cfg = LossConfig {
            margin: 1.0,
            temperature: 0.01,
            ..LossConfig::default()
        };
        let l = ext_pie_loss(&mut g, &e, &e, &e, &e, &e, &cfg).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let hinge_only = LossConfig {
            lambda_f2f: 0.0,
            temperature: 1.0,
            ..cfg
        };
        let l = ext_pie_loss(&mut g, &e, &e, &e, &e, &e, &hinge_only).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 2]));
        let l = cross_entropy(&mut g, z, &[0, 1, 1]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let dom = g.constant(Tensor::from_rows(&[vec![50.0, 0.0], vec![0.0, 50.0]]).unwrap());
        let l = cross_entropy(&mut g, dom, &[0, 1]).unwrap();
        assert!(g.value(l).item().abs() < 1e-9);

        assert!(matches!(cross_entropy(&mut g, dom, &[0, 2]), Err(Error::Index(_))));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            lambda_f2f: 0.0,
            lambda_f2i: 0.0,
            lambda_f2t: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            temperature: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
