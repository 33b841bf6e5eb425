//! Stochastic view generation for feature grids and token sequences.
//!
//! Both augmenters are pure functions of their input and an explicit `draw`
//! value; the caller owns the random stream that produces draws.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::PAD;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::from_draw;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub noise_prob: f64,
    pub noise_sigma: f64,
    pub mask_prob: f64,
    /// Fraction of grid cells covered by the zeroed patch.
    pub mask_fraction: f64,
    pub rescale_prob: f64,
    pub rescale_range: (f64, f64),
    /// Per-token synonym replacement probability.
    pub synonym_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_prob: 1.0,
            noise_sigma: 0.3,
            mask_prob: 0.5,
            mask_fraction: 0.25,
            rescale_prob: 1.0,
            rescale_range: (0.7, 1.3),
            synonym_prob: 0.3,
        }
    }
}

impl AugmentPolicy {
    /// Leaves every input unchanged.
    pub fn identity() -> Self {
        Self {
            noise_prob: 0.0,
            noise_sigma: 0.0,
            mask_prob: 0.0,
            mask_fraction: 0.0,
            rescale_prob: 0.0,
            rescale_range: (1.0, 1.0),
            synonym_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("noise_prob", self.noise_prob),
            ("mask_prob", self.mask_prob),
            ("rescale_prob", self.rescale_prob),
            ("synonym_prob", self.synonym_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::Config(format!(
                "mask_fraction must lie in [0,1), got {}",
                self.mask_fraction
            )));
        }
        let (lo, hi) = self.rescale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad rescale range ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Adds gaussian noise, zeroes a contiguous patch, and rescales values.
///
/// The output depends only on `grid`, `policy` and `draw`.
pub fn augment_image(grid: &Tensor, policy: &AugmentPolicy, draw: u64) -> Result<Tensor> {
    let [h, w, c] = match grid.shape() {
        [h, w, c] => [*h, *w, *c],
        s => return Err(Error::dim(format!("expected an [H, W, C] grid, got {s:?}"))),
    };
    let mut rng = from_draw(draw);
    let mut out = grid.clone();

    let noise_gate: f64 = rng.random();
    if noise_gate < policy.noise_prob && policy.noise_sigma > 0.0 {
        for v in out.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += policy.noise_sigma * z;
        }
    }

    let mask_gate: f64 = rng.random();
    if mask_gate < policy.mask_prob && policy.mask_fraction > 0.0 {
        let side = policy.mask_fraction.sqrt();
        let ph = ((h as f64 * side).ceil() as usize).clamp(1, h);
        let pw = ((w as f64 * side).ceil() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ph);
        let left = rng.random_range(0..=w - pw);
        for y in top..top + ph {
            for x in left..left + pw {
                let base = (y * w + x) * c;
                out.data_mut()[base..base + c].fill(0.0);
            }
        }
    }

    let rescale_gate: f64 = rng.random();
    let (lo, hi) = policy.rescale_range;
    if rescale_gate < policy.rescale_prob && (lo != 1.0 || hi != 1.0) {
        let s = if hi > lo { rng.random_range(lo..hi) } else { lo };
        for v in out.data_mut() {
            *v *= s;
        }
    }
    Ok(out)
}

/// Directed token substitution table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: BTreeMap<usize, Vec<usize>>,
}

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: usize, substitutes: Vec<usize>) {
        self.entries.insert(token, substitutes);
    }

    pub fn substitutes(&self, token: usize) -> &[usize] {
        self.entries.get(&token).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pairs tokens `2m-1 <-> 2m`, matching the synthetic vocabulary layout
    /// where the two tokens of a pair share their topic direction.
    pub fn paired(vocab: usize) -> Self {
        let mut lex = Self::new();
        let mut t = 1;
        while t + 1 < vocab {
            lex.insert(t, vec![t + 1]);
            lex.insert(t + 1, vec![t]);
            t += 2;
        }
        lex
    }

    /// Checks every id against the vocabulary size.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        for (&t, subs) in &self.entries {
            if let Some(&bad) = std::iter::once(&t).chain(subs).find(|&&id| id >= vocab) {
                return Err(Error::Index(format!(
                    "lexicon id {bad} outside vocabulary of {vocab}"
                )));
            }
        }
        Ok(())
    }

    /// Parses `token_id<TAB>sub[,sub...]` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (tok, subs) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(ln, "expected `token<TAB>substitutes`"))?;
            let tok: usize = tok
                .trim()
                .parse()
                .map_err(|_| Error::parse(ln, format!("bad token id {tok:?}")))?;
            let subs = subs
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::parse(ln, format!("bad substitute {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            lex.insert(tok, subs);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# token_id<TAB>substitute_id[,substitute_id...]\n");
        for (t, subs) in &self.entries {
            let subs: Vec<String> = subs.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{t}\t{}", subs.join(","));
        }
        out
    }
}

/// Replaces each non-padding token with probability `p` by a uniformly
/// chosen lexicon substitute. Tokens without substitutes pass through.
pub fn augment_text(tokens: &[usize], lexicon: &SynonymLexicon, p: f64, draw: u64) -> Vec<usize> {
    let mut rng = from_draw(draw);
    tokens
        .iter()
        .map(|&t| {
            let subs = lexicon.substitutes(t);
            if t == PAD || subs.is_empty() {
                return t;
            }
            let gate: f64 = rng.random();
            if gate < p {
                subs[rng.random_range(0..subs.len())]
            } else {
                t
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Tensor {
        Tensor::new(vec![4, 4, 2], (0..32).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let g = grid();
        for draw in 0..5 {
            assert_eq!(augment_image(&g, &AugmentPolicy::identity(), draw).unwrap(), g);
        }
    }

    #[test]
    fn near_full_mask_zeroes_grid() {
        let policy = AugmentPolicy {
            mask_prob: 1.0,
            mask_fraction: 1.0 - 1e-9,
            ..AugmentPolicy::identity()
        };
        let out = augment_image(&grid(), &policy, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn draws_are_deterministic() {
        let p = AugmentPolicy::default();
        let g = grid();
        assert_eq!(augment_image(&g, &p, 42).unwrap(), augment_image(&g, &p, 42).unwrap());
        assert_ne!(augment_image(&g, &p, 42).unwrap(), augment_image(&g, &p, 43).unwrap());
        assert_eq!(augment_image(&g, &p, 1).unwrap().shape(), g.shape());
    }

    #[test]
    fn text_identity_cases() {
        let lex = SynonymLexicon::paired(10);
        let toks = vec![1, 2, 3, 0, 0];
        assert_eq!(augment_text(&toks, &lex, 0.0, 9), toks);
        assert_eq!(augment_text(&toks, &SynonymLexicon::new(), 1.0, 9), toks);
        assert_eq!(augment_text(&toks, &lex, 1.0, 9), vec![2, 1, 4, 0, 0]);
    }

    #[test]
    fn replacement_rate_matches_probability() {
        let lex = SynonymLexicon::paired(8);
        let toks = [1, 2, 3, 4, 5, 6];
        let mut replaced = 0usize;
        let draws = 10_000u64;
        for d in 0..draws {
            let out = augment_text(&toks, &lex, 0.5, crate::rng::derive_indexed(5, "text", &[d]));
            replaced += out.iter().zip(&toks).filter(|(a, b)| a != b).count();
        }
        let rate = replaced as f64 / (draws as usize * toks.len()) as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn lexicon_file_roundtrip_and_errors() {
        let lex = SynonymLexicon::paired(7);
        let text = lex.to_file_string();
        assert_eq!(SynonymLexicon::parse(&text).unwrap(), lex);
        assert!(lex.validate(7).is_ok());
        assert!(lex.validate(5).is_err());

        let parsed = SynonymLexicon::parse("# c\n3\t4,5\n\n7\t1\n").unwrap();
        assert_eq!(parsed.substitutes(3), &[4, 5]);
        assert!(matches!(
            SynonymLexicon::parse("3\t4\n5 6\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            mask_fraction: 1.0,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            rescale_range: (0.0, 1.0),
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
