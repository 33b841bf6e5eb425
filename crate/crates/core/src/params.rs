//! Named parameter storage and the checkpoint file format.
//!
//! Checkpoints are line-oriented text:
//!
//! ```text
//! mmssl-checkpoint 1
//! meta key=value key=value ...
//! param <name> <d0,d1,...>
//! <comma-separated values>
//! ...
//! digest <sha256 hex of every preceding line, newline-terminated>
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a save/load cycle is
//! bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::engine::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &str = "mmssl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

/// Parameters recorded as leaves of one graph.
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps already-recorded variables, e.g. leaves of a gradient check.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} not bound")))
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }
}

/// Xavier/Glorot uniform bound for a `fan_in x fan_out` weight.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Adds a `[fan_in, fan_out]` Xavier-uniform weight.
    pub fn insert_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let bound = xavier_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape");
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn freeze_all(&mut self) {
        self.freeze("");
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Drops every parameter under `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
        self.frozen.retain(|k| !k.starts_with(prefix));
    }

    /// Records parameters on `g`; frozen ones become constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if self.frozen.contains(k) {
                    g.constant(t.clone())
                } else {
                    g.param(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            h.update([0]);
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        to_hex(&h.finalize())
    }

    pub fn to_checkpoint(&self, meta: &BTreeMap<String, String>) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        out.push_str("meta");
        for (k, v) in meta {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
        for (k, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "param {k} {}", shape.join(","));
            let vals: Vec<String> = t.data().iter().map(f64::to_string).collect();
            out.push_str(&vals.join(","));
            out.push('\n');
        }
        let digest = to_hex(&Sha256::digest(out.as_bytes()));
        let _ = writeln!(out, "digest {digest}");
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let body_end = text
            .rfind("digest ")
            .ok_or_else(|| Error::Format("checkpoint has no digest line".into()))?;
        let (body, tail) = text.split_at(body_end);
        let expected = tail.trim_start_matches("digest ").trim_end();
        let actual = to_hex(&Sha256::digest(body.as_bytes()));
        if expected != actual {
            return Err(Error::Format("checkpoint digest mismatch (corrupted file)".into()));
        }

        let mut lines = body.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty checkpoint".into()))?;
        match header.split_once(' ') {
            Some((CHECKPOINT_MAGIC, v)) if v == CHECKPOINT_VERSION.to_string() => {}
            Some((CHECKPOINT_MAGIC, v)) => {
                return Err(Error::Format(format!(
                    "checkpoint version {v}, expected {CHECKPOINT_VERSION}"
                )))
            }
            _ => return Err(Error::Format("not a checkpoint file".into())),
        }
        let (ln, meta_line) = lines.next().ok_or_else(|| Error::parse(2, "missing meta line"))?;
        let meta_body = meta_line
            .strip_prefix("meta")
            .ok_or_else(|| Error::parse(ln, "expected meta line"))?;
        let meta = parse_key_values(meta_body, ln)?;

        let mut store = ParamStore::new();
        while let Some((ln, line)) = lines.next() {
            let mut parts = line.split(' ');
            let (Some("param"), Some(name), Some(shape), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::parse(ln, "expected `param <name> <shape>`"));
            };
            let shape = parse_list::<usize>(shape, ln)?;
            let (vln, values) = lines
                .next()
                .ok_or_else(|| Error::parse(ln + 1, "missing parameter values"))?;
            let values = parse_list::<f64>(values, vln)?;
            let t = Tensor::new(shape, values).map_err(|e| Error::parse(vln, e.to_string()))?;
            store.insert(name, t);
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        write_atomic(path, self.to_checkpoint(meta).as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(&text)
    }
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn parse_list<T: std::str::FromStr>(s: &str, line: usize) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.parse::<T>()
                .map_err(|_| Error::parse(line, format!("bad value {x:?}")))
        })
        .collect()
}

pub(crate) fn parse_key_values(s: &str, line: usize) -> Result<BTreeMap<String, String>> {
    s.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::parse(line, format!("expected key=value, got {kv:?}")))
        })
        .collect()
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
