//! Pre-training loops for the six self-supervised methods, the linear probe,
//! and the label-fraction fine-tuning sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::augment::{augment_text, AugmentPolicy, SynonymLexicon};
use crate::data::{image_matrix, label_fraction_split, Dataset, PairedSample};
use crate::encoders::Linear;
use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{augmented_batch, ext_pie_forward};
use crate::losses::{
    cross_entropy, ext_pie_loss, mm_simclr_loss, nt_xent, weighted_hinge, EmbeddingBank,
    LossConfig, NegativeMode,
};
use crate::metrics::{accuracy, macro_f1, MetricsRow, RunMetrics, Split};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Rng};

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.01, 0.10, 0.20, 0.50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Simclr,
    ModSimclr,
    Vse,
    VsePp,
    MmSimclr,
    ExtPieNet,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Simclr,
        Method::ModSimclr,
        Method::Vse,
        Method::VsePp,
        Method::MmSimclr,
        Method::ExtPieNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Simclr => "simclr",
            Method::ModSimclr => "mod_simclr",
            Method::Vse => "vse",
            Method::VsePp => "vse_pp",
            Method::MmSimclr => "mm_simclr",
            Method::ExtPieNet => "ext_pie_net",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts both `mm_simclr` and `mm-simclr` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let canon = s.replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == canon)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer over named parameters. Frozen parameters are
/// never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub config: AdamConfig,
    step: i32,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, config: AdamConfig) -> Self {
        Self {
            learning_rate,
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (name, grad) in grads {
            if store.is_frozen(name) {
                continue;
            }
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::dim(format!("gradient shape mismatch for {name}")));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let moments = m.data_mut().iter_mut().zip(v.data_mut());
            for ((p, &g), (m, v)) in param.data_mut().iter_mut().zip(grad.data()).zip(moments) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    /// Reshuffle the sample order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::MmSimclr,
            batch_size: 32,
            epochs: 100,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentPolicy::default(),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.augment.validate()
    }

    /// Loss settings with the negative mode implied by the method.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        match self.method {
            Method::Vse => loss.negative_mode = NegativeMode::Sum,
            Method::VsePp => loss.negative_mode = NegativeMode::Hardest,
            _ => {}
        }
        loss
    }
}

fn shuffled(n: usize, r: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Batches of sample indices for one pre-training epoch. A trailing batch of
/// one sample is merged into the batch before it, since the in-batch
/// objectives need at least one negative.
pub fn epoch_batches(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = if shuffle {
        shuffled(n, &mut rng::from_draw(rng::derive_indexed(seed, "batches", &[epoch as u64])))
    } else {
        (0..n).collect()
    };
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

fn image_bank(model: &Model, g: &mut Graph, p: &Bound, images: Tensor) -> Result<EmbeddingBank> {
    let x = g.constant(images);
    let rep = model.image_encoder.forward(g, p, x)?;
    let z = model.image_head.forward(g, p, rep)?;
    EmbeddingBank::normalize(g, z)
}

fn text_bank(model: &Model, g: &mut Graph, p: &Bound, tokens: &[&[usize]]) -> Result<EmbeddingBank> {
    let rep = model.text_encoder.forward(g, p, tokens)?;
    let z = model.text_head.forward(g, p, rep)?;
    EmbeddingBank::normalize(g, z)
}

/// Builds the method's objective for one batch. `seed` fixes every
/// augmentation draw of the batch.
pub fn batch_loss(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    cfg: &TrainConfig,
    lexicon: &SynonymLexicon,
    samples: &[&PairedSample],
    seed: u64,
) -> Result<Var> {
    let loss = cfg.effective_loss();
    let policy = &cfg.augment;
    let tokens: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let views = |g: &mut Graph| -> Result<(EmbeddingBank, EmbeddingBank)> {
        let a = image_bank(model, g, p, augmented_batch(samples, policy, seed, "view1")?)?;
        let b = image_bank(model, g, p, augmented_batch(samples, policy, seed, "view2")?)?;
        Ok((a, b))
    };
    match cfg.method {
        Method::Simclr => {
            let (a, b) = views(g)?;
            let stacked = EmbeddingBank::stack_views(g, &a, &b)?;
            nt_xent(g, &stacked, loss.temperature)
        }
        Method::ModSimclr => {
            let (a, b) = views(g)?;
            let stacked = EmbeddingBank::stack_views(g, &a, &b)?;
            let image_term = nt_xent(g, &stacked, loss.temperature)?;
            let text_view = |label: &str| -> Vec<Vec<usize>> {
                samples
                    .iter()
                    .map(|s| {
                        let draw = rng::derive_indexed(seed, label, &[s.id]);
                        augment_text(&s.tokens, lexicon, policy.synonym_prob, draw)
                    })
                    .collect()
            };
            let (t1, t2) = (text_view("text1"), text_view("text2"));
            let t1: Vec<&[usize]> = t1.iter().map(Vec::as_slice).collect();
            let t2: Vec<&[usize]> = t2.iter().map(Vec::as_slice).collect();
            let ta = text_bank(model, g, p, &t1)?;
            let tb = text_bank(model, g, p, &t2)?;
            let stacked = EmbeddingBank::stack_views(g, &ta, &tb)?;
            let text_term = nt_xent(g, &stacked, loss.temperature)?;
            g.add(image_term, text_term)
        }
        Method::Vse | Method::VsePp => {
            let images = image_bank(model, g, p, image_matrix(samples)?)?;
            let text = text_bank(model, g, p, &tokens)?;
            weighted_hinge(g, &text, &images, &loss)
        }
        Method::MmSimclr => {
            let (a, b) = views(g)?;
            let stacked = EmbeddingBank::stack_views(g, &a, &b)?;
            let text = text_bank(model, g, p, &tokens)?;
            mm_simclr_loss(g, &stacked, &a, &text, &loss)
        }
        Method::ExtPieNet => {
            let e = ext_pie_forward(model, g, p, samples, policy, seed)?;
            ext_pie_loss(g, &e.f1, &e.f2, &e.f, &e.image, &e.text, &loss)
        }
    }
}

fn check_dataset(model: &ModelConfig, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::DegenerateInput("dataset is empty".into()));
    }
    if model.grid != dataset.grid || model.vocab != dataset.vocab {
        return Err(Error::Config(format!(
            "model expects grid {:?} and vocabulary {}, dataset has {:?} and {}",
            model.grid, model.vocab, dataset.grid, dataset.vocab
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Model,
    pub metrics: RunMetrics,
}

impl Pretrained {
    pub fn final_loss(&self) -> f64 {
        self.metrics.last(Split::Train).map_or(f64::NAN, |r| r.loss)
    }
}

/// Trains a freshly initialized model with the configured method.
pub fn pretrain(cfg: &TrainConfig, dataset: &Dataset, lexicon: &SynonymLexicon) -> Result<Pretrained> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone(), rng::derive_seed(cfg.seed, "model"))?;
    pretrain_model(model, cfg, dataset, lexicon)
}

/// Continues training `model` for `cfg.epochs` epochs; one metrics row per
/// epoch holds the mean batch loss.
pub fn pretrain_model(
    model: Model,
    cfg: &TrainConfig,
    dataset: &Dataset,
    lexicon: &SynonymLexicon,
) -> Result<Pretrained> {
    let mut trainer = Trainer::new(model, cfg, dataset, lexicon)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

/// Pre-training driven one epoch at a time. Running `k` epochs here gives the
/// same model and metrics as `pretrain_model` with `epochs = k`.
pub struct Trainer<'a> {
    model: Model,
    cfg: TrainConfig,
    dataset: &'a Dataset,
    lexicon: &'a SynonymLexicon,
    adam: Adam,
    metrics: RunMetrics,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// `cfg.epochs` is not consulted; the caller decides how many epochs run.
    pub fn new(model: Model, cfg: &TrainConfig, dataset: &'a Dataset, lexicon: &'a SynonymLexicon) -> Result<Self> {
        cfg.validate()?;
        check_dataset(&model.config, dataset)?;
        lexicon.validate(dataset.vocab)?;
        Ok(Self {
            model,
            cfg: cfg.clone(),
            dataset,
            lexicon,
            adam: Adam::new(cfg.learning_rate, cfg.adam),
            metrics: RunMetrics::new(cfg.method.as_str(), None),
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Trains one more epoch and returns its mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.epoch + 1;
        let cfg = &self.cfg;
        let epoch_seed = rng::derive_indexed(cfg.seed, "epoch", &[epoch as u64]);
        let batches = epoch_batches(self.dataset.len(), cfg.batch_size, cfg.shuffle, cfg.seed, epoch);
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let samples: Vec<&PairedSample> = idx.iter().map(|&i| &self.dataset.samples[i]).collect();
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let loss = batch_loss(&self.model, &mut g, &p, cfg, self.lexicon, &samples, epoch_seed)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            let grads = p.collect(&g.backward(loss)?);
            self.adam.step(&mut self.model.params, &grads)?;
            if !self.model.params.all_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            total += value;
        }
        let mean = total / batches.len() as f64;
        self.metrics.push(MetricsRow {
            epoch,
            split: Split::Train,
            loss: mean,
            accuracy: None,
            macro_f1: None,
        })?;
        self.epoch = epoch;
        Ok(mean)
    }

    pub fn finish(self) -> Pretrained {
        Pretrained {
            model: self.model,
            metrics: self.metrics,
        }
    }
}

/// Settings shared by the supervised heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Share of every class kept aside for evaluation.
    pub heldout_fraction: f64,
    /// Width of the hidden layer of the fine-tuning head.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 5e-4,
            epochs: 100,
            adam: AdamConfig::default(),
            heldout_fraction: 0.2,
            hidden: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.hidden == 0 {
            return Err(Error::Config("probe batch size, epochs and width must be positive".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "heldout fraction must lie in (0,1), got {}",
                self.heldout_fraction
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Frozen encoder features of a sample slice, `[N, 2*d_enc]`.
pub fn features(model: &Model, samples: &[PairedSample]) -> Result<Tensor> {
    let refs: Vec<&PairedSample> = samples.iter().collect();
    let tokens: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    model.representations(&image_matrix(&refs)?, &tokens)
}

fn select_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

fn argmax_rows(x: &Tensor) -> Result<Vec<usize>> {
    let (n, _) = x.dims2()?;
    Ok((0..n)
        .map(|r| {
            let row = x.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Classification head on top of frozen features.
#[derive(Clone, Debug)]
pub enum Head {
    /// One linear map to the class logits.
    Linear(Linear),
    /// Per-modality linear maps to a common width, concatenated, then one
    /// ReLU hidden layer and the output layer.
    Shallow {
        split: usize,
        image: Linear,
        text: Linear,
        hidden: Linear,
        out: Linear,
    },
}

impl Head {
    pub fn linear(in_dim: usize, classes: usize) -> Self {
        Head::Linear(Linear::new("probe", in_dim, classes))
    }

    pub fn shallow(d_enc: usize, common: usize, hidden: usize, classes: usize) -> Self {
        Head::Shallow {
            split: d_enc,
            image: Linear::new("head.image", d_enc, common),
            text: Linear::new("head.text", d_enc, common),
            hidden: Linear::new("head.hidden", 2 * common, hidden),
            out: Linear::new("head.out", hidden, classes),
        }
    }

    pub fn init(&self, store: &mut ParamStore, r: &mut Rng) {
        match self {
            Head::Linear(l) => l.init(store, r),
            Head::Shallow {
                image,
                text,
                hidden,
                out,
                ..
            } => {
                for l in [image, text, hidden, out] {
                    l.init(store, r);
                }
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Head::Linear(l) => l.forward(g, p, x),
            Head::Shallow {
                split,
                image,
                text,
                hidden,
                out,
            } => {
                let xi = g.slice_cols(x, 0, *split)?;
                let xt = g.slice_cols(x, *split, *split)?;
                let ci = image.forward(g, p, xi)?;
                let ct = text.forward(g, p, xt)?;
                let joint = g.concat_cols(&[ci, ct])?;
                let h = hidden.forward(g, p, joint)?;
                let h = g.relu(h);
                out.forward(g, p, h)
            }
        }
    }

    fn logits(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let x = g.constant(x.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

/// Labeled features for one supervised run.
struct Supervised<'a> {
    train_x: &'a Tensor,
    train_y: &'a [usize],
    heldout_x: &'a Tensor,
    heldout_y: &'a [usize],
    classes: usize,
}

fn fit_head(head: &Head, data: &Supervised<'_>, cfg: &ProbeConfig, seed: u64, metrics: &mut RunMetrics) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    head.init(&mut store, &mut rng::stream(seed, "head-init"));
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam);
    let n = data.train_y.len();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(n, &mut rng::from_draw(rng::derive_indexed(seed, "head-batches", &[epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = select_rows(data.train_x, idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.constant(x);
            let logits = head.forward(&mut g, &p, xv)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            let grads = p.collect(&g.backward(loss)?);
            adam.step(&mut store, &grads)?;
            total += value;
            batches += 1;
        }
        metrics.push(MetricsRow {
            epoch,
            split: Split::Train,
            loss: total / batches as f64,
            accuracy: None,
            macro_f1: None,
        })?;

        let logits = head.logits(&store, data.heldout_x)?;
        let mut g = Graph::new();
        let lv = g.constant(logits.clone());
        let loss = cross_entropy(&mut g, lv, data.heldout_y)?;
        let pred = argmax_rows(&logits)?;
        metrics.push(MetricsRow {
            epoch,
            split: Split::Heldout,
            loss: g.value(loss).item(),
            accuracy: Some(accuracy(&pred, data.heldout_y)?),
            macro_f1: Some(macro_f1(&pred, data.heldout_y, data.classes)?),
        })?;
    }
    Ok(store)
}

/// Stratified `(train, heldout)` split used by the supervised protocols.
pub fn heldout_split(dataset: &Dataset, cfg: &ProbeConfig) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let seed = rng::derive_seed(cfg.seed, "heldout");
    label_fraction_split(&dataset.samples, 1.0 - cfg.heldout_fraction, seed)
}

fn require_frozen(model: &Model) -> Result<String> {
    if !model.encoders_frozen() {
        return Err(Error::Contract("encoders must be frozen before supervised evaluation".into()));
    }
    Ok(model.encoder_digest())
}

fn verify_unchanged(model: &Model, before: &str) -> Result<()> {
    if model.encoder_digest() != before {
        return Err(Error::Contract("encoder parameters changed during evaluation".into()));
    }
    Ok(())
}

fn labels(samples: &[PairedSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

fn split_features(model: &Model, train: &[PairedSample], heldout: &[PairedSample]) -> Result<(Tensor, Tensor)> {
    Ok((features(model, train)?, features(model, heldout)?))
}

/// Trains a single linear classifier on frozen `(image_rep ; text_rep)`
/// features and reports held-out accuracy and macro-F1 every epoch.
pub fn linear_probe(model: &Model, dataset: &Dataset, cfg: &ProbeConfig, tag: &str) -> Result<RunMetrics> {
    cfg.validate()?;
    let before = require_frozen(model)?;
    check_dataset(&model.config, dataset)?;
    let (train, heldout) = heldout_split(dataset, cfg)?;
    let (tx, hx) = split_features(model, &train, &heldout)?;
    let metrics = probe_features(&tx, &labels(&train), &hx, &labels(&heldout), dataset.classes, cfg, tag)?;
    verify_unchanged(model, &before)?;
    Ok(metrics)
}

/// Linear probe on precomputed features, e.g. raw flattened images.
pub fn probe_features(
    train_x: &Tensor,
    train_y: &[usize],
    heldout_x: &Tensor,
    heldout_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    tag: &str,
) -> Result<RunMetrics> {
    cfg.validate()?;
    let (_, width) = train_x.dims2()?;
    let data = Supervised {
        train_x,
        train_y,
        heldout_x,
        heldout_y,
        classes,
    };
    let mut metrics = RunMetrics::new(tag, None);
    fit_head(&Head::linear(width, classes), &data, cfg, rng::derive_seed(cfg.seed, "probe"), &mut metrics)?;
    Ok(metrics)
}

/// For every label fraction, trains the shallow head on that share of the
/// training split and evaluates on the fixed held-out split.
pub fn finetune_sweep(
    model: &Model,
    dataset: &Dataset,
    fractions: &[f64],
    cfg: &ProbeConfig,
    tag: &str,
) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let before = require_frozen(model)?;
    check_dataset(&model.config, dataset)?;
    let (train, heldout) = heldout_split(dataset, cfg)?;
    let hy = labels(&heldout);
    let head = Head::shallow(model.config.d_enc, model.config.dim, cfg.hidden, dataset.classes);
    let split_seed = rng::derive_seed(cfg.seed, "fractions");
    let mut out = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let (labeled, _) = label_fraction_split(&train, fraction, split_seed)?;
        let (tx, hx) = split_features(model, &labeled, &heldout)?;
        let ty = labels(&labeled);
        let data = Supervised {
            train_x: &tx,
            train_y: &ty,
            heldout_x: &hx,
            heldout_y: &hy,
            classes: dataset.classes,
        };
        let mut metrics = RunMetrics::new(tag, Some(fraction));
        fit_head(&head, &data, cfg, rng::derive_seed(cfg.seed, "sweep"), &mut metrics)?;
        out.push(metrics);
    }
    verify_unchanged(model, &before)?;
    Ok(out)
}

/// Final held-out macro-F1 of a supervised run.
pub fn final_macro_f1(m: &RunMetrics) -> Option<f64> {
    m.last(Split::Heldout).and_then(|r| r.macro_f1)
}

/// Final held-out accuracy of a supervised run.
pub fn final_accuracy(m: &RunMetrics) -> Option<f64> {
    m.last(Split::Heldout).and_then(|r| r.accuracy)
}
