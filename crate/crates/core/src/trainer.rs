//! Minibatch training of both anchor sets with adaptive-moment updates.
//!
//! The trajectory is a pure function of the config: the shuffle for epoch `e`
//! comes from its own seeded stream, so training can stop and resume at any
//! step and land on the same bits.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grad::{backward_batch, batch_loss, LossConfig};
use crate::io::{Modality, PairedDataset, TokenSequence};
use crate::matrix::Matrix;
use crate::relrep::{AnchorSet, Pooling, DEFAULT_TAU_P};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// Anchors are sampled from the modality's training tokens.
    #[default]
    DataTokens,
    Gaussian,
}

impl InitPolicy {
    pub fn name(self) -> &'static str {
        match self {
            InitPolicy::DataTokens => "data_tokens",
            InitPolicy::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "data_tokens" => Ok(InitPolicy::DataTokens),
            "gaussian" => Ok(InitPolicy::Gaussian),
            other => Err(Error::usage(format!("unknown init policy `{other}` (data_tokens|gaussian)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub anchors: usize,
    pub tau_p: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub init_policy: InitPolicy,
    pub shuffle: bool,
    pub pooling: Pooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            anchors: 512,
            tau_p: DEFAULT_TAU_P,
            tau: 0.07,
            batch_size: 64,
            epochs: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            init_policy: InitPolicy::DataTokens,
            shuffle: true,
            pooling: Pooling::Cap,
        }
    }
}

const CONFIG_KEYS: [&str; 13] = [
    "anchors",
    "tau_p",
    "tau",
    "batch_size",
    "epochs",
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "init_policy",
    "shuffle",
    "pooling",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::usage(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig { tau_p: self.tau_p, tau: self.tau, pooling: self.pooling }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors == 0 {
            return Err(Error::usage("anchor count K must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be >= 1"));
        }
        if self.batch_size == 1 {
            log::warn!("batch size 1 makes the contrastive loss identically zero");
        }
        for (name, v) in [("tau_p", self.tau_p), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::usage("moment decays must lie in [0, 1) and eps must be > 0"));
        }
        Ok(())
    }

    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "anchors" => self.anchors = parse_num(key, value)?,
            "tau_p" => self.tau_p = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "init_policy" => self.init_policy = InitPolicy::parse(value.trim())?,
            "shuffle" => self.shuffle = parse_num(key, value)?,
            "pooling" => self.pooling = Pooling::parse(value.trim())?,
            other => return Err(Error::usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        CONFIG_KEYS.contains(&key)
    }

    /// `key=value` lines; floats use the shortest exact round-trip spelling.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("anchors", self.anchors.to_string()),
            ("tau_p", format!("{:?}", self.tau_p)),
            ("tau", format!("{:?}", self.tau)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("seed", self.seed.to_string()),
            ("init_policy", self.init_policy.name().to_string()),
            ("shuffle", self.shuffle.to_string()),
            ("pooling", self.pooling.name().to_string()),
        ]
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.entries().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("line {}: expected key=value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// First and second moment buffers for one anchor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Matrix,
    pub second: Matrix,
}

impl Moments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { first: Matrix::zeros(rows, cols), second: Matrix::zeros(rows, cols) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub anchors_v: AnchorSet,
    pub anchors_l: AnchorSet,
    pub moments_v: Moments,
    pub moments_l: Moments,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Loss sum and count for the epoch in progress.
    pub running_loss: f64,
    pub running_count: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, anchors_v: AnchorSet, anchors_l: AnchorSet) -> Self {
        let moments_v = Moments::zeros(anchors_v.k(), anchors_v.dim());
        let moments_l = Moments::zeros(anchors_l.k(), anchors_l.dim());
        Self { config, anchors_v, anchors_l, moments_v, moments_l, step: 0, epoch: 0, running_loss: 0.0, running_count: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
}

fn token_pool(seqs: &[&TokenSequence]) -> Vec<Vec<f64>> {
    seqs.iter()
        .flat_map(|s| s.tokens().iter_rows().map(<[f64]>::to_vec))
        .collect()
}

fn init_side(
    rng: &mut ChaCha8Rng,
    modality: Modality,
    seqs: &[&TokenSequence],
    dim: usize,
    config: &TrainConfig,
) -> Result<AnchorSet> {
    let k = config.anchors;
    let rows: Vec<Vec<f64>> = match config.init_policy {
        InitPolicy::DataTokens => {
            let pool = token_pool(seqs);
            if pool.is_empty() {
                return Err(Error::usage(format!("no {modality} tokens to initialize anchors from")));
            }
            if pool.len() >= k {
                sample_indices(rng, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect()
            } else {
                let mut rows = pool.clone();
                rows.shuffle(rng);
                while rows.len() < k {
                    rows.push(pool[rng.gen_range(0..pool.len())].clone());
                }
                rows
            }
        }
        InitPolicy::Gaussian => {
            let std = 1.0 / (dim as f64).sqrt();
            (0..k).map(|_| (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        }
    };
    AnchorSet::new(modality, Matrix::from_rows(&rows))
}

/// Initial anchors for both modalities. Deterministic in `config.seed`.
pub fn init_anchors(dataset: &PairedDataset, config: &TrainConfig) -> Result<(AnchorSet, AnchorSet)> {
    config.validate()?;
    if dataset.is_empty() && config.init_policy == InitPolicy::DataTokens {
        return Err(Error::usage("cannot initialize anchors from an empty dataset"));
    }
    let vision: Vec<&TokenSequence> = dataset.pairs.iter().map(|&(a, _)| &dataset.vision[a]).collect();
    let language: Vec<&TokenSequence> = dataset.pairs.iter().map(|&(_, b)| &dataset.language[b]).collect();
    let (dv, dl) = (dataset.vision_dim(), dataset.language_dim());
    if dv == 0 || dl == 0 {
        return Err(Error::usage("dataset has no token dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let av = init_side(&mut rng, Modality::Vision, &vision, dv, config)?;
    let al = init_side(&mut rng, Modality::Language, &language, dl, config)?;
    Ok((av, al))
}

/// Batches per epoch; a trailing batch with fewer than two pairs is dropped.
pub fn steps_per_epoch(num_pairs: usize, batch_size: usize) -> usize {
    let full = num_pairs / batch_size;
    let rem = num_pairs % batch_size;
    full + usize::from(rem >= 2)
}

fn epoch_order(config: &TrainConfig, num_pairs: usize, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_pairs).collect();
    if config.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch + 1);
        order.shuffle(&mut rng);
    }
    order
}

fn adam_update(anchors: &mut AnchorSet, moments: &mut Moments, grad: &Matrix, config: &TrainConfig, step: u64) {
    let t = step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let params = anchors.matrix_mut().as_mut_slice();
    let m = moments.first.as_mut_slice();
    let v = moments.second.as_mut_slice();
    for (i, g) in grad.as_slice().iter().enumerate() {
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
}

/// Drives a [`TrainState`] over a dataset.
pub struct Trainer<'a> {
    dataset: &'a PairedDataset,
    steps_per_epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a PairedDataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.len() < config.batch_size {
            return Err(Error::usage(format!(
                "dataset has {} pairs, fewer than the batch size {}",
                dataset.len(),
                config.batch_size
            )));
        }
        if dataset.len() < 2 && config.batch_size >= 2 {
            return Err(Error::usage("need at least two pairs"));
        }
        Ok(Self { dataset, steps_per_epoch: steps_per_epoch(dataset.len(), config.batch_size) })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self, config: &TrainConfig) -> u64 {
        (self.steps_per_epoch * config.epochs) as u64
    }

    /// Pair indices of the batch taken at global step `step`.
    pub fn batch_at(&self, config: &TrainConfig, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch as u64;
        let pos = (step % self.steps_per_epoch as u64) as usize;
        let order = epoch_order(config, self.dataset.len(), epoch);
        let start = pos * config.batch_size;
        let end = (start + config.batch_size).min(order.len());
        order[start..end].to_vec()
    }

    /// One optimizer step. On error `state` is left untouched.
    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let config = &state.config;
        let idx = self.batch_at(config, state.step);
        let (bv, bl): (Vec<&TokenSequence>, Vec<&TokenSequence>) = idx.iter().map(|&i| self.dataset.pair(i)).unzip();
        let grads = backward_batch(&bv, &bl, &state.anchors_v, &state.anchors_l, &config.loss_config())?;
        if !grads.loss.is_finite() || grads.loss < 0.0 {
            return Err(Error::numeric("training loss", format!("loss {} at step {}", grads.loss, state.step)));
        }

        let mut next = state.clone();
        next.step += 1;
        adam_update(&mut next.anchors_v, &mut next.moments_v, &grads.vision, config, next.step);
        adam_update(&mut next.anchors_l, &mut next.moments_l, &grads.language, config, next.step);
        next.anchors_v.check()?;
        next.anchors_l.check()?;

        let epoch = state.step / self.steps_per_epoch as u64;
        next.running_loss += grads.loss;
        next.running_count += 1;
        if next.step.is_multiple_of(self.steps_per_epoch as u64) {
            next.epoch = epoch + 1;
        }
        *state = next;
        Ok(StepRecord { epoch, step: state.step - 1, loss: grads.loss })
    }

    /// Runs until `state.step == target`, reporting each step and each finished
    /// epoch's mean loss. Stops at the first error with `state` at the last good step.
    pub fn run_until(
        &self,
        state: &mut TrainState,
        target: u64,
        mut on_step: impl FnMut(&StepRecord),
        mut on_epoch: impl FnMut(u64, f64),
    ) -> Result<()> {
        while state.step < target {
            let rec = self.step(state)?;
            on_step(&rec);
            if state.step.is_multiple_of(self.steps_per_epoch as u64) {
                let mean = state.running_loss / state.running_count as f64;
                log::info!("epoch {} mean loss {mean:.6}", rec.epoch);
                on_epoch(rec.epoch, mean);
                state.running_loss = 0.0;
                state.running_count = 0;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub steps: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
}

/// Initializes anchors and trains for `config.epochs` epochs.
pub fn train(dataset: &PairedDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let trainer = Trainer::new(dataset, config)?;
    let (av, al) = init_anchors(dataset, config)?;
    let mut state = TrainState::new(config.clone(), av, al);
    let mut steps = Vec::new();
    let mut epoch_losses = Vec::new();
    trainer.run_until(
        &mut state,
        trainer.total_steps(config),
        |r| steps.push(*r),
        |_, mean| epoch_losses.push(mean),
    )?;
    Ok(TrainOutcome { state, steps, epoch_losses })
}

/// Mean loss over consecutive, unshuffled batches of `config.batch_size`.
pub fn mean_loss(dataset: &PairedDataset, anchors_v: &AnchorSet, anchors_l: &AnchorSet, config: &TrainConfig) -> Result<f64> {
    let n = dataset.len();
    let b = config.batch_size.max(1);
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..n).step_by(b) {
        let end = (start + b).min(n);
        if end - start < 2 && count > 0 {
            break;
        }
        let (bv, bl): (Vec<&TokenSequence>, Vec<&TokenSequence>) = (start..end).map(|i| dataset.pair(i)).unzip();
        total += batch_loss(&bv, &bl, anchors_v, anchors_l, &config.loss_config())?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::usage("empty dataset"));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn small_data(seed: u64, n: usize) -> PairedDataset {
        let spec = SyntheticSpec { num_train: n, num_test: 0, seed, ..Default::default() };
        generate_synthetic(&spec).unwrap().train
    }

    fn small_config() -> TrainConfig {
        TrainConfig { anchors: 8, batch_size: 8, epochs: 2, learning_rate: 1e-2, ..Default::default() }
    }

    #[test]
    fn kv_round_trip_is_exact() {
        let cfg = TrainConfig { tau_p: 0.1 + 0.2, learning_rate: 3e-4, seed: 99, pooling: Pooling::Mean, init_policy: InitPolicy::Gaussian, ..Default::default() };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(TrainConfig::from_kv("bogus=1").is_err());
        assert!(TrainConfig::from_kv("anchors=x").is_err());
    }

    #[test]
    fn gaussian_init_is_deterministic() {
        let data = small_data(1, 10);
        let cfg = TrainConfig { init_policy: InitPolicy::Gaussian, ..small_config() };
        assert_eq!(init_anchors(&data, &cfg).unwrap(), init_anchors(&data, &cfg).unwrap());
    }

    #[test]
    fn exhausted_pool_gives_permutation() {
        let data = small_data(2, 3);
        let pool: usize = data.vision.iter().map(TokenSequence::len).sum();
        let cfg = TrainConfig { anchors: pool, ..small_config() };
        let (av, _) = init_anchors(&data, &cfg).unwrap();
        let mut want: Vec<Vec<f64>> = token_pool(&data.vision.iter().collect::<Vec<_>>());
        let mut got: Vec<Vec<f64>> = av.matrix().iter_rows().map(<[f64]>::to_vec).collect();
        let key = |a: &Vec<f64>, b: &Vec<f64>| a.partial_cmp(b).unwrap();
        want.sort_by(key);
        got.sort_by(key);
        assert_eq!(got, want);
    }

    #[test]
    fn small_pool_samples_with_replacement() {
        let data = small_data(2, 2);
        let cfg = TrainConfig { anchors: 40, batch_size: 2, ..small_config() };
        let (av, al) = init_anchors(&data, &cfg).unwrap();
        assert_eq!((av.k(), al.k()), (40, 40));
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = PairedDataset::new(vec![], vec![], vec![]).unwrap();
        assert!(matches!(init_anchors(&data, &small_config()), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_anchors() {
        let data = small_data(3, 24);
        let cfg = TrainConfig { learning_rate: 0.0, ..small_config() };
        let init = init_anchors(&data, &cfg).unwrap();
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.state.anchors_v, init.0);
        assert_eq!(out.state.anchors_l, init.1);
        assert_eq!(out.state.step, 6);
    }

    #[test]
    fn steps_per_epoch_drops_singleton_tail() {
        assert_eq!(steps_per_epoch(10, 3), 3);
        assert_eq!(steps_per_epoch(11, 3), 4);
        assert_eq!(steps_per_epoch(9, 3), 3);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let data = small_data(4, 32);
        let a = train(&data, &small_config()).unwrap();
        let b = train(&data, &small_config()).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = small_data(5, 30);
        let cfg = TrainConfig { epochs: 3, ..small_config() };
        let full = train(&data, &cfg).unwrap().state;

        let trainer = Trainer::new(&data, &cfg).unwrap();
        let (av, al) = init_anchors(&data, &cfg).unwrap();
        let mut state = TrainState::new(cfg.clone(), av, al);
        trainer.run_until(&mut state, 5, |_| {}, |_, _| {}).unwrap();
        let mut resumed = state.clone();
        trainer.run_until(&mut resumed, trainer.total_steps(&cfg), |_| {}, |_, _| {}).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn dataset_smaller_than_batch_rejected() {
        let data = small_data(6, 4);
        assert!(matches!(train(&data, &small_config()), Err(Error::Usage(_))));
    }
}
