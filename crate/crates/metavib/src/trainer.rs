//! The episodic optimization loop: Adam updates, validation-based model
//! selection, metrics logging, and bit-exact checkpoint resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::checkpoint::{self, TensorRecord};
use crate::data::{apply_split, sample_episode, Domain, SplitData, SplitPlan};
use crate::distributions::KlDirection;
use crate::error::{Error, Result};
use crate::evaluation::{self, PredictOptions};
use crate::networks::{ModelParams, NetworkSpec, ParamSet};
use crate::objectives::{episode_loss, LossOptions, Objective};
use crate::rng::{RngState, SeedStream};

/// Fully resolved training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    pub l_z: usize,
    pub l_psi: usize,
    pub kl_direction: KlDirection,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_per_domain: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Where `last.ckpt` / `best.ckpt` go; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Keep an in-memory parameter snapshot every this many iterations.
    pub snapshot_every: Option<usize>,
    /// Per-class cap on pooled prior features during validation scoring.
    pub val_prior_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Metavib,
            beta: 1e-3,
            l_z: 10,
            l_psi: 1,
            kl_direction: KlDirection::Forward,
            learning_rate: 1e-4,
            iterations: 2_000,
            batch_per_domain: 32,
            seed: 1,
            eval_every: 100,
            checkpoint_dir: None,
            snapshot_every: None,
            val_prior_cap: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Parameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter("iterations must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Parameter("eval_every must be >= 1".into()));
        }
        self.loss_options().validate()
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            beta: self.beta,
            l_z: self.l_z,
            l_psi: self.l_psi,
            kl_direction: self.kl_direction,
        }
    }

    pub fn param_set(&self) -> ParamSet {
        if self.objective.is_probabilistic() {
            ParamSet::Probabilistic
        } else {
            ParamSet::Deterministic
        }
    }
}

/// Adam moment estimates, mirroring the parameter tensors by name.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        let zeros = |p: &ModelParams| -> BTreeMap<String, Vec<f64>> {
            p.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for tensor '{name}'"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for '{name}'")))?;
        let m = state.m.get_mut(name).expect("moment mirrors params");
        let v = state.v.get_mut(name).expect("moment mirrors params");
        let data = tensor.data_mut();
        for i in 0..data.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// One row of the per-iteration metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub val_acc: Option<f64>,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,total,ce,kl,val_acc")?;
    for r in rows {
        match r.val_acc {
            Some(v) => writeln!(f, "{},{},{},{},{}", r.iter, r.total, r.ce, r.kl, v)?,
            None => writeln!(f, "{},{},{},{},", r.iter, r.total, r.ce, r.kl)?,
        }
    }
    f.flush()?;
    Ok(())
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub best: ModelParams,
    pub adam: AdamState,
    pub rng: RngState,
    pub iteration: usize,
    pub best_val: f64,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records = self.params.to_records("param.");
        records.extend(self.best.to_records("best."));
        for (name, m) in &self.adam.m {
            records.push(TensorRecord::new(
                format!("adam.m.{name}"),
                vec![m.len()],
                m.clone(),
            ));
        }
        for (name, v) in &self.adam.v {
            records.push(TensorRecord::new(
                format!("adam.v.{name}"),
                vec![v.len()],
                v.clone(),
            ));
        }
        records.push(TensorRecord::from_words("__adam.step", &[self.adam.step]));
        records.push(TensorRecord::new(
            "__adam.hyper",
            vec![3],
            vec![self.adam.beta1, self.adam.beta2, self.adam.epsilon],
        ));
        records.push(TensorRecord::from_words("__rng.root", &[self.rng.root]));
        let seed_words: Vec<u64> = self
            .rng
            .seed
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("32-byte seed")))
            .collect();
        records.push(TensorRecord::from_words("__rng.seed", &seed_words));
        records.push(TensorRecord::from_words(
            "__rng.pos",
            &[
                (self.rng.word_pos >> 64) as u64,
                self.rng.word_pos as u64,
            ],
        ));
        records.push(TensorRecord::from_words("__iter", &[self.iteration as u64]));
        records.push(TensorRecord::scalar("__best_val", self.best_val));
        checkpoint::write_records(path, &records)
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let records = checkpoint::read_records(path)?;
        let params = ModelParams::from_records(&records, "param.")?;
        let best = ModelParams::from_records(&records, "best.")?;
        let mut adam = AdamState::new(&params);
        for r in &records {
            if let Some(name) = r.name.strip_prefix("adam.m.") {
                adam.m.insert(name.to_string(), r.data.clone());
            } else if let Some(name) = r.name.strip_prefix("adam.v.") {
                adam.v.insert(name.to_string(), r.data.clone());
            }
        }
        adam.step = checkpoint::find(&records, "__adam.step")?.to_words()[0];
        let hyper = &checkpoint::find(&records, "__adam.hyper")?.data;
        adam.beta1 = hyper[0];
        adam.beta2 = hyper[1];
        adam.epsilon = hyper[2];

        let root = checkpoint::find(&records, "__rng.root")?.to_words()[0];
        let seed_words = checkpoint::find(&records, "__rng.seed")?.to_words();
        let mut seed = [0u8; 32];
        for (chunk, word) in seed.chunks_mut(8).zip(&seed_words) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        let pos = checkpoint::find(&records, "__rng.pos")?.to_words();
        let word_pos = ((pos[0] as u128) << 64) | pos[1] as u128;
        let iteration = checkpoint::find(&records, "__iter")?.to_words()[0] as usize;
        let best_val = checkpoint::find(&records, "__best_val")?.data[0];
        Ok(TrainState {
            params,
            best,
            adam,
            rng: RngState {
                root,
                seed,
                word_pos,
            },
            iteration,
            best_val,
        })
    }
}

/// Result of a (possibly resumed) training run.
pub struct TrainOutcome {
    /// Parameters with the highest validation accuracy.
    pub best: ModelParams,
    /// Parameters after the final iteration.
    pub last: ModelParams,
    pub metrics: Vec<MetricsRow>,
    pub best_val_acc: f64,
    pub snapshots: Vec<(usize, ModelParams)>,
}

/// The network family matching a set of domains.
pub fn spec_for_domains(domains: &[Domain], classes: usize) -> Result<NetworkSpec> {
    let shape = domains
        .first()
        .ok_or_else(|| Error::Protocol("no domains".into()))?
        .images
        .shape();
    let spec = NetworkSpec::conv_default(shape[1], shape[2], shape[3], classes);
    spec.validate()?;
    Ok(spec)
}

/// Trains from a fresh initialization.
pub fn train(config: &TrainConfig, domains: &[Domain], split: &SplitPlan) -> Result<TrainOutcome> {
    config.validate()?;
    let split_data = apply_split(domains, split)?;
    let classes = split_data.target.class_count;
    let spec = spec_for_domains(&split_data.train, classes)?;
    let mut rng = SeedStream::new(config.seed);
    let params = ModelParams::init(&spec, config.param_set(), &mut rng)?;
    let state = TrainState {
        best: params.clone(),
        adam: AdamState::new(&params),
        params,
        rng: rng.state(),
        iteration: 0,
        best_val: f64::NEG_INFINITY,
    };
    run_loop(config, &spec, &split_data, state)
}

/// Continues a checkpointed run up to `config.iterations`.
pub fn resume(
    state: TrainState,
    config: &TrainConfig,
    domains: &[Domain],
    split: &SplitPlan,
) -> Result<TrainOutcome> {
    config.validate()?;
    let split_data = apply_split(domains, split)?;
    let classes = split_data.target.class_count;
    let spec = spec_for_domains(&split_data.train, classes)?;
    run_loop(config, &spec, &split_data, state)
}

fn validation_accuracy(
    params: &ModelParams,
    spec: &NetworkSpec,
    split_data: &SplitData,
    config: &TrainConfig,
    iteration: usize,
) -> Result<f64> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let item: usize = split_data.validation[0].images.shape()[1..].iter().product();
    for d in &split_data.validation {
        images.extend_from_slice(d.images.data());
        labels.extend_from_slice(&d.labels);
    }
    let mut shape = split_data.validation[0].images.shape().to_vec();
    shape[0] = labels.len();
    debug_assert_eq!(images.len(), labels.len() * item);
    let test = crate::autodiff::Tensor::new(shape, images)?;
    let opts = PredictOptions {
        l_z: config.l_z,
        l_psi: config.l_psi,
        repeats: 1,
        seed: config.seed ^ 0x5eed_e7a1 ^ iteration as u64,
        prior_cap: Some(config.val_prior_cap),
        ..Default::default()
    };
    let records = evaluation::predict(
        params,
        spec,
        &split_data.train,
        &test,
        &labels,
        config.objective,
        &opts,
    )?;
    evaluation::accuracy(&records)
}

fn run_loop(
    config: &TrainConfig,
    spec: &NetworkSpec,
    split_data: &SplitData,
    mut state: TrainState,
) -> Result<TrainOutcome> {
    let opts = config.loss_options();
    let mut rng = SeedStream::restore(&state.rng);
    let mut metrics = Vec::with_capacity(config.iterations.saturating_sub(state.iteration));
    let mut snapshots = Vec::new();

    for it in state.iteration + 1..=config.iterations {
        let episode = sample_episode(&split_data.train, config.batch_per_domain, &mut rng)?;
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape);
        let loss = episode_loss(&mut tape, &bound, spec, &episode, config.objective, &opts, &mut rng)?;
        if !loss.breakdown.total.is_finite() {
            // The most recent checkpoint on disk stays untouched.
            return Err(Error::Train {
                iteration: it,
                message: format!("loss diverged to {}", loss.breakdown.total),
            });
        }
        let grads = tape.backward(&loss.value)?;
        let named = bound.gather(&grads);
        drop(grads);
        drop(bound);
        drop(tape);
        adam_step(&mut state.params, &named, &mut state.adam, config.learning_rate).map_err(
            |e| match e {
                Error::Numeric(message) => Error::Train {
                    iteration: it,
                    message,
                },
                other => other,
            },
        )?;
        state.iteration = it;

        let is_eval = it % config.eval_every == 0 || it == config.iterations;
        let mut val_acc = None;
        if is_eval {
            let acc = validation_accuracy(&state.params, spec, split_data, config, it)?;
            if acc > state.best_val {
                state.best_val = acc;
                state.best = state.params.clone();
            }
            val_acc = Some(acc);
        }
        metrics.push(MetricsRow {
            iter: it,
            total: loss.breakdown.total,
            ce: loss.breakdown.cross_entropy,
            kl: loss.breakdown.kl,
            val_acc,
        });
        if let Some(every) = config.snapshot_every {
            if it % every == 0 || it == config.iterations {
                snapshots.push((it, state.params.clone()));
            }
        }
        if is_eval {
            if let Some(dir) = &config.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                state.rng = rng.state();
                state.save(&dir.join("last.ckpt"))?;
                state.best.save(&dir.join("best.ckpt"))?;
            }
        }
    }

    Ok(TrainOutcome {
        best: state.best,
        last: state.params,
        metrics,
        best_val_acc: state.best_val,
        snapshots,
    })
}
