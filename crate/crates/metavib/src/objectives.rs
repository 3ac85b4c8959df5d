//! Training objectives: the bottleneck-regularized episodic loss and its
//! ablations.
//!
//! All four objectives share the same probabilistic machinery where they
//! overlap, and consume their random draws in a fixed order (classifier
//! weights first, then latent samples) so that objectives can be compared
//! on identical draw sequences.

use crate::autodiff::{Tape, Tensor};
use crate::data::Episode;
use crate::distributions::{
    kl_divergence_rowwise, kl_to_standard_normal_rowwise, DiagGaussian, KlDirection,
};
use crate::error::{Error, Result};
use crate::networks::{
    dense_head_logits, feature_extract, infer_classifier_dist, infer_latent_dist, instance_pool,
    BoundParams, NetworkSpec,
};
use crate::rng::SeedStream;

/// Which loss drives a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Episodic bottleneck objective with amortized class priors.
    Metavib,
    /// Probabilistic classifier with a standard-normal bottleneck prior.
    Vib,
    /// Probabilistic classifier without any bottleneck term.
    Baseline,
    /// Deterministic softmax classifier (no meta split, no sampling).
    Erm,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::Erm,
        Objective::Baseline,
        Objective::Vib,
        Objective::Metavib,
    ];

    pub fn is_probabilistic(&self) -> bool {
        !matches!(self, Objective::Erm)
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Objective::Metavib => "metavib",
            Objective::Vib => "vib",
            Objective::Baseline => "baseline",
            Objective::Erm => "erm",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metavib" => Ok(Objective::Metavib),
            "vib" => Ok(Objective::Vib),
            "baseline" => Ok(Objective::Baseline),
            "erm" => Ok(Objective::Erm),
            other => Err(Error::Parameter(format!(
                "unknown objective '{other}' (expected metavib|vib|baseline|erm)"
            ))),
        }
    }
}

/// Knobs shared by the sampled objectives.
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    /// Bottleneck size in [0, 1].
    pub beta: f64,
    /// Latent samples per datum.
    pub l_z: usize,
    /// Classifier-weight samples per class.
    pub l_psi: usize,
    pub kl_direction: KlDirection,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            beta: 1e-3,
            l_z: 10,
            l_psi: 1,
            kl_direction: KlDirection::Forward,
        }
    }
}

impl LossOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Parameter(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if self.l_z == 0 || self.l_psi == 0 {
            return Err(Error::Parameter("sample counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub kl: f64,
    pub beta: f64,
    pub samples_z: usize,
    pub samples_psi: usize,
}

/// A loss value: the differentiable scalar plus its breakdown.
pub struct Loss {
    pub value: Tensor,
    pub breakdown: LossBreakdown,
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Protocol(format!("label {l} outside 0..{classes}")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean softmax cross-entropy of `[n, c]` logits against one-hot targets.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    let picked = tape.mul(logits, onehot)?;
    let true_logit = tape.sum(&picked, Some(1))?;
    let lse = tape.logsumexp(logits)?;
    let nll = tape.sub(&lse, &true_logit)?;
    tape.mean(&nll, None)
}

/// The shared probabilistic forward pass over one episode.
struct MetaTensors {
    /// Pooled per-class features `[c, d]`.
    pooled: Tensor,
    /// Classifier-weight distribution, one row per class.
    psi_dist: DiagGaussian,
    /// Per-sample latent posterior over the meta-test batch.
    posterior: DiagGaussian,
    /// One-hot meta-test labels `[n, c]`; also the row-selection matrix
    /// that maps class-level tensors onto samples.
    onehot: Tensor,
}

fn meta_forward(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    episode: &Episode,
) -> Result<MetaTensors> {
    let classes = episode.class_count;
    if episode.meta_train.len() != classes {
        return Err(Error::Protocol(format!(
            "meta-train groups cover {} of {classes} classes",
            episode.meta_train.len()
        )));
    }
    // One batched pass over all meta-train images; class groups stay
    // contiguous, so pooling is a per-group row slice.
    let mut group_sizes = Vec::with_capacity(classes);
    let mut train_data = Vec::new();
    for (class, group) in episode.meta_train.iter().enumerate() {
        if group.class != class || group.images.shape()[0] == 0 {
            return Err(Error::Protocol(format!(
                "class {class} is missing from the meta-train batch"
            )));
        }
        group_sizes.push(group.images.shape()[0]);
        train_data.extend_from_slice(group.images.data());
    }
    let mut train_shape = episode.meta_train[0].images.shape().to_vec();
    train_shape[0] = group_sizes.iter().sum();
    let all_train = Tensor::new(train_shape, train_data)?;
    let train_feats = feature_extract(tape, params, spec, &all_train)?;
    let mut pooled_rows = Vec::with_capacity(classes);
    let mut offset = 0;
    for &size in &group_sizes {
        let rows = tape.slice_rows(&train_feats, offset, size)?;
        let pooled = instance_pool(tape, &rows)?;
        pooled_rows.push(tape.reshape(&pooled, vec![1, spec.feature_dim])?);
        offset += size;
    }
    let pooled = tape.concat(&pooled_rows, 0)?;
    let psi_dist = infer_classifier_dist(tape, params, spec, &pooled)?;
    let test_feats = feature_extract(tape, params, spec, &episode.meta_test_images)?;
    let posterior = infer_latent_dist(tape, params, spec, &test_feats)?;
    let onehot = one_hot(&episode.meta_test_labels, classes)?;
    Ok(MetaTensors {
        pooled,
        psi_dist,
        posterior,
        onehot,
    })
}

/// Monte-Carlo cross-entropy over classifier draws and latent codes.
/// `zs` holds the latent batch per draw (`[n, d]` each).
fn monte_carlo_ce(
    tape: &mut Tape,
    psis: &[Tensor],
    zs: &[Tensor],
    onehot: &Tensor,
) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for psi in psis {
        let psi_t = tape.transpose(psi)?;
        for z in zs {
            let logits = tape.matmul(z, &psi_t)?;
            let ce = softmax_cross_entropy(tape, &logits, onehot)?;
            acc = Some(match acc {
                None => ce,
                Some(prev) => tape.add(&prev, &ce)?,
            });
        }
    }
    let total = acc.expect("at least one draw");
    tape.scale(&total, 1.0 / (psis.len() * zs.len()) as f64)
}

fn assemble(
    tape: &mut Tape,
    ce: Tensor,
    kl: Option<Tensor>,
    beta: f64,
    samples_z: usize,
    samples_psi: usize,
) -> Result<Loss> {
    let (value, kl_value) = match kl {
        Some(kl_t) => {
            let weighted = tape.scale(&kl_t, beta)?;
            (tape.add(&ce, &weighted)?, kl_t.item())
        }
        None => (ce.clone(), 0.0),
    };
    Ok(Loss {
        breakdown: LossBreakdown {
            total: value.item(),
            cross_entropy: ce.item(),
            kl: kl_value,
            beta,
            samples_z,
            samples_psi,
        },
        value,
    })
}

/// The episodic bottleneck objective: Monte-Carlo cross-entropy on the
/// meta-test batch under sampled classifiers and latent codes, plus the
/// per-sample KL between the latent posterior and its amortized class
/// prior.
pub fn metavib_loss(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    episode: &Episode,
    opts: &LossOptions,
    rng: &mut SeedStream,
) -> Result<Loss> {
    opts.validate()?;
    let meta = meta_forward(tape, params, spec, episode)?;
    let prior = infer_latent_dist(tape, params, spec, &meta.pooled)?;

    // Classifier draws first, then latent draws (fixed stream order).
    let psis = meta.psi_dist.sample(tape, rng, opts.l_psi)?;
    let zs = meta.posterior.sample(tape, rng, opts.l_z)?;
    let ce = monte_carlo_ce(tape, &psis, &zs, &meta.onehot)?;

    // Pair each meta-test sample with the prior of its own class.
    let prior_mu = tape.matmul(&meta.onehot, prior.mu())?;
    let prior_lv = tape.matmul(&meta.onehot, prior.log_var())?;
    let prior_n = DiagGaussian::new(tape, prior_mu, prior_lv)?;
    let kl_rows = match opts.kl_direction {
        KlDirection::Forward => kl_divergence_rowwise(tape, &meta.posterior, &prior_n)?,
        KlDirection::Reverse => kl_divergence_rowwise(tape, &prior_n, &meta.posterior)?,
    };
    let kl = tape.mean(&kl_rows, None)?;
    assemble(tape, ce, Some(kl), opts.beta, opts.l_z, opts.l_psi)
}

/// Bottleneck regularization of the probabilistic baseline: same
/// deterministic-latent cross-entropy as [`baseline_loss`], plus the KL
/// of the latent posterior against a fixed standard-normal prior. The
/// `l_z` knob is accepted for interface parity but the latent path is the
/// posterior mean, so no latent draws are consumed.
pub fn vib_loss(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    episode: &Episode,
    opts: &LossOptions,
    rng: &mut SeedStream,
) -> Result<Loss> {
    opts.validate()?;
    let meta = meta_forward(tape, params, spec, episode)?;
    let psis = meta.psi_dist.sample(tape, rng, opts.l_psi)?;
    let z_mean = meta.posterior.mu().clone();
    let ce = monte_carlo_ce(tape, &psis, &[z_mean], &meta.onehot)?;
    let kl_rows = kl_to_standard_normal_rowwise(tape, &meta.posterior)?;
    let kl = tape.mean(&kl_rows, None)?;
    assemble(tape, ce, Some(kl), opts.beta, 0, opts.l_psi)
}

/// The probabilistic classifier alone: sampled classifier weights, the
/// posterior-mean latent code, and no bottleneck term.
pub fn baseline_loss(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    episode: &Episode,
    l_psi: usize,
    rng: &mut SeedStream,
) -> Result<Loss> {
    if l_psi == 0 {
        return Err(Error::Parameter("sample counts must be >= 1".into()));
    }
    let meta = meta_forward(tape, params, spec, episode)?;
    let psis = meta.psi_dist.sample(tape, rng, l_psi)?;
    let z_mean = meta.posterior.mu().clone();
    let ce = monte_carlo_ce(tape, &psis, &[z_mean], &meta.onehot)?;
    assemble(tape, ce, None, 0.0, 0, l_psi)
}

/// Plain softmax cross-entropy with a learned dense head; no sampling and
/// no meta split.
pub fn erm_loss(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    images: &Tensor,
    labels: &[usize],
) -> Result<Loss> {
    let feats = feature_extract(tape, params, spec, images)?;
    let logits = dense_head_logits(tape, params, &feats)?;
    let onehot = one_hot(labels, spec.class_count)?;
    let ce = softmax_cross_entropy(tape, &logits, &onehot)?;
    assemble(tape, ce, None, 0.0, 0, 0)
}

/// Dispatches an episode to the selected objective. The deterministic
/// objective flattens the episode into one batch, since it has no use for
/// the meta split.
pub fn episode_loss(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    episode: &Episode,
    objective: Objective,
    opts: &LossOptions,
    rng: &mut SeedStream,
) -> Result<Loss> {
    match objective {
        Objective::Metavib => metavib_loss(tape, params, spec, episode, opts, rng),
        Objective::Vib => vib_loss(tape, params, spec, episode, opts, rng),
        Objective::Baseline => baseline_loss(tape, params, spec, episode, opts.l_psi, rng),
        Objective::Erm => {
            let (images, labels) = episode.pooled_batch();
            erm_loss(tape, params, spec, &images, &labels)
        }
    }
}
