//! Leave-one-domain-out evaluation: Monte-Carlo prediction with
//! per-classifier uncertainty, macro-averaged accuracy, and the
//! ablation/sweep harnesses.
//!
//! Prediction over test samples is embarrassingly parallel: every sample
//! owns a derived random stream keyed by its id, so results are
//! independent of batch order and of how work is scheduled.

use std::path::Path;

use crate::autodiff::{Tape, Tensor};
use crate::data::{make_split, Domain, SplitPlan};
use crate::error::{Error, Result};
use crate::networks::{
    dense_head_logits, feature_extract, infer_classifier_dist, infer_latent_dist, ModelParams,
    NetworkSpec,
};
use crate::objectives::Objective;
use crate::rng::SeedStream;
use crate::trainer::{train, TrainConfig};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Forward-pass chunk size for bulk feature extraction.
const FEATURE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct PredictOptions {
    pub l_z: usize,
    pub l_psi: usize,
    /// Independent repetitions averaged into the final probabilities.
    pub repeats: usize,
    pub seed: u64,
    /// Per-class cap on pooled prior features (None = pool everything).
    pub prior_cap: Option<usize>,
    /// How many sampled classifiers are kept in the uncertainty report,
    /// in addition to the mean classifier.
    pub per_classifier_cap: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            l_z: 10,
            l_psi: 1,
            repeats: 20,
            seed: 0,
            prior_cap: None,
            per_classifier_cap: 5,
        }
    }
}

/// Monte-Carlo prediction for one test sample.
#[derive(Debug, Clone)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub true_label: usize,
    /// Probabilities averaged over all draws and repeats; sums to one.
    pub mean_probs: Vec<f64>,
    /// Row 0 is the mean-classifier prediction; subsequent rows are the
    /// first few sampled classifiers (each averaged over latent draws).
    pub per_classifier_probs: Vec<Vec<f64>>,
    pub predicted: usize,
}

/// Identifier of a row of [`PredictionRecord::per_classifier_probs`].
pub fn classifier_id(row: usize) -> String {
    if row == 0 {
        "psi_mu".to_string()
    } else {
        format!("psi_{row}")
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Feature-extracts `images` in bounded chunks (no tape, no recording).
pub fn features_chunked(
    params: &ModelParams,
    spec: &NetworkSpec,
    images: &Tensor,
) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    let item: usize = images.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(n * spec.feature_dim);
    let mut tape = Tape::new();
    let bound = params.as_constants();
    // Constant parameters: nothing records, chunk activations are freed
    // as soon as the chunk is done.
    let mut start = 0;
    while start < n {
        let end = (start + FEATURE_CHUNK).min(n);
        let chunk = Tensor::new(
            {
                let mut s = images.shape().to_vec();
                s[0] = end - start;
                s
            },
            images.data()[start * item..end * item].to_vec(),
        )?;
        let feats = feature_extract(&mut tape, &bound, spec, &chunk)?;
        out.extend_from_slice(feats.data());
        start = end;
    }
    Ok(out)
}

/// Pools per-class mean features over all source-domain samples.
fn class_prior_features(
    params: &ModelParams,
    spec: &NetworkSpec,
    sources: &[Domain],
    cap: Option<usize>,
) -> Result<Tensor> {
    let classes = sources
        .first()
        .ok_or_else(|| Error::Eval("no source domains to pool priors from".into()))?
        .class_count;
    let d = spec.feature_dim;
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for domain in sources {
        let mut picks: Vec<usize> = Vec::new();
        for class in 0..classes {
            let members = domain.class_indices(class);
            let take = match cap {
                Some(c) => members.len().min(c.saturating_sub(counts[class]).min(members.len())),
                None => members.len(),
            };
            picks.extend_from_slice(&members[..take]);
        }
        picks.sort_unstable();
        if picks.is_empty() {
            continue;
        }
        let images = domain.gather_images(&picks);
        let feats = features_chunked(params, spec, &images)?;
        for (row, &i) in picks.iter().enumerate() {
            let class = domain.labels[i];
            counts[class] += 1;
            let src = &feats[row * d..(row + 1) * d];
            let dst = &mut sums[class * d..(class + 1) * d];
            for (s, &f) in dst.iter_mut().zip(src) {
                *s += f;
            }
        }
    }
    for class in 0..classes {
        if counts[class] == 0 {
            return Err(Error::Eval(format!(
                "no source samples of class {class} to form its prior"
            )));
        }
        let inv = 1.0 / counts[class] as f64;
        for v in &mut sums[class * d..(class + 1) * d] {
            *v *= inv;
        }
    }
    Tensor::new(vec![classes, d], sums)
}

struct SampleScratch {
    mean: Vec<f64>,
    per_classifier: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn predict_one_probabilistic(
    sample_id: usize,
    post_mu: &[f64],
    post_sigma: &[f64],
    classes: usize,
    d: usize,
    psi_mu: &[f64],
    psi_sigma: &[f64],
    opts: &PredictOptions,
    root: &SeedStream,
) -> Result<SampleScratch> {
    let mut rng = root.derive(sample_id as u64);
    let logits_for = |psi: &[f64], z: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let row = &psi[c * d..(c + 1) * d];
                row.iter().zip(z).map(|(&w, &zv)| w * zv).sum()
            })
            .collect()
    };

    // Mean-classifier prediction: both the classifier and the latent code
    // at their means.
    let mean_row = softmax(&logits_for(psi_mu, post_mu));

    let mut mean = vec![0.0; classes];
    let mut per_classifier = vec![mean_row];
    let mut psi_draw = vec![0.0; classes * d];
    let mut z_draw = vec![0.0; d];
    for _ in 0..opts.repeats {
        for _ in 0..opts.l_psi {
            for (slot, (&mu, &sigma)) in psi_draw.iter_mut().zip(psi_mu.iter().zip(psi_sigma)) {
                *slot = mu + sigma * rng.normal();
            }
            let mut this_psi = vec![0.0; classes];
            for _ in 0..opts.l_z {
                for (slot, (&mu, &sigma)) in z_draw.iter_mut().zip(post_mu.iter().zip(post_sigma))
                {
                    *slot = mu + sigma * rng.normal();
                }
                let probs = softmax(&logits_for(&psi_draw, &z_draw));
                for ((m, t), p) in mean.iter_mut().zip(this_psi.iter_mut()).zip(&probs) {
                    *m += p;
                    *t += p;
                }
            }
            if per_classifier.len() <= opts.per_classifier_cap {
                for t in this_psi.iter_mut() {
                    *t /= opts.l_z as f64;
                }
                per_classifier.push(this_psi);
            }
        }
    }
    let total = (opts.repeats * opts.l_psi * opts.l_z) as f64;
    for m in mean.iter_mut() {
        *m /= total;
    }
    Ok(SampleScratch {
        mean,
        per_classifier,
    })
}

/// Monte-Carlo prediction over a test batch.
///
/// For probabilistic objectives, class priors are pooled from all source
/// data, classifier matrices and latent codes are sampled per image, and
/// probabilities are averaged over `repeats` independent repetitions. The
/// deterministic objective reduces to a single softmax pass.
pub fn predict(
    params: &ModelParams,
    spec: &NetworkSpec,
    sources: &[Domain],
    test_images: &Tensor,
    test_labels: &[usize],
    objective: Objective,
    opts: &PredictOptions,
) -> Result<Vec<PredictionRecord>> {
    if !params.all_finite() {
        return Err(Error::Eval("parameters contain non-finite values".into()));
    }
    if opts.l_z == 0 || opts.l_psi == 0 || opts.repeats == 0 {
        return Err(Error::Parameter("prediction draw counts must be >= 1".into()));
    }
    let n = test_images.shape()[0];
    if n != test_labels.len() {
        return Err(Error::Eval(format!(
            "{n} test images but {} labels",
            test_labels.len()
        )));
    }
    let d = spec.feature_dim;
    let feats = features_chunked(params, spec, test_images)?;

    if objective == Objective::Erm {
        let mut tape = Tape::new();
        let bound = params.as_constants();
        let feats_t = Tensor::new(vec![n, d], feats)?;
        let logits = dense_head_logits(&mut tape, &bound, &feats_t)?;
        let classes = spec.class_count;
        return Ok((0..n)
            .map(|i| {
                let probs = softmax(&logits.data()[i * classes..(i + 1) * classes]);
                PredictionRecord {
                    sample_id: i,
                    true_label: test_labels[i],
                    predicted: argmax(&probs),
                    per_classifier_probs: vec![probs.clone()],
                    mean_probs: probs,
                }
            })
            .collect());
    }

    let pooled = class_prior_features(params, spec, sources, opts.prior_cap)?;
    let mut tape = Tape::new();
    let bound = params.as_constants();
    let psi_dist = infer_classifier_dist(&mut tape, &bound, spec, &pooled)?;
    let psi_mu = psi_dist.mu().data().to_vec();
    let psi_sigma: Vec<f64> = psi_dist
        .log_var()
        .data()
        .iter()
        .map(|lv| (0.5 * lv).exp())
        .collect();
    let posterior = infer_latent_dist(&mut tape, &bound, spec, &Tensor::new(vec![n, d], feats)?)?;
    let post_mu = posterior.mu().data().to_vec();
    let post_sigma: Vec<f64> = posterior
        .log_var()
        .data()
        .iter()
        .map(|lv| (0.5 * lv).exp())
        .collect();
    let classes = spec.class_count;
    let root = SeedStream::new(opts.seed);

    let run_one = |i: usize| -> Result<PredictionRecord> {
        let scratch = predict_one_probabilistic(
            i,
            &post_mu[i * d..(i + 1) * d],
            &post_sigma[i * d..(i + 1) * d],
            classes,
            d,
            &psi_mu,
            &psi_sigma,
            opts,
            &root,
        )?;
        Ok(PredictionRecord {
            sample_id: i,
            true_label: test_labels[i],
            predicted: argmax(&scratch.mean),
            mean_probs: scratch.mean,
            per_classifier_probs: scratch.per_classifier,
        })
    };

    #[cfg(feature = "parallel")]
    let records: Result<Vec<PredictionRecord>> = (0..n).into_par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    let records: Result<Vec<PredictionRecord>> = (0..n).map(run_one).collect();
    records
}

/// Macro-averaged accuracy in percent: the mean over classes of each
/// class's accuracy. Classes absent from the records are excluded with a
/// warning.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Eval("no prediction records".into()));
    }
    let classes = records.iter().map(|r| r.true_label).max().unwrap() + 1;
    let mut correct = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for r in records {
        totals[r.true_label] += 1;
        if r.predicted == r.true_label {
            correct[r.true_label] += 1;
        }
    }
    let mut acc_sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        if totals[c] == 0 {
            log::warn!("class {c} has no test samples; excluded from macro accuracy");
            continue;
        }
        acc_sum += correct[c] as f64 / totals[c] as f64;
        present += 1;
    }
    Ok(100.0 * acc_sum / present as f64)
}

/// One ablation table cell.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub objective: Objective,
    pub domain: String,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub seeds: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains one configuration and scores its best parameters on the
/// held-out target domain.
pub fn train_and_score(
    config: &TrainConfig,
    domains: &[Domain],
    split: &SplitPlan,
    eval: &PredictOptions,
) -> Result<f64> {
    let outcome = train(config, domains, split)?;
    score_params(&outcome.best, config.objective, domains, split, eval)
}

/// Scores trained parameters on the target domain of `split`.
pub fn score_params(
    params: &ModelParams,
    objective: Objective,
    domains: &[Domain],
    split: &SplitPlan,
    eval: &PredictOptions,
) -> Result<f64> {
    let target = domains
        .iter()
        .find(|d| d.id == split.target_domain)
        .ok_or_else(|| Error::Parameter(format!("target '{}' not found", split.target_domain)))?;
    let sources: Vec<Domain> = domains
        .iter()
        .filter(|d| split.source_domains.contains(&d.id))
        .cloned()
        .collect();
    let spec = crate::trainer::spec_for_domains(std::slice::from_ref(target), target.class_count)?;
    let records = predict(
        params,
        &spec,
        &sources,
        &target.images,
        &target.labels,
        objective,
        eval,
    )?;
    accuracy(&records)
}

/// Leave-one-domain-out ablation over objectives x targets x seeds, with
/// a per-objective mean row appended.
pub fn run_ablation(
    domains: &[Domain],
    base: &TrainConfig,
    objectives: &[Objective],
    targets: &[String],
    seeds: &[u64],
    validation_fraction: f64,
    eval: &PredictOptions,
) -> Result<Vec<AblationCell>> {
    if objectives.is_empty() || targets.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("ablation needs objectives, targets and seeds".into()));
    }
    let ids: Vec<String> = domains.iter().map(|d| d.id.clone()).collect();
    let mut jobs = Vec::new();
    for &objective in objectives {
        for target in targets {
            for &seed in seeds {
                jobs.push((objective, target.clone(), seed));
            }
        }
    }
    let run = |(objective, target, seed): &(Objective, String, u64)| -> Result<f64> {
        let split = make_split(&ids, target, validation_fraction)?;
        let config = TrainConfig {
            objective: *objective,
            seed: *seed,
            ..base.clone()
        };
        let eval_opts = PredictOptions {
            seed: *seed,
            ..*eval
        };
        train_and_score(&config, domains, &split, &eval_opts)
    };
    #[cfg(feature = "parallel")]
    let scores: Result<Vec<f64>> = jobs.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let scores: Result<Vec<f64>> = jobs.iter().map(run).collect();
    let scores = scores?;

    let mut cells = Vec::new();
    for (oi, &objective) in objectives.iter().enumerate() {
        let mut per_target_means = Vec::new();
        for (ti, target) in targets.iter().enumerate() {
            let at = (oi * targets.len() + ti) * seeds.len();
            let (mean, std) = mean_std(&scores[at..at + seeds.len()]);
            per_target_means.push(mean);
            cells.push(AblationCell {
                objective,
                domain: target.clone(),
                acc_mean: mean,
                acc_std: std,
                seeds: seeds.len(),
            });
        }
        let overall = per_target_means.iter().sum::<f64>() / per_target_means.len() as f64;
        cells.push(AblationCell {
            objective,
            domain: "mean".to_string(),
            acc_mean: overall,
            acc_std: 0.0,
            seeds: seeds.len(),
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Beta,
    Lz,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Lz => "lz",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "lz" => Ok(SweepAxis::Lz),
            other => Err(Error::Parameter(format!(
                "unknown sweep axis '{other}' (expected beta|lz)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub axis: SweepAxis,
    pub value: f64,
    pub domain: String,
    pub acc_mean: f64,
    pub acc_std: f64,
}

/// Trains and evaluates the base configuration at each axis value.
pub fn run_sweep(
    domains: &[Domain],
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    split: &SplitPlan,
    seeds: &[u64],
    eval: &PredictOptions,
) -> Result<Vec<SweepCell>> {
    if values.len() < 2 {
        return Err(Error::Parameter("a sweep needs at least 2 axis values".into()));
    }
    let mut jobs = Vec::new();
    for &value in values {
        for &seed in seeds {
            jobs.push((value, seed));
        }
    }
    let run = |(value, seed): &(f64, u64)| -> Result<f64> {
        let mut config = TrainConfig {
            seed: *seed,
            ..base.clone()
        };
        match axis {
            SweepAxis::Beta => config.beta = *value,
            SweepAxis::Lz => {
                if value.fract() != 0.0 || *value < 1.0 {
                    return Err(Error::Parameter(format!(
                        "lz sweep values must be positive integers, got {value}"
                    )));
                }
                config.l_z = *value as usize;
            }
        }
        let eval_opts = PredictOptions {
            seed: *seed,
            l_z: config.l_z,
            ..*eval
        };
        train_and_score(&config, domains, split, &eval_opts)
    };
    #[cfg(feature = "parallel")]
    let scores: Result<Vec<f64>> = jobs.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let scores: Result<Vec<f64>> = jobs.iter().map(run).collect();
    let scores = scores?;

    Ok(values
        .iter()
        .enumerate()
        .map(|(vi, &value)| {
            let at = vi * seeds.len();
            let (mean, std) = mean_std(&scores[at..at + seeds.len()]);
            SweepCell {
                axis,
                value,
                domain: split.target_domain.clone(),
                acc_mean: mean,
                acc_std: std,
            }
        })
        .collect())
}

/// Encoder-mean embedding of every sample of every domain.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub domain: String,
    pub label: usize,
    pub features: Vec<f64>,
}

pub fn export_embeddings(
    params: &ModelParams,
    spec: &NetworkSpec,
    domains: &[Domain],
) -> Result<Vec<EmbeddingRow>> {
    if params.get("phi2.0.w").is_none() {
        return Err(Error::Eval(
            "embedding export needs a probabilistic model (latent net missing)".into(),
        ));
    }
    let d = spec.feature_dim;
    let mut rows = Vec::new();
    for domain in domains {
        let feats = features_chunked(params, spec, &domain.images)?;
        let mut tape = Tape::new();
        let bound = params.as_constants();
        let feats_t = Tensor::new(vec![domain.len(), d], feats)?;
        let dist = infer_latent_dist(&mut tape, &bound, spec, &feats_t)?;
        let mu = dist.mu().data();
        for i in 0..domain.len() {
            rows.push(EmbeddingRow {
                domain: domain.id.clone(),
                label: domain.labels[i],
                features: mu[i * d..(i + 1) * d].to_vec(),
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------
// CSV emission (comma separators, '.' decimals, LF endings).
// ---------------------------------------------------------------------

pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "objective,domain,acc_mean,acc_std,seeds")?;
    for c in cells {
        writeln!(
            f,
            "{},{},{},{},{}",
            c.objective, c.domain, c.acc_mean, c.acc_std, c.seeds
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "axis,value,domain,acc_mean,acc_std")?;
    for c in cells {
        writeln!(f, "{},{},{},{},{}", c.axis, c.value, c.domain, c.acc_mean, c.acc_std)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_uncertainty_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    use std::io::Write;
    let classes = records
        .first()
        .map(|r| r.mean_probs.len())
        .ok_or_else(|| Error::Eval("no prediction records to write".into()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "sample_id,true_label,classifier_id")?;
    for c in 0..classes {
        write!(f, ",prob_{c}")?;
    }
    writeln!(f)?;
    for r in records {
        for (row, probs) in r.per_classifier_probs.iter().enumerate() {
            write!(f, "{},{},{}", r.sample_id, r.true_label, classifier_id(row))?;
            for p in probs {
                write!(f, ",{p}")?;
            }
            writeln!(f)?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    use std::io::Write;
    let d = rows
        .first()
        .map(|r| r.features.len())
        .ok_or_else(|| Error::Eval("no embedding rows to write".into()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "domain,label")?;
    for i in 0..d {
        write!(f, ",feat_{i}")?;
    }
    writeln!(f)?;
    for r in rows {
        write!(f, "{},{}", r.domain, r.label)?;
        for v in &r.features {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}
