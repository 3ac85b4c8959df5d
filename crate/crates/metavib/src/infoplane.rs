//! Information-plane estimates over training checkpoints.
//!
//! For each checkpoint, the three outputs of the latent inference net are
//! probed on a fixed labeled batch: the two hidden ELU layers and the
//! latent code itself (reparameterized draws, so the code's noise floor
//! counts against its information about the input). Each activation
//! dimension is discretized into equal-width bins over its observed
//! range, plug-in discrete mutual information is computed against sample
//! identity (for X) and against the label (for Y), and the per-dimension
//! values are averaged into the layer estimate. Binning over the observed
//! range makes the estimate exactly invariant to monotone affine
//! rescaling of the activations.

use std::path::Path;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::features_chunked;
use crate::networks::{infer_latent_layers, ModelParams, NetworkSpec};
use crate::rng::SeedStream;

pub const DEFAULT_BINS: usize = 30;
/// Reparameterized draws per probe sample for the latent-code layer.
pub const LATENT_DRAWS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct InfoPlaneRow {
    pub iter: usize,
    /// 1-based layer index within the latent inference net.
    pub layer: usize,
    pub i_xt: f64,
    pub i_ty: f64,
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information of one binned activation column against a
/// discrete grouping.
fn column_mi(bins_of: &[usize], groups: &[usize], n_bins: usize, n_groups: usize) -> f64 {
    let rows = bins_of.len();
    let mut marginal = vec![0usize; n_bins];
    let mut joint = vec![0usize; n_groups * n_bins];
    let mut group_sizes = vec![0usize; n_groups];
    for (&b, &g) in bins_of.iter().zip(groups) {
        marginal[b] += 1;
        joint[g * n_bins + b] += 1;
        group_sizes[g] += 1;
    }
    let h = entropy(&marginal, rows);
    let mut h_cond = 0.0;
    for g in 0..n_groups {
        if group_sizes[g] == 0 {
            continue;
        }
        let slice = &joint[g * n_bins..(g + 1) * n_bins];
        h_cond += group_sizes[g] as f64 / rows as f64 * entropy(slice, group_sizes[g]);
    }
    (h - h_cond).max(0.0)
}

/// Layer-level estimate: per-dimension binned MI against sample identity
/// and against labels, averaged over dimensions. Returns `(i_xt, i_ty)`.
/// `values` is `rows x dims` row-major; `sample_of[r]` and `label_of[r]`
/// give row r's sample id and label.
pub(crate) fn layer_mi(
    values: &[f64],
    rows: usize,
    dims: usize,
    sample_of: &[usize],
    label_of: &[usize],
    n_samples: usize,
    n_labels: usize,
    bins: usize,
) -> (f64, f64) {
    let mut i_xt_sum = 0.0;
    let mut i_ty_sum = 0.0;
    let mut constant_dims = 0usize;
    let mut binned = vec![0usize; rows];
    for j in 0..dims {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..rows {
            let v = values[r * dims + j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi <= lo {
            constant_dims += 1;
            continue; // zero information in a constant activation
        }
        let scale = bins as f64 / (hi - lo);
        for r in 0..rows {
            let v = values[r * dims + j];
            binned[r] = (((v - lo) * scale) as usize).min(bins - 1);
        }
        i_xt_sum += column_mi(&binned, sample_of, bins, n_samples);
        i_ty_sum += column_mi(&binned, label_of, bins, n_labels);
    }
    if constant_dims == dims {
        log::warn!("all {dims} activations constant; information set to 0");
        return (0.0, 0.0);
    }
    (i_xt_sum / dims as f64, i_ty_sum / dims as f64)
}

/// Information-plane series over a checkpoint history.
pub fn info_plane(
    history: &[(usize, ModelParams)],
    spec: &NetworkSpec,
    probe_images: &Tensor,
    probe_labels: &[usize],
    bins: usize,
) -> Result<Vec<InfoPlaneRow>> {
    if history.len() < 2 {
        return Err(Error::Parameter(format!(
            "information-plane series needs >= 2 checkpoints, got {}",
            history.len()
        )));
    }
    if bins < 2 {
        return Err(Error::Parameter("bin count must be >= 2".into()));
    }
    let n = probe_images.shape()[0];
    if n == 0 || n != probe_labels.len() {
        return Err(Error::Parameter(format!(
            "probe batch of {n} images does not match {} labels",
            probe_labels.len()
        )));
    }
    let classes = spec.class_count;
    let d = spec.feature_dim;
    let identity: Vec<usize> = (0..n).collect();

    let mut rows = Vec::new();
    for (iter, params) in history {
        let feats = features_chunked(params, spec, probe_images)?;
        let mut tape = Tape::new();
        let bound = params.as_constants();
        let feats_t = Tensor::new(vec![n, d], feats)?;
        let (taps, dist) = infer_latent_layers(&mut tape, &bound, spec, &feats_t)?;

        let mut layer = 1usize;
        for tap in &taps {
            let (i_xt, i_ty) = layer_mi(
                tap.data(),
                n,
                d,
                &identity,
                probe_labels,
                n,
                classes,
                bins,
            );
            rows.push(InfoPlaneRow {
                iter: *iter,
                layer,
                i_xt,
                i_ty,
            });
            layer += 1;
        }

        // The latent code: reparameterized draws with a fixed stream, so
        // the estimate sees the code's sampling noise.
        let mut rng = SeedStream::new(0x1f0_9a7e ^ *iter as u64);
        let mu = dist.mu().data();
        let sigma: Vec<f64> = dist.log_var().data().iter().map(|lv| (0.5 * lv).exp()).collect();
        let draw_rows = n * LATENT_DRAWS;
        let mut draws = vec![0.0; draw_rows * d];
        let mut sample_of = vec![0usize; draw_rows];
        let mut label_of = vec![0usize; draw_rows];
        for i in 0..n {
            for s in 0..LATENT_DRAWS {
                let r = i * LATENT_DRAWS + s;
                sample_of[r] = i;
                label_of[r] = probe_labels[i];
                let dst = &mut draws[r * d..(r + 1) * d];
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = mu[i * d + j] + sigma[i * d + j] * rng.normal();
                }
            }
        }
        let (i_xt, i_ty) = layer_mi(
            &draws,
            draw_rows,
            d,
            &sample_of,
            &label_of,
            n,
            classes,
            bins,
        );
        rows.push(InfoPlaneRow {
            iter: *iter,
            layer,
            i_xt,
            i_ty,
        });
    }
    Ok(rows)
}

pub fn write_infoplane_csv(path: &Path, rows: &[InfoPlaneRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,layer,I_XT,I_TY")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.iter, r.layer, r.i_xt, r.i_ty)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_rotation_domains, default_angles, synth_glyphs};
    use crate::networks::ParamSet;

    fn probe_world(seed: u64) -> (NetworkSpec, ModelParams, Tensor, Vec<usize>) {
        let mut rng = SeedStream::new(seed);
        let pool = synth_glyphs(10, 12, 0.05, &mut rng).unwrap();
        let domains = build_rotation_domains(&pool, &default_angles()[..2], 60, &mut rng).unwrap();
        let spec = NetworkSpec::conv_default(28, 28, 1, 10);
        let params = ModelParams::init(&spec, ParamSet::Probabilistic, &mut rng).unwrap();
        let probe = domains[0].images.clone();
        let labels = domains[0].labels.clone();
        (spec, params, probe, labels)
    }

    #[test]
    fn label_information_is_bounded_by_label_entropy() {
        let (spec, params, probe, labels) = probe_world(1);
        let history = vec![(0usize, params.clone()), (1usize, params)];
        let rows = info_plane(&history, &spec, &probe, &labels, DEFAULT_BINS).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        let h_y = 10f64.ln();
        for r in &rows {
            assert!(r.i_ty <= h_y + 1e-12, "layer {}: {}", r.layer, r.i_ty);
            assert!(r.i_xt >= 0.0 && r.i_ty >= 0.0);
        }
    }

    #[test]
    fn shuffled_labels_sit_on_the_permutation_null() {
        let (spec, params, probe, labels) = probe_world(2);
        let history = vec![(0usize, params.clone()), (1usize, params)];
        let mi_with = |labels: &[usize]| -> f64 {
            info_plane(&history, &spec, &probe, labels, DEFAULT_BINS).unwrap()[2].i_ty
        };
        let mut shuffles: Vec<f64> = Vec::new();
        for s in 0..6 {
            let mut rng = SeedStream::new(100 + s);
            let mut shuffled = labels.clone();
            rng.shuffle(&mut shuffled);
            shuffles.push(mi_with(&shuffled));
        }
        let baseline = shuffles[1..].iter().sum::<f64>() / (shuffles.len() - 1) as f64;
        // An untrained net carries no label information beyond estimator
        // bias, and the bias is shared with the permutation null.
        assert!(
            (shuffles[0] - baseline).abs() < 0.05,
            "shuffled {} vs null baseline {}",
            shuffles[0],
            baseline
        );
    }

    #[test]
    fn estimates_are_invariant_to_affine_rescaling() {
        let values: Vec<f64> = (0..40 * 6).map(|i| ((i * 29 + 3) % 17) as f64 * 0.21).collect();
        let groups: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let labels: Vec<usize> = (0..40).map(|i| (i / 10) % 2).collect();
        let base = layer_mi(&values, 40, 6, &groups, &labels, 4, 2, 8);
        let scaled: Vec<f64> = values.iter().map(|v| 3.7 * v - 11.0).collect();
        let redone = layer_mi(&scaled, 40, 6, &groups, &labels, 4, 2, 8);
        assert_eq!(base, redone);
        // Negative scale flips the bin order; only edge rounding can move,
        // so the estimate stays put up to a tiny tolerance.
        let flipped: Vec<f64> = values.iter().map(|v| -2.0 * v + 5.0).collect();
        let refl = layer_mi(&flipped, 40, 6, &groups, &labels, 4, 2, 8);
        assert!((base.0 - refl.0).abs() < 0.05 && (base.1 - refl.1).abs() < 0.05);
    }

    #[test]
    fn constant_activations_produce_zero_information() {
        let values = vec![0.5; 20 * 3];
        let groups: Vec<usize> = (0..20).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let (i_xt, i_ty) = layer_mi(&values, 20, 3, &groups, &labels, 20, 2, 10);
        assert_eq!((i_xt, i_ty), (0.0, 0.0));
    }

    #[test]
    fn fewer_than_two_checkpoints_is_an_error() {
        let (spec, params, probe, labels) = probe_world(3);
        let history = vec![(0usize, params)];
        assert!(matches!(
            info_plane(&history, &spec, &probe, &labels, DEFAULT_BINS),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("infoplane.csv");
        write_infoplane_csv(
            &path,
            &[InfoPlaneRow {
                iter: 100,
                layer: 1,
                i_xt: 2.25,
                i_ty: 0.5,
            }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "iter,layer,I_XT,I_TY\n100,1,2.25,0.5\n"
        );
    }
}
