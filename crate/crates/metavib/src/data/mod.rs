//! Multi-domain dataset construction and the episodic sampler.
//!
//! A base pool (decoded IDX digits or procedural glyphs) is turned into
//! rotation domains; a leave-one-domain-out split reserves one target
//! domain and a per-class validation slice of each source; the episode
//! sampler then draws the meta-train / meta-test batches that feed the
//! training loop.

pub mod idx;
pub mod rotate;
pub mod synth;

pub use idx::{load_idx, write_idx, IdxData};
pub use rotate::rotate_image;
pub use synth::synth_glyphs;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Unlabeled-domain image pool: flat `n * h * w` pixels plus labels.
#[derive(Debug, Clone)]
pub struct BasePool {
    pub h: usize,
    pub w: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl BasePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_idx(data: IdxData, class_count: usize) -> Result<BasePool> {
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(BasePool {
            h: data.rows,
            w: data.cols,
            images: data.images,
            labels: data.labels,
            class_count,
        })
    }
}

/// One rotation domain: all images share the same angle.
#[derive(Debug, Clone)]
pub struct Domain {
    pub id: String,
    pub angle_deg: f64,
    /// `[n, h, w, 1]`, values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    by_class: Vec<Vec<usize>>,
}

impl Domain {
    pub fn new(
        id: String,
        angle_deg: f64,
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Domain> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::Data(format!(
                "domain {id}: image shape {shape:?} does not match {} labels",
                labels.len()
            )));
        }
        let mut by_class = vec![Vec::new(); class_count];
        for (i, &l) in labels.iter().enumerate() {
            if l >= class_count {
                return Err(Error::Data(format!(
                    "domain {id}: label {l} outside 0..{class_count}"
                )));
            }
            by_class[l].push(i);
        }
        Ok(Domain {
            id,
            angle_deg,
            images,
            labels,
            class_count,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    fn item_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Copies the selected rows into a fresh `[k, h, w, 1]` tensor.
    pub fn gather_images(&self, indices: &[usize]) -> Tensor {
        let item = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * item..(i + 1) * item]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, data).expect("gather preserves the item shape")
    }

    /// A new domain containing the selected rows.
    pub fn subset(&self, id_suffix: &str, indices: &[usize]) -> Result<Domain> {
        Domain::new(
            format!("{}{}", self.id, id_suffix),
            self.angle_deg,
            self.gather_images(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }
}

/// Per-class meta-train group: every image in `images` has class `class`.
#[derive(Debug, Clone)]
pub struct ClassGroup {
    pub class: usize,
    pub images: Tensor,
}

/// One meta-train / meta-test split of the source domains.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Indexed by class; covers every class.
    pub meta_train: Vec<ClassGroup>,
    pub meta_test_images: Tensor,
    pub meta_test_labels: Vec<usize>,
    pub class_count: usize,
}

impl Episode {
    /// All episode samples pooled into one flat batch (meta-train groups
    /// in class order, then meta-test). Used by the deterministic
    /// objective, which has no meta split.
    pub fn pooled_batch(&self) -> (Tensor, Vec<usize>) {
        let item: usize = self.meta_test_images.shape()[1..].iter().product();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for group in &self.meta_train {
            data.extend_from_slice(group.images.data());
            labels.extend(std::iter::repeat_n(group.class, group.images.shape()[0]));
        }
        data.extend_from_slice(self.meta_test_images.data());
        labels.extend_from_slice(&self.meta_test_labels);
        let mut shape = self.meta_test_images.shape().to_vec();
        shape[0] = labels.len();
        debug_assert_eq!(data.len(), labels.len() * item);
        (Tensor::new(shape, data).expect("pooled batch shape"), labels)
    }
}

/// Leave-one-domain-out plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub source_domains: Vec<String>,
    pub target_domain: String,
    pub validation_fraction: f64,
}

pub fn make_split(
    domain_ids: &[String],
    target_id: &str,
    validation_fraction: f64,
) -> Result<SplitPlan> {
    if !domain_ids.iter().any(|d| d == target_id) {
        return Err(Error::Parameter(format!(
            "unknown target domain '{target_id}' (have {domain_ids:?})"
        )));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "validation_fraction must be in (0, 1), got {validation_fraction} \
             (model selection requires a validation split)"
        )));
    }
    let source_domains: Vec<String> = domain_ids
        .iter()
        .filter(|d| d.as_str() != target_id)
        .cloned()
        .collect();
    Ok(SplitPlan {
        source_domains,
        target_domain: target_id.to_string(),
        validation_fraction,
    })
}

/// Materialized split: per-source train/validation slices plus the
/// untouched target domain.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<Domain>,
    pub validation: Vec<Domain>,
    pub target: Domain,
}

/// Applies a [`SplitPlan`]: the trailing `validation_fraction` of every
/// class within every source domain is reserved for validation.
pub fn apply_split(domains: &[Domain], plan: &SplitPlan) -> Result<SplitData> {
    let find = |id: &str| -> Result<&Domain> {
        domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::Parameter(format!("domain '{id}' not found")))
    };
    let target = find(&plan.target_domain)?.clone();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for id in &plan.source_domains {
        let domain = find(id)?;
        let mut train_idx = Vec::new();
        let mut val_idx = Vec::new();
        for class in 0..domain.class_count {
            let members = domain.class_indices(class);
            // Ceiling keeps at least one validation sample per occupied class.
            let n_val = ((members.len() as f64) * plan.validation_fraction).ceil() as usize;
            let n_val = n_val.min(members.len());
            let cut = members.len() - n_val;
            train_idx.extend_from_slice(&members[..cut]);
            val_idx.extend_from_slice(&members[cut..]);
        }
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        train.push(domain.subset("", &train_idx)?);
        validation.push(domain.subset("", &val_idx)?);
    }
    Ok(SplitData {
        train,
        validation,
        target,
    })
}

fn format_domain_id(angle: f64) -> String {
    if angle.fract() == 0.0 {
        format!("M{}", angle as i64)
    } else {
        format!("M{angle}")
    }
}

/// The six-angle default of the rotation protocol.
pub fn default_angles() -> Vec<f64> {
    vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0]
}

/// Builds one domain per angle by sampling `per_domain / class_count`
/// images per class from the base pool (without replacement within a
/// domain) and rotating each by the domain angle.
pub fn build_rotation_domains(
    base: &BasePool,
    angles: &[f64],
    per_domain: usize,
    rng: &mut SeedStream,
) -> Result<Vec<Domain>> {
    let classes = base.class_count;
    if per_domain == 0 || per_domain % classes != 0 {
        return Err(Error::Parameter(format!(
            "per_domain {per_domain} must be a positive multiple of class count {classes}"
        )));
    }
    let per_class = per_domain / classes;
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in base.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::Data(format!(
                "class {class} has {} base images, need {per_class} per domain",
                members.len()
            )));
        }
    }
    let px = base.h * base.w;
    let mut domains = Vec::with_capacity(angles.len());
    for &angle in angles {
        let mut data = Vec::with_capacity(per_domain * px);
        let mut labels = Vec::with_capacity(per_domain);
        for (class, members) in by_class.iter().enumerate() {
            let picks = rng.sample_without_replacement(members.len(), per_class);
            for p in picks {
                let src = &base.images[members[p] * px..(members[p] + 1) * px];
                data.extend(rotate_image(src, base.h, base.w, angle));
                labels.push(class);
            }
        }
        domains.push(Domain::new(
            format_domain_id(angle),
            angle,
            Tensor::new(vec![per_domain, base.h, base.w, 1], data)?,
            labels,
            classes,
        )?);
    }
    Ok(domains)
}

/// How many source domains one episode draws from (one of them becomes
/// the meta-test domain).
pub const EPISODE_DOMAINS: usize = 3;

/// Samples one episode: a uniformly chosen meta-test domain, up to two
/// meta-train domains from the remainder, and `batch_per_domain` samples
/// per selected domain. Meta-train draws are class-stratified so that
/// every class is represented.
pub fn sample_episode(
    domains: &[Domain],
    batch_per_domain: usize,
    rng: &mut SeedStream,
) -> Result<Episode> {
    if domains.len() < 2 {
        return Err(Error::Protocol(format!(
            "episodes need at least 2 source domains, have {}",
            domains.len()
        )));
    }
    if batch_per_domain == 0 {
        return Err(Error::Parameter("batch_per_domain must be positive".into()));
    }
    let classes = domains[0].class_count;

    let test_at = rng.index(domains.len());
    let rest: Vec<&Domain> = domains
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != test_at)
        .map(|(_, d)| d)
        .collect();
    let train_domains: Vec<&Domain> = if rest.len() <= EPISODE_DOMAINS - 1 {
        rest
    } else {
        rng.sample_without_replacement(rest.len(), EPISODE_DOMAINS - 1)
            .into_iter()
            .map(|i| rest[i])
            .collect()
    };

    let total_slots = train_domains.len() * batch_per_domain;
    if total_slots < classes {
        return Err(Error::Protocol(format!(
            "cannot cover {classes} classes with {total_slots} meta-train samples"
        )));
    }

    // Class-stratified meta-train quota: a shuffled class order cycled
    // across all slots, so coverage is guaranteed and remainders are
    // spread evenly.
    let mut class_order: Vec<usize> = (0..classes).collect();
    rng.shuffle(&mut class_order);
    let mut quota = vec![vec![0usize; classes]; train_domains.len()];
    for slot in 0..total_slots {
        quota[slot / batch_per_domain][class_order[slot % classes]] += 1;
    }

    let mut group_indices: Vec<Vec<(usize, usize)>> = vec![Vec::new(); classes];
    for (d, domain) in train_domains.iter().enumerate() {
        for class in 0..classes {
            let want = quota[d][class];
            if want == 0 {
                continue;
            }
            let members = domain.class_indices(class);
            if members.len() < want {
                return Err(Error::Protocol(format!(
                    "domain {} holds {} samples of class {class}, episode needs {want}",
                    domain.id,
                    members.len()
                )));
            }
            for p in rng.sample_without_replacement(members.len(), want) {
                group_indices[class].push((d, members[p]));
            }
        }
    }
    let meta_train: Vec<ClassGroup> = group_indices
        .into_iter()
        .enumerate()
        .map(|(class, picks)| {
            let item: usize = train_domains[0].images.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(picks.len() * item);
            for (d, i) in &picks {
                let images = train_domains[*d].images.data();
                data.extend_from_slice(&images[i * item..(i + 1) * item]);
            }
            let mut shape = train_domains[0].images.shape().to_vec();
            shape[0] = picks.len();
            ClassGroup {
                class,
                images: Tensor::new(shape, data).expect("class group shape"),
            }
        })
        .collect();
    debug_assert!(meta_train.iter().all(|g| g.images.shape()[0] > 0));

    let test_domain = &domains[test_at];
    if test_domain.len() < batch_per_domain {
        return Err(Error::Protocol(format!(
            "domain {} holds {} samples, episode needs {batch_per_domain}",
            test_domain.id,
            test_domain.len()
        )));
    }
    let picks = rng.sample_without_replacement(test_domain.len(), batch_per_domain);
    let meta_test_images = test_domain.gather_images(&picks);
    let meta_test_labels = picks.iter().map(|&i| test_domain.labels[i]).collect();

    Ok(Episode {
        meta_train,
        meta_test_images,
        meta_test_labels,
        class_count: classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyph_domains(per_domain: usize, seed: u64) -> Vec<Domain> {
        let mut rng = SeedStream::new(seed);
        let pool = synth_glyphs(10, per_domain / 10 + 30, 0.05, &mut rng).unwrap();
        build_rotation_domains(&pool, &default_angles(), per_domain, &mut rng).unwrap()
    }

    #[test]
    fn rotation_domains_have_stratified_classes() {
        let domains = glyph_domains(100, 1);
        assert_eq!(domains.len(), 6);
        assert_eq!(domains[0].id, "M0");
        assert_eq!(domains[5].id, "M75");
        for d in &domains {
            assert_eq!(d.len(), 100);
            for class in 0..10 {
                assert_eq!(d.class_indices(class).len(), 10, "domain {}", d.id);
            }
        }
    }

    #[test]
    fn insufficient_class_population_is_a_data_error() {
        let mut rng = SeedStream::new(2);
        let pool = synth_glyphs(10, 5, 0.0, &mut rng).unwrap();
        assert!(matches!(
            build_rotation_domains(&pool, &[0.0], 100, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rotation_preserves_mean_intensity() {
        let mut rng = SeedStream::new(3);
        let pool = synth_glyphs(10, 40, 0.1, &mut rng).unwrap();
        let domains = build_rotation_domains(&pool, &default_angles(), 200, &mut rng).unwrap();
        let mean = |d: &Domain| d.images.data().iter().sum::<f64>() / d.images.len() as f64;
        let base = mean(&domains[0]);
        for d in &domains[1..] {
            let m = mean(d);
            assert!(
                (m - base).abs() / base < 0.05,
                "domain {}: mean {m} vs base {base}",
                d.id
            );
        }
    }

    #[test]
    fn split_plan_contract() {
        let ids: Vec<String> = default_angles().iter().map(|&a| format!("M{}", a as i64)).collect();
        let plan = make_split(&ids, "M75", 0.1).unwrap();
        assert_eq!(plan.source_domains.len(), 5);
        assert!(!plan.source_domains.contains(&"M75".to_string()));
        assert!(make_split(&ids, "M75", 0.0).is_err());
        assert!(make_split(&ids, "M99", 0.1).is_err());
    }

    #[test]
    fn apply_split_reserves_validation_per_class() {
        let domains = glyph_domains(100, 4);
        let ids: Vec<String> = domains.iter().map(|d| d.id.clone()).collect();
        let plan = make_split(&ids, "M30", 0.1).unwrap();
        let split = apply_split(&domains, &plan).unwrap();
        assert_eq!(split.target.id, "M30");
        assert_eq!(split.train.len(), 5);
        for (t, v) in split.train.iter().zip(&split.validation) {
            assert_eq!(t.len(), 90);
            assert_eq!(v.len(), 10);
            for class in 0..10 {
                assert_eq!(t.class_indices(class).len(), 9);
                assert_eq!(v.class_indices(class).len(), 1);
            }
        }
    }

    #[test]
    fn episode_covers_all_classes_and_respects_forced_split() {
        let domains = glyph_domains(100, 5);
        let mut rng = SeedStream::new(6);
        let ep = sample_episode(&domains, 32, &mut rng).unwrap();
        assert_eq!(ep.meta_train.len(), 10);
        let train_total: usize = ep.meta_train.iter().map(|g| g.images.shape()[0]).sum();
        assert_eq!(train_total, 64);
        assert!(ep.meta_train.iter().all(|g| g.images.shape()[0] > 0));
        assert_eq!(ep.meta_test_labels.len(), 32);

        // Two sources force a 1 train + 1 test split.
        let two = &domains[..2];
        let ep = sample_episode(two, 20, &mut rng).unwrap();
        let train_total: usize = ep.meta_train.iter().map(|g| g.images.shape()[0]).sum();
        assert_eq!(train_total, 20);

        assert!(matches!(
            sample_episode(&domains[..1], 20, &mut rng),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn episode_meta_test_domain_frequency_is_uniform() {
        let domains = glyph_domains(50, 7);
        let five = &domains[..5];
        let item: usize = five[0].images.shape()[1..].iter().product();
        // Pixel noise makes the central slice of every image unique, so
        // the first meta-test image identifies its domain of origin.
        let key = 14 * 28;
        let origin = |ep: &Episode| -> usize {
            let probe = &ep.meta_test_images.data()[key..key + 64];
            five.iter()
                .position(|d| {
                    d.images
                        .data()
                        .chunks(item)
                        .any(|row| &row[key..key + 64] == probe)
                })
                .expect("meta-test image must come from a source domain")
        };
        let mut counts = vec![0usize; 5];
        let mut rng = SeedStream::new(8);
        let draws = 10_000;
        for _ in 0..draws {
            let ep = sample_episode(five, 5, &mut rng).unwrap();
            counts[origin(&ep)] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() < 0.03, "frequency {freq}");
        }
    }

    #[test]
    fn pooled_batch_concatenates_everything() {
        let domains = glyph_domains(60, 10);
        let mut rng = SeedStream::new(11);
        let ep = sample_episode(&domains, 12, &mut rng).unwrap();
        let (images, labels) = ep.pooled_batch();
        assert_eq!(images.shape()[0], labels.len());
        assert_eq!(labels.len(), 24 + 12);
    }
}
