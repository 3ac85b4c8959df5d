//! The three parameterized networks: a small convolutional feature
//! extractor, the classifier-weight inference net, and the latent
//! inference net, plus permutation-invariant instance pooling.
//!
//! Networks are described declaratively by a [`NetworkSpec`] and executed
//! by a small interpreter over the tape, so the same code runs the
//! desk-scale 28x28 model and the tiny fixtures used in gradient checks.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{GradientMap, Padding, Tape, Tensor};
use crate::checkpoint::{self, TensorRecord};
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Elu,
}

#[derive(Debug, Clone)]
pub enum LayerSpec {
    Conv2d {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool2d {
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    },
    Flatten,
    Dense {
        input: usize,
        output: usize,
        activation: Activation,
    },
    /// Two linear heads producing the mean and log-variance of a
    /// diagonal Gaussian.
    GaussianHead { input: usize, output: usize },
}

impl LayerSpec {
    fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } | LayerSpec::GaussianHead { .. }
        )
    }
}

/// Declarative description of the whole model family.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    /// Input image extents (height, width, channels).
    pub input_shape: [usize; 3],
    /// Feature extractor; must end in a `[batch, feature_dim]` tensor.
    pub feature: Vec<LayerSpec>,
    /// Classifier-weight inference net (applied to pooled class features).
    pub weight_inference: Vec<LayerSpec>,
    /// Latent inference net (applied to pooled or per-sample features).
    pub latent_inference: Vec<LayerSpec>,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl NetworkSpec {
    /// The small convolutional backbone: two conv+pool stages, a dense
    /// layer to a 256-d feature, and two-hidden-layer ELU inference nets
    /// whose Gaussian heads match the feature width.
    pub fn conv_default(h: usize, w: usize, channels: usize, classes: usize) -> NetworkSpec {
        let feature_dim = 256;
        let pooled = |e: usize| {
            // conv is SAME/stride 1; pool is 3x3 stride 2 VALID.
            (e - 3) / 2 + 1
        };
        let (h2, w2) = (pooled(h), pooled(w));
        let (h3, w3) = (pooled(h2), pooled(w2));
        let flat = h3 * w3 * 32;
        let inference = |dim: usize| {
            vec![
                LayerSpec::Dense {
                    input: feature_dim,
                    output: dim,
                    activation: Activation::Elu,
                },
                LayerSpec::Dense {
                    input: dim,
                    output: dim,
                    activation: Activation::Elu,
                },
                LayerSpec::GaussianHead {
                    input: dim,
                    output: feature_dim,
                },
            ]
        };
        NetworkSpec {
            input_shape: [h, w, channels],
            feature: vec![
                LayerSpec::Conv2d {
                    kh: 3,
                    kw: 3,
                    cin: channels,
                    cout: 32,
                    stride: 1,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
                LayerSpec::MaxPool2d {
                    kh: 3,
                    kw: 3,
                    stride: 2,
                    padding: Padding::Valid,
                },
                LayerSpec::Conv2d {
                    kh: 3,
                    kw: 3,
                    cin: 32,
                    cout: 32,
                    stride: 1,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
                LayerSpec::MaxPool2d {
                    kh: 3,
                    kw: 3,
                    stride: 2,
                    padding: Padding::Valid,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: flat,
                    output: feature_dim,
                    activation: Activation::Relu,
                },
            ],
            weight_inference: inference(feature_dim),
            latent_inference: inference(feature_dim),
            feature_dim,
            class_count: classes,
        }
    }

    /// A tiny dense model on 2x2 single-channel inputs, for gradient
    /// checks and fast tests.
    pub fn toy(feature_dim: usize, classes: usize) -> NetworkSpec {
        NetworkSpec {
            input_shape: [2, 2, 1],
            feature: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 4,
                    output: feature_dim,
                    activation: Activation::Relu,
                },
            ],
            weight_inference: vec![
                LayerSpec::Dense {
                    input: feature_dim,
                    output: feature_dim,
                    activation: Activation::Elu,
                },
                LayerSpec::GaussianHead {
                    input: feature_dim,
                    output: feature_dim,
                },
            ],
            latent_inference: vec![
                LayerSpec::Dense {
                    input: feature_dim,
                    output: feature_dim,
                    activation: Activation::Elu,
                },
                LayerSpec::GaussianHead {
                    input: feature_dim,
                    output: feature_dim,
                },
            ],
            feature_dim,
            class_count: classes,
        }
    }

    /// Checks that consecutive layer shapes compose and that the nets end
    /// with the declared feature width.
    pub fn validate(&self) -> Result<()> {
        let [mut sh, mut sw, mut sc] = self.input_shape;
        let mut flat: Option<usize> = None;
        for (i, layer) in self.feature.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d {
                    kh,
                    kw,
                    cin,
                    cout,
                    stride,
                    padding,
                    ..
                } => {
                    if flat.is_some() || *cin != sc {
                        return Err(Error::Parameter(format!(
                            "feature layer {i}: conv input channels {cin} do not compose (have {sc})"
                        )));
                    }
                    let g = crate::autodiff::WindowGeom::compute(sh, sw, *kh, *kw, *stride, *padding)?;
                    sh = g.oh;
                    sw = g.ow;
                    sc = *cout;
                }
                LayerSpec::MaxPool2d {
                    kh,
                    kw,
                    stride,
                    padding,
                } => {
                    if flat.is_some() {
                        return Err(Error::Parameter(format!("feature layer {i}: pool after flatten")));
                    }
                    let g = crate::autodiff::WindowGeom::compute(sh, sw, *kh, *kw, *stride, *padding)?;
                    sh = g.oh;
                    sw = g.ow;
                }
                LayerSpec::Flatten => {
                    flat = Some(sh * sw * sc);
                }
                LayerSpec::Dense { input, output, .. } => {
                    let have = flat.ok_or_else(|| {
                        Error::Parameter(format!("feature layer {i}: dense before flatten"))
                    })?;
                    if have != *input {
                        return Err(Error::Parameter(format!(
                            "feature layer {i}: dense expects {input}, composes to {have}"
                        )));
                    }
                    flat = Some(*output);
                }
                LayerSpec::GaussianHead { .. } => {
                    return Err(Error::Parameter(format!(
                        "feature layer {i}: gaussian head is only valid in inference nets"
                    )));
                }
            }
        }
        if flat != Some(self.feature_dim) {
            return Err(Error::Parameter(format!(
                "feature net composes to {flat:?}, expected {}",
                self.feature_dim
            )));
        }
        for (name, net) in [
            ("weight_inference", &self.weight_inference),
            ("latent_inference", &self.latent_inference),
        ] {
            let mut width = self.feature_dim;
            let mut ended = false;
            for (i, layer) in net.iter().enumerate() {
                match layer {
                    LayerSpec::Dense { input, output, .. } => {
                        if ended || *input != width {
                            return Err(Error::Parameter(format!(
                                "{name} layer {i}: dense expects {input}, composes to {width}"
                            )));
                        }
                        width = *output;
                    }
                    LayerSpec::GaussianHead { input, output } => {
                        if ended || *input != width {
                            return Err(Error::Parameter(format!(
                                "{name} layer {i}: head expects {input}, composes to {width}"
                            )));
                        }
                        if *output != self.feature_dim {
                            return Err(Error::Parameter(format!(
                                "{name} layer {i}: head width {output} must match feature dim {}",
                                self.feature_dim
                            )));
                        }
                        ended = true;
                    }
                    _ => {
                        return Err(Error::Parameter(format!(
                            "{name} layer {i}: only dense layers and a gaussian head are valid"
                        )));
                    }
                }
            }
            if !ended {
                return Err(Error::Parameter(format!("{name} must end in a gaussian head")));
            }
        }
        Ok(())
    }
}

/// Which trainable groups a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSet {
    /// Feature extractor plus both inference nets.
    Probabilistic,
    /// Feature extractor plus a dense classifier head.
    Deterministic,
}

/// Named trainable tensors. The set of names is fixed at construction;
/// values are replaced in place by the optimizer.
#[derive(Debug, Clone)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// The tape-registered view of [`ModelParams`] used during one loss
/// evaluation.
pub struct BoundParams {
    tensors: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    /// Gradient per parameter name, densified to zeros for parameters the
    /// backward sweep never reached.
    pub fn gather(&self, grads: &GradientMap) -> BTreeMap<String, Vec<f64>> {
        self.tensors
            .iter()
            .map(|(name, t)| (name.clone(), grads.get_or_zeros(t)))
            .collect()
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, in a fixed name order.
    pub fn init(spec: &NetworkSpec, set: ParamSet, rng: &mut SeedStream) -> Result<ModelParams> {
        spec.validate()?;
        let mut tensors = BTreeMap::new();
        init_group(&mut tensors, "theta", &spec.feature, rng)?;
        match set {
            ParamSet::Probabilistic => {
                init_group(&mut tensors, "phi1", &spec.weight_inference, rng)?;
                init_group(&mut tensors, "phi2", &spec.latent_inference, rng)?;
            }
            ParamSet::Deterministic => {
                let w = glorot(
                    spec.feature_dim * spec.class_count,
                    spec.feature_dim,
                    spec.class_count,
                    rng,
                );
                tensors.insert(
                    "head.w".into(),
                    Tensor::new(vec![spec.feature_dim, spec.class_count], w)?,
                );
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// A constant (non-recording) view for gradient-free forward passes.
    /// Operations on constants never grow the tape, so bulk evaluation
    /// does not retain intermediate activations.
    pub fn as_constants(&self) -> BoundParams {
        BoundParams {
            tensors: self.tensors.clone(),
        }
    }

    pub fn to_records(&self, prefix: &str) -> Vec<TensorRecord> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                TensorRecord::new(format!("{prefix}{name}"), t.shape().to_vec(), t.data().to_vec())
            })
            .collect()
    }

    pub fn from_records(records: &[TensorRecord], prefix: &str) -> Result<ModelParams> {
        let mut tensors = BTreeMap::new();
        for r in records {
            if let Some(name) = r.name.strip_prefix(prefix) {
                tensors.insert(name.to_string(), Tensor::new(r.shape.clone(), r.data.clone())?);
            }
        }
        if tensors.is_empty() {
            return Err(Error::Format {
                message: format!("no parameter records with prefix '{prefix}'"),
                offset: 0,
            });
        }
        Ok(ModelParams { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_records(path, &self.to_records("param."))
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        ModelParams::from_records(&checkpoint::read_records(path)?, "param.")
    }
}

fn glorot(count: usize, fan_in: usize, fan_out: usize, rng: &mut SeedStream) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.uniform_in(-bound, bound)).collect()
}

fn init_group(
    tensors: &mut BTreeMap<String, Tensor>,
    group: &str,
    layers: &[LayerSpec],
    rng: &mut SeedStream,
) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        if !layer.has_params() {
            continue;
        }
        match layer {
            LayerSpec::Conv2d {
                kh,
                kw,
                cin,
                cout,
                ..
            } => {
                let fan_in = kh * kw * cin;
                let fan_out = kh * kw * cout;
                tensors.insert(
                    format!("{group}.{i}.w"),
                    Tensor::new(
                        vec![*kh, *kw, *cin, *cout],
                        glorot(kh * kw * cin * cout, fan_in, fan_out, rng),
                    )?,
                );
                tensors.insert(format!("{group}.{i}.b"), Tensor::zeros(vec![*cout]));
            }
            LayerSpec::Dense { input, output, .. } => {
                tensors.insert(
                    format!("{group}.{i}.w"),
                    Tensor::new(vec![*input, *output], glorot(input * output, *input, *output, rng))?,
                );
                tensors.insert(format!("{group}.{i}.b"), Tensor::zeros(vec![*output]));
            }
            LayerSpec::GaussianHead { input, output } => {
                tensors.insert(
                    format!("{group}.{i}.mu.w"),
                    Tensor::new(vec![*input, *output], glorot(input * output, *input, *output, rng))?,
                );
                tensors.insert(format!("{group}.{i}.mu.b"), Tensor::zeros(vec![*output]));
                tensors.insert(
                    format!("{group}.{i}.lv.w"),
                    Tensor::new(vec![*input, *output], glorot(input * output, *input, *output, rng))?,
                );
                tensors.insert(format!("{group}.{i}.lv.b"), Tensor::zeros(vec![*output]));
            }
            _ => unreachable!(),
        }
    }
    Ok(())
}

fn activate(tape: &mut Tape, x: Tensor, act: Activation) -> Result<Tensor> {
    match act {
        Activation::None => Ok(x),
        Activation::Relu => tape.relu(&x),
        Activation::Elu => tape.elu(&x),
    }
}

/// Feature extractor h: images `[B, h, w, c]` to features `[B, feature_dim]`.
pub fn feature_extract(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    images: &Tensor,
) -> Result<Tensor> {
    let want: Vec<usize> = spec.input_shape.to_vec();
    if images.shape().len() != 4 || images.shape()[1..] != want[..] {
        return Err(Error::Shape {
            op: "feature_extract",
            lhs: images.shape().to_vec(),
            rhs: vec![images.shape().first().copied().unwrap_or(0), want[0], want[1], want[2]],
        });
    }
    let batch = images.shape()[0];
    let mut x = images.clone();
    for (i, layer) in spec.feature.iter().enumerate() {
        x = match layer {
            LayerSpec::Conv2d {
                stride,
                padding,
                activation,
                ..
            } => {
                let w = params.get(&format!("theta.{i}.w"))?;
                let b = params.get(&format!("theta.{i}.b"))?;
                match activation {
                    // Bias and relu fold into the conv output pass.
                    Activation::Relu => {
                        tape.conv2d_fused(&x, w, Some(b), true, *stride, *padding)?
                    }
                    Activation::None => {
                        tape.conv2d_fused(&x, w, Some(b), false, *stride, *padding)?
                    }
                    Activation::Elu => {
                        let y = tape.conv2d_fused(&x, w, Some(b), false, *stride, *padding)?;
                        tape.elu(&y)?
                    }
                }
            }
            LayerSpec::MaxPool2d {
                kh,
                kw,
                stride,
                padding,
            } => tape.maxpool2d(&x, (*kh, *kw), *stride, *padding)?,
            LayerSpec::Flatten => {
                let n = x.len() / batch;
                tape.reshape(&x, vec![batch, n])?
            }
            LayerSpec::Dense { activation, .. } => {
                let w = params.get(&format!("theta.{i}.w"))?;
                let b = params.get(&format!("theta.{i}.b"))?;
                let y = tape.matmul(&x, w)?;
                let y = tape.add(&y, b)?;
                activate(tape, y, *activation)?
            }
            LayerSpec::GaussianHead { .. } => {
                return Err(Error::Contract("gaussian head inside feature net".into()))
            }
        };
    }
    Ok(x)
}

/// Arithmetic mean over the instance axis of `[m, d]` features.
pub fn instance_pool(tape: &mut Tape, features: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 2 || features.shape()[0] == 0 {
        return Err(Error::Protocol(format!(
            "instance_pool needs a non-empty [m, d] matrix, got {:?}",
            features.shape()
        )));
    }
    tape.mean(features, Some(0))
}

fn run_inference_net(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    layers: &[LayerSpec],
    input: &Tensor,
    mut taps: Option<&mut Vec<Tensor>>,
) -> Result<DiagGaussian> {
    let mut x = input.clone();
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { activation, .. } => {
                let w = params.get(&format!("{prefix}.{i}.w"))?;
                let b = params.get(&format!("{prefix}.{i}.b"))?;
                let y = tape.matmul(&x, w)?;
                let y = tape.add(&y, b)?;
                x = activate(tape, y, *activation)?;
                if let Some(taps) = taps.as_deref_mut() {
                    taps.push(x.clone());
                }
            }
            LayerSpec::GaussianHead { .. } => {
                let w_mu = params.get(&format!("{prefix}.{i}.mu.w"))?;
                let b_mu = params.get(&format!("{prefix}.{i}.mu.b"))?;
                let w_lv = params.get(&format!("{prefix}.{i}.lv.w"))?;
                let b_lv = params.get(&format!("{prefix}.{i}.lv.b"))?;
                let mu = tape.matmul(&x, w_mu)?;
                let mu = tape.add(&mu, b_mu)?;
                let lv = tape.matmul(&x, w_lv)?;
                let lv = tape.add(&lv, b_lv)?;
                return DiagGaussian::new(tape, mu, lv);
            }
            _ => return Err(Error::Contract("invalid layer in inference net".into())),
        }
    }
    Err(Error::Contract(format!("{prefix} ended without a gaussian head")))
}

/// Distribution over per-class classifier weight vectors, from pooled
/// class features `[c, d]` (or a single pooled row `[1, d]`).
pub fn infer_classifier_dist(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    pooled: &Tensor,
) -> Result<DiagGaussian> {
    run_inference_net(tape, params, "phi1", &spec.weight_inference, pooled, None)
}

/// Latent-code distribution: the amortized class prior when applied to a
/// pooled class feature, the per-sample posterior when applied to single
/// sample features.
pub fn infer_latent_dist(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    features: &Tensor,
) -> Result<DiagGaussian> {
    run_inference_net(tape, params, "phi2", &spec.latent_inference, features, None)
}

/// Like [`infer_latent_dist`], also returning the hidden-layer outputs
/// (used by the information-plane probe).
pub fn infer_latent_layers(
    tape: &mut Tape,
    params: &BoundParams,
    spec: &NetworkSpec,
    features: &Tensor,
) -> Result<(Vec<Tensor>, DiagGaussian)> {
    let mut taps = Vec::new();
    let dist = run_inference_net(
        tape,
        params,
        "phi2",
        &spec.latent_inference,
        features,
        Some(&mut taps),
    )?;
    Ok((taps, dist))
}

/// Logits of the deterministic dense head: `features . W`.
pub fn dense_head_logits(
    tape: &mut Tape,
    params: &BoundParams,
    features: &Tensor,
) -> Result<Tensor> {
    let w = params.get("head.w")?;
    tape.matmul(features, w)
}
