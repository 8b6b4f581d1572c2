//! The network: a multi-scale front-end with cross-layer fusion, a count-group
//! classifier whose winning weight row rescales the feature channels, a
//! confidence head, a density head, and the gated fusion head.

mod arch;
pub mod checkpoint;
mod params;

pub use arch::{ArchConfig, FmOutput, WeightInit};
pub use params::{BoundParams, ModelParams, PRELU_INIT};

use crate::error::{arg_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-call overrides used by tests and ablations.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Use this class for the weight mapping instead of the argmax.
    pub forced_class: Option<usize>,
    /// Replace the confidence map with this constant before gating.
    pub forced_confidence: Option<f64>,
}

/// Graph handles of every intermediate a loss or test needs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub class_logits: Var,
    pub predicted_class: usize,
    pub fm1: Var,
    pub fm2: Var,
    pub fm_out: Var,
    /// Absent when the architecture has no confidence module.
    pub confidence: Option<Var>,
    /// Input of the post-fusion convolution.
    pub gated: Var,
    pub est_density: Var,
    pub final_density: Var,
}

/// Detached results of an inference pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class_logits: Tensor,
    pub predicted_class: usize,
    pub confidence: Option<Tensor>,
    pub est_density: Tensor,
    pub final_density: Tensor,
}

impl Prediction {
    pub fn count(&self) -> f64 {
        integrate_count(&self.final_density)
    }
}

fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, dilation: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    g.conv2d(x, w, b, dilation)
}

fn conv_relu(g: &mut Graph, p: &BoundParams, name: &str, x: Var, dilation: usize) -> Result<Var> {
    let y = conv(g, p, name, x, dilation)?;
    Ok(g.relu(y))
}

/// First index of the largest value.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// Multi-information handling: returns `(fm1, logits, fm2, fm_out,
/// predicted_class)`.
pub fn mih_forward(
    g: &mut Graph,
    image: Var,
    p: &BoundParams,
    arch: &ArchConfig,
    forced_class: Option<usize>,
) -> Result<(Var, Var, Var, Var, usize)> {
    let mut branches = Vec::with_capacity(arch.dilation_set.len());
    for (i, &d) in arch.dilation_set.iter().enumerate() {
        branches.push(conv_relu(g, p, &format!("front.branch{i}"), image, d)?);
    }
    let mut front = branches[0];
    for &b in &branches[1..] {
        front = g.concat_channels(front, b)?;
    }

    let x = conv_relu(g, p, "trunk.conv1", front, 1)?;
    let x = g.maxpool2(x)?;
    let tap1 = conv_relu(g, p, "trunk.conv2", x, 1)?;
    let x = g.maxpool2(tap1)?;
    let tap2 = conv_relu(g, p, "trunk.conv3", x, 1)?;

    let fm1 = if arch.use_cross_layer {
        let t1 = g.maxpool2(tap1)?;
        let a = conv_relu(g, p, "fuse.tap1", t1, 1)?;
        let b = conv_relu(g, p, "fuse.tap2", tap2, 1)?;
        let cat = g.concat_channels(a, b)?;
        conv_relu(g, p, "fuse.mix", cat, 1)?
    } else {
        conv_relu(g, p, "fuse.tap2", tap2, 1)?
    };

    let logits = classify_groups(g, fm1, p)?;
    let predicted = match forced_class {
        Some(c) => c,
        None => argmax(g.value(logits).data()),
    };
    let fc = p.var("classifier.weight")?;
    let fm2 = map_class_weights(g, fm1, fc, predicted)?;
    let fm_out = match arch.fm_output {
        FmOutput::Fm1Only => fm1,
        FmOutput::Fm2Only => fm2,
        FmOutput::Both => g.concat_channels(fm1, fm2)?,
    };
    Ok((fm1, logits, fm2, fm_out, predicted))
}

/// Count-group logits from adaptive max pooling to a 4x4 grid (smaller maps
/// use their own extent), a global mean, the FC layer, and PReLU.
pub fn classify_groups(g: &mut Graph, fm1: Var, p: &BoundParams) -> Result<Var> {
    let (_, h, w) = g.value(fm1).chw()?;
    let pooled = g.adaptive_max_pool(fm1, h.min(4), w.min(4))?;
    let v = g.avg_pool_all(pooled)?;
    let lin = g.linear(v, p.var("classifier.weight")?, p.var("classifier.bias")?)?;
    g.prelu(lin, p.var("classifier.prelu")?)
}

/// Scales channel `c` of `fm1` by `fc_weight[predicted, c]`. The selection is
/// not differentiated; the scaling is, in both operands.
pub fn map_class_weights(g: &mut Graph, fm1: Var, fc_weight: Var, predicted: usize) -> Result<Var> {
    let k = g.value(fc_weight).shape()[0];
    if predicted >= k {
        return arg_err(format!("predicted class {predicted} out of range for {k} groups"));
    }
    let row = g.select_row(fc_weight, predicted)?;
    g.scale_channels(fm1, row)
}

/// 1x1 convolution to one channel and logistic squashing into (0, 1).
pub fn confidence_head(g: &mut Graph, features: Var, p: &BoundParams) -> Result<Var> {
    let z = conv(g, p, "confidence", features, 1)?;
    Ok(g.sigmoid(z))
}

/// 1x1 convolution to one channel and ReLU.
pub fn density_head(g: &mut Graph, features: Var, p: &BoundParams) -> Result<Var> {
    conv_relu(g, p, "density", features, 1)
}

/// Returns `(gated, final)`: `gated = est * conf` (or `est` alone when no
/// confidence is supplied) and `final = relu(conv3x3(gated))`.
pub fn fusion_head(
    g: &mut Graph,
    est_density: Var,
    confidence: Option<Var>,
    p: &BoundParams,
) -> Result<(Var, Var)> {
    let gated = match confidence {
        Some(c) => g.mul(est_density, c)?,
        None => est_density,
    };
    let fin = conv_relu(g, p, "fusion", gated, 1)?;
    Ok((gated, fin))
}

/// Full forward pass. `image` is `[C,H,W]` with values in `[0,1]`.
pub fn forward(
    g: &mut Graph,
    image: Var,
    p: &BoundParams,
    arch: &ArchConfig,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let (c, _, _) = g.value(image).chw()?;
    if c != arch.in_channels {
        return arg_err(format!(
            "image has {c} channels, architecture expects {}",
            arch.in_channels
        ));
    }
    let (fm1, logits, fm2, fm_out, predicted) = mih_forward(g, image, p, arch, opts.forced_class)?;
    let est = density_head(g, fm_out, p)?;
    let confidence = if arch.use_confidence {
        let head = confidence_head(g, fm_out, p)?;
        match opts.forced_confidence {
            Some(v) => {
                let shape = g.value(head).shape().to_vec();
                Some(g.constant(Tensor::full(&shape, v)))
            }
            None => Some(head),
        }
    } else {
        None
    };
    let (gated, fin) = fusion_head(g, est, confidence, p)?;
    Ok(ForwardOutput {
        class_logits: logits,
        predicted_class: predicted,
        fm1,
        fm2,
        fm_out,
        confidence,
        gated,
        est_density: est,
        final_density: fin,
    })
}

/// Crowd count of a density raster.
pub fn integrate_count(density: &Tensor) -> f64 {
    density.sum()
}

/// Parameters bundled with the architecture they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct CatCnn {
    pub arch: ArchConfig,
    pub params: ModelParams,
}

impl CatCnn {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&arch, seed)?;
        Ok(Self { arch, params })
    }

    /// Inference without gradient bookkeeping on the parameters.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let out = forward(&mut g, x, &bound, &self.arch, &ForwardOptions::default())?;
        Ok(Prediction {
            class_logits: g.value(out.class_logits).detached(),
            predicted_class: out.predicted_class,
            confidence: out.confidence.map(|c| g.value(c).detached()),
            est_density: g.value(out.est_density).detached(),
            final_density: g.value(out.final_density).detached(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            base_channels: 2,
            trunk_widths: [4, 4, 4],
            fm_channels: 4,
            groups: 3,
            init: WeightInit::Gaussian { std: 0.3 },
            ..ArchConfig::default()
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[1, h, w], (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_rasters_are_quarter_size() {
        let net = CatCnn::new(ArchConfig::default(), 1).unwrap();
        let p = net.predict(&random_image(64, 64, 2)).unwrap();
        assert_eq!(p.final_density.shape(), &[1, 16, 16]);
        assert_eq!(p.est_density.shape(), &[1, 16, 16]);
        assert_eq!(p.confidence.as_ref().unwrap().shape(), &[1, 16, 16]);
        assert_eq!(p.class_logits.shape(), &[5]);

        let p = net.predict(&random_image(30, 37, 3)).unwrap();
        assert_eq!(p.final_density.shape(), &[1, 8, 10]);
    }

    #[test]
    fn fm_output_channel_arithmetic() {
        for (mode, expect) in [(FmOutput::Both, 64), (FmOutput::Fm1Only, 32), (FmOutput::Fm2Only, 32)] {
            let arch = ArchConfig {
                fm_output: mode,
                ..ArchConfig::default()
            };
            let params = ModelParams::init(&arch, 0).unwrap();
            let mut g = Graph::new();
            let b = params.bind_frozen(&mut g);
            let x = g.constant(random_image(16, 16, 0));
            let out = forward(&mut g, x, &b, &arch, &ForwardOptions::default()).unwrap();
            assert_eq!(g.value(out.fm_out).shape()[0], expect);
            assert_eq!(g.value(out.fm1).shape(), g.value(out.fm2).shape());
        }
    }

    #[test]
    fn single_dilation_front_end() {
        let arch = ArchConfig {
            dilation_set: vec![1],
            ..ArchConfig::default()
        };
        let net = CatCnn::new(arch, 4).unwrap();
        assert!(net.params.get("front.branch1.weight").is_none());
        assert_eq!(net.params.get("trunk.conv1.weight").unwrap().shape(), &[32, 8, 3, 3]);
        let p = net.predict(&random_image(32, 32, 1)).unwrap();
        assert_eq!(p.final_density.shape(), &[1, 8, 8]);
    }

    #[test]
    fn classifier_accepts_arbitrary_extents() {
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 5).unwrap();
        for (h, w) in [(7, 9), (16, 16), (33, 21), (2, 3)] {
            let mut g = Graph::new();
            let b = params.bind_frozen(&mut g);
            let fm = g.constant(random_image(h * 4, w, 1).reshape(&[4, h, w]).unwrap());
            let logits = classify_groups(&mut g, fm, &b).unwrap();
            assert_eq!(g.value(logits).shape(), &[3]);
        }
    }

    #[test]
    fn classifier_constant_and_zero_inputs() {
        let arch = tiny_arch();
        let mut params = ModelParams::init(&arch, 5).unwrap();
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let fm = g.constant(Tensor::zeros(&[4, 6, 6]));
        let logits = classify_groups(&mut g, fm, &b).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));

        // constant fm1 -> v equals that constant; identity FC exposes v
        let mut eye = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        *params.get_mut("classifier.weight").unwrap() = eye;
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let fm = g.constant(Tensor::full(&[4, 5, 7], 0.7));
        let logits = classify_groups(&mut g, fm, &b).unwrap();
        assert!(g.value(logits).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn class_weight_mapping() {
        let mut g = Graph::new();
        let fm1 = g.param(Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 2.0, 3.0]).unwrap());
        let fc = g.param(Tensor::new(&[2, 2], vec![2.0, -1.0, 1.0, 1.0]).unwrap());
        let fm2 = map_class_weights(&mut g, fm1, fc, 0).unwrap();
        let d = g.value(fm2).data();
        assert_eq!(d[0] + d[1], 6.0);
        assert_eq!(d[2] + d[3], -5.0);
        let same = map_class_weights(&mut g, fm1, fc, 1).unwrap();
        assert_eq!(g.value(same).data(), g.value(fm1).data());
        assert!(map_class_weights(&mut g, fm1, fc, 2).is_err());

        let zero = g.param(Tensor::zeros(&[1, 2]));
        let z = map_class_weights(&mut g, fm1, zero, 0).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));

        let s = g.sum(fm2);
        g.backward(s).unwrap();
        // only the selected row receives gradient
        assert_eq!(g.grad(fc).unwrap(), &[3.0, 5.0, 0.0, 0.0]);
    }

    fn heads_params(bias: f64) -> (Graph, BoundParams, Var) {
        let arch = tiny_arch();
        let mut params = ModelParams::init(&arch, 9).unwrap();
        params.get_mut("density.bias").unwrap().data_mut()[0] = bias;
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let f = g.constant(Tensor::zeros(&[8, 3, 3]));
        (g, b, f)
    }

    #[test]
    fn confidence_head_zero_features_is_half() {
        let (mut g, b, f) = heads_params(0.0);
        let c = confidence_head(&mut g, f, &b).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn density_head_bias_behaviour() {
        let (mut g, b, f) = heads_params(-0.5);
        let d = density_head(&mut g, f, &b).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
        let (mut g, b, f) = heads_params(0.3);
        let d = density_head(&mut g, f, &b).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn fusion_identity_and_absorbing_paths() {
        let arch = tiny_arch();
        let mut params = ModelParams::init(&arch, 2).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        *params.get_mut("fusion.weight").unwrap() = k;
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let est = g.constant(random_image(5, 6, 3));
        let ones = g.constant(Tensor::ones(&[1, 5, 6]));
        let (_, fin) = fusion_head(&mut g, est, Some(ones), &b).unwrap();
        assert_eq!(g.value(fin).data(), g.value(est).data());
        let zeros = g.constant(Tensor::zeros(&[1, 5, 6]));
        let (gated, _) = fusion_head(&mut g, est, Some(zeros), &b).unwrap();
        assert!(g.value(gated).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[1, 4, 6]));
        assert!(fusion_head(&mut g, est, Some(bad), &b).is_err());
    }

    #[test]
    fn ablations_have_fewer_parameters() {
        let full = ModelParams::init(&ArchConfig::default(), 0).unwrap().num_parameters();
        for arch in [
            ArchConfig {
                fm_output: FmOutput::Fm1Only,
                ..ArchConfig::default()
            },
            ArchConfig {
                use_cross_layer: false,
                ..ArchConfig::default()
            },
            ArchConfig {
                use_confidence: false,
                ..ArchConfig::default()
            },
        ] {
            let n = ModelParams::init(&arch, 0).unwrap().num_parameters();
            assert!(n < full, "{arch:?}: {n} >= {full}");
        }
    }

    #[test]
    fn argmax_unchanged_by_positive_scaling_of_features() {
        // max-pool and mean are positively homogeneous, so scaling fm1 scales v
        let arch = tiny_arch();
        let params = ModelParams::init(&arch, 11).unwrap();
        let fm = random_image(24, 6, 8).reshape(&[4, 6, 6]).unwrap();
        let predict = |s: f64| {
            let mut g = Graph::new();
            let b = params.bind_frozen(&mut g);
            let x = g.constant(fm.map(|v| v * s));
            let logits = classify_groups(&mut g, x, &b).unwrap();
            argmax(g.value(logits).data())
        };
        let base = predict(1.0);
        for s in [0.1, 2.0, 37.0] {
            assert_eq!(predict(s), base);
        }
    }

    #[test]
    fn param_names_unique() {
        let params = ModelParams::init(&ArchConfig::default(), 0).unwrap();
        let mut names: Vec<_> = params.names().collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(params.get("classifier.weight").unwrap().shape(), &[5, 32]);
    }

    #[test]
    fn rejects_wrong_image_channels() {
        let net = CatCnn::new(ArchConfig::default(), 0).unwrap();
        assert!(net.predict(&Tensor::zeros(&[3, 16, 16])).is_err());
    }
}
