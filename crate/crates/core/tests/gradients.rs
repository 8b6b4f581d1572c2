//! Analytic gradients against central differences, from single operations up
//! to the whole network objective.

use catcnn::groundtruth::{downsample_density, downsample_mask, render_density, render_mask};
use catcnn::model::{forward, ForwardOptions, WeightInit};
use catcnn::training::{loss_cross_entropy, loss_euclidean, loss_weighted_bce, loss_whole, LossTerms, LossWeights};
use catcnn::{grad_check, ArchConfig, DotAnnotation, Graph, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn linear_weight_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[4], -1.0, 1.0);
    let b = random(&mut rng, &[3], -1.0, 1.0);
    let w = random(&mut rng, &[3, 4], -1.0, 1.0);
    let err = grad_check(
        |g, wv| {
            let xv = g.constant(x.clone());
            let bv = g.constant(b.clone());
            let y = g.linear(xv, wv, bv)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn dilated_conv_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 9, 9], -1.0, 1.0);
    let w = random(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[2], -1.0, 1.0);
    let r = random(&mut rng, &[2, 9, 9], -1.0, 1.0);
    let project = |g: &mut Graph, y| {
        let rv = g.constant(r.clone());
        let p = g.mul(y, rv)?;
        Ok(g.sum(p))
    };
    let wrt_w = grad_check(
        |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, bv, 3)?;
            project(g, y)
        },
        &w,
        1e-5,
    )
    .unwrap();
    let wrt_x = grad_check(
        |g, xv| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, bv, 3)?;
            project(g, y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(wrt_w < 1e-5 && wrt_x < 1e-5, "{wrt_w} {wrt_x}");
}

#[test]
fn prelu_gradient_away_from_zero() {
    let x = Tensor::new(&[6], vec![-1.5, -0.7, -0.2, 0.3, 0.9, 2.0]).unwrap();
    let slope = Tensor::new(&[1], vec![0.25]).unwrap();
    let wrt_x = grad_check(
        |g, xv| {
            let s = g.constant(slope.clone());
            let y = g.prelu(xv, s)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    let wrt_slope = grad_check(
        |g, s| {
            let xv = g.constant(x.clone());
            let y = g.prelu(xv, s)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        },
        &slope,
        1e-5,
    )
    .unwrap();
    assert!(wrt_x < 1e-6 && wrt_slope < 1e-6, "{wrt_x} {wrt_slope}");
}

#[test]
fn bce_gradient_vanishes_where_the_clamp_is_active() {
    let mask = render_mask(&DotAnnotation::new(vec![(1.0, 1.0)]), 4, 4).unwrap();
    let mut g = Graph::new();
    // exactly the mask: every value sits outside [1e-7, 1 - 1e-7]
    let conf = g.param(mask.values.detached());
    let l = loss_weighted_bce(&mut g, conf, &mask).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(conf).unwrap().iter().all(|&v| v == 0.0));
    assert!(g.value(l).data()[0] < 1e-5);
}

#[test]
fn gradient_suite_passes() {
    let report = catcnn::gradsuite::run(0, catcnn::gradsuite::MIN_INSTANCES).unwrap();
    assert!(report.passed(), "{report}");
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        base_channels: 2,
        trunk_widths: [3, 4, 5],
        fm_channels: 4,
        groups: 3,
        init: WeightInit::Gaussian { std: 0.4 },
        ..ArchConfig::default()
    }
}

/// Initialised parameters with positive head biases, so the density and
/// fusion rectifiers start away from their kink.
fn live_params(arch: &ArchConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::init(arch, seed).unwrap();
    for (name, bias) in [("density.bias", 0.3), ("fusion.bias", 0.05)] {
        params.get_mut(name).unwrap().data_mut()[0] = bias;
    }
    params
}

/// `l_whole` of a 16x16 scene, differentiated with respect to every
/// parameter tensor in turn, with the winning class held fixed.
#[test]
fn whole_network_objective_gradient() {
    let arch = tiny_arch();
    let params = live_params(&arch, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = random(&mut rng, &[1, 16, 16], 0.0, 1.0);
    let ann = DotAnnotation::new(vec![(3.0, 4.0), (10.5, 12.0), (13.0, 2.0)]);
    let density = downsample_density(&render_density(&ann, 16, 16).unwrap(), 4).unwrap();
    let mask = downsample_mask(&render_mask(&ann, 16, 16).unwrap(), 4).unwrap();
    let opts = ForwardOptions {
        forced_class: Some(1),
        ..ForwardOptions::default()
    };

    let mut worst: f64 = 0.0;
    for (name, tensor) in params.iter() {
        let err = grad_check(
            |g, leaf| {
                let mut bound = params.bind_frozen(g);
                bound.replace(name, leaf)?;
                let x = g.constant(image.clone());
                let out = forward(g, x, &bound, &arch, &opts)?;
                let terms = LossTerms {
                    l_fus: loss_euclidean(g, out.final_density, &density)?,
                    l_den: loss_euclidean(g, out.est_density, &density)?,
                    l_con: out.confidence.map(|c| loss_weighted_bce(g, c, &mask)).transpose()?,
                    l_mul: loss_cross_entropy(g, out.class_logits, 2)?,
                };
                Ok(loss_whole(g, &terms, LossWeights::default())?.0)
            },
            tensor,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{name}: {err}");
        worst = worst.max(err);
    }
    assert!(worst < 1e-3);
}

/// With confidence forced to 1 the fusion input is the estimate itself, so
/// fusion-path gradients equal those of the configuration without a
/// confidence module.
#[test]
fn forced_unit_confidence_matches_the_ungated_path() {
    let gated = tiny_arch();
    let ungated = ArchConfig {
        use_confidence: false,
        ..tiny_arch()
    };
    let with = live_params(&gated, 8);
    // same tensors minus the confidence head
    let entries: Vec<(String, Tensor)> = with
        .iter()
        .filter(|(n, _)| !n.starts_with("confidence"))
        .map(|(n, t)| (n.to_string(), t.detached()))
        .collect();
    let without = ModelParams::from_entries(&ungated, entries).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = random(&mut rng, &[1, 16, 16], 0.0, 1.0);
    let target = downsample_density(
        &render_density(&DotAnnotation::new(vec![(5.0, 5.0), (11.0, 9.0)]), 16, 16).unwrap(),
        4,
    )
    .unwrap();

    let l_fus_grads = |arch: &ArchConfig, params: &ModelParams, forced: Option<f64>| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(image.clone());
        let opts = ForwardOptions {
            forced_class: Some(0),
            forced_confidence: forced,
        };
        let out = forward(&mut g, x, &bound, arch, &opts).unwrap();
        let l = loss_euclidean(&mut g, out.final_density, &target).unwrap();
        g.backward(l).unwrap();
        ["density.weight", "fusion.weight", "trunk.conv3.weight"]
            .map(|n| g.grad(bound.var(n).unwrap()).unwrap().to_vec())
    };
    let a = l_fus_grads(&gated, &with, Some(1.0));
    let b = l_fus_grads(&ungated, &without, None);
    assert_eq!(a, b);

    let c = l_fus_grads(&gated, &with, None);
    assert_ne!(c[1], b[1], "a learned confidence map changes the fusion gradients");
}
