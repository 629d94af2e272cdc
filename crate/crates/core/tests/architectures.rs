//! Builder outputs against closed-form parameter counts, and the size
//! calculator against the bytes the writer actually emits.

use anyhow::Result;
use bnn_core::arch::{
    build_densenet, build_lenet, build_resnet, count_params, densenet_depth, model_size_bytes,
    DenseNetSpec, LayerKind, ModelGraph, ResNetSpec, ResNetWidth, CIFAR_INPUT,
};
use bnn_core::data::NormStats;
use bnn_core::model::Model;
use bnn_core::modelio::{self, format_overhead_bytes, Storage};
use proptest::prelude::*;

/// Hand count of the binary LeNet: conv1 (+bias), bn1, conv2, bn2, fc1 over
/// the 64·4·4 pooled map, bn3, fc2 (+bias).
fn lenet_formula(classes: usize) -> usize {
    (64 * 25 + 64)
        + 2 * 64
        + 64 * 64 * 25
        + 2 * 64
        + 1024 * 1000
        + 2 * 1000
        + (1000 * classes + classes)
}

/// Plain pre-activation ResNet with the 7×7 stem: per block `BN, 3×3, BN,
/// 3×3` plus a 1×1 projection whenever width or stride changes.
fn resnet_plain_formula(units: &[usize], filters: &[usize], classes: usize) -> usize {
    let mut total = 49 * 3 * filters[0] + 2 * filters[0];
    let mut c = filters[0];
    for (s, (&u, &f)) in units.iter().zip(&filters[1..]).enumerate() {
        for i in 0..u {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            total += 2 * c + 9 * c * f + 2 * f + 9 * f * f;
            if c != f || stride != 1 {
                total += c * f;
            }
            c = f;
        }
    }
    total + 2 * c + c * classes + classes
}

/// Plain DenseNet with the 7×7 stem of `2k` filters, four units of `b`
/// blocks (`BN, 3×3 → k`) and halving transitions (`BN, 1×1`).
fn densenet_formula(k: usize, b: usize, classes: usize) -> usize {
    let mut c = 2 * k;
    let mut total = 49 * 3 * c + 2 * c;
    for unit in 0..4 {
        for _ in 0..b {
            total += 2 * c + 9 * c * k;
            c += k;
        }
        if unit < 3 {
            total += 2 * c + c * (c / 2);
            c /= 2;
        }
    }
    total + 2 * c + c * classes + classes
}

/// Element count of every parameter tensor, walking the graph directly.
fn brute_force_params(g: &ModelGraph) -> usize {
    g.nodes
        .iter()
        .map(|n| match &n.kind {
            LayerKind::Conv { geom, bias, .. } => {
                geom.out_channels * geom.in_channels * geom.kernel.0 * geom.kernel.1
                    + if *bias { geom.out_channels } else { 0 }
            }
            LayerKind::Dense {
                in_features,
                out_features,
                bias,
                ..
            } => in_features * out_features + if *bias { *out_features } else { 0 },
            LayerKind::BatchNorm { channels } => 2 * channels,
            _ => 0,
        })
        .sum()
}

fn all_presets() -> Result<Vec<ModelGraph>> {
    let mut graphs = vec![build_lenet(true, 10)?, build_lenet(false, 10)?];
    for depth in [18, 26, 34, 50, 68] {
        for width in [ResNetWidth::Thin, ResNetWidth::Wide] {
            graphs.push(build_resnet(&ResNetSpec::preset(depth, width)?)?);
        }
    }
    for (k, b) in [(256, 1), (128, 2), (64, 4), (32, 8)] {
        graphs.push(build_densenet(&DenseNetSpec::new(k, b))?);
        let mut cifar = DenseNetSpec::new(k, b);
        cifar.input_shape = CIFAR_INPUT.to_vec();
        cifar.num_classes = 10;
        graphs.push(build_densenet(&cifar)?);
    }
    let mut bottleneck = DenseNetSpec::new(32, 2);
    bottleneck.bottleneck = true;
    graphs.push(build_densenet(&bottleneck)?);
    Ok(graphs)
}

#[test]
fn lenet_matches_hand_count() -> Result<()> {
    assert_eq!(count_params(&build_lenet(true, 10)?), lenet_formula(10));
    assert_eq!(lenet_formula(10), 1_140_330);
    assert_eq!(count_params(&build_lenet(false, 7)?), lenet_formula(7));
    Ok(())
}

#[test]
fn resnet_plain_presets_match_formula() -> Result<()> {
    for (depth, units) in [(18, [2, 2, 2, 2]), (34, [3, 4, 6, 3]), (68, [3, 4, 23, 3])] {
        for width in [ResNetWidth::Thin, ResNetWidth::Wide] {
            let spec = ResNetSpec::preset(depth, width)?;
            assert_eq!(spec.units, units);
            let g = build_resnet(&spec)?;
            assert_eq!(
                count_params(&g),
                resnet_plain_formula(&units, &spec.filters, 1000),
                "resnet{depth} {width:?}"
            );
            assert_eq!(g.counted_depth() as usize, depth);
        }
    }
    Ok(())
}

#[test]
fn densenet_matches_formula() -> Result<()> {
    for (k, b) in [(256, 1), (128, 2), (64, 4), (32, 8), (12, 3)] {
        let g = build_densenet(&DenseNetSpec::new(k, b))?;
        assert_eq!(
            count_params(&g),
            densenet_formula(k, b, 1000),
            "k={k} b={b}"
        );
        assert_eq!(g.counted_depth() as usize, 8 * b + 5);
    }
    Ok(())
}

#[test]
fn densenet_first_conv_has_two_k_filters() -> Result<()> {
    let g = build_densenet(&DenseNetSpec::new(128, 2))?;
    let first = g.nodes.iter().find_map(|n| match &n.kind {
        LayerKind::Conv { geom, .. } => Some(geom.out_channels),
        _ => None,
    });
    assert_eq!(first, Some(256));
    Ok(())
}

#[test]
fn depth_law_holds_for_b_up_to_16() -> Result<()> {
    for b in 1..=16 {
        let mut spec = DenseNetSpec::new(8, b);
        spec.input_shape = CIFAR_INPUT.to_vec();
        let g = build_densenet(&spec)?;
        assert_eq!(g.counted_depth() as usize, densenet_depth(b)?);
        assert_eq!(densenet_depth(b)?, 8 * b + 5);
    }
    assert!(densenet_depth(0).is_err());
    Ok(())
}

#[test]
fn fig2_presets_shrink_as_b_grows() -> Result<()> {
    let counts: Vec<usize> = [(256, 1), (128, 2), (64, 4), (32, 8)]
        .iter()
        .map(|&(k, b)| Ok(count_params(&build_densenet(&DenseNetSpec::new(k, b))?)))
        .collect::<Result<_>>()?;
    assert!(counts.windows(2).all(|w| w[0] > w[1]), "{counts:?}");
    assert!((counts[3] as f64) <= 0.75 * counts[0] as f64);
    Ok(())
}

#[test]
fn counts_agree_with_brute_force_and_ignore_precision() -> Result<()> {
    for g in all_presets()? {
        assert_eq!(count_params(&g), brute_force_params(&g), "{}", g.name);
        g.validate()?;
    }
    let mut full = ResNetSpec::preset(18, ResNetWidth::Thin)?;
    full.binary = false;
    assert_eq!(
        count_params(&build_resnet(&full)?),
        count_params(&build_resnet(&ResNetSpec::preset(18, ResNetWidth::Thin)?)?)
    );
    Ok(())
}

#[test]
fn fp_size_is_four_bytes_per_param_plus_overhead() -> Result<()> {
    for g in all_presets()? {
        assert_eq!(
            model_size_bytes(&g, false),
            4 * count_params(&g) as u64 + format_overhead_bytes(&g),
            "{}",
            g.name
        );
        if g.num_binary_layers() > 0 {
            assert!(model_size_bytes(&g, true) < model_size_bytes(&g, false));
        } else {
            assert_eq!(model_size_bytes(&g, true), model_size_bytes(&g, false));
        }
    }
    Ok(())
}

/// The writer's output length equals the calculator for every preset, in
/// both storage classes.
#[test]
fn written_sizes_equal_prediction_for_every_preset() -> Result<()> {
    for g in all_presets()? {
        let norm = NormStats::identity(g.input_shape[0]);
        let model = Model::init(g.clone(), norm, 1)?.deployed()?;
        for (storage, packed) in [(Storage::Packed, true), (Storage::Float32, false)] {
            let bytes = modelio::encode(&model, storage)?;
            assert_eq!(
                bytes.len() as u64,
                model_size_bytes(&g, packed),
                "{} {storage:?}",
                g.name
            );
        }
    }
    Ok(())
}

#[test]
fn lenet_binary_layers_compress_exactly_32x() -> Result<()> {
    let g = build_lenet(true, 10)?;
    let (mut packed, mut float) = (0usize, 0usize);
    for n in &g.nodes {
        for p in n.params().iter().filter(|p| p.binarizable) {
            packed += p.rows() * p.row_len().div_ceil(8);
            float += 4 * p.len();
        }
    }
    assert_eq!(packed * 32, float);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn random_densenets_match_formula_and_size_law(k in 1usize..40, b in 1usize..5, classes in 2usize..20) {
        let mut spec = DenseNetSpec::new(k, b);
        spec.input_shape = CIFAR_INPUT.to_vec();
        spec.num_classes = classes;
        let g = build_densenet(&spec).unwrap();
        prop_assert_eq!(count_params(&g), densenet_formula(k, b, classes) - 49 * 3 * 2 * k + 9 * 3 * 2 * k);
        let model = Model::init(g.clone(), NormStats::identity(3), k as u64).unwrap();
        let bytes = modelio::encode(&model, Storage::Packed).unwrap();
        prop_assert_eq!(bytes.len() as u64, model_size_bytes(&g, true));
    }

    #[test]
    fn random_resnets_type_check(units in prop::collection::vec(1usize..3, 1..4), width in 1usize..24, bottleneck in any::<bool>()) {
        let filters: Vec<usize> = (0..=units.len()).map(|i| width * (1 << i.min(3)) * if bottleneck { 4 } else { 1 }).collect();
        let spec = ResNetSpec {
            units,
            filters,
            bottleneck,
            binary: true,
            num_classes: 10,
            input_shape: CIFAR_INPUT.to_vec(),
        };
        let g = build_resnet(&spec).unwrap();
        g.validate().unwrap();
        prop_assert_eq!(count_params(&g), brute_force_params(&g));
        prop_assert_eq!(g.counted_depth() as usize, spec.depth());
    }
}
