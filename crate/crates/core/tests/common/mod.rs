//! Oracles shared by the integration tests: central finite differences in
//! f64, the scalar straight-through rule and random binary layers.
#![allow(dead_code)]

use anyhow::Result;
use bnn_core::autodiff::{SteConfig, Tape, Var};
use bnn_core::layers::{
    qconv_backward, qconv_forward, qdense_backward, qdense_forward, LatentWeights, QKernel,
    QLayerConfig,
};
use bnn_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

pub type T64 = Tensor<f64>;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> T64 {
    T64::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Distinct values at least `0.02` apart and away from zero, so max-pool and
/// ReLU kinks stay outside the finite-difference stencil.
pub fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let half = n as f64 / 2.0;
    T64::from_fn(shape.to_vec(), |i| (ranks[i] as f64 - half + 0.5) * 0.02)
}

/// Builds a scalar loss from leaf values on a fresh tape.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> bnn_core::Result<Var> + 'a;

/// Largest norm-wise relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` over all leaves,
/// where `ĝ` is the central difference with step [`STEP`].
pub fn fd_error(leaves: &[T64], build: &Build<'_>) -> Result<f64> {
    let loss_at = |vals: &[T64]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let l = build(&mut tape, &vars)?;
        Ok(tape.value(l).values()[0])
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.param(v.clone())).collect();
    let l = build(&mut tape, &vars)?;
    let grads = tape.backward(l)?;

    let mut worst = 0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[li]);
        assert_eq!(analytic.shape(), leaf.shape());
        let mut num = vec![0f64; leaf.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let mut vals = leaves.to_vec();
            vals[li].values_mut()[i] += STEP;
            let up = loss_at(&vals)?;
            vals[li].values_mut()[i] -= 2.0 * STEP;
            let down = loss_at(&vals)?;
            *slot = (up - down) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .values()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.values().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nb);
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

pub fn probe(rng: &mut ChaCha8Rng, tape: &Tape<f64>, v: Var) -> T64 {
    uniform(rng, tape.value(v).shape(), 1.0)
}

/// Runs `build` with a random linear probe appended so every output entry
/// carries a distinct weight.
pub fn check_op(
    seed: u64,
    leaves: Vec<T64>,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> bnn_core::Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.param(v.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let weights = probe(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc), &tape, out);
    fd_error(&leaves, &|t, v| {
        let y = op(t, v)?;
        t.weighted_sum(y, &weights)
    })
}

/// Scalar form of the estimator: pass the gradient where `|r| ≤ t_clip`.
pub fn ste_reference(g: f64, r: f64, t_clip: f64) -> f64 {
    if r.abs() <= t_clip {
        g
    } else {
        0.0
    }
}

/// `(r, t_clip)` grid of 10³ pairs with every `±t_clip` boundary included.
pub fn ste_grid() -> Vec<(f64, f64)> {
    let clips: [f64; 10] = [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 0.3, 1e-3, 7.0];
    let mut pairs = Vec::with_capacity(1000);
    for &t in &clips {
        pairs.extend([(t, t), (-t, t), (0.0, t), (-0.0, t)]);
        pairs.extend([
            (t + 1e-12, t),
            (-(t + 1e-12), t),
            (t - 1e-12, t),
            (-(t - 1e-12), t),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(t.to_bits());
        while pairs.len() % 100 != 0 {
            pairs.push((rng.gen_range(-3.0 * t..3.0 * t), t));
        }
    }
    pairs
}

pub fn random_layer(seed: u64, dense: bool) -> (T64, LatentWeights<f64>, T64, QLayerConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, w, cfg, out) = if dense {
        let cfg = QLayerConfig::dense(9, 5);
        (
            uniform(&mut rng, &[3, 9], 1.0),
            uniform(&mut rng, &[5, 9], 1.0),
            cfg,
            vec![3, 5],
        )
    } else {
        let cfg = QLayerConfig::conv(3, 4, 3, 1, 1);
        (
            uniform(&mut rng, &[2, 3, 5, 5], 1.0),
            uniform(&mut rng, &[4, 3, 3, 3], 1.0),
            cfg,
            vec![2, 4, 5, 5],
        )
    };
    let upstream = uniform(&mut rng, &out, 1.0);
    (x, LatentWeights::new(w), upstream, cfg)
}

pub type QRun = (T64, T64, Option<T64>);

pub fn run_q(
    x: &T64,
    w: &LatentWeights<f64>,
    up: &T64,
    cfg: &QLayerConfig,
    dense: bool,
    ste: &SteConfig,
) -> Result<QRun> {
    let (y, grads) = if dense {
        let (y, c) = qdense_forward(x, w, cfg, QKernel::Packed, true)?;
        (y, qdense_backward(c.as_ref(), up, ste)?)
    } else {
        let (y, c) = qconv_forward(x, w, cfg, QKernel::Packed, true)?;
        (y, qconv_backward(c.as_ref(), up, ste)?)
    };
    Ok((y, grads.weight, grads.input))
}

/// One seeded instance of every differentiable op family, as
/// `(name, worst relative error)` against central differences.
pub fn fd_cases(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use bnn_core::layers::{ConvGeometry, PoolGeometry, ScalingMode};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (k, stride, padding) = (
        1 + seed as usize % 3,
        1 + seed as usize % 2,
        (seed as usize / 2) % 2,
    );
    let geom = ConvGeometry::new(2, 3, k, stride, padding);
    let leaves = vec![
        uniform(&mut rng, &[2, 2, 5, 5], 1.0),
        uniform(&mut rng, &[3, 2, k, k], 0.5),
        uniform(&mut rng, &[3], 0.5),
    ];
    out.push((
        "conv",
        check_op(seed, leaves, |t, v| t.conv(v[0], v[1], Some(v[2]), &geom))?,
    ));

    let leaves = vec![
        uniform(&mut rng, &[3, 7], 1.0),
        uniform(&mut rng, &[4, 7], 0.5),
        uniform(&mut rng, &[4], 0.5),
    ];
    out.push((
        "dense",
        check_op(seed, leaves, |t, v| t.dense(v[0], v[1], Some(v[2])))?,
    ));

    let leaves = vec![
        uniform(&mut rng, &[4, 3, 2, 2], 2.0),
        uniform(&mut rng, &[3], 1.5),
        uniform(&mut rng, &[3], 0.5),
    ];
    out.push((
        "batchnorm_train",
        check_op(seed, leaves, |t, v| {
            Ok(t.batchnorm_train(v[0], v[1], v[2])?.0)
        })?,
    ));

    let leaves = vec![
        uniform(&mut rng, &[3, 2, 3, 3], 2.0),
        uniform(&mut rng, &[2], 1.5),
        uniform(&mut rng, &[2], 0.5),
    ];
    let (mean, var) = ([0.3, -0.2], [1.7, 0.4]);
    out.push((
        "batchnorm_eval",
        check_op(seed, leaves, |t, v| {
            t.batchnorm_eval(v[0], v[1], v[2], &mean, &var)
        })?,
    ));

    let x = separated(&mut rng, &[2, 3, 4, 4]);
    out.push((
        "tanh",
        check_op(seed, vec![x.clone()], |t, v| Ok(t.tanh(v[0])))?,
    ));
    out.push(("relu", check_op(seed, vec![x], |t, v| Ok(t.relu(v[0])))?));

    let x = separated(&mut rng, &[2, 2, 6, 6]);
    let pool = PoolGeometry::new(
        2 + seed as usize % 2,
        1 + seed as usize % 2,
        seed as usize % 2,
    );
    out.push((
        "max_pool",
        check_op(seed, vec![x.clone()], |t, v| t.max_pool(v[0], &pool))?,
    ));
    let unpadded = PoolGeometry::new(pool.kernel, pool.stride, 0);
    out.push((
        "avg_pool",
        check_op(seed, vec![x.clone()], |t, v| t.avg_pool(v[0], &unpadded))?,
    ));
    out.push((
        "global_avg_pool",
        check_op(seed, vec![x], |t, v| t.global_avg_pool(v[0]))?,
    ));

    let leaves = vec![
        uniform(&mut rng, &[2, 2, 3, 3], 1.0),
        uniform(&mut rng, &[2, 3, 3, 3], 1.0),
        uniform(&mut rng, &[2, 2, 3, 3], 1.0),
    ];
    out.push((
        "add_concat_reshape",
        check_op(seed, leaves, |t, v| {
            let s = t.add(v[0], v[2])?;
            let c = t.concat(&[s, v[1], v[0]])?;
            let f = t.flatten(c)?;
            t.reshape(f, vec![2, 7, 9])
        })?,
    ));

    let logits = uniform(&mut rng, &[4, 5], 2.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    out.push((
        "cross_entropy",
        fd_error(std::slice::from_ref(&logits), &|t, v| {
            t.softmax_cross_entropy(v[0], &labels)
        })?,
    ));
    let target = uniform(&mut rng, &[4, 5], 1.0);
    out.push(("mse", fd_error(&[logits], &|t, v| t.mse(v[0], &target))?));

    for (name, mode) in [
        ("qconv_input_N", ScalingMode::N),
        ("qconv_input_B", ScalingMode::B),
    ] {
        let cfg = QLayerConfig::conv(2, 3, 3, 1, 1)
            .with_binarize_input(false)
            .with_scaling(mode);
        let w = uniform(&mut rng, &[3, 2, 3, 3], 1.0);
        let x = uniform(&mut rng, &[2, 2, 4, 4], 1.0);
        out.push((
            name,
            check_op(seed, vec![x], |t, v| {
                let wv = t.constant(w.clone());
                t.qconv(v[0], wv, &cfg, SteConfig::default(), QKernel::Packed, None)
            })?,
        ));
    }
    Ok(out)
}
