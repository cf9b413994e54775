mod common;

use common::*;
use smix_core::mixers::MixerKind;
use smix_core::rng;
use smix_core::tensor::{GruCell, GruWeights, Tensor};

const TOL: f64 = 1e-4;

#[test]
fn agent_network_matches_finite_differences() {
    let worst = (0..40).map(agent_grad_error).fold(0.0, f64::max);
    println!("agent net: max rel err {worst:.2e}");
    assert!(worst <= TOL, "{worst}");
}

#[test]
fn every_mixer_matches_finite_differences() {
    for (name, mixer) in mixer_variants() {
        let worst = (0..20).map(|s| mixer_grad_error(&mixer, s)).fold(0.0, f64::max);
        println!("{name}: max rel err {worst:.2e}");
        assert!(worst <= TOL, "{name}: {worst}");
    }
}

#[test]
fn full_loss_matches_finite_differences() {
    for kind in [MixerKind::Identity, MixerKind::Additive, MixerKind::MonotoneHypernet] {
        let worst = (0..10).map(|s| loss_grad_error(kind, s)).fold(0.0, f64::max);
        println!("loss with {kind:?}: max rel err {worst:.2e}");
        assert!(worst <= TOL, "{kind:?}: {worst}");
    }
}

#[test]
fn fused_and_elementary_ops_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..30 {
        let mut r = rng::stream(seed, 41);
        let x = random_tensor(&[3, 4], 1.0, &mut r);
        let w = random_tensor(&[4, 5], 1.0, &mut r);
        let b = random_tensor(&[1, 5], 1.0, &mut r);
        let col = random_tensor(&[3, 1], 1.0, &mut r);
        let c = random_tensor(&[3, 5], 1.0, &mut r);
        worst = worst.max(max_grad_error(&[x, w, b, col], 20, &mut r, |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            let y = g.elu(y, 1.0)?;
            let s = g.broadcast(v[3], &[3, 5])?;
            let y = g.mul(y, s)?;
            let a = g.slice(y, 1, 0, 2)?;
            let a = g.abs(a)?;
            let t = g.slice(y, 1, 2, 5)?;
            let t = g.tanh(t)?;
            let y = g.concat(&[a, t], 1)?;
            let m = g.sum_axis(y, 1)?;
            let m = g.sigmoid(m)?;
            let m = g.mean(m)?;
            let e = weighted_sum(g, y, &c)?;
            let sq = g.squared_error(e, m)?;
            g.add(sq, e)
        }));

        let hd = 4;
        let cell = GruCell::new(3, hd);
        let mut params = smix_core::tensor::ParamSet::new();
        cell.init_params("gru", &mut params, &mut r);
        let mut leaves: Vec<Tensor> = params.tensors().to_vec();
        leaves.push(random_tensor(&[2, 3], 1.0, &mut r));
        leaves.push(random_tensor(&[2, hd], 1.0, &mut r));
        let c = random_tensor(&[2, hd], 1.0, &mut r);
        worst = worst.max(max_grad_error(&leaves, 12, &mut r, |g, v| {
            let w = GruWeights {
                w_input: v[0],
                b_input: v[1],
                w_hidden: v[2],
                b_hidden: v[3],
            };
            let h1 = cell.forward(g, &w, v[4], v[5])?;
            let h2 = cell.forward(g, &w, v[4], h1)?;
            weighted_sum(g, h2, &c)
        }));

        let a = random_tensor(&[3, 2], 1.0, &mut r);
        let bm = random_tensor(&[2, 4], 1.0, &mut r);
        let c = random_tensor(&[3, 4], 1.0, &mut r);
        worst = worst.max(max_grad_error(&[a, bm], 10, &mut r, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.relu(y)?;
            weighted_sum(g, y, &c)
        }));
    }
    println!("ops: max rel err {worst:.2e}");
    assert!(worst <= TOL, "{worst}");
}
