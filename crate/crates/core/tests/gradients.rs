mod common;

use turbo_core::autodiff::{check_gradients, Graph, Tensor, TensorError};
use turbo_core::losses::{adv_loss_critic, adv_loss_generator, flow_nll, AdvConfig, Surrogate};
use turbo_core::nn::{
    bind, critic_forward, init_flow_params, init_params, mlp_forward, Activation, CouplingFlowSpec, CriticMode,
    CriticSpec, MlpSpec,
};
use turbo_core::rng::{derive_seed, Prng};
use turbo_core::train::{build_run, composite_loss, step_batch, Draws, RunState};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn wrap(e: impl std::fmt::Display) -> TensorError {
    TensorError::Domain {
        op: "test",
        detail: e.to_string(),
    }
}

fn jitter(params: &mut [Tensor], seed: u64, scale: f64) {
    let mut rng = Prng::new(seed);
    for p in params {
        for v in p.data_mut() {
            *v += scale * rng.normal();
        }
    }
}

fn check_preset(state: &RunState) -> f64 {
    let batch = step_batch(state, 1).unwrap();
    let critics: Vec<Vec<Tensor>> = state.critics.iter().map(|c| c.params.clone()).collect();
    let r = check_gradients(&state.gen, H, |g, gen| {
        let cvars: Vec<_> = critics.iter().map(|c| bind(g, c, false)).collect();
        let x = g.constant(batch.x.clone());
        let z = g.constant(batch.z.clone());
        let mut draws = Draws::new(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
        let (total, _) = composite_loss(g, state, gen, &cvars, x, z, &mut draws).map_err(wrap)?;
        Ok(total)
    })
    .unwrap();
    r.max_rel_error
}

#[test]
fn every_preset_loss_matches_finite_differences() {
    for preset in common::ALL_PRESETS {
        let extra = if preset == "WGAN" { "[adv.D_xt]\nclip = 0.5\n" } else { "" };
        let mut state = build_run(&common::small(preset, 4, extra)).unwrap();
        jitter(&mut state.gen, 8, 0.1);
        for c in &mut state.critics {
            jitter(&mut c.params, 9, 0.3);
        }
        let err = check_preset(&state);
        assert!(err < TOL, "{preset}: relative error {err}");
    }
}

#[test]
fn custom_weights_pass_the_check() {
    let extra = "[terms]\nL_zt = 0.3\nD_xh = 1.7\nL_zh = 0.5\n";
    let state = build_run(&common::small("CUSTOM", 2, extra)).unwrap();
    assert!(check_preset(&state) < TOL);
}

#[test]
fn mlp_forward_gradients() {
    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
        let spec = MlpSpec::new(vec![3, 4, 2], act).unwrap();
        let mut inputs = init_params(&spec, 5);
        let mut rng = Prng::new(1);
        inputs.push(Tensor::from_fn(&[5, 3], |_| rng.normal()));
        let r = check_gradients(&inputs, H, |g, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let out = mlp_forward(g, &spec, params, x[0]).map_err(wrap)?;
            let sq = g.square(out);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "{act:?}: {}", r.max_rel_error);
    }
}

#[test]
fn critic_loss_gradients_both_surrogates() {
    for (surrogate, mode) in [
        (Surrogate::LogisticNonsaturating, CriticMode::Logistic),
        (Surrogate::WassersteinClipped, CriticMode::Clipped),
    ] {
        let spec = CriticSpec {
            mlp: MlpSpec::new(vec![2, 4, 1], Activation::Tanh).unwrap(),
            mode,
            clip: 0.5,
        };
        let cfg = AdvConfig::for_surrogate(surrogate);
        let mut rng = Prng::new(7);
        let real = Tensor::from_fn(&[6, 2], |_| rng.normal());
        let fake = Tensor::from_fn(&[6, 2], |_| rng.normal() + 1.0);
        let params = init_params(&spec.mlp, 3);

        let r = check_gradients(&params, H, |g, p| {
            let (a, b) = (g.constant(real.clone()), g.constant(fake.clone()));
            adv_loss_critic(g, &cfg, &spec, p, a, b).map_err(wrap)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "{surrogate:?} critic: {}", r.max_rel_error);

        let r = check_gradients(&[fake.clone()], H, |g, v| {
            let p = bind(g, &params, false);
            adv_loss_generator(g, &cfg, &spec, &p, v[0]).map_err(wrap)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "{surrogate:?} generator: {}", r.max_rel_error);
    }
}

#[test]
fn critic_scores_are_one_per_row() {
    let spec = CriticSpec {
        mlp: MlpSpec::new(vec![2, 3, 1], Activation::Relu).unwrap(),
        mode: CriticMode::Logistic,
        clip: 0.01,
    };
    let mut g = Graph::new();
    let p = bind(&mut g, &init_params(&spec.mlp, 1), false);
    let x = g.constant(Tensor::zeros(&[7, 2]));
    let s = critic_forward(&mut g, &spec, &p, x).unwrap();
    assert_eq!(g.shape(s), &[7]);
}

#[test]
fn flow_nll_gradients() {
    for dim in [2, 4] {
        let spec = CouplingFlowSpec {
            dim,
            blocks: 3,
            hidden: vec![5],
            activation: Activation::Tanh,
            scale_bound: 2.0,
        };
        let mut inputs = init_flow_params(&spec, 11);
        jitter(&mut inputs, 12, 0.2);
        let mut rng = Prng::new(13);
        inputs.push(Tensor::from_fn(&[4, dim], |_| rng.normal()));
        let r = check_gradients(&inputs, H, |g, v| {
            let (params, x) = v.split_at(v.len() - 1);
            flow_nll(g, &spec, params, x[0]).map_err(wrap)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "d = {dim}: {}", r.max_rel_error);
    }
}
