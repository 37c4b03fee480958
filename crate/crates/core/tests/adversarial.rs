mod common;

use std::collections::BTreeSet;

use turbo_core::autodiff::{Graph, Optimizer, OptimizerConfig, Tensor};
use turbo_core::data::{sample, PairedBatch};
use turbo_core::losses::{adv_loss_critic, adv_loss_generator, AdvConfig};
use turbo_core::nn::{bind, init_params, Activation, CriticMode, CriticSpec, MlpSpec};
use turbo_core::preset::TrainTerm::{self, *};
use turbo_core::rng::{derive_seed, Prng};
use turbo_core::train::{build_run, composite_loss, step_batch, train, train_step, Draws, RunState};

fn clusters(n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Prng::new(seed);
    let real = Tensor::from_fn(&[n, 2], |i| if i % 2 == 0 { -2.0 + 0.3 * rng.normal() } else { 0.3 * rng.normal() });
    let fake = Tensor::from_fn(&[n, 2], |i| if i % 2 == 0 { 2.0 + 0.3 * rng.normal() } else { 0.3 * rng.normal() });
    (real, fake)
}

fn logistic_critic() -> CriticSpec {
    CriticSpec {
        mlp: MlpSpec::new(vec![2, 16, 1], Activation::Relu).unwrap(),
        mode: CriticMode::Logistic,
        clip: 0.01,
    }
}

fn critic_value(spec: &CriticSpec, params: &[Tensor], real: &Tensor, fake: &Tensor) -> f64 {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
    let l = adv_loss_critic(&mut g, &AdvConfig::default(), spec, &p, r, f).unwrap();
    g.value(l).item()
}

fn fit_critic(spec: &CriticSpec, steps: usize) -> (Vec<Tensor>, f64) {
    let mut params = init_params(&spec.mlp, 1);
    let mut opt = Optimizer::new(OptimizerConfig::adam(2e-3), &params);
    let (real, fake) = clusters(128, 2);
    for _ in 0..steps {
        let mut g = Graph::new();
        let p = bind(&mut g, &params, true);
        let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
        let l = adv_loss_critic(&mut g, &AdvConfig::default(), spec, &p, r, f).unwrap();
        let grads = g.backward(l).unwrap();
        let gs: Vec<Tensor> = p.iter().zip(&params).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect();
        opt.step(&mut params, &gs).unwrap();
    }
    let (real, fake) = clusters(512, 3);
    let held_out = critic_value(spec, &params, &real, &fake);
    (params, held_out)
}

#[test]
fn critic_separates_clusters() {
    let spec = logistic_critic();
    let (_, loss) = fit_critic(&spec, 500);
    assert!(loss < 0.1, "held-out critic loss {loss}");
}

#[test]
fn generator_moves_toward_real_under_frozen_critic() {
    let spec = logistic_critic();
    let (params, _) = fit_critic(&spec, 500);
    let (_, fake0) = clusters(64, 4);
    let mut fake = vec![fake0.clone()];
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.05), &fake);
    let value = |pts: &Tensor| {
        let mut g = Graph::new();
        let p = bind(&mut g, &params, false);
        let v = g.param(pts.clone());
        let l = adv_loss_generator(&mut g, &AdvConfig::default(), &spec, &p, v).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).item(), grads.get_or_zeros(v, pts.shape()))
    };
    let (start, _) = value(&fake[0]);
    let frozen = params.clone();
    for _ in 0..50 {
        let (_, grad) = value(&fake[0]);
        opt.step(&mut fake, &[grad]).unwrap();
    }
    let (end, _) = value(&fake[0]);
    assert!(end < start, "{end} vs {start}");
    assert_eq!(frozen, params);
    let mean_x = |t: &Tensor| t.column(0).iter().sum::<f64>() / t.rows() as f64;
    assert!(mean_x(&fake[0]) < mean_x(&fake0));
}

fn loss_on(state: &RunState, batch: &PairedBatch) -> f64 {
    let mut g = Graph::new();
    let gen = bind(&mut g, &state.gen, false);
    let critics: Vec<_> = state.critics.iter().map(|c| bind(&mut g, &c.params, false)).collect();
    let x = g.constant(batch.x.clone());
    let z = g.constant(batch.z.clone());
    let mut draws = Draws::new(derive_seed(5, 2, 0), derive_seed(5, 3, 0));
    let (total, _) = composite_loss(&mut g, state, &gen, &critics, x, z, &mut draws).unwrap();
    g.value(total).item()
}

fn gen_grads(state: &RunState) -> Vec<Tensor> {
    let batch = step_batch(state, 1).unwrap();
    let mut g = Graph::new();
    let gen = bind(&mut g, &state.gen, true);
    let critics: Vec<_> = state.critics.iter().map(|c| bind(&mut g, &c.params, false)).collect();
    let x = g.constant(batch.x.clone());
    let z = g.constant(batch.z.clone());
    let mut draws = Draws::new(1, 2);
    let (total, _) = composite_loss(&mut g, state, &gen, &critics, x, z, &mut draws).unwrap();
    let grads = g.backward(total).unwrap();
    gen.iter().zip(&state.gen).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect()
}

// Which terms see the pairing of rows, and which read real x at all.
fn paired_term(t: TrainTerm) -> bool {
    matches!(t, Lzt | Lxt)
}

fn reads_x(t: TrainTerm, flow: bool) -> bool {
    matches!(t, Lzt | Dzt | Lxh | Dxh | Lxt | VaeKld) || (flow && t == Dxt)
}

const CUSTOM_MASKS: [&str; 3] = ["L_zh = 1.0\nD_zh = 1.0", "D_xt = 1.0", "L_zt = 1.0\nD_xh = 0.5"];

fn all_states() -> Vec<(String, RunState)> {
    let mut out: Vec<(String, RunState)> = common::ALL_PRESETS
        .iter()
        .map(|p| (p.to_string(), build_run(&common::small(p, 6, "")).unwrap()))
        .collect();
    for m in CUSTOM_MASKS {
        out.push((format!("CUSTOM {m:?}"), build_run(&common::small("CUSTOM", 6, &format!("[terms]\n{m}\n"))).unwrap()));
    }
    out
}

#[test]
fn permuting_latent_rows_matters_only_for_paired_terms() {
    for (name, state) in all_states() {
        let batch = step_batch(&state, 1).unwrap();
        let perm = Prng::new(3).permutation(batch.z.rows());
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| batch.z.row(i).to_vec()).collect();
        let shuffled = PairedBatch {
            z: Tensor::from_rows(&rows).unwrap(),
            ..batch.clone()
        };
        let (a, b) = (loss_on(&state, &batch), loss_on(&state, &shuffled));
        let changed = (a - b).abs() > 1e-10 * (1.0 + a.abs());
        let expect = state.preset.mask().into_iter().any(paired_term);
        assert_eq!(changed, expect, "{name}: {a} vs {b}");
    }
}

#[test]
fn replacing_data_matters_only_for_terms_that_read_it() {
    for (name, state) in all_states() {
        let batch = step_batch(&state, 1).unwrap();
        let other = sample(&state.config.data, batch.x.rows(), 999).unwrap();
        let swapped = PairedBatch {
            x: other.x,
            ..batch.clone()
        };
        let (a, b) = (loss_on(&state, &batch), loss_on(&state, &swapped));
        let changed = (a - b).abs() > 1e-10 * (1.0 + a.abs());
        let flow = state.model.flow.is_some();
        let expect = state.preset.mask().into_iter().any(|t| reads_x(t, flow));
        assert_eq!(changed, expect, "{name}: {a} vs {b}");
    }
}

#[test]
fn step_records_hold_exactly_the_active_terms() {
    let table: [(&str, &[TrainTerm]); 9] = [
        ("AAE", &[Dzt, Lxh]),
        ("GAN", &[Dxt]),
        ("WGAN", &[Dxt]),
        ("PIX2PIX", &[Lxt, Dxt]),
        ("CYCLEGAN", &[Dzt, Lxh, Dxt, Lzh]),
        ("FLOW", &[Dxt]),
        ("ALAE", &[Lzh, Alae]),
        ("TURBO_FULL", &[Lzt, Dzt, Lxh, Dxh, Lxt, Dxt, Lzh, Dzh]),
        ("VAE_LIKE", &[VaeKld, Lxh]),
    ];
    for (preset, terms) in table {
        let mut state = build_run(&common::small(preset, 1, "")).unwrap();
        let rec = train_step(&mut state).unwrap();
        let got: BTreeSet<TrainTerm> = rec.terms.keys().copied().collect();
        let want: BTreeSet<TrainTerm> = terms.iter().copied().collect();
        assert_eq!(got, want, "{preset}");
        assert!(rec.terms.values().all(|v| v.is_finite()), "{preset}");
    }
}

#[test]
fn zero_coefficients_leave_generator_untouched() {
    let cfg = common::small("CUSTOM", 2, "[terms]\nL_zt = 0.0\nD_zt = 0.0\nL_xh = 0.0\n");
    let mut state = build_run(&cfg).unwrap();
    let before = state.gen.clone();
    train(&mut state, 5).unwrap();
    assert_eq!(state.gen, before);
}

#[test]
fn decoder_only_mask_sends_nothing_to_the_encoder() {
    let mut state = build_run(&common::small("TURBO_FULL", 3, "")).unwrap();
    for (preset, enc_zero, dec_zero) in [("PIX2PIX", true, false), ("GAN", true, false), ("AAE", false, false)] {
        state.preset = common::small(preset, 3, "").preset_config();
        let grads = gen_grads(&state);
        let n_enc = state.encoder_params().len();
        let enc_norm: f64 = grads[..n_enc].iter().map(Tensor::max_abs).fold(0.0, f64::max);
        let dec_norm: f64 = grads[n_enc..].iter().map(Tensor::max_abs).fold(0.0, f64::max);
        assert_eq!(enc_norm == 0.0, enc_zero, "{preset} encoder {enc_norm}");
        assert_eq!(dec_norm == 0.0, dec_zero, "{preset} decoder {dec_norm}");
    }
    state.preset = common::small("CUSTOM", 3, "[terms]\nL_zt = 1.0\nD_zt = 1.0\n").preset_config();
    let grads = gen_grads(&state);
    let n_enc = state.encoder_params().len();
    assert!(grads[n_enc..].iter().all(|t| t.max_abs() == 0.0));
    assert!(grads[..n_enc].iter().any(|t| t.max_abs() > 0.0));
}

#[test]
fn clipped_critics_stay_in_the_box() {
    let mut state = build_run(&common::small("WGAN", 2, "")).unwrap();
    train(&mut state, 3).unwrap();
    let c = &state.critics[0];
    assert!(c.params.iter().all(|t| t.max_abs() <= c.adv.clip));
}
