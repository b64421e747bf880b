use latent_flow::analysis::{fit_ridge, pca_project, r2_score, ResidualReport};
use latent_flow::autodiff::{forward_backward, Tape};
use latent_flow::checkpoint::{flow_checkpoint, flow_from_checkpoint, Checkpoint};
use latent_flow::config::{ExperimentConfig, ExperimentKind};
use latent_flow::datasets::split_indices;
use latent_flow::flow::{
    cfm_loss_with_draws, condot_interpolate, target_velocity, CfmDraws, Conditioning, ConditioningScheme, FlowArch,
    FlowModel, TimeEmbedding,
};
use latent_flow::nn::Activation;
use latent_flow::ode::{integrate, IntegratorConfig, Method};
use latent_flow::optim::{AdamConfig, AdamState};
use latent_flow::rng::{normal_tensor, permutation, seeded};
use latent_flow::Tensor;
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn small_flow(seed: u64) -> FlowModel {
    let arch = FlowArch {
        latent_dim: 2,
        n_classes: 3,
        n_continuous: 0,
        hidden: vec![8, 8],
        activation: Activation::Elu,
        scheme: ConditioningScheme::RawAppend { null_value: -1.0 },
        time: TimeEmbedding::Raw,
    };
    FlowModel::new(arch, &mut seeded(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn condot_endpoints_and_line(z in finite_vec(4), eps in finite_vec(4), t in 0.0f64..=1.0) {
        prop_assert_eq!(condot_interpolate(&z, &eps, 0.0).unwrap(), eps.clone());
        prop_assert_eq!(condot_interpolate(&z, &eps, 1.0).unwrap(), z.clone());
        let zt = condot_interpolate(&z, &eps, t).unwrap();
        let u = target_velocity(&z, &eps).unwrap();
        for j in 0..4 {
            prop_assert!((zt[j] - eps[j] - t * u[j]).abs() <= 1e-13);
        }
    }

    #[test]
    fn gradient_of_a_linear_form_is_its_weights(w in finite_vec(6), x in finite_vec(6)) {
        let wt = Tensor::vector(w.clone()).unwrap();
        let f = |tape: &mut Tape, v: &[latent_flow::autodiff::Var]| {
            let wc = tape.constant(wt.clone());
            let p = tape.mul(v[0], wc)?;
            Ok(tape.sum(p))
        };
        let (_, grads) = forward_backward(f, &[Tensor::vector(x).unwrap()]).unwrap();
        prop_assert_eq!(grads[0].data(), &w[..]);
    }

    #[test]
    fn adam_leaves_params_alone_under_zero_gradients(p in finite_vec(5), steps in 1usize..20) {
        let mut params = vec![Tensor::vector(p.clone()).unwrap()];
        let grads = vec![Tensor::zeros(&[5])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..steps {
            state.step(&mut params, &grads).unwrap();
        }
        prop_assert_eq!(params[0].data(), &p[..]);
        prop_assert_eq!(state.step_count(), steps as u64);
    }

    #[test]
    fn cfm_loss_is_invariant_to_joint_permutation(seed in 0u64..1000) {
        let model = small_flow(seed);
        let mut rng = seeded(seed + 1);
        let z = normal_tensor(&[7, 2], &mut rng);
        let conds: Vec<_> = (0..7).map(|i| Conditioning::class(i % 3)).collect();
        let draws = CfmDraws::sample(7, 2, 0.4, &mut rng);
        let perm = permutation(7, &mut rng);
        let base = cfm_loss_with_draws(&model, &z, &conds, &draws).unwrap();
        let zp = z.select_rows(&perm).unwrap();
        let cp: Vec<_> = perm.iter().map(|&i| conds[i].clone()).collect();
        let moved = cfm_loss_with_draws(&model, &zp, &cp, &draws.permuted(&perm).unwrap()).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn flow_checkpoints_round_trip_bit_exactly(seed in 0u64..1000, ckpt_seed: u64) {
        let model = small_flow(seed);
        let bytes = flow_checkpoint(&model, ckpt_seed).to_bytes();
        let (back, s) = flow_from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(s, ckpt_seed);
        prop_assert_eq!(&back.params, &model.params);
        prop_assert_eq!(flow_checkpoint(&back, s).to_bytes(), bytes);
    }

    #[test]
    fn config_round_trips(seed in 0..=i64::MAX as u64, steps in 1usize..100_000, p in 0.0f64..=1.0, factors: bool) {
        let kind = if factors { ExperimentKind::Factors } else { ExperimentKind::Gaussians2d };
        let mut c = ExperimentConfig::default_for(kind);
        c.seed = seed;
        c.flow.train.steps = steps;
        c.flow.train.dropout_p = p;
        prop_assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn held_out_r2_never_exceeds_one(seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let x = normal_tensor(&[60, 3], &mut rng);
        let y: Vec<f64> = normal_tensor(&[60], &mut rng).into_data();
        let tr: Vec<usize> = (0..40).collect();
        let te: Vec<usize> = (40..60).collect();
        let m = fit_ridge(&x.select_rows(&tr).unwrap(), &tr.iter().map(|&i| y[i]).collect::<Vec<_>>(), 1e-6).unwrap();
        let yt: Vec<f64> = te.iter().map(|&i| y[i]).collect();
        prop_assert!(r2_score(&yt, &m.predict(&x.select_rows(&te).unwrap())) <= 1.0);
    }

    #[test]
    fn pca_ratios_are_a_sub_distribution(seed in 0u64..1000, k in 1usize..=4) {
        let x = normal_tensor(&[30, 4], &mut seeded(seed));
        let p = pca_project(&x, k).unwrap();
        let total: f64 = p.explained_ratio.iter().sum();
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!(p.explained_ratio.iter().all(|&r| r >= 0.0));
    }

    #[test]
    fn residual_is_the_exact_difference(a in finite_vec(6), b in finite_vec(6)) {
        let r = ResidualReport::from_pair(
            Tensor::matrix(2, 3, a.clone()).unwrap(),
            Tensor::matrix(2, 3, b.clone()).unwrap(),
        ).unwrap();
        for i in 0..6 {
            prop_assert_eq!(r.residual.data()[i], a[i] - b[i]);
        }
    }

    #[test]
    fn split_is_a_partition(n in 1usize..500, frac in 0.05f64..0.95, seed: u64) {
        let (tr, te) = split_indices(n, frac, &mut seeded(seed));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn linear_field_round_trip_is_tight(seed in 0u64..1000, a in -1.0f64..1.0) {
        let z1 = normal_tensor(&[5, 3], &mut seeded(seed));
        let cfg = IntegratorConfig { method: Method::Rk4, n_steps: 100 };
        let z0 = integrate(|z, _| Ok(z.scale(a)), &z1, 1.0, 0.0, &cfg).unwrap().into_end();
        let back = integrate(|z, _| Ok(z.scale(a)), &z0, 0.0, 1.0, &cfg).unwrap().into_end();
        prop_assert!(back.sub(&z1).unwrap().norm() <= 1e-8 * z1.norm());
    }
}
