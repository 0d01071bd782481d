use gflow_core::causality::{
    aggregate_ensemble, detect_lags, extract_causality, gaussian_kde, mean, normalize, std_dev, NormEnsemble,
    Normalization,
};
use gflow_core::checkpoint::Checkpoint;
use gflow_core::model::{init_model, DelaySpec, ModelSpec, VelocityModel};
use gflow_core::ode::{
    dde_solve, solve_ivp, FnDelayField, FnField, HistoryBuffer, InitialFunction, SolverSpec, TimeGrid, Trajectory,
};
use gflow_core::train::{loss_and_gradient, total_loss, warmup_steps, Batch, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn spec(n_series: usize, m: usize, width: usize, wn: bool, ln: bool) -> ModelSpec {
    ModelSpec {
        n_series,
        delays: if m == 0 { DelaySpec::none() } else { DelaySpec::uniform(0.1, m).unwrap() },
        n_aug: 0,
        hidden: vec![width, width],
        weight_norm: wn,
        layer_norm: ln,
    }
}

fn scrambled(spec: &ModelSpec, seed: u64, w: &[f64]) -> VelocityModel {
    let mut model = init_model(spec, seed).unwrap();
    let mut k = 0;
    for c in model.components.iter_mut() {
        c.layers[0].weight.mapv_inplace(|_| {
            k += 1;
            w[k % w.len()]
        });
    }
    model
}

fn brute_penalty(model: &VelocityModel) -> f64 {
    let mut total = 0.0;
    for c in &model.components {
        let w = c.layers[0].effective_weight();
        for j in 0..w.ncols() {
            let mut ss = 0.0;
            for i in 0..w.nrows() {
                ss += w[[i, j]] * w[[i, j]];
            }
            total += ss.sqrt();
        }
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalty_matches_column_norm_sum(
        ns in 1usize..4, m in 0usize..3, width in 1usize..6, wn in any::<bool>(), seed in 0u64..1000,
        w in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let model = scrambled(&spec(ns, m, width, wn, false), seed, &w);
        prop_assert_eq!(model.group_lasso_penalty(), brute_penalty(&model));
    }

    #[test]
    fn pruning_never_revives_columns(
        ns in 1usize..4, m in 0usize..3, seed in 0u64..1000, rhos in prop::collection::vec(0.0f64..2.0, 1..6),
        w in prop::collection::vec(-1.0f64..1.0, 1..40),
    ) {
        let mut model = scrambled(&spec(ns, m, 3, false, false), seed, &w);
        let mut before = model.pruned_count();
        for rho in rhos {
            model.prune(rho, true);
            let after = model.pruned_count();
            prop_assert!(after >= before);
            before = after;
            for (c, mask) in model.components.iter().zip(&model.prune_mask) {
                for (j, &keep) in mask.iter().enumerate() {
                    if !keep {
                        prop_assert!(c.layers[0].weight.column(j).iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
        let back = Checkpoint::from_json(&Checkpoint::new(model.clone(), TrainConfig::default(), seed).to_json().unwrap()).unwrap();
        prop_assert_eq!(back.model.params_flat(), model.params_flat());
        prop_assert_eq!(back.model.prune_mask, model.prune_mask);
    }

    #[test]
    fn ensemble_stats_match_direct_formulas(
        runs in 1usize..7, ns in 1usize..3, m in 0usize..3, seed in 0u64..1000,
        w in prop::collection::vec(-1.0f64..1.0, 1..40),
    ) {
        let s = spec(ns, m, 3, false, false);
        let members: Vec<_> = (0..runs)
            .map(|r| {
                let mut shifted = w.clone();
                shifted.rotate_left(r % w.len());
                extract_causality(&scrambled(&s, seed + r as u64, &shifted))
            })
            .collect();
        let ens = NormEnsemble::new(members, (0..runs as u64).collect()).unwrap();
        let sum = aggregate_ensemble(&ens);
        for ((i, j), &mu) in sum.mean.indexed_iter() {
            let vals: Vec<f64> = ens.members.iter().map(|c| c.normalized[[i, j]]).collect();
            let mut acc = 0.0;
            for v in &vals {
                acc += v;
            }
            let direct = acc / vals.len() as f64;
            let mut sq = 0.0;
            for v in &vals {
                sq += (v - direct) * (v - direct);
            }
            prop_assert_eq!(mu, direct);
            prop_assert_eq!(sum.std[[i, j]], (sq / vals.len() as f64).sqrt());
        }
    }

    #[test]
    fn kde_matches_gaussian_mixture(
        samples in prop::collection::vec(-2.0f64..2.0, 1..12), h in 0.01f64..2.0, x in -3.0f64..3.0,
    ) {
        let mut mix = 0.0;
        for &c in &samples {
            let u = (x - c) / h;
            mix += (-u * u / 2.0).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
        }
        mix /= samples.len() as f64;
        prop_assert!((gaussian_kde(&samples, h, x) - mix).abs() <= 1e-12 * mix.max(1.0));
    }

    #[test]
    fn mean_and_std_of_constant(v in -10.0f64..10.0, n in 1usize..10) {
        let vals = vec![v; n];
        prop_assert!((mean(&vals) - v).abs() <= 1e-12 * v.abs().max(1.0));
        prop_assert!(std_dev(&vals) <= 1e-12 * v.abs().max(1.0));
    }

    #[test]
    fn normalization_is_idempotent(
        rows in 1usize..4, cols in 1usize..6, v in prop::collection::vec(0.0f64..3.0, 24), per_row in any::<bool>(),
    ) {
        let a = Array2::from_shape_fn((rows, cols), |(i, j)| v[i * cols + j]);
        let mode = if per_row { Normalization::PerRow } else { Normalization::Global };
        let once = normalize(&a, mode);
        prop_assert!(once.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert_eq!(normalize(&once, mode), once);
    }

    #[test]
    fn zero_delay_dde_equals_ode(
        a in -1.0f64..1.0, b in -1.0f64..1.0, z0 in prop::array::uniform2(-2.0f64..2.0),
        dt in 0.01f64..0.1, n in 1usize..60,
    ) {
        let rhs = move |t: f64, z: &[f64], dz: &mut [f64]| {
            dz[0] = a * z[1] + t.cos();
            dz[1] = -b * z[0].tanh() - 0.2 * z[1];
        };
        let grid = TimeGrid::new(0.0, dt, n).unwrap();
        let ode = solve_ivp(&FnField::new(2, rhs), &z0, &grid, &SolverSpec::rk4()).unwrap();
        let field = FnDelayField::new(2, vec![0.0], move |t, z: &[f64], _d: &[&[f64]], dz: &mut [f64]| rhs(t, z, dz));
        let mut buf = HistoryBuffer::with_initial(0.0, dt, InitialFunction::Constant(z0.to_vec())).unwrap();
        let dde = dde_solve(&field, &mut buf, &grid, &SolverSpec::rk4()).unwrap();
        for (x, y) in dde.states.iter().zip(ode.states.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn detected_lags_are_sorted(
        seed in 0u64..1000, m in 1usize..5, w in prop::collection::vec(-1.0f64..1.0, 1..40), rho in 0.0f64..0.5,
    ) {
        let mut model = scrambled(&spec(2, m, 3, false, false), seed, &w);
        model.prune(rho, true);
        let cm = extract_causality(&model);
        for target in 0..2 {
            for source in 0..2 {
                let lags = detect_lags(&cm, source, target).unwrap();
                prop_assert!(lags.windows(2).all(|p| p[0].score >= p[1].score));
                prop_assert!(lags.iter().all(|l| l.index >= 1 && l.index <= m && l.score > 0.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gradient_matches_finite_differences(
        seed in 0u64..10_000, m in 0usize..3, wn in any::<bool>(), ln in any::<bool>(), alpha in 0.0f64..0.1,
    ) {
        let dt = 0.1;
        let s = ModelSpec { hidden: vec![4], ..spec(2, m, 4, wn, ln) };
        let model = init_model(&s, seed).unwrap();
        let times: Vec<f64> = (0..10).map(|i| i as f64 * dt).collect();
        let rows: Vec<Vec<f64>> = times.iter().map(|&t| vec![(2.0 * t).sin(), (t + 0.5).cos()]).collect();
        let data = vec![Trajectory::from_rows(times, &rows).unwrap()];
        let warmup = warmup_steps(&model, dt).unwrap();
        let batch = Batch::from_members(&data, &[(0, warmup), (0, warmup + 2)], warmup, 4, dt).unwrap();
        let cfg = TrainConfig { alpha, ..TrainConfig::default() };
        let (_, grad) = loss_and_gradient(&model, &batch, &cfg).unwrap();
        let theta = model.params_flat();
        let mut probe = model.clone();
        let eps = 1e-5;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += eps;
            probe.set_params_flat(&p).unwrap();
            let up = total_loss(&probe, &batch, &cfg).unwrap().total;
            p[i] -= 2.0 * eps;
            probe.set_params_flat(&p).unwrap();
            let down = total_loss(&probe, &batch, &cfg).unwrap().total;
            let fd = (up - down) / (2.0 * eps);
            let err = (grad.0[i] - fd).abs();
            prop_assert!(err <= 1e-8 || err <= 1e-4 * fd.abs().max(grad.0[i].abs()), "param {i}: {} vs {fd}", grad.0[i]);
        }
    }
}
