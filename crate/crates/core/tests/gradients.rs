mod common;

use common::{gradient_error, toy_instances, toy_model};
use mdl::backbone::Task;
use mdl::dependency::MuInit;
use mdl::model::{loss_and_gradients, GraphSpec, Mode};

fn spec(steps: usize, mode: Mode) -> GraphSpec {
    GraphSpec {
        steps,
        eta: 0.1,
        lambda: 1.0,
        mu_init: MuInit::Uniform,
        mode,
        zeta: 0.0,
        first_order: false,
    }
}

#[test]
fn exact_gradients_match_central_differences() {
    for &steps in &[0usize, 1, 2, 4] {
        for (seed, &(m, k)) in [(3usize, 2usize), (4, 3), (3, 4)].iter().enumerate() {
            let model = toy_model(m, k, 3, &[5, 4, 3], Task::Binary, false, seed as u64 + 10 * steps as u64);
            let data = toy_instances(&model, 4, seed as u64 + 100);
            let (worst, blocks) = gradient_error(&model, &spec(steps, Mode::Mdl), &data, 1e-6);
            assert!(worst <= 1e-4, "T={steps} m={m} k={k}: {blocks:?}");
        }
    }
}

#[test]
fn regression_and_numeric_fields() {
    let model = toy_model(3, 3, 3, &[4, 4, 4], Task::Regression, true, 5);
    let data = toy_instances(&model, 5, 6);
    let (worst, blocks) = gradient_error(&model, &spec(2, Mode::Mdl), &data, 1e-6);
    assert!(worst <= 1e-4, "{blocks:?}");
}

#[test]
fn global_mode_regularizer() {
    let model = toy_model(3, 2, 3, &[4, 4, 4], Task::Binary, false, 8);
    let data = toy_instances(&model, 4, 9);
    let sp = GraphSpec {
        zeta: 0.7,
        ..spec(3, Mode::GlobalDep)
    };
    let (worst, blocks) = gradient_error(&model, &sp, &data, 1e-6);
    assert!(worst <= 1e-4, "{blocks:?}");
    let (_, _, g) = loss_and_gradients(&model, &sp, &data.iter().collect::<Vec<_>>(), 0.25).unwrap();
    let (_, _, g0) = loss_and_gradients(&model, &GraphSpec { zeta: 0.0, ..sp }, &data.iter().collect::<Vec<_>>(), 0.25).unwrap();
    assert_ne!(g[1], g0[1], "regularizer must reach the shared matrix");
}

#[test]
fn first_order_differs_from_exact() {
    let model = toy_model(3, 3, 3, &[5, 5, 5], Task::Binary, false, 21);
    let data = toy_instances(&model, 6, 22);
    let refs: Vec<_> = data.iter().collect();
    let exact = loss_and_gradients(&model, &spec(2, Mode::Mdl), &refs, 1.0).unwrap();
    let fo = loss_and_gradients(&model, &GraphSpec { first_order: true, ..spec(2, Mode::Mdl) }, &refs, 1.0).unwrap();
    assert_eq!(exact.0, fo.0, "forward values agree");
    let diff: f64 = exact.2[0].iter().zip(&fo.2[0]).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-8, "embedding gradients should differ, got {diff}");
}

#[test]
fn v_gradient_only_at_selected_columns() {
    let model = toy_model(2, 2, 4, &[3, 3, 3], Task::Binary, false, 3);
    let data = toy_instances(&model, 1, 4);
    let (_, _, g) = loss_and_gradients(&model, &spec(2, Mode::Mdl), &[&data[0]], 1.0).unwrap();
    let (cols, _) = model.embedding.lookup(&data[0]).unwrap();
    let d = model.embedding.v.cols();
    for c in 0..d {
        let nonzero = (0..2).any(|r| g[0][r * d + c] != 0.0);
        if !cols.contains(&c) {
            assert!(!nonzero, "column {c} should have no gradient");
        }
    }
}

#[test]
fn gradients_through_partial_simplex_support() {
    let model = toy_model(4, 3, 3, &[5, 4, 3], Task::Binary, false, 31);
    let data = toy_instances(&model, 5, 32);
    let sp = GraphSpec {
        eta: 0.6,
        lambda: 0.3,
        ..spec(3, Mode::Mdl)
    };
    let clipped = data.iter().any(|x| {
        let (_, mu) = mdl::eval::refined_dependencies(x, &model, &sp).unwrap();
        mu.contains(&0.0)
    });
    assert!(clipped, "fixture should reach a face of the simplex");
    let (worst, blocks) = gradient_error(&model, &sp, &data, 1e-6);
    assert!(worst <= 1e-4, "{blocks:?}");
}
