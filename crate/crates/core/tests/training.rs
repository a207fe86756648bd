use mdl::ingest::{build_schema, encode_table, split_and_batch, FieldDecl, FieldKind, FieldSchema, RawTable, SparseInstance};
use mdl::model::{Mode, Model};
use mdl::trainer::{train, TrainConfig, TrainError};

fn separable() -> (FieldSchema, Vec<SparseInstance>) {
    let table = RawTable {
        columns: vec!["a".into(), "b".into(), "label".into()],
        rows: (0..400)
            .map(|i| {
                let a = i % 10;
                let b = (i * 7 / 3) % 6;
                vec![format!("a{a}"), format!("b{b}"), if a < 5 { "1" } else { "0" }.to_string()]
            })
            .collect(),
    };
    let decls = vec![FieldDecl::new("a", FieldKind::Categorical, 1), FieldDecl::new("b", FieldKind::Categorical, 1)];
    let schema = build_schema(table.records(), &decls, "label").unwrap();
    let data = encode_table(&table, &schema, 1).unwrap();
    (schema, data)
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_text("k=4\nt=2\nbatch_size=32\nhidden=16,16\ngamma=0.01\nepochs=5\ninit_scale=0.1\n").unwrap();
    c
}

#[test]
fn separable_toy_is_fit() {
    let (schema, data) = separable();
    let mut config = small_config();
    config.epochs = 200;
    config.patience = 200;
    let split = split_and_batch(&data, config.split, config.batch_size, 1).unwrap();
    let mut best = f64::INFINITY;
    let mut epochs = 0;
    let out = train(&split, &schema, &config, 1, &mut |e| {
        best = best.min(e.train_loss);
        epochs += 1;
    })
    .unwrap();
    assert!(epochs <= 200);
    assert!(best < 0.05, "best train logloss {best}");
    for i in 0..2 {
        assert_eq!(out.checkpoint.model.w0[(i, i)], -1.0);
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (schema, data) = separable();
    let mut config = small_config();
    config.gamma = 0.0;
    config.epochs = 2;
    let split = split_and_batch(&data, config.split, config.batch_size, 0).unwrap();
    let out = train(&split, &schema, &config, 1, &mut |_| {}).unwrap();
    let init = Model::init(&schema, config.k, &config.hidden, config.task, config.seed, config.init_scale).unwrap();
    assert_eq!(out.checkpoint.model.blocks(), init.blocks());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (schema, data) = separable();
    let mut config = small_config();
    config.shards = 3;
    let split = split_and_batch(&data, config.split, config.batch_size, 5).unwrap();
    let a = train(&split, &schema, &config, 1, &mut |_| {}).unwrap();
    let b = train(&split, &schema, &config, 4, &mut |_| {}).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn without_dependencies_the_shared_matrix_is_untouched() {
    let (schema, data) = separable();
    let config = TrainConfig {
        mode: Mode::NoDep,
        ..small_config()
    };
    let split = split_and_batch(&data, config.split, config.batch_size, 2).unwrap();
    let out = train(&split, &schema, &config, 1, &mut |_| {}).unwrap();
    let init = Model::init(&schema, config.k, &config.hidden, config.task, config.seed, config.init_scale).unwrap();
    assert_eq!(out.checkpoint.model.w0, init.w0);
    assert_ne!(out.checkpoint.model.embedding.v, init.embedding.v);
}

#[test]
fn best_epoch_is_the_kept_one() {
    let (schema, data) = separable();
    let mut config = small_config();
    config.epochs = 8;
    config.patience = 2;
    let split = split_and_batch(&data, config.split, config.batch_size, 3).unwrap();
    let out = train(&split, &schema, &config, 1, &mut |_| {}).unwrap();
    let best = out.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.checkpoint.best_val, best);
    assert_eq!(out.history[out.checkpoint.best_epoch].val_loss, best);
    let last = out.history.len() - 1;
    assert!(last <= out.checkpoint.best_epoch + config.patience);
}

#[test]
fn every_mode_trains() {
    let (schema, data) = separable();
    for mode in [Mode::Mdl, Mode::NoDep, Mode::GlobalDep] {
        for first_order in [false, true] {
            let config = TrainConfig {
                mode,
                first_order,
                zeta: 0.1,
                epochs: 2,
                ..small_config()
            };
            let split = split_and_batch(&data, config.split, config.batch_size, 4).unwrap();
            let out = train(&split, &schema, &config, 1, &mut |_| {}).unwrap();
            assert!(out.checkpoint.model.is_finite());
            assert!(out.history.iter().all(|e| e.train_loss.is_finite()));
        }
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let (schema, data) = separable();
    let config = small_config();
    let mut split = split_and_batch(&data, config.split, config.batch_size, 0).unwrap();
    split.train.clear();
    assert!(matches!(train(&split, &schema, &config, 1, &mut |_| {}), Err(TrainError::EmptyTrain)));
    let split = split_and_batch(&data, config.split, config.batch_size, 0).unwrap();
    let bad = TrainConfig {
        lambda: 0.0,
        ..small_config()
    };
    assert!(matches!(train(&split, &schema, &bad, 1, &mut |_| {}), Err(TrainError::Config(_))));
}
