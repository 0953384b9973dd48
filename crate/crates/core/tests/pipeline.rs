use helo::data::{
    generate_synthetic, load_dataset, save_dataset, split_loso, split_subject_dependent, DatasetSchema, SplitMode,
};
use helo::numerics::Matrix;
use helo::ot::{cost_matrix, sinkhorn, uniform_marginal, SinkhornConfig};
use helo::training::{
    ablation_grid, build_ablated, evaluate_indices, train, AdamState, Checkpoint, HeloModel, SplitInfo, TrainConfig,
};
use helo::Error;
use proptest::prelude::*;

fn tiny() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        embed_dim: 16,
        ffn_dim: 8,
        head_hidden: [16, 8],
        batch_size: 8,
        ..Default::default()
    }
}

#[test]
fn dataset_round_trips_through_jsonl() {
    let schema = DatasetSchema::wesad();
    let data = generate_synthetic(&schema, 3, 4, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&path, &data).unwrap();
    assert_eq!(load_dataset(&path, &schema).unwrap(), data);
    assert!(load_dataset(&path, &DatasetSchema::dmer()).is_err());
}

#[test]
fn train_checkpoint_restore_predicts_identically() {
    let schema = DatasetSchema::dmer();
    let data = generate_synthetic(&schema, 3, 10, 4).unwrap();
    let plan = split_subject_dependent(&data, 0.8, 4).unwrap();
    let fold = &plan.folds[0];
    let mut model = HeloModel::new(&schema, &tiny()).unwrap();
    let mut adam = AdamState::new(&model.store);
    let history = train(&mut model, &mut adam, &data, fold).unwrap();
    assert_eq!(history.records.len(), 3);
    let final_test = history.last().unwrap().test.unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::capture(&model, Some(&adam), Some(SplitInfo::new(SplitMode::SubjectDependent, 4, 0, fold)))
        .save(&path)
        .unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let (restored, restored_adam) = ck.restore().unwrap();
    assert!(restored_adam.is_some());
    assert_eq!(ck.split.as_ref().unwrap().to_fold(), *fold);
    for s in &data {
        assert_eq!(model.predict(s).unwrap(), restored.predict(s).unwrap());
    }
    assert_eq!(evaluate_indices(&restored, &data, &fold.test).unwrap(), final_test);
}

#[test]
fn every_ablation_variant_trains() {
    let schema = DatasetSchema::wesad();
    let data = generate_synthetic(&schema, 3, 4, 9).unwrap();
    let fold = split_loso(&data).unwrap().folds.remove(0);
    let cfg = TrainConfig { epochs: 1, ..tiny() };
    let full = HeloModel::new(&schema, &cfg).unwrap().store.num_values();
    for spec in ablation_grid(&schema) {
        let mut model = build_ablated(&schema, &cfg, &spec).unwrap();
        if !spec.is_full() {
            assert!(model.store.num_values() < full, "{}", spec.label());
        }
        let mut adam = AdamState::new(&model.store);
        let h = train(&mut model, &mut adam, &data, &fold).unwrap();
        let m = h.last().unwrap().test.unwrap();
        assert!(m.to_array().iter().all(|v| v.is_finite()), "{}", spec.label());
    }
}

#[test]
fn divergence_is_reported_with_location() {
    let schema = DatasetSchema::dmer();
    let data = generate_synthetic(&schema, 2, 4, 1).unwrap();
    let fold = split_loso(&data).unwrap().folds.remove(0);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        epochs: 5,
        ..tiny()
    };
    let mut model = HeloModel::new(&schema, &cfg).unwrap();
    let mut adam = AdamState::new(&model.store);
    match train(&mut model, &mut adam, &data, &fold) {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
        Err(Error::Numerical(_)) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_plans_meet_marginals(
        n in 2usize..8,
        m in 2usize..8,
        d in 2usize..6,
        seed in any::<u64>(),
    ) {
        use rand::Rng as _;
        let mut rng = helo::numerics::seeded_rng(seed);
        let mut tokens = |rows: usize| {
            Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (a, b) = (tokens(n), tokens(m));
        let cost = cost_matrix(&a, &b).unwrap();
        let cfg = SinkhornConfig { epsilon: 0.1, max_iter: 200_000, tol: 1e-9 };
        let p = sinkhorn(&cost, &uniform_marginal(n), &uniform_marginal(m), cfg).unwrap();
        prop_assert!(p.converged);
        prop_assert!(p.plan.as_slice().iter().all(|&t| t >= 0.0));
        prop_assert!(p.marginal_violation <= 1e-9);
        prop_assert!(p.wd >= 0.0 && p.wd <= 2.0);
    }
}
