use fair_embed::metrics::cced_gap;
use fair_embed::synthetic::ShiftScenario;
use fair_embed::trainer::{loss_breakdown, train, DebiasAdapter, TrainConfig};
use fair_embed::{EmbeddingVector, GroupEmbeddings, KernelParams, RhoMode};

fn scenario(groups: usize) -> Vec<GroupEmbeddings> {
    ShiftScenario { groups, ..Default::default() }.generate().unwrap().groups
}

#[test]
fn same_seed_same_adapter() {
    let data = scenario(96);
    let cfg = TrainConfig { batch_size: 8, ..Default::default() };
    let a = train(&data, &[], &cfg).unwrap();
    let b = train(&data, &[], &cfg).unwrap();
    assert_eq!(a.adapter, b.adapter);
    assert_eq!(a.history, b.history);
    let c = train(&data, &[], &TrainConfig { seed: 7, ..cfg }).unwrap();
    assert_ne!(a.adapter, c.adapter);
}

#[test]
fn inputs_stay_frozen() {
    let data = scenario(64);
    let copy = data.clone();
    let _ = train(&data, &data[..8], &TrainConfig::default()).unwrap();
    assert_eq!(data, copy);
}

#[test]
fn training_lowers_the_objective() {
    let data = scenario(256);
    let cfg = TrainConfig::default();
    let out = train(&data, &[], &cfg).unwrap();
    let id = DebiasAdapter::identity(32, false);
    let before = loss_breakdown(&data, &id, out.kernel, cfg.beta).unwrap();
    let after = loss_breakdown(&data, &out.adapter, out.kernel, cfg.beta).unwrap();
    assert!(after.total < before.total, "{after:?} vs {before:?}");
    assert_eq!(out.kernel, KernelParams::new(1.0).unwrap());
}

#[test]
fn without_the_rep_term_the_neutral_embeddings_drift() {
    let data = scenario(256);
    let free = train(&data, &[], &TrainConfig { beta: 0.0, ..Default::default() }).unwrap();
    let tied = train(&data, &[], &TrainConfig { beta: 1.5, ..Default::default() }).unwrap();
    let rep = |a: &DebiasAdapter| loss_breakdown(&data, a, free.kernel, 0.0).unwrap().rep;
    assert!(rep(&free.adapter) > rep(&tied.adapter));
}

#[test]
fn symmetric_fixture_is_a_fixed_point() {
    let v = |x: &[f64]| EmbeddingVector::new(x.to_vec()).unwrap();
    let data: Vec<GroupEmbeddings> = (0..10)
        .map(|i| {
            let c = i as f64;
            GroupEmbeddings::new(format!("{i}"), vec![v(&[c, 1.0]), v(&[c, -1.0])], v(&[c, 0.0]))
        })
        .collect();
    let out = train(&data, &[], &TrainConfig { batch_size: 3, ..Default::default() }).unwrap();
    assert_eq!(out.adapter, DebiasAdapter::identity(2, false));
    assert_eq!(cced_gap(&data, Some(&out.adapter)).unwrap(), 0.0);
}

#[test]
fn fixed_rho_is_used_verbatim() {
    let data = scenario(32);
    let out = train(&data, &[], &TrainConfig { rho_mode: RhoMode::Fixed(2.5), ..Default::default() }).unwrap();
    assert_eq!(out.kernel.rho(), 2.5);
}

#[test]
fn bias_vector_is_trained_when_enabled() {
    let data = scenario(64);
    let out = train(&data, &[], &TrainConfig { use_bias: true, ..Default::default() }).unwrap();
    assert!(out.adapter.bias().is_some());
    assert_eq!(out.adapter.param_count(), 32 * 32 + 32);
}
