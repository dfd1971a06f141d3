use super::*;
use crate::par::ExecMode;
use crate::synth::{generate, SynthSpec};

fn tiny_data() -> Dataset {
    let spec = SynthSpec { samples_per_env: 20, height: 16, width: 16, ..SynthSpec::default() };
    generate(&spec, ExecMode::Parallel).unwrap()
}

fn tiny_config(protocol: Protocol) -> ProtocolConfig {
    let mut c = ProtocolConfig { protocol, seed: 3, ..ProtocolConfig::default() };
    c.model = ModelConfig { height: 16, width: 16, patch: 8, d: 4, layers: 1, feature_dim: 4, ..ModelConfig::default() };
    c.train.pgirm.epochs = 2;
    c.train.pgirm.t_alpha = 0;
    c.train.pgirm.lr = 0.05;
    c.train.batch_size = 16;
    c
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = tiny_config(Protocol::Limited);
    c.source_envs = vec![0, 2];
    let text = c.to_toml().unwrap();
    assert!(text.contains("protocol = \"limited\""), "{text}");
    assert_eq!(ProtocolConfig::from_toml(&text).unwrap(), c);
    // omitted keys take their defaults
    let partial = ProtocolConfig::from_toml("protocol = \"missing\"\nseed = 9\n[train.pgirm]\nepochs = 7\n").unwrap();
    assert_eq!(partial.protocol, Protocol::Missing);
    assert_eq!(partial.train.pgirm.epochs, 7);
    assert_eq!(partial.train.pgirm.t_alpha, 5);
    assert_eq!(partial.drop_prob, 0.3);
    assert!(ProtocolConfig::from_toml("protocol = \"sideways\"").is_err());
}

#[test]
fn config_errors() {
    let data = tiny_data();
    let mut c = tiny_config(Protocol::Fixed);
    c.test_envs = vec![7];
    assert!(matches!(c.split_envs(&data), Err(Error::Config(_))));
    let mut c = tiny_config(Protocol::Missing);
    c.missing = vec!["thermal".into()];
    assert!(c.validate().is_err());
    c.missing = vec!["rgb".into(), "depth".into(), "ir".into()];
    assert!(c.validate().is_err());
    let mut c = tiny_config(Protocol::Flexible);
    c.drop_prob = 1.5;
    assert!(c.validate().is_err());
    let mut c = tiny_config(Protocol::Limited);
    c.source_envs = vec![1, 3];
    assert!(c.split_envs(&data).is_err());
    c.source_envs = vec![1];
    assert_eq!(c.split_envs(&data).unwrap(), (vec![1], vec![3]));
    let mut c = tiny_config(Protocol::Fixed);
    c.test_envs = vec![0, 1, 2, 3];
    assert!(c.split_envs(&data).is_err());
    c.val_fraction = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn protocols_set_test_time_modalities() {
    let c = tiny_config(Protocol::Missing);
    assert!(c.test_contexts(4).unwrap().iter().all(|x| x.drop == [false, true, false]));
    assert_eq!(c.effective_train().drop_prob, 0.0);
    let c = tiny_config(Protocol::Fixed);
    assert!(c.test_contexts(4).unwrap().iter().all(|x| x.drop == [false; 3]));
    let c = tiny_config(Protocol::Flexible);
    assert_eq!(c.effective_model().substitute, SubstituteMode::Learnable);
    assert_eq!(c.effective_train().drop_prob, 0.3);
    let ctxs = c.test_contexts(400).unwrap();
    assert_eq!(ctxs, c.test_contexts(400).unwrap());
    let dropped = ctxs.iter().flat_map(|x| x.drop).filter(|&d| d).count() as f64 / 1200.0;
    assert!((dropped - 0.3).abs() < 0.05, "{dropped}");
    assert!(ctxs.iter().all(|x| x.drop.iter().any(|&d| !d)));
}

#[test]
fn split_is_stratified_and_disjoint() {
    let data = tiny_data();
    let (train, val) = stratified_split(&data, &[0, 1, 2], 0.2, &mut rng::seeded(1));
    assert_eq!(train.len() + val.len(), 60);
    assert!(train.iter().all(|i| !val.contains(i)));
    for e in 0..3 {
        for y in [0, 1] {
            let n = val.iter().filter(|&&i| data.records[i].env == e && data.records[i].label == y).count();
            assert_eq!(n, 2);
        }
    }
}

#[test]
fn runs_are_reproducible_and_logged() {
    let data = tiny_data();
    let c = tiny_config(Protocol::Fixed);
    let mut log_a = Vec::new();
    let mut log_b = Vec::new();
    let a = run_protocol(&c, &data, &mut log_a).unwrap();
    let b = run_protocol(&c, &data, &mut log_b).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(a.test, b.test);
    let lines: Vec<LogRecord> =
        String::from_utf8(log_a).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec.run_id, a.run_id);
        assert_eq!(rec.stats.epoch, i);
        assert!(rec.stats.val_auc.is_some());
    }
    assert_eq!(a.train.source_envs, vec![0, 1, 2]);
    assert!((0.0..=1.0).contains(&a.test.auc));
    assert!((0.0..=1.0).contains(&a.test.hter));
    assert_eq!(a.test.threshold, a.train.val.threshold);

    let mut other = c.clone();
    other.seed = 4;
    assert_ne!(run_id(&other, &data).unwrap(), a.run_id);
}

#[test]
fn checkpoint_meta_round_trips() {
    let data = tiny_data();
    let c = tiny_config(Protocol::Flexible);
    let (model, betas, summary) = train_protocol(&c, &data, &mut std::io::sink()).unwrap();
    let ckpt = model.to_checkpoint(&betas, &checkpoint_meta(&c, &summary).unwrap()).unwrap();
    let back = crate::pgirm::checkpoint::Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let (cfg, thr) = read_checkpoint_meta(&back.meta).unwrap();
    assert_eq!(cfg, c);
    assert_eq!(thr.to_bits(), summary.val.threshold.to_bits());
    let (m2, b2) = DadmModel::from_checkpoint(&back).unwrap();
    let direct = evaluate(&model, &betas, &c, &data, thr).unwrap();
    let restored = evaluate(&m2, &b2, &cfg, &data, thr).unwrap();
    assert_eq!(direct, restored);
}
