//! Configuration, the two training stages, checkpoints and metrics.

mod checkpoint;
mod cluster;
mod config;
mod eval;
mod metrics;
mod model;
mod train;

pub use checkpoint::{Checkpoint, TensorRecord, MAGIC, OPTIM_PREFIX};
pub use cluster::{cluster_demo, purity, AdjacencyStats, ClusterReport};
pub use config::{Branches, DataConfig, DataSource, EvalConfig, GcConfig, JigsawConfig, PatchConfig, Seeds, TrainConfig};
pub use eval::{eval_stage2, eval_threads, evaluate_backbone, EvalReport};
pub use metrics::{read_metrics, Anomalies, MetricsRecord, MetricsWriter};
pub use model::MpanModel;
pub use train::{
    first_batch_calibration, load_run_checkpoint, prepare_dataset, train_stage1, Calibration, Trainer, TrainOutcome,
    TrainOutputs,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::WeightMode;
    use crate::error::Error;
    use crate::model::parameter_checksum;

    fn smoke() -> (TrainConfig, crate::episodes::Dataset) {
        let cfg = TrainConfig::smoke();
        let ds = prepare_dataset(&cfg).unwrap();
        (cfg, ds)
    }

    #[test]
    fn config_json_round_trip_and_strictness() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["batch_sise"] = 3.into();
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("batch_sise")), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.branches = Branches { few: false, pat: false, rot: false, loc: false, jig: false, clu: false };
        assert!(c.validate().unwrap_err().is_config());
        let mut c = TrainConfig::default();
        c.lr_schedule = vec![(1, 0.1), (5, 0.01), (5, 0.001)];
        assert!(c.validate().is_err());
        c.lr_schedule = vec![(1, 0.1), (5, 0.0)];
        assert!(c.validate().is_err());
        c.lr_schedule = vec![(2, 0.1)];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.patch.crop = 13;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lr_schedule_lookup() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 0.1);
        assert_eq!(c.lr_at(22), 0.1);
        assert_eq!(c.lr_at(23), 0.01);
        assert_eq!(c.lr_at(25), 0.01);
        assert_eq!(c.lr_at(26), 0.001);
        assert_eq!(c.lr_at(30), 0.001);
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds.model = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn uniform_heads_calibrate_to_log_cardinality() {
        let (cfg, ds) = smoke();
        let cal = first_batch_calibration(&cfg, &ds, true).unwrap();
        assert_eq!(cal.len(), 6);
        for c in cal {
            assert!((c.measured - c.expected).abs() <= 0.1 * c.expected, "{c:?}");
        }
    }

    #[test]
    fn metrics_follow_schedule_and_report_null_for_disabled_branches() {
        let (mut cfg, ds) = smoke();
        cfg.epochs = 3;
        cfg.lr_schedule = vec![(1, 0.05), (3, 0.005)];
        cfg.branches = Branches { rot: true, ..Branches::baseline() };
        let dir = tempfile::tempdir().unwrap();
        let out = train_stage1(&cfg, &ds, &TrainOutputs { dir: Some(dir.path().to_path_buf()) }).unwrap();
        let lrs: Vec<f64> = out.metrics.iter().map(|m| m.lr).collect();
        assert_eq!(lrs, vec![0.05, 0.05, 0.005]);
        assert_eq!(out.metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        for m in &out.metrics {
            assert!(m.loss_few.is_some() && m.loss_rot.is_some());
            assert!(m.loss_pat.is_none() && m.loss_loc.is_none() && m.loss_jig.is_none() && m.loss_clu.is_none());
        }
        assert_eq!(read_metrics(&dir.path().join("metrics.jsonl")).unwrap(), out.metrics);
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert!(text.lines().next().unwrap().contains("\"loss_jig\":null"));
        let loaded = load_run_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, out.checkpoint);
    }

    #[test]
    fn baseline_run_trains_only_the_backbone_and_few_shot_head() {
        let (mut cfg, ds) = smoke();
        cfg.branches = Branches::baseline();
        cfg.attention = WeightMode::Sum;
        let fresh = Trainer::new(&cfg, &ds).unwrap().model;
        let out = train_stage1(&cfg, &ds, &TrainOutputs::default()).unwrap();
        let names = out.optimizer.names();
        assert!(names.iter().all(|n| n.starts_with("backbone.") || n.starts_with("cc_few.")), "{names:?}");
        let before = parameter_checksum(&fresh.head_rot.named_parameters("head_rot"));
        let after = parameter_checksum(&out.model.head_rot.named_parameters("head_rot"));
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, ds) = smoke();
        let a = train_stage1(&cfg, &ds, &TrainOutputs::default()).unwrap();
        let b = train_stage1(&cfg, &ds, &TrainOutputs::default()).unwrap();
        let strip = |m: &[MetricsRecord]| m.iter().map(MetricsRecord::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.pseudo_labels, b.pseudo_labels);
    }

    #[test]
    fn checkpoint_round_trip_restores_model_and_optimizer() {
        let (cfg, ds) = smoke();
        let out = train_stage1(&cfg, &ds, &TrainOutputs::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mpan");
        out.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, out.checkpoint);
        let fresh = Trainer::new(&cfg, &ds).unwrap().model;
        let mut opt = fresh.optimizer(&cfg);
        loaded.restore(&fresh, Some(&mut opt)).unwrap();
        assert_eq!(parameter_checksum(&fresh.named_parameters()), parameter_checksum(&out.model.named_parameters()));
        assert_eq!(opt.state.momentum_buffers, out.optimizer.state.momentum_buffers);
        assert_eq!(Checkpoint::capture(&fresh, Some(&opt), loaded.epoch, loaded.config_hash), loaded);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected_without_touching_the_model() {
        let (cfg, ds) = smoke();
        let model = Trainer::new(&cfg, &ds).unwrap().model;
        let ckpt = Checkpoint::capture(&model, None, 0, cfg.hash());
        let bytes = ckpt.to_bytes();
        let target = Trainer::new(&TrainConfig { seeds: Seeds { model: 9, ..cfg.seeds }, ..cfg.clone() }, &ds).unwrap().model;
        let before = parameter_checksum(&target.named_parameters());
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Integrity(_)), "{err}");
        }
        let mut tagged = bytes.clone();
        tagged[4] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&tagged), Err(Error::Integrity(m)) if m.contains("tag")));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));

        let mut partial = ckpt.clone();
        partial.tensors.retain(|t| t.name != "head_rot.bias");
        let err = partial.restore(&target, None).unwrap_err();
        assert!(matches!(err, Error::Integrity(ref m) if m.contains("head_rot.bias")), "{err}");
        assert_eq!(parameter_checksum(&target.named_parameters()), before);
    }

    #[test]
    fn shape_mismatch_is_a_compatibility_error_naming_the_tensor() {
        let (cfg, ds) = smoke();
        let model = Trainer::new(&cfg, &ds).unwrap().model;
        let ckpt = Checkpoint::capture(&model, None, 0, cfg.hash());
        let mut wider = cfg.clone();
        wider.backbone = vec![8, 12];
        let other = Trainer::new(&wider, &ds).unwrap().model;
        let err = ckpt.restore(&other, None).unwrap_err();
        assert!(matches!(err, Error::Compatibility(ref m) if m.contains("backbone.conv1.weight")), "{err}");
        let err = eval_stage2(&ckpt, &wider, &ds, Some(4)).unwrap_err();
        assert!(matches!(err, Error::Compatibility(_)), "{err}");
    }

    #[test]
    fn divergence_writes_a_loadable_emergency_checkpoint() {
        let (mut cfg, ds) = smoke();
        cfg.lr_schedule = vec![(1, 1e30)];
        cfg.clip_norm = None;
        cfg.epochs = 5;
        let dir = tempfile::tempdir().unwrap();
        let err = train_stage1(&cfg, &ds, &TrainOutputs { dir: Some(dir.path().to_path_buf()) }).err().expect("diverges");
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("emergency.mpan")), "{err}");
        let ckpt = Checkpoint::load(&dir.path().join("emergency.mpan")).unwrap();
        let fresh = Trainer::new(&cfg, &ds).unwrap().model;
        ckpt.restore(&fresh, None).unwrap();
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (cfg, ds) = smoke();
        let out = train_stage1(&cfg, &ds, &TrainOutputs::default()).unwrap();
        let a = eval_stage2(&out.checkpoint, &cfg, &ds, Some(12)).unwrap();
        let b = eval_stage2(&out.checkpoint, &cfg, &ds, Some(12)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes, 12);
        assert_eq!(a.accuracies.len(), 12);
        assert_eq!(a.config_hash, format!("{:016x}", cfg.hash()));
        let json = serde_json::to_value(&a).unwrap();
        for key in ["mean_accuracy", "ci95_halfwidth", "episodes", "n_way", "k_shot", "t_query", "config_hash"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn cluster_demo_reports_a_well_formed_adjacency() {
        let (cfg, ds) = smoke();
        let model = Trainer::new(&cfg, &ds).unwrap().model;
        let r = cluster_demo(&cfg, &ds, &model.backbone).unwrap();
        assert!(r.adjacency.symmetric && r.adjacency.unit_diagonal);
        assert_eq!(r.gc_histogram.iter().sum::<usize>(), r.adjacency.nodes);
        assert_eq!(r.kmeans_histogram.iter().sum::<usize>(), r.adjacency.nodes);
        assert!((0.0..=1.0).contains(&r.gc_purity));
        assert!(r.kmeans_inertia.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn purity_counts_majority_matches() {
        assert_eq!(purity(&[0, 0, 1, 1], &[2, 2, 3, 3], 2), 1.0);
        assert_eq!(purity(&[0, 0, 0, 0], &[0, 0, 1, 1], 2), 0.5);
    }

    #[test]
    fn independent_unlabeled_batch_draws_from_the_pool() {
        let (mut cfg, ds) = smoke();
        cfg.independent_unlabeled_batch = true;
        let out = train_stage1(&cfg, &ds, &TrainOutputs::default()).unwrap();
        assert!(out.metrics.iter().all(|m| m.loss_total.is_finite()));
    }
}
