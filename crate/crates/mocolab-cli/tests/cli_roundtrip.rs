//! Command-level integration: idempotent run directories, config-hash
//! isolation, checkpoint/config compatibility rejection.

use std::path::PathBuf;

use mocolab_cli::{run_command, Command, DtypeChoice, RunConfig};
use mocolab_core::loss::BlockMask;
use mocolab_core::nn::EncoderConfig;
use mocolab_core::train::TrainMode;

fn tiny_config(root: &PathBuf) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 17;
    cfg.dtype = DtypeChoice::F32;
    cfg.output_root = root.join("runs");
    cfg.dataset.root = root.join("data");
    cfg.dataset.manifest = root.join("data").join("manifest.csv");
    cfg.synthetic.samples = 24;
    cfg.synthetic.image_size = 8;
    cfg.train.mode = TrainMode::Moco;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 4;
    cfg.train.queue_size = 8;
    cfg.train.encoder = EncoderConfig {
        num_blocks: 2,
        channels_per_block: vec![4, 8],
        in_channels: 3,
        input_size: (8, 8),
        embedding_dim: 8,
        block_pool_sizes: vec![(2, 2), (2, 2)],
        two_layer_head: false,
    };
    cfg.train.block_mask = BlockMask::all(2);
    cfg.probe.epochs = 3;
    cfg.probe.batch_size = 8;
    cfg.finetune.inner.epochs = 2;
    cfg.finetune.inner.batch_size = 8;
    cfg.finetune.fractions = vec![1.0];
    cfg.bootstrap.replicates = 20;
    cfg
}

#[test]
fn reruns_are_bit_identical_and_configs_isolate_directories() {
    let root = std::env::temp_dir().join(format!("mocolab_cli_rt_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let cfg = tiny_config(&root);

    run_command(&Command::Generate { out: Some(cfg.dataset.root.clone()) }, cfg.clone()).unwrap();
    let pre_dir = run_command(&Command::Pretrain, cfg.clone()).unwrap();
    let ckpt = pre_dir.join("checkpoint_last.bin");
    assert!(ckpt.exists());
    let log_a = std::fs::read_to_string(pre_dir.join("training_log.csv")).unwrap();
    let ckpt_a = std::fs::read(&ckpt).unwrap();

    // rerun: same directory, bit-identical outputs (wall-time column aside)
    let pre_dir2 = run_command(&Command::Pretrain, cfg.clone()).unwrap();
    assert_eq!(pre_dir, pre_dir2);
    let log_b = std::fs::read_to_string(pre_dir.join("training_log.csv")).unwrap();
    let strip = |text: &str| {
        text.lines()
            .map(|l| l.rsplit_once(',').map(|(h, _)| h.to_string()).unwrap_or_else(|| l.to_string()))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&log_a), strip(&log_b));
    assert_eq!(ckpt_a, std::fs::read(&ckpt).unwrap());

    // different seed -> different run directory
    let mut cfg2 = cfg.clone();
    cfg2.seed = 18;
    let pre_dir3 = run_command(&Command::Pretrain, cfg2).unwrap();
    assert_ne!(pre_dir, pre_dir3);

    // probe twice: byte-identical report
    let probe_dir = run_command(&Command::Probe { checkpoint: ckpt.clone() }, cfg.clone()).unwrap();
    let report_a = std::fs::read(probe_dir.join("probe_report.json")).unwrap();
    run_command(&Command::Probe { checkpoint: ckpt.clone() }, cfg.clone()).unwrap();
    let report_b = std::fs::read(probe_dir.join("probe_report.json")).unwrap();
    assert_eq!(report_a, report_b);

    // finetune emits models + summary; analyze-ks needs a 1.0 row
    let ft_dir = run_command(&Command::Finetune { checkpoint: ckpt.clone() }, cfg.clone()).unwrap();
    assert!(ft_dir.join("finetune_summary.json").exists());
    assert!(ft_dir.join("ft_ll_1.model").exists());

    // incompatible encoder config rejected with a field diff
    let mut bad = cfg.clone();
    bad.train.encoder.embedding_dim = 16;
    let err = run_command(&Command::Probe { checkpoint: ckpt }, bad).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("embedding_dim"), "{msg}");
}
