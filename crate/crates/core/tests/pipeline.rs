use std::fs;
use std::path::Path;

use partrep::byol::{BackboneSpec, ByolSpec, Stem};
use partrep::data::shapes::ShapePalette;
use partrep::runner::{run_experiment, Coloring, DataSource, DatasetConfig, ExperimentConfig, RunRecord, Task};
use partrep::vae::ConvVaeSpec;
use partrep::PartitionSpec;

fn tiny_vae() -> ConvVaeSpec {
    ConvVaeSpec { channels: vec![4, 8, 8], ..ConvVaeSpec::default() }
}

fn digits() -> DatasetConfig {
    DatasetConfig { source: DataSource::Digits { train: 96, test: 40 }, color: Coloring::Unbiased }
}

fn config(task: Task, root: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(task, 11);
    c.output_dir = Some(root.to_path_buf());
    c.dataset = Some(digits());
    c.model.vae = Some(tiny_vae());
    c.training.epochs = Some(2);
    c.training.batch_size = Some(32);
    c.eval.traversal_inputs = 4;
    c.eval.swap_pairs = 6;
    c.eval.figures = 1;
    c
}

fn train(root: &Path) -> RunRecord {
    run_experiment(&config(Task::TrainVae, root)).unwrap()
}

fn report(root: &Path, ckpt: &Path) -> RunRecord {
    let mut c = config(Task::Report, root);
    c.checkpoint = Some(ckpt.to_path_buf());
    run_experiment(&c).unwrap()
}

#[test]
fn vae_train_report_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let t1 = train(a.path());
    assert_eq!(t1.metrics["epochs"], 2.0);
    let r1 = report(a.path(), &t1.file("model.ckpt"));
    for name in ["noise.csv", "traversal.csv", "swap.csv", "report.json", "traversal_0.png", "swap_0.png"] {
        assert!(r1.file(name).exists(), "{name} missing");
    }
    for t in 1..=4 {
        for part in ["content", "style"] {
            let acc = r1.metrics[&format!("noise_{part}_{t}")];
            assert!((0.0..=100.0).contains(&acc));
        }
    }
    assert!((0.0..=1.0).contains(&r1.metrics["swap_recovery"]));
    let swaps = fs::read_to_string(r1.file("swap.csv")).unwrap();
    assert_eq!(swaps.lines().count(), 1 + 2 * 6);

    let t2 = train(b.path());
    assert_eq!(t1.run_id, t2.run_id);
    let r2 = report(b.path(), &t2.file("model.ckpt"));
    for (x, y, name) in [(&t1, &t2, "model.ckpt"), (&t1, &t2, "losses.csv"), (&r1, &r2, "noise.csv"), (&r1, &r2, "traversal.csv"), (&r1, &r2, "swap.csv")] {
        assert_eq!(fs::read(x.file(name)).unwrap(), fs::read(y.file(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let full = train(dir.path());
    let mut first = config(Task::TrainVae, dir.path());
    first.training.epochs = Some(1);
    let first = run_experiment(&first).unwrap();
    let mut rest = config(Task::TrainVae, dir.path());
    rest.checkpoint = Some(first.file("model.ckpt"));
    let rest = run_experiment(&rest).unwrap();
    assert_ne!(rest.run_dir, full.run_dir);
    assert_eq!(fs::read(rest.file("losses.csv")).unwrap(), fs::read(full.file("losses.csv")).unwrap());
    assert_eq!(fs::read(rest.file("model.ckpt")).unwrap(), fs::read(full.file("model.ckpt")).unwrap());
}

#[test]
fn stored_dataset_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let synth = run_experiment(&config(Task::SynthData, dir.path())).unwrap();
    let mut c = config(Task::TrainVae, dir.path());
    c.dataset = Some(DatasetConfig { source: DataSource::Stored { dir: synth.run_dir.clone() }, color: Coloring::Unbiased });
    let stored = run_experiment(&c).unwrap();
    let direct = train(dir.path());
    assert_eq!(fs::read(stored.file("losses.csv")).unwrap(), fs::read(direct.file("losses.csv")).unwrap());
}

#[test]
fn byol_train_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ByolSpec {
        backbone: BackboneSpec { stem: Stem::Strided, widths: vec![4, 8], blocks: vec![1, 1] },
        input_size: 16,
        output_dim: 8,
        hidden_multiplier: 2,
        partition: PartitionSpec::new(6, 2, 1.0).unwrap(),
        ..ByolSpec::desk()
    };
    let data = DatasetConfig { source: DataSource::Shapes { train: 24, test: 20, side: 16, palette: ShapePalette::Binary }, color: Coloring::Biased };
    let mut c = ExperimentConfig::new(Task::TrainByol, 4);
    c.output_dir = Some(dir.path().to_path_buf());
    c.dataset = Some(data.clone());
    c.model.byol = Some(spec);
    c.training.epochs = Some(2);
    c.training.batch_size = Some(8);
    let trained = run_experiment(&c).unwrap();
    let losses = fs::read_to_string(trained.file("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);

    let mut p = ExperimentConfig::new(Task::Probe, 4);
    p.output_dir = Some(dir.path().to_path_buf());
    p.dataset = Some(data);
    p.checkpoint = Some(trained.file("model.ckpt"));
    let m = run_experiment(&p).unwrap().metrics;
    for k in ["accuracy_content", "accuracy_style", "accuracy_backbone"] {
        assert!((0.0..=100.0).contains(&m[k]), "{k} = {}", m[k]);
    }
    assert!(m["content_min_std"].is_finite());
    assert!(m.contains_key("first_epoch_loss") && m.contains_key("final_epoch_loss"));

    let mut bad = ExperimentConfig::new(Task::Traverse, 4);
    bad.output_dir = Some(dir.path().to_path_buf());
    bad.checkpoint = Some(trained.file("model.ckpt"));
    assert!(run_experiment(&bad).is_err());
}
