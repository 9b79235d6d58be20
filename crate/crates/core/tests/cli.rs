use std::fs;
use std::path::Path;
use std::process::Command;

use demmamba::blocks::BlockConfig;
use demmamba::cli::{
    cmd_demo, cmd_eval, cmd_gen, cmd_train, ClipIndex, DemoArgs, EvalArgs, GenArgs, RunConfig, RunManifest, TrainArgs,
    LOG, MANIFEST,
};
use demmamba::data::{mosaic_bayer, read_clip};
use demmamba::model::{Ablation, ModelConfig};
use demmamba::train::{StepLog, TrainConfig};

fn gen(dir: &Path, clips: usize, seed: u64, amplitude: f64) -> ClipIndex {
    cmd_gen(&GenArgs { out: dir.to_path_buf(), clips, frames: 3, size: (16, 16), seed, amplitude }).unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = RunConfig {
        model: ModelConfig {
            groups: 1,
            blocks_per_group: 1,
            block: BlockConfig { channels: 8, state: 4, ..BlockConfig::default() },
            ..ModelConfig::default()
        },
        train: TrainConfig { lr0: 2e-3, batch_size: 2, ..TrainConfig::default() },
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

fn train(data: &Path, out: &Path, config: &Path, epochs: usize, ablation: Option<Ablation>) -> RunManifest {
    cmd_train(&TrainArgs {
        data: data.to_path_buf(),
        epochs: Some(epochs),
        config: Some(config.to_path_buf()),
        out: out.to_path_buf(),
        ablation,
        quiet: true,
    })
    .unwrap()
}

fn log_lines(out: &Path) -> Vec<StepLog> {
    fs::read_to_string(out.join(LOG)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn gen_writes_clips_and_index_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let index = gen(&a, 4, 9, 0.2);
    gen(&b, 4, 9, 0.2);
    assert_eq!(index.clips.len(), 4);
    for entry in &index.clips {
        let clip = read_clip(&a.join(&entry.path)).unwrap();
        assert_eq!(clip.frames(), 3);
        assert_eq!(clip.meta.seed, entry.seed);
        assert_eq!(fs::read(a.join(&entry.path)).unwrap(), fs::read(b.join(&entry.path)).unwrap());
    }
    let parsed: ClipIndex = serde_json::from_str(&fs::read_to_string(a.join("index.json")).unwrap()).unwrap();
    assert_eq!(parsed, index);
}

#[test]
fn zero_amplitude_gives_the_mosaicked_clean_clip() {
    let tmp = tempfile::tempdir().unwrap();
    let index = gen(tmp.path(), 1, 3, 0.0);
    let clip = read_clip(&tmp.path().join(&index.clips[0].path)).unwrap();
    assert_eq!(clip.raw.data(), mosaic_bayer(&clip.clean).unwrap().data());
}

#[test]
fn train_eval_demo_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    gen(&data, 4, 1, 0.2);
    // a corrupt clip is skipped and counted
    fs::write(data.join("broken.mvc"), b"MVC1 not really").unwrap();
    let config = tiny_config(tmp.path());

    let m = train(&data, &out, &config, 2, None);
    assert_eq!((m.epochs_completed, m.step, m.status.as_str()), (2, 4, "complete"));
    assert_eq!(m.skipped.len(), 1);
    assert!(out.join("epoch_0001.dmmb").exists() && out.join("epoch_0002.dmmb").exists());
    let logs = log_lines(&out);
    assert_eq!(logs.len(), 4);
    assert!(logs.iter().map(|l| l.step).eq(1..=4));

    // resuming continues the step count
    let m = train(&data, &out, &config, 4, None);
    assert_eq!((m.epochs_completed, m.step), (4, 8));
    let logs = log_lines(&out);
    assert!(logs.iter().map(|l| l.step).eq(1..=8));
    assert!(logs.last().unwrap().loss < logs[0].loss);

    let ckpt = out.join("epoch_0004.dmmb");
    let report = cmd_eval(&EvalArgs { ckpt: ckpt.clone(), data: data.clone() }).unwrap();
    assert_eq!(report.clips.len(), 4);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.parameters > 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["parameters"].as_u64().unwrap() as usize, report.parameters);
    let again = cmd_eval(&EvalArgs { ckpt: ckpt.clone(), data: data.clone() }).unwrap();
    assert_eq!(again.mean_psnr, report.mean_psnr);

    let images = tmp.path().join("demo");
    let clip = report.clips[0].path.clone();
    let demo = cmd_demo(&DemoArgs { ckpt: ckpt.clone(), clip: clip.clone(), out: images.clone() }).unwrap();
    assert!((demo.psnr - report.clips[0].metrics.psnr).abs() <= 0.01);
    let first: Vec<Vec<u8>> = demo.images.iter().map(|p| fs::read(p).unwrap()).collect();
    assert!(first[0].starts_with(b"P6\n16 16\n255\n"));
    assert!(first[3].starts_with(b"P6\n48 16\n255\n"));
    cmd_demo(&DemoArgs { ckpt, clip, out: images }).unwrap();
    let second: Vec<Vec<u8>> = demo.images.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn resume_with_a_different_model_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    gen(&data, 2, 5, 0.2);
    let config = tiny_config(tmp.path());
    train(&data, &out, &config, 1, None);
    let mut other: RunConfig = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    other.model.block.state = 8;
    let other_path = tmp.path().join("other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    let err = cmd_train(&TrainArgs {
        data,
        epochs: Some(2),
        config: Some(other_path),
        out: out.clone(),
        ablation: None,
        quiet: true,
    })
    .unwrap_err();
    assert!(format!("{err:#}").contains("block.state"), "{err:#}");

    // a checkpoint whose tensors do not fit the manifest is rejected by name
    let mut manifest = RunManifest::load(&out.join(MANIFEST)).unwrap();
    manifest.model.block.channels = 16;
    manifest.save(&out).unwrap();
    let err = cmd_eval(&EvalArgs { ckpt: out.join("epoch_0001.dmmb"), data: tmp.path().join("data") }).unwrap_err();
    assert!(format!("{err:#}").contains("config mismatch in field `shallow.weight`"), "{err:#}");
}

#[test]
fn ablation_is_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 7, 0.2);
    let config = tiny_config(tmp.path());
    let out = tmp.path().join("no_afb");
    let m = train(&data, &out, &config, 1, Some(Ablation::NoAfb));
    assert_eq!(m.model.ablation, Ablation::NoAfb);
    let saved = RunManifest::load(&out.join(MANIFEST)).unwrap();
    assert_eq!(saved.model.ablation, Ablation::NoAfb);
    assert!(fs::read_to_string(out.join(MANIFEST)).unwrap().contains("\"no_afb\""));
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demmamba"))
}

#[test]
fn binary_reports_errors_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = binary()
        .args(["eval", "--ckpt"])
        .arg(tmp.path().join("missing.dmmb"))
        .arg("--data")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    let out =
        binary().args(["train", "--data"]).arg(tmp.path()).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no usable clips"));
    let out = binary().args(["gen", "--out"]).arg(tmp.path()).args(["--size", "13x16"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn binary_gen_and_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let out = binary()
        .args(["gen", "--clips", "2", "--frames", "3", "--size", "16x16", "--seed", "4", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 3);

    let out = binary()
        .args(["bench", "--lengths", "64,128,256", "--trials", "1"])
        .env("DEMMAMBA_THREADS", "0")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "L,mean_seconds,slope");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1].split(',').count(), 3);
}
