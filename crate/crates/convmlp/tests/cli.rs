use std::path::Path;
use std::process::{Command, Output};

use convmlp::persist::{read_tensor_file, save_checkpoint};
use convmlp_core::analysis::{count_macs, layer_plan};
use convmlp_core::{Model, ModelConfig};

fn convmlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convmlp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn total_row(text: &str) -> (u64, u64) {
    let line = text.lines().find(|l| l.starts_with("total")).unwrap();
    let v: Vec<u64> = line.split_whitespace().skip(1).map(|s| s.parse().unwrap()).collect();
    (v[0], v[1])
}

#[test]
fn summary_totals_and_resolution() {
    let a = convmlp(&["summary", "--variant", "S", "--res", "224x224"]);
    assert_eq!(code(&a), 0);
    let (p, m) = total_row(&stdout(&a));
    assert!(((p as f64 / 1e6) - 9.0).abs() / 9.0 <= 0.03, "{p}");
    assert_eq!(m, count_macs(&ModelConfig::convmlp_s(), 224, 224).unwrap().total_macs);
    let b = convmlp(&["summary", "--variant", "S", "--res", "320x320"]);
    let (p2, m2) = total_row(&stdout(&b));
    assert_eq!(p, p2);
    assert_ne!(m, m2);
}

#[test]
fn summary_csv_has_one_row_per_layer() {
    let o = convmlp(&["summary", "--variant", "M", "--res", "256x192", "--csv"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("name,kind,out_shape,params,macs"));
    assert_eq!(lines.count(), layer_plan(&ModelConfig::convmlp_m(), 256, 192).unwrap().len());
}

#[test]
fn summary_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    std::fs::write(&path, "variant = S\nmlp_ratio = 3 # wider\n").unwrap();
    let o = convmlp(&["summary", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let cfg = ModelConfig { mlp_ratio: 3, ..ModelConfig::convmlp_s() };
    assert_eq!(total_row(&stdout(&o)).0, count_macs(&cfg, 224, 224).unwrap().total_params as u64);

    std::fs::write(&path, "variant = S\nchannels = 64,128,256\n").unwrap();
    let o = convmlp(&["summary", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["summary", "--res", "224by224"][..],
        &["summary", "--variant", "XL"],
        &["count", "--table", "4"],
        &["count", "--table", "3", "--variant", "A2"],
        &["frobnicate"],
        &[],
        &["export-features", "--ckpt", "x", "--image", "y", "--stage", "5", "--out", "d"],
        &["train", "--data", "imagenet"],
    ] {
        let o = convmlp(args);
        assert_eq!(code(&o), 1, "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}");
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn count_reports_targets() {
    let o = convmlp(&["count", "--table", "2", "--variant", "A4"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("8.73M") && text.contains("1.65G"), "{text}");
    assert!(text.contains("delta vs A1"));
    let o = convmlp(&["count", "--table", "3", "--variant", "L"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("42.70M") && stdout(&o).contains("9.90G"));
    // MACs are not compared away from 224x224, parameters are
    let o = convmlp(&["count", "--table", "3", "--variant", "S", "--res", "320x320"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("not compared"));
}

#[test]
fn count_out_of_tolerance_exits_three() {
    // A0 measured against ConvMLP-S's row misses the parameter target by ~12%
    let o = convmlp(&["count", "--table", "3", "--variant", "A0", "--row", "S"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("params"));
    let o = convmlp(&["count", "--table", "3", "--variant", "A5"]);
    assert_eq!(code(&o), 0, "A5 is ConvMLP-S");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cfg");
    std::fs::write(&path, "variant = S\nnum_classes = 10\n").unwrap();
    assert_eq!(code(&convmlp(&["count", "--config", path.to_str().unwrap()])), 1);
    assert_eq!(code(&convmlp(&["count", "--config", path.to_str().unwrap(), "--row", "S"])), 3);
}

#[test]
fn help_documents_flags_and_exit_codes() {
    for sub in ["summary", "count", "train", "eval", "infer", "export-features", "selftest"] {
        let o = convmlp(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        let text = stdout(&o);
        assert!(text.contains("Exit codes"), "{sub}");
        for c in ["0  success", "1  usage", "2  data", "3  numerical"] {
            assert!(text.contains(c), "{sub}: {c}");
        }
    }
    let text = stdout(&convmlp(&["train", "--help"]));
    for flag in ["--config", "--variant", "--data", "--epochs", "--batch", "--seed", "--out", "--metrics"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn train_is_deterministic_and_checkpoints_load() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let ckpt = dir.path().join(format!("{tag}.cmlp"));
        let csv = dir.path().join(format!("{tag}.csv"));
        let o = convmlp(&[
            "train", "--variant", "tiny", "--data", "synthetic", "--samples", "32", "--classes", "4", "--epochs", "2", "--batch", "8",
            "--seed", "3", "--out", ckpt.to_str().unwrap(), "--metrics", csv.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(ckpt).unwrap(), std::fs::read_to_string(csv).unwrap())
    };
    let (ca, ma) = run("a");
    let (cb, mb) = run("b");
    assert_eq!(ma, mb);
    assert_eq!(ca, cb);
    assert!(ma.starts_with("epoch,loss,top1,lr\n"));
    assert_eq!(ma.lines().count(), 3);

    let ckpt = dir.path().join("a.cmlp");
    let o = convmlp(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--samples", "32", "--classes", "4", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let top1: f64 = stdout(&o).split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&top1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = format!("cifar10:{}", dir.path().join("none").display());
    assert_eq!(code(&convmlp(&["train", "--data", &missing, "--epochs", "1"])), 2);
    let bogus = dir.path().join("bogus.cmlp");
    std::fs::write(&bogus, b"CMLP\x01\0\0\0garbage").unwrap();
    let o = convmlp(&["eval", "--ckpt", bogus.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
}

fn zero_head_checkpoint(dir: &Path, classes: usize) -> std::path::PathBuf {
    let mut model = Model::<f32>::new(&ModelConfig::tiny(classes), 0).unwrap();
    for id in [model.head.weight, model.head.bias] {
        model.params_mut().get_mut(id).value.fill(0.0);
    }
    let path = dir.join("zero.cmlp");
    save_checkpoint(&model, &path).unwrap();
    path
}

#[test]
fn infer_zero_image_zero_head_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path(), 8);
    let img = dir.path().join("zero.pgm");
    let mut bytes = b"P5\n32 32\n255\n".to_vec();
    bytes.extend([0u8; 1024]);
    std::fs::write(&img, bytes).unwrap();
    let o = convmlp(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--image", img.to_str().unwrap(), "--top", "3"]);
    assert_eq!(code(&o), 0);
    let rows: Vec<Vec<String>> =
        stdout(&o).lines().skip(1).map(|l| l.split_whitespace().map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[1], i.to_string());
        assert_eq!(r[2], "0.125000");
    }
}

#[test]
fn infer_rejects_indivisible_images() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path(), 2);
    let img = dir.path().join("odd.pgm");
    let mut bytes = b"P5\n40 32\n255\n".to_vec();
    bytes.extend([9u8; 1280]);
    std::fs::write(&img, bytes).unwrap();
    let o = convmlp(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--image", img.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("32"));
}

#[test]
fn export_stage_four_of_224_is_7x7() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(&ModelConfig::tiny(3), 2).unwrap();
    let ckpt = dir.path().join("t.cmlp");
    save_checkpoint(&model, &ckpt).unwrap();
    let img = dir.path().join("x.ppm");
    let mut bytes = b"P6\n224 224\n255\n".to_vec();
    bytes.extend((0..224 * 224 * 3).map(|i| ((i * 7) % 251) as u8));
    std::fs::write(&img, bytes).unwrap();
    let out = dir.path().join("maps");
    let o = convmlp(&[
        "export-features", "--ckpt", ckpt.to_str().unwrap(), "--image", img.to_str().unwrap(), "--stage", "4", "--out",
        out.to_str().unwrap(), "--channels", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["stage4_mean", "stage4_ch000", "stage4_ch001"] {
        let pgm = std::fs::read(out.join(format!("{name}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n7 7\n255\n"));
        assert_eq!(pgm.len(), 11 + 49);
        let (stored, t) = read_tensor_file::<f32>(&out.join(format!("{name}.cmlt"))).unwrap();
        assert_eq!(stored, name);
        assert_eq!(t.shape(), &[7, 7]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let expect: Vec<u8> = t.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(&pgm[11..], &expect[..]);
    }
}

#[test]
fn selftest_fast_passes_quickly() {
    let start = std::time::Instant::now();
    let o = convmlp(&["selftest", "--level", "fast"]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(secs < 60.0, "{secs}s");
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(!text.contains("FAIL"));
}
