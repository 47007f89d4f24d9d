use std::path::Path;

use sllen_cli::{main_with_args, EXIT_CONFIG, EXIT_OK};
use sllen_core::dataset::darken;
use sllen_core::imagecore::{decode_umap, save_image, ImageTensor};

const TINY_TOML: &str = r#"
[train]
batch_size = 2
patch = 16
lr = 0.001
[train.net]
base_channels = 4
attention_dk = 4
num_classes = 3
hseb_widths = [4, 4, 8]
[train.ssn]
num_classes = 3
stage_widths = [4, 4, 8, 512, 4]
[train.perceptual]
widths = [4, 4]
"#;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("sllen").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn textured(i: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(3, h, w, |(c, y, x)| {
        0.5 + 0.3 * ((x as f64 * 0.4 + i as f64 + c as f64) * 0.9).sin() * (y as f64 * 0.3).cos()
    })
    .unwrap()
}

#[test]
fn gradstat_of_flat_images() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("in");
    std::fs::create_dir_all(&input).unwrap();
    for i in 0..3 {
        let img = ImageTensor::constant(3, 8, 8, 0.1 * i as f64).unwrap();
        save_image(&img, &input.join(format!("f{i}.png"))).unwrap();
    }
    let out = d.path().join("out");
    assert_eq!(run(&["--out", p(&out), "gradstat", "--input", p(&input), "--bins", "10"]), EXIT_OK);
    let hist = std::fs::read_to_string(out.join("gradstat.csv")).unwrap();
    let lines: Vec<&str> = hist.lines().collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0], "bin_lo,bin_hi,count");
    assert!(lines[1].ends_with(",3"));
    let mean = std::fs::read_to_string(out.join("gradstat_mean.csv")).unwrap();
    assert_eq!(mean, "images,mean\n3,0.000000000\n");

    // Left column black, right column white: every channel averages 0.25.
    let stripes = d.path().join("stripes");
    std::fs::create_dir_all(&stripes).unwrap();
    for i in 0..2 {
        let img = ImageTensor::from_fn(3, 2, 2, |(_, _, x)| x as f64).unwrap();
        save_image(&img, &stripes.join(format!("s{i}.png"))).unwrap();
    }
    assert_eq!(run(&["--out", p(&out), "gradstat", "--input", p(&stripes), "--bins", "10"]), EXIT_OK);
    let mean = std::fs::read_to_string(out.join("gradstat_mean.csv")).unwrap();
    assert_eq!(mean, "images,mean\n2,0.250000000\n");
    let hist = std::fs::read_to_string(out.join("gradstat.csv")).unwrap();
    assert_eq!(hist.lines().nth(3).unwrap(), "0.200000,0.300000,2");
}

#[test]
fn decompose_identity_pair() {
    let d = tempfile::tempdir().unwrap();
    let (low, enh) = (d.path().join("low"), d.path().join("enh"));
    std::fs::create_dir_all(&low).unwrap();
    std::fs::create_dir_all(&enh).unwrap();
    let img = textured(0, 8, 12);
    save_image(&img, &low.join("a.png")).unwrap();
    save_image(&img, &enh.join("a.png")).unwrap();
    let out = d.path().join("out");
    let args = ["--out", p(&out), "decompose", "--low", p(&low), "--enhanced", p(&enh)];
    assert_eq!(run(&args), EXIT_OK);
    let preview = image::open(out.join("a_u.png")).unwrap().to_luma8();
    assert!(preview.pixels().all(|p| p.0[0] == 128));
    let u = decode_umap(&std::fs::read(out.join("a.umap")).unwrap()).unwrap();
    assert_eq!(u.dim(), (3, 8, 12));
    assert!(u.iter().all(|v| v > &0.99 && v <= &1.0));

    save_image(&img, &enh.join("b.png")).unwrap();
    assert_eq!(run(&args), EXIT_CONFIG);
}

#[test]
fn unpaired_evaluate_leaves_reference_columns_empty() {
    let d = tempfile::tempdir().unwrap();
    let (low, pred) = (d.path().join("low"), d.path().join("pred"));
    std::fs::create_dir_all(&low).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    for i in 0..2 {
        let r = textured(i, 16, 16);
        save_image(&r, &pred.join(format!("x{i}.png"))).unwrap();
        save_image(&darken(&r, Some(2.0), Some(0.5), 0).unwrap(), &low.join(format!("x{i}.png"))).unwrap();
    }
    let out = d.path().join("out");
    assert_eq!(run(&["--out", p(&out), "evaluate", "--pred", p(&pred), "--low", p(&low)]), EXIT_OK);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], ["id", "psnr", "ssim", "loe", "ceiq", "miou"]);
    for r in &rows[1..] {
        assert_eq!(r[1], "");
        assert_eq!(r[2], "");
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
        assert!(!r[4].is_empty());
        assert_eq!(r[5], "");
    }
    assert_eq!(rows[3][0], "AVERAGE");
}

#[test]
fn branch_ablation_writes_table_and_chart() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    std::fs::create_dir_all(data.join("low")).unwrap();
    std::fs::create_dir_all(data.join("ref")).unwrap();
    for i in 0..3 {
        let r = textured(i, 16, 16);
        save_image(&r, &data.join(format!("ref/s{i}.png"))).unwrap();
        save_image(&darken(&r, Some(2.0), Some(0.5), 0).unwrap(), &data.join(format!("low/s{i}.png"))).unwrap();
    }
    let cfg = d.path().join("tiny.toml");
    std::fs::write(&cfg, TINY_TOML).unwrap();
    let out = d.path().join("out");
    let code = run(&["--config", p(&cfg), "--out", p(&out), "ablate", "--data", p(&data), "--steps", "2"]);
    assert_eq!(code, EXIT_OK);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels.len(), 4);
    let chart = image::open(out.join("ablation.png")).unwrap();
    assert!(chart.width() > 0 && chart.height() > 0);
}
