//! End-to-end tests of the command-line surface, run in-process.

use std::fs;
use std::path::Path;

use histossl::checkpoint::{self, TensorEntry};
use histossl::cli;
use histossl::imaging::{save_png, tile_source, ImagePatch};
use histossl::rng::RngStream;

/// An RGB value inside the tissue HSV window.
const TISSUE: [u8; 3] = [64, 120, 180];

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["histossl"];
    full.extend_from_slice(args);
    cli::run(full)
}

fn noisy_tissue_image(side: usize, seed: u64) -> ImagePatch {
    let mut rng = RngStream::from_parts(&[seed]);
    let mut img = ImagePatch::filled(side, side, TISSUE);
    for v in &mut img.pixels {
        let noise = rng.below(9) as i32 - 4;
        *v = (i32::from(*v) + noise).clamp(0, 255) as u8;
    }
    img
}

#[test]
fn tile_counts_match_the_library_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("slides");
    fs::create_dir(&input).unwrap();
    let slide = noisy_tissue_image(32, 1);
    save_png(&slide, &input.join("s1.png")).unwrap();
    let out = dir.path().join("patches");
    let code = run(&[
        "tile",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--side",
        "16",
        "--stride",
        "16",
        "--dataset-id",
        "ds1",
    ]);
    assert_eq!(code, 0);
    let expected = tile_source(&slide, 16, 16, 0.5).len();
    assert_eq!(expected, 4);
    let manifest = fs::read_to_string(out.join("ds1.manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), expected);
    // every referenced patch file exists
    for line in manifest.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(out.join(rec["path"].as_str().unwrap()).exists());
    }
}

#[test]
fn tile_empty_dir_warns_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty");
    fs::create_dir(&input).unwrap();
    let out = dir.path().join("out");
    let code = run(&["tile", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(out.join("dataset.manifest.jsonl")).unwrap(), "");
}

#[test]
fn tile_rejects_out_of_range_min_fg() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&[
        "tile",
        "--input",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--min-fg",
        "1.5",
    ]);
    assert_eq!(code, 2);
}

fn write_fake_manifest(path: &Path, dataset: &str, n: usize, resolution: &str) {
    let mut text = String::new();
    for i in 0..n {
        text.push_str(&format!(
            "{{\"dataset_id\":\"{dataset}\",\"kind\":\"wsi\",\"organ\":\"colon\",\"stain\":\"he\",\
             \"resolution_tag\":\"{resolution}\",\"path\":\"{dataset}/w/{i}.png\",\"source_id\":\"w\",\
             \"x\":{i},\"y\":0}}\n"
        ));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn sample_applies_cap_quota_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("a.manifest.jsonl");
    write_fake_manifest(&m, "ds1", 500, "20x");
    let out = dir.path().join("list.jsonl");
    // 500 entries -> capped to 100 per source -> 50% quota = 50
    let code = run(&[
        "sample",
        "--manifests",
        m.to_str().unwrap(),
        "--percent",
        "50",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 50);
    // a resolution filter that removes everything is a runtime error
    let code = run(&[
        "sample",
        "--manifests",
        m.to_str().unwrap(),
        "--filter-resolution",
        "40x",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

/// Tile a small synthetic slide set into 8x8 patches and return the
/// manifest path, for pretraining against a matching 8x8 config.
fn make_patch_list(dir: &Path) -> std::path::PathBuf {
    let input = dir.join("slides");
    fs::create_dir(&input).unwrap();
    for i in 0..2 {
        let slide = noisy_tissue_image(16, 10 + i);
        save_png(&slide, &input.join(format!("s{i}.png"))).unwrap();
    }
    let out = dir.join("patches");
    let code = run(&[
        "tile",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--side",
        "8",
        "--stride",
        "8",
        "--dataset-id",
        "toy",
    ]);
    assert_eq!(code, 0);
    out.join("toy.manifest.jsonl")
}

const TINY_CONFIG: &str = r#"
seed = 5

[encoder]
input_side = 8
stage_channels = [4, 8]
blocks_per_stage = 1

[projection]
hidden_dim = 8
out_dim = 8

[pretrain]
batch_size = 4
epochs = 2
checkpoint_every = 1
"#;

#[test]
fn pretrain_emits_artifacts_and_is_rerun_stable() {
    let dir = tempfile::tempdir().unwrap();
    let list = make_patch_list(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let mut traces = Vec::new();
    for name in ["out1", "out2"] {
        let out = dir.path().join(name);
        let code = run(&[
            "pretrain",
            "--list",
            list.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(out.join("final.sslh").exists());
        assert!(out.join("epoch_0001.sslh").exists());
        assert!(out.join("resolved_config.toml").exists());
        traces.push(fs::read(out.join("loss_trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    assert_eq!(String::from_utf8_lossy(&traces[0]).lines().count(), 3);
}

#[test]
fn pretrain_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let list = make_patch_list(dir.path());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "temprature = 0.2\n").unwrap();
    let code = run(&[
        "pretrain",
        "--list",
        list.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

fn make_labeled_set(dir: &Path, n: usize) -> std::path::PathBuf {
    let data = dir.join("labeled");
    fs::create_dir(&data).unwrap();
    let mut rng = RngStream::from_parts(&[77]);
    let mut csv = String::from("path,label\n");
    for i in 0..n {
        let class = i % 2;
        let base: [u8; 3] = if class == 0 { [210, 60, 60] } else { [60, 60, 210] };
        let mut img = ImagePatch::filled(8, 8, base);
        for v in &mut img.pixels {
            let noise = rng.below(17) as i32 - 8;
            *v = (i32::from(*v) + noise).clamp(0, 255) as u8;
        }
        let name = format!("p{i}.png");
        save_png(&img, &data.join(&name)).unwrap();
        csv.push_str(&format!("{name},{class}\n"));
    }
    let labels = data.join("labels.csv");
    fs::write(&labels, csv).unwrap();
    labels
}

#[test]
fn probe_requires_an_existing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let labels = make_labeled_set(dir.path(), 12);
    let code = run(&[
        "probe",
        "--checkpoint",
        dir.path().join("missing.sslh").to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn probe_on_separable_colors_writes_results_and_features() {
    let dir = tempfile::tempdir().unwrap();
    let labels = make_labeled_set(dir.path(), 40);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY_CONFIG}\n[eval]\nepochs = 15\nlearning_rate = 0.05\n")).unwrap();
    let out = dir.path().join("probe_out");
    let feat = dir.path().join("features.sslh");
    let code = run(&[
        "probe",
        "--labels",
        labels.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--dump-features",
        feat.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.starts_with("init,mode,percent,run,split_seed,metric_name,value"));
    assert!(results.contains("random,linear_probe,100,0,5,macro_f1,"));
    // the dumped features file is a loadable [n, d] container
    let entries = checkpoint::load(&feat).unwrap();
    let e = checkpoint::find(&entries, "features").unwrap();
    assert_eq!(e.dims, vec![40, 8]);
    // flat-color classes separate even with a random frozen encoder
    let value: f64 = results
        .lines()
        .nth(1)
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(value >= 0.9, "probe macro F1 {value}");
}

#[test]
fn finetune_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let labels = make_labeled_set(dir.path(), 24);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY_CONFIG}\n[eval]\nepochs = 4\nlearning_rate = 0.05\n")).unwrap();
    let out = dir.path().join("ft_out");
    let code = run(&[
        "finetune",
        "--labels",
        labels.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.contains("fine_tune"));
}

fn blob_features(path: &Path) {
    let mut rng = RngStream::from_parts(&[88]);
    let mut data = Vec::new();
    for c in [[0.0f64, 0.0], [10.0, 0.0], [0.0, 10.0]] {
        for _ in 0..30 {
            data.push((c[0] + 0.01 * rng.normal()) as f32);
            data.push((c[1] + 0.01 * rng.normal()) as f32);
        }
    }
    let entry = TensorEntry::new("features", &[90, 2], data);
    checkpoint::save(path, &[entry]).unwrap();
}

#[test]
fn cluster_kmeans_and_elbow_modes() {
    let dir = tempfile::tempdir().unwrap();
    let feat = dir.path().join("features.sslh");
    blob_features(&feat);
    let out = dir.path().join("cl");
    let code = run(&[
        "cluster",
        "--features",
        feat.to_str().unwrap(),
        "--k",
        "3",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(code, 0);
    let assignments = fs::read_to_string(out.join("assignments.csv")).unwrap();
    assert_eq!(assignments.lines().count(), 91); // header + 90 points
    assert!(out.join("centroids.sslh").exists());
    let out2 = dir.path().join("elbow");
    let code = run(&[
        "cluster",
        "--features",
        feat.to_str().unwrap(),
        "--elbow",
        "1,2,3",
        "--out",
        out2.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(code, 0);
    let elbow = fs::read_to_string(out2.join("elbow.csv")).unwrap();
    assert_eq!(elbow.lines().count(), 4);
    // both modes at once is a usage error
    let code = run(&[
        "cluster",
        "--features",
        feat.to_str().unwrap(),
        "--k",
        "3",
        "--elbow",
        "1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn report_renders_deterministic_svg_and_rejects_bad_csv() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.csv");
    fs::write(
        &results,
        "init,mode,percent,run,split_seed,metric_name,value\n\
         pre,linear_probe,10,0,0,macro_f1,0.8\n\
         pre,linear_probe,10,1,0,macro_f1,0.9\n",
    )
    .unwrap();
    let svg1 = dir.path().join("a.svg");
    let svg2 = dir.path().join("b.svg");
    assert_eq!(run(&["report", "--results", results.to_str().unwrap(), "--out", svg1.to_str().unwrap()]), 0);
    assert_eq!(run(&["report", "--results", results.to_str().unwrap(), "--out", svg2.to_str().unwrap()]), 0);
    assert_eq!(fs::read(&svg1).unwrap(), fs::read(&svg2).unwrap());
    assert!(fs::read_to_string(&svg1).unwrap().contains("<circle"));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "init,mode,percent,run,split_seed,metric_name,value\noops\n").unwrap();
    assert_eq!(run(&["report", "--results", bad.to_str().unwrap(), "--out", svg1.to_str().unwrap()]), 1);
}

#[test]
fn gradcheck_ops_and_full_modes_pass() {
    assert_eq!(run(&["gradcheck", "--mode", "ops"]), 0);
    assert_eq!(run(&["gradcheck", "--mode", "full"]), 0);
}

#[test]
fn gradcheck_corruption_is_detected() {
    assert_eq!(run(&["gradcheck", "--mode", "ops", "--corrupt"]), 1);
}
