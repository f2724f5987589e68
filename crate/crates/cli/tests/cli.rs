use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blade_core::io::{self, BitDepth};
use blade_core::{FilterBank, Footprint, ImageGrid, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn blade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blade"))
        .args(args)
        .output()
        .expect("spawn blade")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Smooth pattern plus texture, 8-bit exact.
fn test_image(w: usize, h: usize, seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageGrid::from_fn(w, h, |m, n| {
        let v = 128.0 + 60.0 * ((m as f64) * 0.11).sin() * ((n as f64) * 0.07).cos() + rng.random_range(-20.0..20.0);
        v.round().clamp(0.0, 255.0)
    })
}

fn write_image(dir: &Path, name: &str, img: &ImageGrid) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let p = dir.join(name);
    io::save_gray(&p, img, (0.0, 255.0), BitDepth::Eight).unwrap();
    p
}

fn gen_data(input: &Path, out: &Path, steps: usize, m: usize) -> Output {
    blade(&[
        "gen-data",
        "--pde",
        "tv",
        "--input-dir",
        s(input),
        "--scale",
        "4",
        "--steps",
        &steps.to_string(),
        "--subsample-m",
        &m.to_string(),
        "--out",
        s(out),
    ])
}

fn hashes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(hashes(&p));
        } else {
            out.insert(p.clone(), fs::read(&p).unwrap());
        }
    }
    out
}

fn manifest_metric(path: &Path, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["metrics"][key]
        .as_f64()
        .unwrap_or_else(|| panic!("no metric {key} in {}", path.display()))
}

#[test]
fn gen_data_writes_an_eleven_frame_coarse_sequence() {
    let t = TempDir::new().unwrap();
    write_image(&t.path().join("in"), "a.png", &test_image(256, 256, 1));
    ok(&gen_data(&t.path().join("in"), &t.path().join("ds"), 100, 10));
    let (seq, meta) = io::read_sequence(t.path().join("ds/a")).unwrap();
    assert_eq!(seq.len(), 11);
    assert_eq!(seq.dims(), (64, 64));
    assert_eq!(meta.step_count, 100);
    assert!((seq.dt() - 1.0).abs() < 1e-12);
    assert!(t.path().join("ds/dataset.json").is_file());
    assert!(t.path().join("ds/manifest.json").is_file());
}

#[test]
fn gen_data_rerun_is_byte_identical() {
    let t = TempDir::new().unwrap();
    let input = t.path().join("in");
    write_image(&input, "a.png", &test_image(64, 64, 2));
    write_image(&input, "b.png", &test_image(64, 64, 3));
    let out = t.path().join("ds");
    ok(&gen_data(&input, &out, 40, 4));
    let first = hashes(&out);
    ok(&gen_data(&input, &out, 40, 4));
    assert_eq!(first, hashes(&out));
}

#[test]
fn gen_data_missing_dir_exits_2_naming_the_path() {
    let t = TempDir::new().unwrap();
    let missing = t.path().join("no_such_dir");
    let out = gen_data(&missing, &t.path().join("ds"), 100, 10);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn gen_data_rejects_indivisible_sizes() {
    let t = TempDir::new().unwrap();
    write_image(&t.path().join("in"), "a.png", &test_image(66, 64, 4));
    let out = gen_data(&t.path().join("in"), &t.path().join("ds"), 40, 4);
    assert_eq!(out.status.code(), Some(2));
}

fn small_dataset(t: &TempDir) -> PathBuf {
    let input = t.path().join("in");
    write_image(&input, "a.png", &test_image(64, 64, 5));
    write_image(&input, "b.png", &test_image(64, 64, 6));
    let ds = t.path().join("ds");
    ok(&gen_data(&input, &ds, 40, 4));
    ds
}

fn train_args<'a>(ds: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--data",
        s(ds),
        "--out",
        s(out),
        "--iters",
        "10",
        "--augment",
        "2",
        "--seed",
        "3",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_smoke_run_writes_a_loadable_bank_and_is_reproducible() {
    let t = TempDir::new().unwrap();
    let ds = small_dataset(&t);
    let (a, b) = (t.path().join("a.bfb"), t.path().join("b.bfb"));
    ok(&blade(&train_args(&ds, &a, &[])));
    ok(&blade(&train_args(&ds, &b, &[])));
    let bank = io::load_bank(&a).unwrap();
    assert_eq!(bank.num_filters(), 216);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let csv = fs::read_to_string(t.path().join("a.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(t.path().join("a.manifest.json").is_file());
}

#[test]
fn train_flux_model_stores_two_banks() {
    let t = TempDir::new().unwrap();
    let ds = small_dataset(&t);
    let out = t.path().join("flux.bfb");
    ok(&blade(&train_args(
        &ds,
        &out,
        &["--integrator", "flux", "--selection", "single"],
    )));
    assert_eq!(io::load_banks(&out).unwrap().len(), 2);
}

#[test]
fn train_corrupt_dataset_exits_2() {
    let t = TempDir::new().unwrap();
    let ds = small_dataset(&t);
    fs::write(ds.join("dataset.json"), "{ not json").unwrap();
    let out = blade(&train_args(&ds, &t.path().join("x.bfb"), &[]));
    assert_eq!(out.status.code(), Some(2));
}

fn evolve(bank: &Path, input: &Path, steps: &str, integrator: &str, out: &Path) -> Output {
    blade(&[
        "evolve",
        "--bank",
        s(bank),
        "--input",
        s(input),
        "--steps",
        steps,
        "--dt",
        "0.5",
        "--integrator",
        integrator,
        "--out",
        s(out),
    ])
}

#[test]
fn evolve_with_zero_bank_or_zero_steps_returns_the_input() {
    let t = TempDir::new().unwrap();
    let img = test_image(40, 30, 7);
    let input = write_image(t.path(), "in.png", &img);
    let zero = FilterBank::zeros(Footprint::square5(), SelectionConfig::structure_tensor_default());
    let zb = t.path().join("zero.bfb");
    io::save_bank(&zb, &zero).unwrap();
    let out = t.path().join("out.png");
    ok(&evolve(&zb, &input, "7", "midpoint", &out));
    assert_eq!(io::load_gray(&out).unwrap().data(), img.data());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let taps = (0..216 * 25).map(|_| rng.random_range(-0.1..0.1)).collect();
    let rb = t.path().join("rand.bfb");
    io::save_bank(
        &rb,
        &FilterBank::new(Footprint::square5(), SelectionConfig::structure_tensor_default(), taps).unwrap(),
    )
    .unwrap();
    let out0 = t.path().join("out0.png");
    ok(&evolve(&rb, &input, "0", "euler", &out0));
    assert_eq!(io::load_gray(&out0).unwrap().data(), img.data());
}

#[test]
fn evolve_flux_manifest_records_conserved_mean() {
    let t = TempDir::new().unwrap();
    let input = write_image(t.path(), "in.png", &test_image(32, 32, 9));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bank = || {
        let taps = (0..25).map(|_| rng.random_range(-0.05..0.05)).collect();
        FilterBank::new(Footprint::square5(), SelectionConfig::single(), taps).unwrap()
    };
    let (bx, by) = (bank(), bank());
    let fb = t.path().join("flux.bfb");
    io::save_banks(&fb, &[&bx, &by]).unwrap();
    let out = t.path().join("out.png");
    ok(&evolve(&fb, &input, "50", "flux", &out));
    let drift = manifest_metric(&t.path().join("out.manifest.json"), "mean_drift");
    assert!(drift < 1e-12, "{drift}");
    // a single-bank file is not a flux model
    let single = t.path().join("one.bfb");
    io::save_bank(&single, &bx).unwrap();
    assert_eq!(evolve(&single, &input, "1", "flux", &out).status.code(), Some(2));
}

#[test]
fn eval_identical_sequences_and_mismatched_lengths() {
    let t = TempDir::new().unwrap();
    let input = t.path().join("in");
    write_image(&input, "a.png", &test_image(64, 64, 11));
    let (d1, d2) = (t.path().join("d1"), t.path().join("d2"));
    ok(&gen_data(&input, &d1, 40, 4));
    ok(&gen_data(&input, &d2, 20, 4));
    let csv = t.path().join("m.csv");
    let seq = d1.join("a");
    ok(&blade(&[
        "eval",
        "--reference-seq",
        s(&seq),
        "--test-seq",
        s(&seq),
        "--out",
        s(&csv),
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame,psnr,ssim"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 11);
    for r in rows {
        let f: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[1], 100.0);
        assert_eq!(f[2], 1.0);
    }
    let out = blade(&["eval", "--reference-seq", s(&seq), "--test-seq", s(&d2.join("a"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_reports_instability_with_exit_1() {
    let t = TempDir::new().unwrap();
    let input = write_image(t.path(), "noisy.png", &test_image(32, 32, 12));
    let out = blade(&[
        "solve",
        "--pde",
        "tv",
        "--input",
        s(&input),
        "--steps",
        "50",
        "--dt",
        "10",
        "--out",
        s(&t.path().join("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("instability at step"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(blade(&["evolve"]).status.code(), Some(2));
    assert_eq!(blade(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn make_flow_and_bicubic_resample_shift() {
    let t = TempDir::new().unwrap();
    let img = ImageGrid::from_fn(24, 16, |m, _| 10.0 * m as f64);
    let input = write_image(t.path(), "ramp.png", &img);
    let flow = t.path().join("shift.flo");
    ok(&blade(&[
        "make-flow",
        "--like",
        s(&input),
        "--vx",
        "1",
        "--vy",
        "0",
        "--out",
        s(&flow),
    ]));
    assert_eq!(io::load_flow(&flow).unwrap().dims(), (24, 16));
    let out = t.path().join("r.png");
    ok(&blade(&[
        "apply",
        "resample",
        "--bicubic",
        "--input",
        s(&input),
        "--flow",
        s(&flow),
        "--out",
        s(&out),
    ]));
    let r = io::load_gray(&out).unwrap();
    for m in 0..22 {
        assert_eq!(r.get(m, 5), img.get(m + 1, 5));
    }
}
