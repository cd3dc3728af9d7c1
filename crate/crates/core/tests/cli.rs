use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sct_codec::checkpoint;
use sct_codec::eval::psnr;
use sct_codec::image::load_image;

fn sct(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sct"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCT_OUTPUT_DIR")
        .output()
        .expect("sct runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = sct(args, dir);
    assert!(
        out.status.success(),
        "sct {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Synthetic images plus a 3-step toy checkpoint.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        &["synth", "-o", "images", "--count", "3", "--size", "64"],
        dir,
    );
    fs::write(
        dir.join("train.toml"),
        "[train]\nsteps = 3\nbatch_size = 2\n\n[dataset]\nroot = \"images\"\n\n[output]\ndir = \"run\"\n",
    )
    .unwrap();
    ok(&["train", "--config", "train.toml"], dir);
    let ck = dir.join("run/checkpoint.sctc");
    assert!(ck.exists());
    (tmp, ck)
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("bad.toml"),
        "[dataset]\nroot = \"no-such-images\"\n",
    )
    .unwrap();
    let out = sct(&["train", "--config", "bad.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-images"));
}

#[test]
fn crop_that_is_not_a_tile_multiple_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[train]\ncrop_size = 24\n").unwrap();
    let out = sct(&["train", "--config", "bad.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("crop_size 24"));
}

#[test]
fn bad_arguments_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sct(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(
        sct(
            &[
                "encode",
                "x.ppm",
                "--checkpoint",
                "c",
                "--raw",
                "--compressed"
            ],
            tmp.path()
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn encode_decode_inspect_round_trip() {
    let (tmp, ck) = workspace();
    let dir = tmp.path();
    let ck = ck.to_str().unwrap();
    let img = "images/synthetic-001.ppm";
    ok(&["encode", img, "--checkpoint", ck, "-o", "a.sct"], dir);
    ok(
        &[
            "encode",
            img,
            "--checkpoint",
            ck,
            "--compressed",
            "-o",
            "a.sct.dz",
        ],
        dir,
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("a.sct.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], 4);
    assert!(report["trimmed_bpp"].as_f64().unwrap() <= report["nominal_bpp"].as_f64().unwrap());

    ok(
        &["decode", "a.sct", "--checkpoint", ck, "-o", "raw.ppm"],
        dir,
    );
    ok(
        &["decode", "a.sct.dz", "--checkpoint", ck, "-o", "dz.ppm"],
        dir,
    );
    assert_eq!(
        fs::read(dir.join("raw.ppm")).unwrap(),
        fs::read(dir.join("dz.ppm")).unwrap()
    );

    // the decoder reproduces the encoder's own reconstruction
    let model = checkpoint::load(Path::new(ck), None).unwrap().model;
    let source = load_image(&dir.join(img)).unwrap().to_tensor::<f32>();
    let enc = model
        .full_encode(
            &source,
            &sct_codec::EncodeOptions {
                threshold: 4.0,
                iterations: 4,
                sct: true,
            },
        )
        .unwrap();
    let expected = sct_codec::image::ImageFile::from_tensor(&enc.output(4).unwrap()).unwrap();
    assert_eq!(
        load_image(&dir.join("raw.ppm")).unwrap().pixels,
        expected.pixels
    );

    ok(
        &[
            "decode",
            "a.sct",
            "--checkpoint",
            ck,
            "--iterations",
            "1",
            "-o",
            "k1.ppm",
        ],
        dir,
    );
    let k1 = load_image(&dir.join("k1.ppm")).unwrap();
    assert_eq!((k1.width, k1.height), (64, 64));
    assert_ne!(
        sct(
            &[
                "decode",
                "a.sct",
                "--checkpoint",
                ck,
                "--iterations",
                "5",
                "-o",
                "k5.ppm"
            ],
            dir
        )
        .status
        .code(),
        Some(0)
    );

    let inspect = ok(&["inspect", "a.sct.dz"], dir);
    assert!(inspect.contains("image 64x64"));
    assert!(inspect.contains("iterations 4, bits per tile 16"));
    assert_eq!(
        inspect
            .lines()
            .filter(|l| l.starts_with(char::is_numeric))
            .count(),
        4
    );
}

#[test]
fn masking_off_matches_masking_that_never_fires() {
    let (tmp, ck) = workspace();
    let dir = tmp.path();
    let ck = ck.to_str().unwrap();
    let img = "images/synthetic-002.ppm";
    ok(
        &[
            "encode",
            img,
            "--checkpoint",
            ck,
            "--threshold=-1",
            "-o",
            "s.sct",
        ],
        dir,
    );
    ok(
        &["encode", img, "--checkpoint", ck, "--no-sct", "-o", "n.sct"],
        dir,
    );
    ok(&["decode", "s.sct", "--checkpoint", ck, "-o", "s.ppm"], dir);
    ok(&["decode", "n.sct", "--checkpoint", ck, "-o", "n.ppm"], dir);
    let source = load_image(&dir.join(img)).unwrap().to_tensor::<f64>();
    let a = load_image(&dir.join("s.ppm")).unwrap().to_tensor::<f64>();
    let b = load_image(&dir.join("n.ppm")).unwrap().to_tensor::<f64>();
    assert_eq!(psnr(&source, &a).unwrap(), psnr(&source, &b).unwrap());
}

#[test]
fn eval_writes_its_tables_and_renders() {
    let (tmp, ck) = workspace();
    let dir = tmp.path();
    let out = ok(
        &[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--dataset",
            "images",
            "-o",
            "eval",
        ],
        dir,
    );
    assert!(out.contains("3 images, K=4"));
    let rd = fs::read_to_string(dir.join("eval/rd_points.csv")).unwrap();
    assert_eq!(rd.lines().count(), 1 + 3 * 4);
    for f in ["savings.csv", "bit_hist.csv", "mask_fraction.csv"] {
        assert!(dir.join("eval").join(f).exists(), "{f}");
    }
    assert!(dir.join("eval/renders/synthetic-000_k01.ppm").exists());
}

#[test]
fn encoding_is_deterministic() {
    let (tmp, ck) = workspace();
    let dir = tmp.path();
    let ck = ck.to_str().unwrap();
    for name in ["x.sct", "y.sct"] {
        ok(
            &[
                "encode",
                "images/synthetic-000.ppm",
                "--checkpoint",
                ck,
                "-o",
                name,
            ],
            dir,
        );
    }
    assert_eq!(
        fs::read(dir.join("x.sct")).unwrap(),
        fs::read(dir.join("y.sct")).unwrap()
    );
}
