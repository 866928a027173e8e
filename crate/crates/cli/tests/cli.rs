use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

const TILE: u32 = 32;
const TUMOR_HE: [u8; 3] = [200, 40, 120];
const STRONG_BROWN: [u8; 3] = [190, 90, 10];
const PLANTED: [(u32, u32); 4] = [(0, 0), (1, 2), (2, 1), (3, 3)];

fn her2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_her2"))
        .args(args)
        .output()
        .expect("run her2")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn paint(img: &mut RgbImage, row: u32, col: u32, rgb: [u8; 3]) {
    for y in row * TILE..(row + 1) * TILE {
        for x in col * TILE..(col + 1) * TILE {
            img.put_pixel(x, y, Rgb(rgb));
        }
    }
}

/// 4x4 grid; four IHC patches strong brown over tumor-coloured H&E.
fn planted_case(dir: &Path) -> PathBuf {
    let side = 4 * TILE;
    let mut he = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let mut ihc = he.clone();
    for (r, c) in PLANTED {
        paint(&mut he, r, c, TUMOR_HE);
        paint(&mut ihc, r, c, STRONG_BROWN);
    }
    he.save(dir.join("he.png")).unwrap();
    ihc.save(dir.join("ihc.png")).unwrap();
    write_config(dir, "")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            "case_id = \"planted\"\nhe_slide_path = \"he.png\"\nihc_slide_path = \"ihc.png\"\n\
             tile_size_px = {TILE}\n{extra}"
        ),
    )
    .unwrap();
    path
}

#[test]
fn tile_writes_grid_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("slide.png");
    RgbImage::from_fn(1024, 1024, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, 9]))
        .save(&input)
        .unwrap();
    let out = dir.path().join("tiles");
    let args = [
        "tile",
        "--input",
        input.to_str().unwrap(),
        "--modality",
        "ihc",
        "--tile-size",
        "512",
        "--out",
        out.to_str().unwrap(),
    ];
    let o = her2(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = out.join("slide/IHC/manifest.json");
    let first = fs::read(&manifest).unwrap();
    let m: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!((m["rows"].as_u64(), m["cols"].as_u64()), (Some(2), Some(2)));
    let pngs = fs::read_dir(out.join("slide/IHC"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 4);

    assert!(her2(&args).status.success());
    assert_eq!(fs::read(&manifest).unwrap(), first);

    let mosaic = dir.path().join("mosaic.png");
    let o = her2(&[
        "render",
        "mosaic",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        mosaic.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(image::open(&mosaic).unwrap().to_rgb8(), image::open(&input).unwrap().to_rgb8());
}

#[test]
fn missing_input_exits_2_naming_path() {
    let o = her2(&["tile", "--input", "/no/such/slide.png", "--modality", "he", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/slide.png"), "{}", stderr(&o));
}

#[test]
fn small_tile_size_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = planted_case(dir.path());
    fs::write(&config, fs::read_to_string(&config).unwrap().replace("tile_size_px = 32", "tile_size_px = 8")).unwrap();
    let o = her2(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn planted_run_scores_three_plus() {
    let dir = tempfile::tempdir().unwrap();
    let config = planted_case(dir.path());
    let o = her2(&["run", "--config", config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let case = dir.path().join("out/planted");
    let json = fs::read_to_string(case.join("report.json")).unwrap();
    assert!(json.contains("\"wsi_score\":\"3+\",\"coverage_pct\":25.0"), "{json}");
    assert_eq!(fs::read_to_string(case.join("report.csv")).unwrap().lines().count(), 17);
    assert!(case.join("overlays/r1_c2.png").is_file());
    assert!(case.join("mosaics/ihc_overlay.png").is_file());
}

#[test]
fn workers_do_not_change_report_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = planted_case(dir.path());
    let mut reports = Vec::new();
    for w in ["1", "8"] {
        let out = dir.path().join(format!("out{w}"));
        let o = her2(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--workers",
            w,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push((
            fs::read(out.join("planted/report.json")).unwrap(),
            fs::read(out.join("planted/report.csv")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn blank_case_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let blank = RgbImage::from_pixel(100, 70, Rgb([255, 255, 255]));
    blank.save(dir.path().join("he.png")).unwrap();
    blank.save(dir.path().join("ihc.png")).unwrap();
    let config = write_config(dir.path(), "[artifacts]\noverlays = false\nheatmaps = false\nmosaic = false\n");
    let o = her2(&["run", "--config", config.to_str().unwrap(), "--mode", "binary"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json = fs::read_to_string(dir.path().join("out/planted/report.json")).unwrap();
    assert!(json.contains("\"wsi_score\":\"0\""));
    assert!(json.contains("\"scoring_mode\":\"binary\""));
    assert!(!dir.path().join("out/planted/overlays").exists());
}

#[test]
fn non_bijective_mapping_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    planted_case(dir.path());
    let config = write_config(dir.path(), "[mapping]\nkind = \"affine_grid\"\noffset = [1, 0]\n");
    let o = her2(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = her2(&["verify-mapping", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["injective"], false);
    assert_eq!(report["out_of_range"].as_array().unwrap().len(), 4);

    let ok = write_config(dir.path(), "");
    assert_eq!(her2(&["verify-mapping", "--config", ok.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn unavailable_backend_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = planted_case(dir.path());
    let o = her2(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--sidecar-segment",
        "/no/such/sidecar --rule",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

fn test_sidecar() -> Option<PathBuf> {
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_her2"));
    let candidate = exe.with_file_name(format!("her2-test-sidecar{}", std::env::consts::EXE_SUFFIX));
    candidate.is_file().then_some(candidate)
}

#[test]
fn sidecar_run_matches_builtin() {
    let Some(sidecar) = test_sidecar() else {
        eprintln!("her2-test-sidecar not built; run the workspace tests to include this check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let config = planted_case(dir.path());
    let builtin = dir.path().join("a");
    let external = dir.path().join("b");
    let o = her2(&["run", "--config", config.to_str().unwrap(), "--out", builtin.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = her2(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        external.to_str().unwrap(),
        "--workers",
        "2",
        "--sidecar",
        &format!("{} --roles tumor,stain,segment", sidecar.display()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(builtin.join("planted/report.json")).unwrap(),
        fs::read(external.join("planted/report.json")).unwrap()
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn eval_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "pred.csv",
        "id,true_label,pred_label,prob_tumor,prob_normal\n\
         a,tumor,tumor,0.9,0.1\nb,normal,normal,0.3,0.7\nc,tumor,tumor,0.8,0.2\n",
    );
    let out = dir.path().join("metrics");
    let o = her2(&[
        "eval",
        "--predictions",
        p.to_str().unwrap(),
        "--roc",
        "--dca",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["accuracy"], 1.0);
    assert_eq!(m["per_label"]["tumor"]["auc"], 1.0);
    assert!(out.join("roc_tumor.csv").is_file());
    assert_eq!(fs::read_to_string(out.join("dca_normal.csv")).unwrap().lines().count(), 32);
}

#[test]
fn eval_single_class_roc_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "pred.csv",
        "id,true_label,pred_label,prob_pos\na,pos,pos,0.9\nb,pos,pos,0.4\n",
    );
    let o = her2(&["eval", "--predictions", p.to_str().unwrap(), "--roc"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let o = her2(&["eval", "--predictions", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn eval_malformed_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "pred.csv",
        "id,true_label,pred_label,prob_pos\na,pos,pos,0.9\nb,pos,neg,high\n",
    );
    let o = her2(&["eval", "--predictions", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn eval_truth_override() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "pred.csv", "id,true_label,pred_label\na,,x\nb,,y\n");
    let t = write(dir.path(), "truth.csv", "id,true_label\na,x\nb,x\n");
    let o = her2(&["eval", "--predictions", p.to_str().unwrap(), "--truth", t.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["accuracy"], 0.5);
}

#[test]
fn render_tally_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(
        dir.path(),
        "labels.csv",
        "patch_id,roi_id,true_tumor,true_stain,pred_tumor,pred_stain\n\
         p1,R1,tumor,weak,tumor,weak\np2,R1,normal,,normal,no_stain\np3,R2,tumor,strong,tumor,weak\n",
    );
    let out = dir.path().join("tally");
    let o = her2(&["render", "tally", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("tally.csv")).unwrap();
    assert!(csv.starts_with("status,R1,R2\nR-tumor,1,1\nP-tumor,1,1\nR-normal,1,0\n"), "{csv}");
    assert!(csv.contains("\nP-weak-stain,1,1\n"));
    assert!(out.join("tally.json").is_file());

    let bad = write(dir.path(), "bad.csv", "patch_id,roi_id,true_tumor,true_stain,pred_tumor,pred_stain\np1,R1,tumour,,tumor,\n");
    let o = her2(&["render", "tally", "--input", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
