use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cac_core::nn::checkpoint;
use cac_core::scoring::{parse_kv_report, RiskCategory};
use cac_core::volume::{write_mask, write_probs, write_volume, CtVolume, Dims, MaskRole, MaskVolume, ProbVolume, Spacing};

fn cacscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cacscore")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Oracle rows from `oracle.tsv`: (stem, total).
fn oracle_rows(dir: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(dir.join("oracle.tsv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn show_config_echoes_defaults() {
    let o = cacscore(&["--show-config"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for line in ["prob_threshold 0.5", "hu_threshold 130", "bootstrap_alpha 8.0", "lr0 0.001", "momentum 0.9", "epochs 25"] {
        assert!(text.lines().any(|l| l == line), "{line}");
    }
    let o = cacscore(&["--show-config", "--connectivity", "8", "--seed", "7"]);
    assert!(stdout(&o).contains("connectivity 8-2d\n") && stdout(&o).contains("seed 7\n"));
}

#[test]
fn invalid_config_exits_3() {
    assert_eq!(cacscore(&["--show-config", "--prob-threshold", "2"]).status.code(), Some(3));
    assert_eq!(cacscore(&["--show-config", "--connectivity", "6"]).status.code(), Some(3));
    assert_eq!(cacscore(&["no-such-command"]).status.code(), Some(3));
}

#[test]
fn phantoms_are_byte_identical_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (d, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let o = cacscore(&["phantom", "--out-dir", path(d), "--count", "2", "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    assert_ne!(fs::read(a.join("phantom_000.vol")).unwrap(), fs::read(c.join("phantom_000.vol")).unwrap());
}

#[test]
fn score_matches_phantom_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(cacscore(&["phantom", "--out-dir", path(d), "--count", "4", "--seed", "11"]).status.success());
    for (stem, total) in oracle_rows(d) {
        for pred in ["prob", "mask"] {
            let vol = d.join(format!("{stem}.vol"));
            let p = d.join(format!("{stem}.{pred}"));
            let o = cacscore(&["score", path(&vol), path(&p), "--format", "kv"]);
            assert_eq!(o.status.code(), Some(0));
            let (score, risk) = parse_kv_report(&stdout(&o)).unwrap();
            assert!((score - total).abs() <= 1e-9, "{stem}: {score} vs {total}");
            assert_eq!(risk, RiskCategory::from_score(total));
        }
    }
}

#[test]
fn zero_probabilities_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(2, 4, 4);
    let sp = Spacing::new(3.0, 0.5, 0.5);
    let (vol, probs) = (dir.path().join("v.vol"), dir.path().join("p.prob"));
    write_volume(&CtVolume::filled(dims, sp, 400).unwrap(), &vol).unwrap();
    write_probs(&ProbVolume::zeros(dims, sp).unwrap(), &probs).unwrap();
    let o = cacscore(&["score", path(&vol), path(&probs)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("total_score 0.0, risk zero"), "{}", stdout(&o));
}

#[test]
fn score_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let sp = Spacing::new(3.0, 0.5, 0.5);
    let (vol, probs) = (dir.path().join("v.vol"), dir.path().join("p.prob"));
    write_volume(&CtVolume::filled(Dims::new(2, 4, 4), sp, 400).unwrap(), &vol).unwrap();
    write_probs(&ProbVolume::zeros(Dims::new(2, 4, 5), sp).unwrap(), &probs).unwrap();
    let o = cacscore(&["score", path(&vol), path(&probs)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape"));

    let missing = dir.path().join("missing.prob");
    assert_eq!(cacscore(&["score", path(&vol), path(&missing)]).status.code(), Some(2));

    fs::write(&probs, b"not a volume").unwrap();
    assert_eq!(cacscore(&["score", path(&vol), path(&probs)]).status.code(), Some(3));
}

#[test]
fn eval_of_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let flags = ["--min-lesion-mm2", "0"];
    let o = cacscore(&[&["phantom", "--out-dir", path(d), "--count", "5", "--seed", "2"][..], &flags].concat());
    assert!(o.status.success());
    let mut manifest = String::from("# id\tvolume\tgt\tprediction\trisk\n");
    for (stem, total) in oracle_rows(d) {
        let risk = RiskCategory::from_score(total);
        manifest.push_str(&format!("{stem}\t{stem}.vol\t{stem}.mask\t{stem}.prob\t{risk}\n"));
    }
    let m = d.join("cohort.tsv");
    fs::write(&m, manifest).unwrap();
    let o = cacscore(&[&["eval", path(&m)][..], &flags].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("n_patients 5\ncac_rate 1.00\ncac_filter_rate 1.00\n"), "{text}");
    let seq = cacscore(&[&["eval", path(&m), "--sequential"][..], &flags].concat());
    assert_eq!(stdout(&seq), text);
}

#[test]
fn eval_of_empty_prediction_has_zero_f1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dims = Dims::new(1, 4, 4);
    let sp = Spacing::new(3.0, 1.0, 1.0);
    write_volume(&CtVolume::filled(dims, sp, 300).unwrap(), d.join("v.vol")).unwrap();
    let mut labels = vec![0u8; 16];
    labels[5] = 1;
    write_mask(&MaskVolume::new(dims, sp, labels, MaskRole::GroundTruth).unwrap(), d.join("gt.mask")).unwrap();
    write_probs(&ProbVolume::zeros(dims, sp).unwrap(), d.join("p.prob")).unwrap();
    fs::write(d.join("m.tsv"), "p1\tv.vol\tgt.mask\tp.prob\tminimal\n").unwrap();
    let o = cacscore(&["eval", path(&d.join("m.tsv"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("p1, minimal, zero, zero, 0.0000\n"), "{}", stdout(&o));

    fs::write(d.join("bad.tsv"), "p1\tmissing.vol\tgt.mask\tp.prob\tminimal\n").unwrap();
    assert_eq!(cacscore(&["eval", path(&d.join("bad.tsv"))]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_fails_and_repeats() {
    let a = cacscore(&["gradcheck", "--seed", "5"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a).lines().filter(|l| l.starts_with("PASS")).count(), 15);
    let b = cacscore(&["gradcheck", "--seed", "5"]);
    assert_eq!(stdout(&a), stdout(&b));
    let z = cacscore(&["gradcheck", "--tolerance", "0"]);
    assert_eq!(z.status.code(), Some(4));
    assert!(stdout(&z).contains("FAIL"));
}

#[test]
fn train_toy_writes_curve_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = cacscore(&["train-toy", "--out-dir", path(&out), "--phantoms", "2", "--canvas", "16", "--epochs", "2", "--seed", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read_to_string(out.join("loss.csv")).unwrap(), fs::read(out.join("model.ckpt")).unwrap(), out)
    };
    let (csv_a, ckpt_a, out) = run("a");
    let (csv_b, ckpt_b, _) = run("b");
    assert_eq!(csv_a, csv_b);
    assert_eq!(ckpt_a, ckpt_b);
    let mut lines = csv_a.lines();
    assert_eq!(lines.next(), Some("iteration,bootstrap,iou,total,lr"));
    assert_eq!(lines.count(), 4);
    assert!(checkpoint::load(out.join("model.ckpt")).unwrap().num_trainable() > 0);
}
