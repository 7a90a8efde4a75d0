mod common;

use std::fs;

use common::*;
use wsol_eval::io::annotations::SplitName;
use wsol_eval::io::scorepack::{read_scorepack, write_scorepack};
use wsol_eval::ScoreMap;

fn dataset(dir: &std::path::Path, n: usize) -> Dataset {
    write_dataset(dir, make_samples("", 2, n, 5), SplitName::TestFullsup)
}

fn eval_args<'a>(task: &'a str, pack: &'a str, gt: &'a str, manifest: &'a str) -> Vec<&'a str> {
    vec!["evaluate", "--task", task, "--scoremaps", pack, "--gt", gt, "--manifest", manifest]
}

#[test]
fn perfect_pack_scores_one_and_report_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 4);
    let pack = dir.path().join("perfect.wsep");
    write_blurred_pack(&pack, &ds.samples, 1.0);
    let out = dir.path().join("r.json");
    let mut args = eval_args("boxes", pack.to_str().unwrap(), ds.boxes.to_str().unwrap(), ds.manifest.to_str().unwrap());
    args.extend(["--out", out.to_str().unwrap()]);
    let res = run(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    let r = report(&out);
    assert_eq!(r["score"], 1.0);
    assert_valid(&schema_validator("metric-report.schema.json"), &r);

    let out_masks = dir.path().join("m.json");
    let mut args = eval_args("masks", pack.to_str().unwrap(), ds.masks.to_str().unwrap(), ds.manifest.to_str().unwrap());
    args.extend(["--out", out_masks.to_str().unwrap(), "--taus", "exact", "--stamp", "2026-01-01"]);
    let res = run(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    let r = report(&out_masks);
    assert_valid(&schema_validator("metric-report.schema.json"), &r);
    assert_eq!(r["stamp"], "2026-01-01");
    assert!(r["masks"]["m_px_ap"].as_f64().unwrap() > 0.99);
}

#[test]
fn reports_are_byte_identical_across_runs_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 5);
    let pack = dir.path().join("p.wsep");
    write_blurred_pack(&pack, &ds.samples, 3.0);
    let mut outputs = Vec::new();
    for jobs in ["1", "4", "1"] {
        let res = bin()
            .args(eval_args("masks", pack.to_str().unwrap(), ds.masks.to_str().unwrap(), ds.manifest.to_str().unwrap()))
            .env("WSOL_EVAL_JOBS", jobs)
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", stderr(&res));
        outputs.push(res.stdout);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn center_baseline_scores_below_one() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 5);
    let pack = dir.path().join("center.wsep");
    let res = run(&["baseline", "--manifest", ds.manifest.to_str().unwrap(), "--out", pack.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(read_scorepack(&pack).unwrap().record_count(), 10);
    let res = run(&eval_args("boxes", pack.to_str().unwrap(), ds.boxes.to_str().unwrap(), ds.manifest.to_str().unwrap()));
    assert!(res.status.success());
    let r: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(r["score"].as_f64().unwrap() < 1.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 2);
    let pack = dir.path().join("p.wsep");
    write_blurred_pack(&pack, &ds.samples, 1.0);
    let (p, m) = (pack.to_str().unwrap(), ds.manifest.to_str().unwrap());

    // missing ground truth file
    let res = run(&eval_args("boxes", p, "/nonexistent/boxes.txt", m));
    assert_eq!(res.status.code(), Some(1), "{}", stderr(&res));
    // missing mask directory
    let res = run(&eval_args("masks", p, "/nonexistent/masks", m));
    assert_eq!(res.status.code(), Some(1));
    // missing scorepack
    let res = run(&eval_args("boxes", "/nonexistent.wsep", ds.boxes.to_str().unwrap(), m));
    assert_eq!(res.status.code(), Some(1));

    // a pack missing one manifest image names that image
    let short = dir.path().join("short.wsep");
    let mut maps: Vec<ScoreMap> = read_scorepack(&pack).unwrap().map(Result::unwrap).collect();
    let dropped = maps.pop().unwrap();
    write_scorepack(&maps, &short).unwrap();
    let res = run(&eval_args("boxes", short.to_str().unwrap(), ds.boxes.to_str().unwrap(), m));
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains(dropped.image_id()), "{}", stderr(&res));

    // corrupt pack
    let bad = dir.path().join("bad.wsep");
    fs::write(&bad, b"WSEP\x09\x00").unwrap();
    let res = run(&eval_args("boxes", bad.to_str().unwrap(), ds.boxes.to_str().unwrap(), m));
    assert_eq!(res.status.code(), Some(2));

    // bad flags
    let mut args = eval_args("boxes", p, ds.boxes.to_str().unwrap(), m);
    args.extend(["--taus", "0"]);
    assert_eq!(run(&args).status.code(), Some(2));
    let res = run(&["baseline", "--manifest", m, "--sigma", "0", "--out", "x.wsep"]);
    assert_eq!(res.status.code(), Some(2));
    let res = run(&["baseline", "--manifest", m, "--sigma", "-1", "--out", "x.wsep"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn curve_csv_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 3);
    let pack = dir.path().join("p.wsep");
    // hard-edged indicator maps: every threshold in (0, 1] recovers the box
    let maps: Vec<ScoreMap> = ds.samples.iter().map(|s| blurred_indicator(s, 1e-3)).collect();
    write_scorepack(&maps, &pack).unwrap();
    let mut args = vec!["curve"];
    args.extend(&eval_args("boxes", pack.to_str().unwrap(), ds.boxes.to_str().unwrap(), ds.manifest.to_str().unwrap())[1..]);
    args.extend(["--taus", "50"]);
    let res = run(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    let text = String::from_utf8(res.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tau,boxacc@0.3,boxacc@0.5,boxacc@0.7");
    assert_eq!(lines.len(), 51);
    for line in &lines[2..] {
        assert!(line.ends_with(",1,1,1"), "{line}");
    }

    // a constant map under max normalization predicts every pixel at every tau
    let constant: Vec<ScoreMap> = ds
        .samples
        .iter()
        .map(|s| ScoreMap::new(&s.entry.image_id, s.mask.height, s.mask.width, vec![0.25; s.mask.labels.len()]).unwrap())
        .collect();
    write_scorepack(&constant, &pack).unwrap();
    let mut args = vec!["curve"];
    args.extend(&eval_args("masks", pack.to_str().unwrap(), ds.masks.to_str().unwrap(), ds.manifest.to_str().unwrap())[1..]);
    args.extend(["--taus", "20", "--norm", "max", "--category", "cat1"]);
    let res = run(&args);
    assert!(res.status.success(), "{}", stderr(&res));
    let text = String::from_utf8(res.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.ends_with(",1")), "{text}");
}

#[test]
fn rank_compare_identical_collections() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let ds = dataset(&dir.path().join("data"), 2);
    for (i, sigma) in [0.5, 2.0, 6.0].into_iter().enumerate() {
        let pack = dir.path().join(format!("p{i}.wsep"));
        write_blurred_pack(&pack, &ds.samples, sigma);
        let mut args = eval_args("masks", pack.to_str().unwrap(), ds.masks.to_str().unwrap(), ds.manifest.to_str().unwrap());
        let out = a.join(format!("run{i}.json"));
        args.extend(["--out", out.to_str().unwrap(), "--taus", "exact"]);
        assert!(run(&args).status.success());
        fs::copy(&out, b.join(format!("run{i}.json"))).unwrap();
    }
    let res = run(&["rank-compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["kendall_tau"], 1.0);
    assert_eq!(v["n"], 3);
}

#[test]
fn validate_reports_overlaps() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, ids: &[&str]| {
        let path = dir.path().join(name);
        let body: String = ids.iter().map(|id| format!("{id},c,4,4\n")).collect();
        fs::write(&path, body).unwrap();
        path
    };
    let weak = write("weak.txt", &["a", "b"]);
    let val = write("val.txt", &["c"]);
    let test = write("test.txt", &["d", "b"]);
    let res = run(&[
        "validate",
        "--train-weaksup", weak.to_str().unwrap(),
        "--train-fullsup", val.to_str().unwrap(),
        "--test-fullsup", test.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("train-weaksup and test-fullsup share 1 image(s): b"), "{}", stderr(&res));

    let clean = write("test2.txt", &["d"]);
    let boxes = dir.path().join("val_boxes.txt");
    fs::write(&boxes, "c,0,0,2,2\n").unwrap();
    let res = run(&[
        "validate",
        "--train-weaksup", weak.to_str().unwrap(),
        "--train-fullsup", val.to_str().unwrap(),
        "--test-fullsup", clean.to_str().unwrap(),
        "--train-fullsup-gt", boxes.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
}

#[test]
fn proxy_subcommand_writes_stratified_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(dir.path(), make_samples("", 3, 10, 1), SplitName::TrainFullsup);
    let out = dir.path().join("proxy.txt");
    let res = run(&[
        "proxy", "--manifest", ds.manifest.to_str().unwrap(), "--fraction", "0.2", "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
}
