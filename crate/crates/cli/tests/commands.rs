mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{cli, p, stage, write_config, SMALL};
use prospectr_cli::{CliError, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prospectr"))
}

fn entries(dir: &Path) -> usize {
    fs::read_dir(dir).map(|d| d.count()).unwrap_or(0)
}

#[test]
fn unknown_config_key_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    for text in [r#"{"nope": 1}"#, r#"{"mae": {"epochs": 3, "epoch": 4}}"#, r#"{"schema_version": 9}"#, "{not json"] {
        let cfg = write_config(tmp.path(), text);
        let status = bin().args(["-q", "--out", &p(&out), "--config", &p(&cfg), "synth"]).status().unwrap();
        assert_eq!(status.code(), Some(2), "{text}");
        assert_eq!(entries(&out), 0, "{text}");
    }
}

#[test]
fn invalid_values_and_flags_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), "{}");
    for args in [
        vec!["--drop-fraction", "1.5", "synth"],
        vec!["--threshold", "2", "synth"],
        vec!["--mc-passes", "0", "synth"],
        vec!["--threads", "0", "synth"],
        vec!["--filter-range=-0.1", "synth"],
    ] {
        let mut a = vec!["-q", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap()];
        a.extend(args.iter().copied());
        assert_eq!(bin().args(&a).status().unwrap().code(), Some(2), "{args:?}");
    }
    assert_eq!(entries(&out), 0);
}

#[test]
fn missing_input_exits_3_without_a_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let status = bin()
        .args(["-q", "--out", &p(&out), "preprocess", "--raster", &p(&tmp.path().join("absent.mbr"))])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    assert_eq!(entries(&out), 0);
    // A file that is not a raster is a data error too.
    let junk = tmp.path().join("junk.mbr");
    fs::write(&junk, b"not a raster").unwrap();
    let status = bin().args(["-q", "--out", &p(&out), "preprocess", "--raster", &p(&junk)]).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn successful_run_prints_its_dir_and_echoes_materialized_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), SMALL);
    let o = bin().args(["-q", "--out", &p(&out), "--config", &p(&cfg), "--seed", "7", "synth"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let dir = String::from_utf8(o.stdout).unwrap().trim().to_string();
    let dir = Path::new(&dir);
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-synth"));
    for f in ["config.json", "inputs.json", "log.txt", "world.mbr", "truth.mbr", "deposits.csv", "labels.mbr", "truth.png"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    for section in ["schema_version", "raster", "preprocess", "mae", "pu", "clf", "xai", "eval", "synth", "seeds"] {
        assert!(echo.get(section).is_some(), "{section}");
    }
    // Unset fields are filled in, overrides applied.
    assert_eq!(echo["synth"]["seed"], 7);
    assert_eq!(echo["mae"]["encoder"]["heads"], 2);
    assert_eq!(echo["mae"]["mask_ratio"], 0.75);
    let back = RunConfig::from_json(&echo.to_string()).unwrap();
    back.validate().unwrap();
}

#[test]
fn inputs_are_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), SMALL);
    let s = cli(&out, &cfg, &["synth"]).unwrap();
    let world = s.join("world.mbr");
    let d = cli(&out, &cfg, &["preprocess", "--raster", &p(&world)]).unwrap();
    let inputs: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("inputs.json")).unwrap()).unwrap();
    let want = prospectr_cli::rundir::sha256_file(&world).unwrap();
    assert_eq!(inputs["raster"]["sha256"], want.as_str());
    assert_eq!(want.len(), 64);
}

#[test]
fn pretraining_ignores_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let s = cli(&a, &cfg, &["synth"]).unwrap();
    let features = cli(&a, &cfg, &["preprocess", "--raster", &p(&s.join("world.mbr"))]).unwrap().join("features.mbr");
    let first = cli(&a, &cfg, &["pretrain", "--raster", &p(&features)]).unwrap();
    fs::remove_file(s.join("labels.mbr")).unwrap();
    fs::remove_file(s.join("deposits.csv")).unwrap();
    let second = cli(&tmp.path().join("b"), &cfg, &["pretrain", "--raster", &p(&features)]).unwrap();
    for f in ["encoder.json", "encoder.bin", "mae.bin", "history.csv", "pretrain_report.json", "reconstructions/epoch002.png"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_modes_and_downstream_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), SMALL);
    let st = stage(&out, &cfg);
    let neg = cli(&out, &cfg, &["sample-negatives", "--raster", &p(&st.features), "--deposits", &p(&st.deposits), "--encoder", &p(&st.encoder)]).unwrap();
    for f in ["similarity.csv", "negatives.csv", "labels.mbr", "similarity.png", "split.json"] {
        assert!(neg.join(f).exists(), "{f}");
    }
    let labels = neg.join("labels.mbr");
    let base = ["train", "--raster", &p(&st.features), "--labels", &p(&labels)].map(String::from).to_vec();
    let with = |extra: &[&str]| {
        let mut a = base.clone();
        a.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        cli(&out, &cfg, &refs)
    };
    let ssl = with(&["--encoder", &p(&st.encoder)]).unwrap();
    let vit = with(&["--no-pretrain"]).unwrap();
    let ann = with(&["--features", "raw", "--arch", "mlp"]).unwrap();
    let method = |d: &Path| -> String {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
        m["method"].as_str().unwrap().to_string()
    };
    assert_eq!([method(&ssl), method(&vit), method(&ann)], ["ssl", "vit", "ann"]);
    for (bad, _) in [(vec![], ()), (vec!["--encoder", "x.json", "--no-pretrain"], ()), (vec!["--features", "raw"], ())] {
        assert!(matches!(with(&bad), Err(CliError::Config(_))), "{bad:?}");
    }

    let model = ssl.join("classifier.json");
    let pred = cli(&out, &cfg, &["predict", "--raster", &p(&st.features), "--model", &p(&model)]).unwrap();
    for f in ["prospectivity.mbr", "prospectivity.png", "prospectivity_quantiles.png", "summary.json"] {
        assert!(pred.join(f).exists(), "{f}");
    }
    let map = prospectr::raster::load_raster(&pred.join("prospectivity.mbr")).unwrap();
    assert_eq!(map.bands(), 2);
    assert!(map.band(0).iter().all(|v| (0.0..=1.0).contains(v)));

    let ex = cli(&out, &cfg, &["explain", "--raster", &p(&st.features), "--model", &p(&model), "--pixel", "3,4", "--pixel", "10,10"]).unwrap();
    let attrs: serde_json::Value = serde_json::from_str(&fs::read_to_string(ex.join("attributions.json")).unwrap()).unwrap();
    assert_eq!(attrs.as_array().unwrap().len(), 2);
    assert_eq!(attrs[0]["row"], 3);
    assert_eq!(attrs[0]["baseline_sha256"].as_str().unwrap().len(), 64);
    assert!(ex.join("pixels/r3_c4.png").exists());
    let bad = cli(&out, &cfg, &["explain", "--raster", &p(&st.features), "--model", &p(&model), "--pixel", "99,0"]);
    assert!(matches!(bad, Err(CliError::Config(_))));
    // A model for another band count is a data error.
    let two = tmp.path().join("two.mbr");
    let r = prospectr::raster::MultiBandRaster::new(12, 12, vec!["a".into(), "b".into()], vec![0.0; 288], None, Default::default()).unwrap();
    prospectr::raster::save_raster(&r, &two).unwrap();
    for m in [&model, &ann.join("classifier.json")] {
        let other = cli(&out, &cfg, &["predict", "--raster", &p(&two), "--model", &p(m)]);
        assert!(matches!(other, Err(CliError::Data(_))), "{other:?}");
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|x| x.unwrap().iter().map(String::from).collect()));
    rows
}

#[test]
fn evaluate_ablations_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let text = SMALL.replace(r#""seeds": [0, 1]"#, r#""seeds": [0, 1, 2, 3, 4]"#);
    let cfg = write_config(tmp.path(), &text);
    let st = stage(&out, &cfg);
    let common = ["--raster", &p(&st.features), "--deposits", &p(&st.deposits), "--encoder", &p(&st.encoder)].map(String::from);
    let run = |cmd: &str| {
        let mut a = vec![cmd];
        a.extend(common.iter().map(String::as_str));
        cli(&out, &cfg, &a).unwrap()
    };

    let ev = run("evaluate");
    let seeds = csv_rows(&ev.join("seeds.csv"));
    assert_eq!(seeds.len(), 1 + 3 * 5);
    assert_eq!(seeds[0][..8], ["method", "seed", "F1", "MCC", "AUPRC", "B.ACC", "AUROC†", "ACC†"]);
    let summary = csv_rows(&ev.join("summary.csv"));
    assert_eq!(summary.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["ssl", "vit", "ann"]);
    assert!(summary[1][1].contains(" ± "));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["methods"][0]["rows"].as_array().unwrap().len(), 5);
    assert!(report["significance"]["F1"].is_object());
    for s in 0..5 {
        assert!(ev.join(format!("seed-{s}/ssl_test_scores.csv")).exists());
    }

    let fr = run("ablate-filter-range");
    let table = csv_rows(&fr.join("filter_range.csv"));
    assert_eq!(table.len(), 4);
    assert_eq!(table[0].len(), 8);
    assert_eq!(table.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0%", "10%", "75%"]);
    assert_eq!(table[0][7], "mean_likelihood");
    assert!(fr.join("map_filter75.png").exists());

    let sp = run("ablate-sparsity");
    let table = csv_rows(&sp.join("sparsity.csv"));
    assert_eq!(table.len(), 1 + 2 * 2);
    assert!(sp.join("report_degraded.json").exists());

    let rep = cli(&out, &cfg, &["report", "--input", &p(&ev.join("report.json")), "--input", &p(&fr.join("report.json"))]).unwrap();
    let md = fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(md.contains("| ssl |") && md.contains("| filter 75% |"));
    assert!(rep.join("report1_summary.csv").exists());
    let junk = tmp.path().join("junk.json");
    fs::write(&junk, "{}").unwrap();
    assert!(matches!(cli(&out, &cfg, &["report", "--input", &p(&junk)]), Err(CliError::Data(_))));
}
