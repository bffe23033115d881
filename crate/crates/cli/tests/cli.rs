use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfwb_core::binfmt::F32Matrix;
use mfwb_core::dataset::{Manifest, ManifestPoint};
use mfwb_core::Modality;
use serde_json::Value;
use tempfile::TempDir;

fn mfwb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfwb")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Vec<u8> {
    let out = mfwb(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn planted(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("planted.json");
    ok(&["synth-benchmark", "--preset", "planted", "--seed", "0", "--out", s(&path)]);
    path
}

#[test]
fn seeded_commands_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(&dir);
    let m = s(&p);
    let directive = dir.path().join("d.json");
    fs::write(&directive, r#"{"type": "PointSet", "pointId": "img-planted", "targetSetId": "A"}"#).unwrap();
    let cands = dir.path().join("c.txt");
    fs::write(&cands, "img-A-00\nimg-B-00\nimg-A-01\nimg-B-01\n").unwrap();

    let runs: Vec<Vec<&str>> = vec![
        vec!["project", "--manifest", m, "--method", "mfm", "--epochs", "60", "--seed", "3"],
        vec!["project", "--manifest", m, "--method", "ndcm", "--seed", "3"],
        vec!["project", "--manifest", m, "--method", "pca"],
        vec!["evaluate", "--manifest", m, "--method", "mfm,mds,dcm", "--rounds", "3", "--sample-size", "20", "--k", "5", "--epochs", "40", "--seed", "9"],
        vec!["axis", "--manifest", m, "--concepts", "A,B", "--concepts", "A"],
        vec!["rerank", "--manifest", m, "--query", "text-A", "--candidates", s(&cands)],
    ];
    for args in &runs {
        assert_eq!(ok(args), ok(args), "{args:?}");
    }

    let a1 = dir.path().join("a1.bin");
    let a2 = dir.path().join("a2.bin");
    let r1 = ok(&["align", "--manifest", m, "--directive", s(&directive), "--out", s(&a1), "--seed", "4"]);
    let r2 = ok(&["align", "--manifest", m, "--directive", s(&directive), "--out", s(&a2), "--seed", "4"]);
    assert_eq!(r1, r2);
    assert_eq!(fs::read(&a1).unwrap(), fs::read(&a2).unwrap());

    for preset in ["gap3", "entangle2", "planted", "zero-gap"] {
        let x = dir.path().join(format!("{preset}-x.json"));
        let y = dir.path().join(format!("{preset}-y.json"));
        ok(&["synth-benchmark", "--preset", preset, "--seed", "11", "--out", s(&x)]);
        ok(&["synth-benchmark", "--preset", preset, "--seed", "11", "--out", s(&y)]);
        let strip = |p: &Path| fs::read_to_string(p).unwrap().replace(&format!("{preset}-x"), &format!("{preset}-y"));
        assert_eq!(strip(&x), fs::read_to_string(&y).unwrap());
        assert_eq!(fs::read(x.with_extension("bin")).unwrap(), fs::read(y.with_extension("bin")).unwrap());
    }

    let e1 = dir.path().join("e1.bin");
    let e2 = dir.path().join("e2.bin");
    ok(&["export-matrix", "--manifest", m, "--out", s(&e1)]);
    ok(&["export-matrix", "--manifest", m, "--out", s(&e2)]);
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
}

#[test]
fn pca_preserves_distances_on_a_planar_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let u = [0.6, 0.0, 0.8, 0.0, 0.0];
    let v = [0.0, 1.0, 0.0, 0.0, 0.0];
    let mut points = Vec::new();
    let mut vectors = Vec::new();
    for i in 0..12 {
        let t = 0.2 + 0.1 * i as f64;
        let (a, b) = (t.cos(), t.sin());
        let vec: Vec<f64> = (0..5).map(|j| a * u[j] + b * v[j]).collect();
        vectors.push(vec.clone());
        points.push(ManifestPoint {
            id: format!("p{i:02}"),
            modality: if i < 9 { Modality::Image } else { Modality::Text },
            vector: Some(vec),
            vector_ref: None,
            label: None,
            set_id: None,
            asset_uri: None,
        });
    }
    let manifest = Manifest {
        dimension: 5,
        points,
        concepts: vec![],
    };
    let path = dir.path().join("planar.json");
    fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let out: Value = serde_json::from_slice(&ok(&["project", "--manifest", s(&path), "--method", "pca"])).unwrap();
    let ids = out["layout"]["ids"].as_array().unwrap();
    let coords: Vec<[f64; 2]> = out["layout"]["coords"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| [c[0].as_f64().unwrap(), c[1].as_f64().unwrap()])
        .collect();
    let index = |id: &Value| id.as_str().unwrap()[1..].parse::<usize>().unwrap();
    for a in 0..ids.len() {
        for b in 0..ids.len() {
            let (va, vb) = (&vectors[index(&ids[a])], &vectors[index(&ids[b])]);
            let high: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let low = ((coords[a][0] - coords[b][0]).powi(2) + (coords[a][1] - coords[b][1]).powi(2)).sqrt();
            assert!((high - low).abs() < 1e-6, "{a} {b}: {high} vs {low}");
        }
    }
}

#[test]
fn align_on_planted_reports_satisfied() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(&dir);
    let directive = dir.path().join("d.json");
    fs::write(&directive, r#"{"type": "PointSet", "pointId": "img-planted", "targetSetId": "A"}"#).unwrap();
    let adapter = dir.path().join("adapter.bin");
    let adapted = dir.path().join("adapted.json");
    let report: Value = serde_json::from_slice(&ok(&[
        "align",
        "--manifest",
        s(&p),
        "--directive",
        s(&directive),
        "--out",
        s(&adapter),
        "--adapted-manifest",
        s(&adapted),
    ]))
    .unwrap();
    assert_eq!(report["before"]["satisfied"], false);
    assert_eq!(report["satisfied"], true);
    assert!(adapter.exists() && adapter.with_extension("json").exists());

    // The saved adapter reorders the planted point's candidates.
    let cands = dir.path().join("c.txt");
    fs::write(&cands, "text-A\ntext-B\n").unwrap();
    let ranked: Value = serde_json::from_slice(&ok(&[
        "rerank",
        "--manifest",
        s(&p),
        "--adapter",
        s(&adapter),
        "--query",
        "img-planted",
        "--candidates",
        s(&cands),
    ]))
    .unwrap();
    assert_eq!(ranked["adapted"], true);
    assert_eq!(ranked["ranked"].as_array().unwrap().len(), 2);
    assert!(mfwb_core::load_dataset(&adapted).is_ok());
}

#[test]
fn evaluate_table_and_export_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(&dir);
    let table = ok(&["evaluate", "--manifest", s(&p), "--method", "pca", "--rounds", "2", "--sample-size", "20", "--k", "5", "--format", "table"]);
    let table = String::from_utf8(table).unwrap();
    assert!(table.contains("Inter-modal") && table.contains("PCA"), "{table}");

    let out = dir.path().join("m.bin");
    ok(&["export-matrix", "--manifest", s(&p), "--out", s(&out)]);
    let header: Value = serde_json::from_str(&fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    let m = F32Matrix::read(&out).unwrap();
    assert_eq!(m.rows, 27);
    assert_eq!(header["rows"], 27);
    assert_eq!(header["order"].as_array().unwrap().len(), 27);
    assert_eq!(header["blocks"][1]["name"], "IT");
    for a in 0..m.rows {
        assert_eq!(m.row(a)[a], 0.0);
        for b in 0..m.rows {
            assert_eq!(m.row(a)[b], m.row(b)[a]);
        }
    }
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let p = planted(&dir);
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["project", "--manifest", "/nonexistent/m.json"], "Io"),
        (vec!["project", "--manifest", s(&p), "--method", "umap"], "Usage"),
        (vec!["axis", "--manifest", s(&p), "--concepts", "zebra"], "UnknownConcept"),
        (vec!["evaluate", "--manifest", s(&p), "--method", "pca", "--sample-size", "500"], "InsufficientImages"),
    ];
    for (args, kind) in cases {
        let out = mfwb(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(out.stdout.is_empty());
        let err: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)));
        assert_eq!(err["error"], kind, "{args:?}");
        assert!(err["message"].is_string());
    }
}
