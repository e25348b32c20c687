use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use boq::data::manifest::{load_manifest, Role};
use boq::data::tensorfile::{read_tensor_file, write_tensor_file, DType, TensorTable};
use boq::Tensor;

const TOY: &str = "\
# four training places, 16x16 images
image.height = 16
image.width = 16
model.stem_channels = 8,16
model.dim = 16
model.heads = 2
model.queries = 4
model.channel_proj = 8
model.row_proj = 2
batch.places = 4
batch.images_per_place = 4
schedule.max_epochs = 2
synth.num_places = 4
synth.eval_places = 2
synth.views_per_place = 4
synth.reference_views = 1
";

fn boq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn boq")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn summary_value(summary: &str, key: &str) -> f64 {
    summary
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}` in summary:\n{summary}"))
        .parse()
        .unwrap()
}

/// Runs the whole pipeline in `dir`; returns the eval summary.
fn pipeline(dir: &Path) -> String {
    fs::write(dir.join("toy.cfg"), TOY).unwrap();
    let c = ["--config", "toy.cfg"];
    ok(&boq(dir, &[&["synth", "--out", "data"], &c[..]].concat()));
    let s = ok(&boq(dir, &[&["train", "--manifest", "data/manifest.csv", "--out", "run"], &c[..]].concat()));
    assert_eq!(summary_value(&s, "epochs"), 2.0);
    ok(&boq(
        dir,
        &[&["embed", "--checkpoint", "run/checkpoint.boqt", "--manifest", "data/manifest.csv", "--out", "emb"], &c[..]].concat(),
    ));
    ok(&boq(
        dir,
        &[
            &[
                "eval",
                "--queries",
                "emb/descriptors.boqt",
                "--references",
                "emb/descriptors.boqt",
                "--manifest",
                "data/manifest.csv",
                "--out",
                "eval",
            ],
            &c[..],
        ]
        .concat(),
    ))
}

#[test]
fn toy_pipeline_completes_with_parseable_summary() {
    let dir = tempfile::tempdir().unwrap();
    let summary = pipeline(dir.path());
    assert_eq!(summary_value(&summary, "queries"), 6.0);
    for k in [1, 5, 10] {
        let r = summary_value(&summary, &format!("recall@{k}"));
        assert!((0.0..=1.0).contains(&r));
    }
    let results = fs::read_to_string(dir.path().join("eval/results.csv")).unwrap();
    assert!(results.starts_with("query_id,rank1_id,rank2_id\n"), "{results}");
    assert!(results.ends_with(&format!("recall@10={:.4}\n", summary_value(&summary, "recall@10"))));

    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let table = read_tensor_file(&dir.path().join("emb/descriptors.boqt")).unwrap();
    assert_eq!(table.dtype, DType::F32);
    assert_eq!(table.len(), 4 * 4 + 2 * 4);
    assert!(table.entries.iter().all(|(_, t)| t.shape() == [16]));

    // the echoed config reproduces the run configuration
    let echoed = fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(echoed.contains("model.dim = 16\n") && echoed.contains("path.manifest = data/manifest.csv\n"));
    for sub in ["data", "emb", "eval"] {
        assert!(dir.path().join(sub).join("config.txt").is_file());
    }
    // no staging directories remain
    let hidden: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with('.'))
        .collect();
    assert!(hidden.is_empty(), "{hidden:?}");
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs", pa.display());
    }
}

fn write_manifest(dir: &Path, rows: &[(&str, u64, f64, &str)]) {
    let mut text = String::from("id,path,place_id,gt_kind,gt_a,gt_b,role\n");
    for (id, place, x, role) in rows {
        fs::write(dir.join(format!("{id}.bin")), b"").unwrap();
        text.push_str(&format!("{id},{id}.bin,{place},planar,{x},0,{role}\n"));
    }
    fs::write(dir.join("manifest.csv"), text).unwrap();
}

#[test]
fn duplicated_descriptors_give_perfect_recall() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let n = 5;
    let mut rows = Vec::new();
    let ids: Vec<(String, String)> = (0..n).map(|i| (format!("q{i}"), format!("r{i}"))).collect();
    for (i, (q, r)) in ids.iter().enumerate() {
        rows.push((q.as_str(), i as u64, i as f64 * 100.0, "query"));
        rows.push((r.as_str(), i as u64, i as f64 * 100.0 + 1.0, "reference"));
    }
    write_manifest(d, &rows);
    let mut table = TensorTable::new(DType::F32);
    for (i, (q, r)) in ids.iter().enumerate() {
        // distinct unit vectors exactly representable in f32
        let mut v = vec![0.0; 8];
        v[i] = 0.6;
        v[i + 1] = 0.8;
        table.push(q.clone(), Tensor::from_vec(v.clone()));
        table.push(r.clone(), Tensor::from_vec(v));
    }
    write_tensor_file(&d.join("desc.boqt"), &table).unwrap();
    let s = ok(&boq(
        d,
        &[
            "eval", "--queries", "desc.boqt", "--references", "desc.boqt", "--manifest", "manifest.csv", "--out", "e", "--set",
            "eval.ks=1,2",
        ],
    ));
    assert!(s.contains("recall@1=1.0000\n"), "{s}");
    assert!(s.contains("recall@2=1.0000\n"), "{s}");
}

#[test]
fn attention_grids_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("toy.cfg"), TOY).unwrap();
    ok(&boq(d, &["synth", "--config", "toy.cfg", "--out", "data"]));
    ok(&boq(d, &["train", "--config", "toy.cfg", "--manifest", "data/manifest.csv", "--out", "run", "--set", "schedule.max_epochs=1"]));
    let manifest = load_manifest(&d.join("data/manifest.csv")).unwrap();
    let query = manifest.with_role(Role::Query).next().unwrap();
    let image = manifest.resolve(query);
    let s = ok(&boq(
        d,
        &[
            "attn",
            "--config",
            "toy.cfg",
            "--checkpoint",
            "run/checkpoint.boqt",
            "--image",
            image.to_str().unwrap(),
            "--out",
            "attn",
            "--set",
            "attn.block=1",
            "--set",
            "attn.queries=0,3",
        ],
    ));
    assert_eq!(s, "block1_query0: 4x4\nblock1_query3: 4x4\n");
    for q in [0, 3] {
        let csv = fs::read_to_string(d.join(format!("attn/block1_query{q}.csv"))).unwrap();
        let values: Vec<f64> = csv.lines().flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap())).collect();
        assert_eq!(values.len(), 16);
        assert!((values.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let pgm = fs::read(d.join(format!("attn/block1_query{q}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);
    }
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    fs::write(d.join("bad.cfg"), "model.depth = 3\n").unwrap();
    let out = boq(d, &["synth", "--config", "bad.cfg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `model.depth`"));

    let out = boq(d, &["train", "--out", "x", "--manifest", "missing.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    let out = boq(d, &["synth", "--set", "synth.spacing_m=10", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(boq(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(boq(d, &["synth"]).status.code(), Some(1));
    assert!(!d.join("x").exists());

    // a model that overflows on its first forward pass
    fs::write(d.join("toy.cfg"), TOY).unwrap();
    ok(&boq(d, &["synth", "--config", "toy.cfg", "--out", "data"]));
    let out = boq(
        d,
        &["train", "--config", "toy.cfg", "--manifest", "data/manifest.csv", "--out", "run", "--set", "schedule.base_lr=1e300"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));

    let names: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(names.iter().all(|n| !n.starts_with('.')), "{names:?}");
}

#[test]
fn defaults_are_documented_and_parseable() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(&boq(dir.path(), &["defaults"]));
    let keys = boq_cli::config::KEYS;
    assert_eq!(s.lines().filter(|l| l.starts_with("# ")).count(), keys.len());
    assert_eq!(boq_cli::config::RunConfig::parse(&s).unwrap(), boq_cli::config::RunConfig::default());
}
