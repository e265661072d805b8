use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use derm_core::data::synth::MANIFEST_FILE;
use derm_core::retrieval::EmbeddingIndex;
use derm_core::triplet::{read_triplets_csv, Regime};

fn derm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_derm")).args(args).output().unwrap();
    assert!(out.status.success(), "derm {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_TRAIN: &str =
    "batch_size = 8\nn_train_triplets = 16\nn_val_triplets = 8\nepochs = 1\nlr = 0.01\nlr_head = 0.01\n";

#[test]
fn pipeline_from_synth_to_query() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    derm(&["synth", "--out", p(&data), "--n-train", "36", "--n-test", "12", "--n-unconstrained", "20", "--seed", "5"]);
    assert!(data.join(MANIFEST_FILE).is_file());

    let cfg = tmp.path().join("tiny.kv");
    std::fs::write(&cfg, TINY_TRAIN).unwrap();
    let disease = tmp.path().join("disease");
    derm(&["train", "--data", p(&data), "--regime", "disease", "--out", p(&disease), "--config", p(&cfg)]);
    for f in ["model.kv", "weights.bin", "train.kv", "curve.csv"] {
        assert!(disease.join(f).is_file(), "{f}");
    }
    let curve = std::fs::read_to_string(disease.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3, "header, epoch 0 and epoch 1");

    let hier = tmp.path().join("hier");
    let init = disease.join("weights.bin");
    derm(&[
        "train",
        "--data",
        p(&data),
        "--regime",
        "hierarchical",
        "--out",
        p(&hier),
        "--config",
        p(&cfg),
        "--init",
        p(&init),
    ]);
    let joint = tmp.path().join("joint");
    derm(&["train", "--data", p(&data), "--regime", "joint", "--out", p(&joint), "--config", p(&cfg)]);

    let index = tmp.path().join("index.bin");
    derm(&["index", "--data", p(&data), "--run", p(&disease), "--out", p(&index)]);
    assert_eq!(EmbeddingIndex::load(&index).unwrap().len(), 36);

    let report = tmp.path().join("report.csv");
    let runs = [format!("disease={}", p(&disease)), format!("hierarchical={}", p(&hier))];
    let out =
        derm(&["eval", "--data", p(&data), "--run", &runs[0], "--run", &runs[1], "--ks", "3,5", "--out", p(&report)]);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next(), Some("regime,k,auc,rel,ja"));
    assert_eq!(csv.lines().count(), 5);
    assert!(stdout(&out).contains("hierarchical"));

    let img = data.join("images").join("tr0007.ppm");
    let out = stdout(&derm(&["query", "--run", p(&disease), "--index", p(&index), "--image", p(&img), "--k", "4"]));
    let first = out.lines().nth(1).unwrap();
    assert!(first.contains("tr0007"), "{out}");
    assert!(first.contains("0.00000"), "{out}");
    assert!(out.contains("melanoma score"));
}

#[test]
fn export_triplets_from_manifest_and_journal() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    derm(&["synth", "--out", p(&data), "--n-train", "30", "--n-test", "6", "--n-unconstrained", "12"]);
    let a = stdout(&derm(&[
        "export-triplets",
        "--data",
        p(&data),
        "--regime",
        "hierarchical",
        "--count",
        "25",
        "--seed",
        "3",
    ]));
    let b = stdout(&derm(&[
        "export-triplets",
        "--data",
        p(&data),
        "--regime",
        "hierarchical",
        "--count",
        "25",
        "--seed",
        "3",
    ]));
    assert_eq!(a, b);
    let ts = read_triplets_csv(a.as_bytes()).unwrap();
    assert_eq!(ts.len(), 25);
    assert!(ts.iter().all(|t| t.regime == Regime::Hierarchical));

    // an empty journal has no groups, so group regimes cannot be sampled
    let journal = tmp.path().join("groups.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_derm"))
        .args([
            "export-triplets",
            "--data",
            p(&data),
            "--regime",
            "non_hierarchical",
            "--count",
            "5",
            "--annotations",
            p(&journal),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset structure"));

    std::fs::write(
        &journal,
        "action,set,mode,group,disease,image_id\n\
         create,hierarchical,hierarchical,g1,melanoma,\n\
         create,hierarchical,hierarchical,g2,seborrheic_keratosis,\n",
    )
    .unwrap();
    let manifest = std::fs::read_to_string(data.join(MANIFEST_FILE)).unwrap();
    let mut lines = String::new();
    for row in manifest.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        let group = match f[2] {
            "melanoma" => "g1",
            "seborrheic_keratosis" => "g2",
            _ => continue,
        };
        if f[4] == "train" {
            lines.push_str(&format!("assign,hierarchical,hierarchical,{group},,{}\n", f[0]));
        }
    }
    std::fs::OpenOptions::new().append(true).open(&journal).unwrap().write_all(lines.as_bytes()).unwrap();
    let out_file = tmp.path().join("nh.csv");
    derm(&[
        "export-triplets",
        "--data",
        p(&data),
        "--regime",
        "non_hierarchical",
        "--count",
        "10",
        "--annotations",
        p(&journal),
        "--out",
        p(&out_file),
    ]);
    let ts = read_triplets_csv(std::fs::File::open(&out_file).unwrap()).unwrap();
    assert_eq!(ts.len(), 10);

    let disease = tmp.path().join("run");
    let cfg = tmp.path().join("tiny.kv");
    std::fs::write(&cfg, TINY_TRAIN).unwrap();
    derm(&[
        "train",
        "--data",
        p(&data),
        "--regime",
        "non_hierarchical",
        "--out",
        p(&disease),
        "--config",
        p(&cfg),
        "--triplets",
        p(&out_file),
    ]);
    assert!(disease.join("weights.bin").is_file());
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_answers_over_http() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    derm(&["synth", "--out", p(&data), "--n-train", "20", "--n-test", "4", "--n-unconstrained", "0"]);
    let cfg = tmp.path().join("tiny.kv");
    std::fs::write(&cfg, "epochs = 0\nn_train_triplets = 4\nn_val_triplets = 4\n").unwrap();
    let run = tmp.path().join("run");
    derm(&["train", "--data", p(&data), "--regime", "disease", "--out", p(&run), "--config", p(&cfg)]);
    let index = tmp.path().join("index.bin");
    derm(&["index", "--data", p(&data), "--run", p(&run), "--out", p(&index)]);

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_derm"))
        .args([
            "serve",
            "--port",
            &port.to_string(),
            "--manifest",
            p(&data.join(MANIFEST_FILE)),
            "--weights",
            p(&run.join("weights.bin")),
            "--model",
            p(&run.join("model.kv")),
            "--index",
            p(&index),
            "--annotations",
            p(&tmp.path().join("groups.csv")),
            "--feedback-log",
            p(&tmp.path().join("feedback.csv")),
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let reply = loop {
        if let Some(r) = http_get(port, "/api/samples?limit=2") {
            break r;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "service did not come up");
        std::thread::sleep(Duration::from_millis(100));
    };
    let groups = http_get(port, "/api/groups");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"total\":24"), "{reply}");
    assert!(groups.unwrap().contains("{\"sets\":[]}"));
    assert!(tmp.path().join("groups.csv").is_file());
}
