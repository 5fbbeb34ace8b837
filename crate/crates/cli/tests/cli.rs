use std::io::BufReader;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use bloop::cache::BigramCache;
use bloop::model::protocol::{serve, EchoModel};
use bloop::text::Vocabulary;
use serde_json::Value;

const ENV_KEYS: [&str; 17] = [
    "BLOOP_CONFIG",
    "BLOOP_ALPHA",
    "BLOOP_BEAM_WIDTH",
    "BLOOP_VARIANT",
    "BLOOP_NO_PROMOTION",
    "BLOOP_STOP_STRING",
    "BLOOP_MAX_NEW_TOKENS",
    "BLOOP_LENGTH_PENALTY",
    "BLOOP_BACKEND",
    "BLOOP_TEMPLATE_FILE",
    "BLOOP_CONTEXT_BUDGET",
    "BLOOP_DENSE",
    "BLOOP_NGRAM_ORDER",
    "BLOOP_NGRAM_DELTA",
    "BLOOP_JOBS",
    "BLOOP_SEED",
    "BLOOP_STEM",
];

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn bloop_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bloop"));
    for k in ENV_KEYS {
        cmd.env_remove(k);
    }
    cmd.args(args).envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn bloop(args: &[&str]) -> Output {
    bloop_env(args, &[])
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn jsonl(bytes: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const FAST: [&str; 4] = ["--max-new-tokens", "24", "--beam-width", "3"];

fn summarize(dataset: &Path, extra: &[&str]) -> Vec<u8> {
    let mut args = vec!["summarize", s(dataset)];
    args.extend_from_slice(&FAST);
    args.extend_from_slice(extra);
    ok(bloop(&args)).stdout
}

#[test]
fn build_cache_dog_example_and_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dog.txt");
    std::fs::write(&input, "This dog's certainly not setting a good example").unwrap();
    let out = dir.path().join("dog.cache.json");
    ok(bloop(&["build-cache", s(&input), s(&out)]));
    let cache = BigramCache::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let vocab = Vocabulary::read_from(&std::fs::read(dir.path().join("dog.cache.json.vocab")).unwrap()[..]).unwrap();
    let good = vocab.id("good").unwrap();
    assert_eq!(cache.followers(good).ids(), &[vocab.id("example").unwrap()]);

    let bin = dir.path().join("dog.bin");
    ok(bloop(&["build-cache", s(&input), s(&bin), "--format", "binary"]));
    assert_eq!(BigramCache::read_binary(&std::fs::read(&bin).unwrap()[..]).unwrap(), cache);

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("empty.json");
    ok(bloop(&["build-cache", s(&empty), s(&out)]));
    let cache = BigramCache::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(cache.is_empty());
}

#[test]
fn build_cache_over_large_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("big.jsonl");
    let words = ["river", "council", "storm", "bridge", "market", "school", "rain", "team"];
    let mut text = String::new();
    for i in 0..1000 {
        let src: Vec<&str> = (0..12).map(|j| words[(i * 7 + j * j) % words.len()]).collect();
        text += &serde_json::json!({"id": format!("n{i}"), "source": src.join(" ") + "."}).to_string();
        text.push('\n');
    }
    std::fs::write(&data, text).unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(bloop(&["build-cache", s(&data), s(&a)]));
    ok(bloop(&["build-cache", s(&data), s(&b)]));
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 1000);
    assert_eq!(
        std::fs::read(dir.path().join("a.jsonl.vocab")).unwrap(),
        std::fs::read(dir.path().join("b.jsonl.vocab")).unwrap()
    );
}

#[test]
fn summarize_is_deterministic_across_runs_and_jobs() {
    let corpus = fixture("corpus.jsonl");
    let a = summarize(&corpus, &[]);
    assert_eq!(a, summarize(&corpus, &[]));
    assert_eq!(a, summarize(&corpus, &["--jobs", "4"]));
    let rows = jsonl(&a);
    assert_eq!(rows.len(), 50);
    for r in &rows {
        assert!(r["prediction"].is_string());
        assert!(r["hit_rate"].as_f64().is_some_and(|h| (0.0..=1.0).contains(&h)));
    }
}

#[test]
fn zero_alpha_equals_disabled_promotion() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("corpus.jsonl");
    let (ta, tb) = (dir.path().join("a.trace"), dir.path().join("b.trace"));
    let a = summarize(&corpus, &["--alpha", "0", "--trace-output", s(&ta)]);
    let b = summarize(&corpus, &["--no-promotion", "--trace-output", s(&tb)]);
    assert_eq!(a, b);
    assert_eq!(std::fs::read(ta).unwrap(), std::fs::read(tb).unwrap());
}

#[test]
fn golden_predictions() {
    let got = summarize(&fixture("corpus.jsonl"), &["--alpha", "4"]);
    let want = std::fs::read(fixture("golden_predictions.jsonl")).unwrap();
    assert!(got == want, "predictions drifted from the frozen golden file");
}

#[test]
fn evaluate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.jsonl");
    std::fs::write(
        &preds,
        concat!(
            r#"{"id":"a","source":"the cat sat on a mat","reference":"the cat","prediction":"the cat sat"}"#,
            "\n",
            r#"{"id":"b","source":"x y","reference":"same words","prediction":"same words"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = ok(bloop(&["evaluate", s(&preds)]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["rouge1"].as_f64().unwrap() - 0.9).abs() < 1e-9);
    assert!(report["bartscore_prob"].is_null());

    let scores = dir.path().join("s.jsonl");
    std::fs::write(&scores, "{\"id\":\"a\",\"bartscore\":0}\n{\"id\":\"b\",\"bartscore\":0}\n").unwrap();
    let out = ok(bloop(&["evaluate", s(&preds), "--scores", s(&scores)]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["bartscore_prob"].as_f64(), Some(1.0));

    // predictions identical to references
    let corpus = std::fs::read_to_string(fixture("corpus.jsonl")).unwrap();
    let same: String = jsonl(corpus.as_bytes())
        .into_iter()
        .map(|mut r| {
            r["prediction"] = r["reference"].clone();
            r.to_string() + "\n"
        })
        .collect();
    std::fs::write(&preds, same).unwrap();
    let report: Value = serde_json::from_slice(&ok(bloop(&["evaluate", s(&preds)])).stdout).unwrap();
    for k in ["rouge1", "rouge2", "rougeL"] {
        assert_eq!(report[k].as_f64(), Some(1.0), "{k}");
    }
}

#[test]
fn compare_reports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("corpus.jsonl");
    let base = dir.path().join("base.jsonl");
    std::fs::write(&base, summarize(&corpus, &["--alpha", "0"])).unwrap();
    let out = ok(bloop(&["compare", s(&base), s(&base)]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = report.to_string();
    assert!(text.contains("\"degenerate\":true") && !text.contains("\"degenerate\":false"));

    let promoted = dir.path().join("promoted.jsonl");
    std::fs::write(&promoted, summarize(&corpus, &["--alpha", "4"])).unwrap();
    let out = ok(bloop(&["compare", s(&base), s(&promoted)]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.to_string().contains("rougeL"));
}

#[test]
fn tune_writes_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("grid.csv");
    let corpus = fixture("corpus.jsonl");
    let args = [
        "tune",
        s(&corpus),
        "--alphas",
        "-2,0,4",
        "--beam-widths",
        "1,3",
        "--subset-fraction",
        "0.2",
        "--max-new-tokens",
        "16",
        "--seed",
        "5",
        "--output-csv",
        s(&csv),
    ];
    let a = ok(bloop(&args)).stdout;
    let first_csv = std::fs::read(&csv).unwrap();
    assert_eq!(a, ok(bloop(&args)).stdout);
    assert_eq!(first_csv, std::fs::read(&csv).unwrap());
    let table: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(table["cells"].as_array().unwrap().len(), 6);
    assert_eq!(table["subset"].as_array().unwrap().len(), 10);
    assert_eq!(String::from_utf8(first_csv).unwrap().lines().count(), 7);
}

#[test]
fn settings_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("corpus.jsonl");
    let conf = dir.path().join("bloop.toml");
    std::fs::write(&conf, "alpha = 4.0\nmax_new_tokens = 24\nbeam_width = 3\n").unwrap();
    let zero = summarize(&corpus, &["--alpha", "0"]);
    let four = summarize(&corpus, &["--alpha", "4"]);
    assert_ne!(zero, four);
    let run = |args: &[&str], env: &[(&str, &str)]| {
        let mut full = vec!["summarize", s(&corpus)];
        full.extend_from_slice(args);
        ok(bloop_env(&full, env)).stdout
    };
    // file beats environment, flag beats file
    assert_eq!(run(&["--config", s(&conf)], &[("BLOOP_ALPHA", "0")]), four);
    assert_eq!(run(&["--config", s(&conf), "--alpha", "0"], &[]), zero);
    assert_eq!(run(&[], &[("BLOOP_CONFIG", s(&conf))]), four);
    assert_eq!(run(&FAST, &[("BLOOP_ALPHA", "0")]), zero);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("corpus.jsonl");
    let c = s(&corpus);

    assert_eq!(code(&bloop(&["--help"])), 0);
    for usage in [
        vec!["summarize", c, "--frobnicate"],
        vec!["summarize", c, "--beam-width", "0"],
        vec!["summarize", c, "--backend", "carrier-pigeon"],
        vec!["tune", c, "--objective", "vibes"],
        vec![],
    ] {
        assert_eq!(code(&bloop(&usage)), 1, "{usage:?}");
    }
    let bad_conf = dir.path().join("bad.toml");
    std::fs::write(&bad_conf, "colour = 3\n").unwrap();
    assert_eq!(code(&bloop(&["summarize", c, "--config", s(&bad_conf)])), 1);
    assert_eq!(code(&bloop_env(&["summarize", c], &[("BLOOP_ALPHA", "lots")])), 1);

    let missing = dir.path().join("missing.jsonl");
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\":1,\"source\":\"ok\"}\n{nope\n").unwrap();
    let sourceless = dir.path().join("sourceless.jsonl");
    std::fs::write(&sourceless, "{\"id\":1,\"text\":\"ok\"}\n").unwrap();
    for data in [&missing, &broken, &sourceless] {
        let out = bloop(&["summarize", s(data)]);
        assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = bloop(&["summarize", s(&broken)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.jsonl:2:"));

    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = closed.local_addr().unwrap().to_string();
    drop(closed);
    let backend = format!("bridge:{addr}");
    assert_eq!(code(&bloop(&["summarize", c, "--backend", &backend])), 3);
}

#[test]
fn summarize_through_bridge_peer() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let mut model = EchoModel::new(256);
        model.newline_token_ids = vec![10];
        model.context_limit = Some(400);
        let (stream, _) = listener.accept().unwrap();
        let _ = serve(&model, BufReader::new(stream.try_clone().unwrap()), stream);
    });
    let backend = format!("bridge:{addr}");
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.jsonl");
    let out = ok(bloop(&[
        "summarize",
        s(&fixture("corpus.jsonl")),
        "--backend",
        &backend,
        "--max-new-tokens",
        "6",
        "--beam-width",
        "2",
        "--trace-output",
        s(&traces),
    ]));
    let rows = jsonl(&out.stdout);
    assert_eq!(rows.len(), 50);
    for r in &rows {
        assert!(r["prediction"].is_null());
        assert!(!r["prediction_ids"].as_array().unwrap().is_empty());
    }
    let traces = jsonl(&std::fs::read(traces).unwrap());
    // sources longer than half the 400-token window are shortened
    assert!(traces.iter().any(|t| t["source_truncated"] == Value::Bool(true)));
}
