use std::path::Path;
use std::process::Command;

use docre_core::corpus::{parse_corpus_with, PairPrediction};
use docre_core::rel_head::predict;
use docre_core::Model;
use tempfile::TempDir;

fn run(args: &[&str]) -> Result<String, docre_cli::CliError> {
    let mut out = Vec::new();
    docre_cli::run(std::iter::once("docre").chain(args.iter().copied()), &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    run(args).unwrap_or_else(|e| panic!("{args:?}: {}", e.line()))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn bytes(path: &str) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

/// Synthetic corpus split into train.json / dev.json plus its lexicon.
fn corpus(dir: &Path, n_docs: usize) {
    ok(&["synth", "--output", &p(dir, "all.json"), "--n-docs", &n_docs.to_string(), "--seed", "5"]);
    let all: Vec<serde_json::Value> = serde_json::from_slice(&bytes(&p(dir, "all.json"))).unwrap();
    let cut = n_docs * 4 / 5;
    std::fs::write(dir.join("train.json"), serde_json::to_string(&all[..cut]).unwrap()).unwrap();
    std::fs::write(dir.join("dev.json"), serde_json::to_string(&all[cut..]).unwrap()).unwrap();
}

const TINY: [&str; 8] = ["--d-model", "8", "--heads", "2", "--d-ff", "8", "--layers", "1"];

fn train_tiny(dir: &Path, ck: &str, log: &str, extra: &[&str]) -> String {
    let (train, dev, ck, log) = (p(dir, "train.json"), p(dir, "dev.json"), p(dir, ck), p(dir, log));
    let mut args = vec!["train", "--input", &train, "--dev", &dev, "--checkpoint", &ck, "--log", &log, "--max-epochs", "2"];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(dir.path(), "a.json"), p(dir.path(), "b.json"));
    ok(&["synth", "--n-docs", "10", "--seed", "7", "--output", &a]);
    ok(&["synth", "--n-docs", "10", "--seed", "7", "--output", &b]);
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&p(dir.path(), "a.lexicon.json")), bytes(&p(dir.path(), "b.lexicon.json")));
    ok(&["synth", "--n-docs", "10", "--seed", "8", "--output", &b]);
    assert_ne!(bytes(&a), bytes(&b));
}

#[test]
fn validate_counts_documents() {
    let dir = TempDir::new().unwrap();
    corpus(dir.path(), 20);
    let text = ok(&["validate", "--input", &p(dir.path(), "all.json")]);
    assert_eq!(text.lines().next(), Some("20 documents OK"));
    let err = run(&["validate", "--input", &p(dir.path(), "all.json"), "--max-len", "5"]).unwrap_err();
    assert_eq!(err.kind(), "schema");
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let dir = TempDir::new().unwrap();
    corpus(dir.path(), 20);
    let gold = p(dir.path(), "all.json");
    let report = p(dir.path(), "report.json");
    ok(&["eval", "--input", &gold, "--predictions", &gold, "--output", &report]);
    let v: serde_json::Value = serde_json::from_slice(&bytes(&report)).unwrap();
    for key in ["f1", "intra_f1", "inter_f1", "evi_f1", "pos_evi_f1"] {
        assert_eq!(v[key]["f1"], 1.0, "{key}");
    }
}

#[test]
fn nopseudo_inference_equals_plain_scoring() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    corpus(d, 20);
    train_tiny(d, "m.ck", "log.jsonl", &[]);
    let out = p(d, "pred.json");
    ok(&["infer", "--input", &p(d, "dev.json"), "--checkpoint", &p(d, "m.ck"), "--output", &out, "--mode", "nopseudo"]);
    let model = Model::load(bytes(&p(d, "m.ck")).as_slice()).unwrap();
    let annotated = parse_corpus_with(&bytes(&out), &model.relations).unwrap();
    for (doc, ann) in &annotated {
        let s = model.score_doc(doc, false).unwrap();
        let mut want = Vec::new();
        for (&(h, t), sc) in s.pairs.iter().zip(&s.scores) {
            for r in predict(&sc.scores) {
                want.push(PairPrediction { h, t, r: model.relations.name(r).to_string(), score: sc.scores[r] });
            }
        }
        assert_eq!(ann.predictions.as_ref().unwrap(), &want);
    }
    // The evidence source does not touch document-only predictions.
    let rules = p(d, "pred_rules.json");
    let lex = format!("lexicon:{}", p(d, "all.lexicon.json"));
    ok(&[
        "infer", "--input", &p(d, "dev.json"), "--checkpoint", &p(d, "m.ck"), "--output", &rules, "--mode", "nopseudo",
        "--evidence-source", "rules", "--coref", &lex,
    ]);
    let other = parse_corpus_with(&bytes(&rules), &model.relations).unwrap();
    for (a, b) in annotated.iter().zip(&other) {
        assert_eq!(a.1.predictions, b.1.predictions);
    }
}

#[test]
fn every_subcommand_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    corpus(d, 20);
    let lex = format!("lexicon:{}", p(d, "all.lexicon.json"));
    let all = p(d, "all.json");
    let dev = p(d, "dev.json");
    let twice = |args: &dyn Fn(&str) -> Vec<String>, files: &[&str]| {
        let mut seen: Vec<(String, Vec<Vec<u8>>)> = Vec::new();
        for tag in ["a", "b"] {
            let v = args(tag);
            let text = ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
            let text = text.replace(&format!("_{tag}."), "_x.");
            seen.push((text, files.iter().map(|f| bytes(&p(d, &f.replace("{}", tag)))).collect()));
        }
        assert_eq!(seen[0], seen[1], "{:?}", args("a"));
    };
    twice(&|_| vec!["validate".into(), "--input".into(), all.clone()], &[]);
    twice(&|t| vec!["rules".into(), "--input".into(), all.clone(), "--coref".into(), lex.clone(), "--output".into(), p(d, &format!("silver_{t}.json"))], &["silver_{}.json"]);
    twice(&|t| vec!["report".into(), "--input".into(), all.clone(), "--output".into(), p(d, &format!("rep_{t}.json"))], &["rep_{}.json"]);
    for tag in ["a", "b"] {
        train_tiny(d, &format!("m_{tag}.ck"), &format!("log_{tag}.jsonl"), &["--seed", "3"]);
    }
    assert_eq!(bytes(&p(d, "m_a.ck")), bytes(&p(d, "m_b.ck")));
    assert_eq!(bytes(&p(d, "log_a.jsonl")), bytes(&p(d, "log_b.jsonl")));
    let ck = p(d, "m_a.ck");
    let tuned = |t: &str| p(d, &format!("t_{t}.ck"));
    twice(
        &|t| ["tune-tau", "--input", &dev, "--checkpoint", &ck, "--output", &tuned(t), "--evidence-source", "rules", "--coref", &lex].map(String::from).to_vec(),
        &["t_{}.ck"],
    );
    twice(
        &|t| ["infer", "--input", &dev, "--checkpoint", &tuned("a"), "--output", &p(d, &format!("i_{t}.json"))].map(String::from).to_vec(),
        &["i_{}.json"],
    );
    twice(
        &|t| ["eval", "--input", &dev, "--predictions", &p(d, "i_a.json"), "--output", &p(d, &format!("e_{t}.json"))].map(String::from).to_vec(),
        &["e_{}.json"],
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    corpus(d, 20);
    let cfg = p(d, "run.json");
    std::fs::write(&cfg, r#"{"seed": 4, "train": {"max_epochs": 1, "patience": 9}, "encoder": {"d_model": 8, "n_heads": 2, "d_ff": 8, "n_layers": 1}}"#).unwrap();
    let (train, dev, ck, log) = (p(d, "train.json"), p(d, "dev.json"), p(d, "m.ck"), p(d, "log.jsonl"));
    ok(&["--config", &cfg, "train", "--input", &train, "--dev", &dev, "--checkpoint", &ck, "--log", &log]);
    assert_eq!(String::from_utf8(bytes(&log)).unwrap().lines().count(), 1);
    ok(&["--config", &cfg, "train", "--input", &train, "--dev", &dev, "--checkpoint", &ck, "--log", &log, "--max-epochs", "2"]);
    assert_eq!(String::from_utf8(bytes(&log)).unwrap().lines().count(), 2);
    let model = Model::load(bytes(&ck).as_slice()).unwrap();
    assert_eq!((model.config.d_model, model.config.seed), (8, 4));

    std::fs::write(&cfg, r#"{"train": {"max_epoch": 1}}"#).unwrap();
    let err = run(&["--config", &cfg, "train", "--input", &train, "--dev", &dev, "--checkpoint", &ck]).unwrap_err();
    assert_eq!(err.kind(), "config");
    std::fs::write(&cfg, r#"{"colour": "red"}"#).unwrap();
    assert_eq!(run(&["--config", &cfg, "validate", "--input", &train]).unwrap_err().kind(), "config");
}

#[test]
fn configuration_conflicts_are_reported() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    corpus(d, 20);
    train_tiny(d, "nj.ck", "log.jsonl", &["--no-joint"]);
    let (dev, ck, out) = (p(d, "dev.json"), p(d, "nj.ck"), p(d, "o.json"));
    let err = run(&["infer", "--input", &dev, "--checkpoint", &ck, "--output", &out, "--evidence-source", "model", "--tau", "0"]).unwrap_err();
    assert_eq!(err.kind(), "config");
    let err = run(&["infer", "--input", &dev, "--checkpoint", &ck, "--output", &out]).unwrap_err();
    assert!(err.to_string().contains("tune-tau"), "{err}");
    let err = run(&["infer", "--input", &dev, "--checkpoint", &ck, "--output", &out, "--mode", "fancy"]).unwrap_err();
    assert_eq!(err.kind(), "config");
    ok(&["infer", "--input", &dev, "--checkpoint", &ck, "--output", &out, "--mode", "nopseudo"]);
    let err = run(&["infer", "--input", &dev, "--checkpoint", &ck, "--output", &p(d, "missing/o.json"), "--mode", "nopseudo"]).unwrap_err();
    assert_eq!(err.kind(), "io");
}

#[test]
fn joint_training_on_unannotated_corpus_fails() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    corpus(d, 20);
    let mut train: Vec<serde_json::Value> = serde_json::from_slice(&bytes(&p(d, "train.json"))).unwrap();
    for doc in &mut train {
        for l in doc["labels"].as_array_mut().unwrap() {
            l["evidence"] = serde_json::json!([]);
        }
    }
    std::fs::write(d.join("train.json"), serde_json::to_string(&train).unwrap()).unwrap();
    let (t, dev, ck) = (p(d, "train.json"), p(d, "dev.json"), p(d, "m.ck"));
    let base = ["train", "--input", &t, "--dev", &dev, "--checkpoint", &ck, "--max-epochs", "1"];
    assert_eq!(run(&[&base[..], &TINY[..]].concat()).unwrap_err().kind(), "config");
    ok(&[&base[..], &TINY[..], &["--silver"]].concat());
}

fn binary(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_docre")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

#[test]
fn binary_reports_one_line_errors() {
    let (code, _, err) = binary(&["validate", "--input", "/nonexistent/x.json"]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[io]: /nonexistent/x.json"), "{err}");
    let (code, _, err) = binary(&["train", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[usage]: ") && err.lines().count() == 1, "{err}");
    let dir = TempDir::new().unwrap();
    let bad = p(dir.path(), "bad.json");
    std::fs::write(&bad, "[{\"title\": \"t\"}]").unwrap();
    let (code, _, err) = binary(&["validate", "--input", &bad]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[schema]: ") && err.lines().count() == 1, "{err}");
    let (code, out, _) = binary(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("tune-tau"));
}

#[test]
fn report_matches_core_histogram() {
    let dir = TempDir::new().unwrap();
    corpus(dir.path(), 20);
    let out = p(dir.path(), "r.json");
    let lex = format!("lexicon:{}", p(dir.path(), "all.lexicon.json"));
    let text = ok(&["report", "--input", &p(dir.path(), "all.json"), "--coref", &lex, "--output", &out]);
    assert!(text.contains("coverage 100.00%"), "{text}");
    let v: serde_json::Value = serde_json::from_slice(&bytes(&out)).unwrap();
    assert_eq!(v["documents"], 20);
}
