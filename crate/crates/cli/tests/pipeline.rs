use std::path::Path;
use std::process::{Command, Output};

fn latentcf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentcf"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = latentcf(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_flags_and_subcommands_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!latentcf(dir.path(), &["bogus"]).status.success());
    let out = latentcf(dir.path(), &["gen-data", "--out", "d.jsonl", "--frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--frobnicate"));
    assert!(!latentcf(dir.path(), &["report", "missing-dir"]).status.success());
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"env": "cartpole", "seed": 5, "episodes": 20, "corruption_pairs": 30,
            "schedule": {"epochs": 3}, "elbo": {"n_real": 20, "n_random": 20, "n_steps": 3}}"#,
    )
    .unwrap();
    ok(d, &["gen-data", "--config", "cfg.json", "--agent-episodes", "60", "--out", "d.jsonl"]);
    assert!(d.join("d.jsonl.manifest.json").exists());
    ok(d, &["train", "--config", "cfg.json", "--data", "d.jsonl", "--out", "m.ckpt", "--recon-only"]);
    assert!(d.join("m.recon.ckpt").exists());
    assert!(d.join("m.ckpt.losses.csv").exists());

    let table = ok(
        d,
        &["eval", "--config", "cfg.json", "--model", "m.ckpt", "--recon", "m.recon.ckpt", "--queries-per-cell", "4", "--out", "rep"],
    );
    assert!(table.contains("Gradient (no adj.) [recon-only]"));
    for f in ["report.json", "summary.csv", "records.csv", "cdf.csv", "threshold.json", "elbo.csv", "manifest.json"] {
        assert!(d.join("rep").join(f).exists(), "{f}");
    }
    let again = ok(d, &["report", "rep"]);
    assert!(again.contains("NUN"));

    let frame = {
        let page = ok(d, &["query", "--model", "m.ckpt", "--frame", "0", "--variable", "value", "--sign", "-1", "--epsilon", "0.1", "--method", "nun"]);
        let v: serde_json::Value = serde_json::from_str(&page).unwrap();
        assert_eq!(v["method"], "nun");
        assert_eq!(v["outcome_source"], "stored");
        v["frame_id"].as_u64().unwrap()
    };
    assert_eq!(frame, 0);
    ok(
        d,
        &["query", "--model", "m.ckpt", "--frame", "1", "--variable", "value", "--sign", "+1", "--epsilon", "0.1", "--no-adjust", "--out", "q.json"],
    );
    let q: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("q.json")).unwrap()).unwrap();
    assert_eq!(q["method"], "gradient");
    assert!(d.join("q.json.manifest.json").exists());

    // A report edited after the fact is refused.
    let rp = d.join("rep").join("report.json");
    let mut bytes = std::fs::read(&rp).unwrap();
    bytes.push(b'\n');
    std::fs::write(&rp, bytes).unwrap();
    let out = latentcf(d, &["report", "rep"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}
