use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blockshare"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a tiny config into `dir` and returns its path.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "# tiny model for smoke tests\n\
         seed = 4\n\
         n_layers = 4\nd_model = 16\nn_heads = 2\nd_ff = 32\nvocab_size = 16\nmax_seq_len = 32\n\
         train_tokens = 4000\nvalid_tokens = 800\n\
         steps = 20   # base steps\n\
         batch_size = 4\nseq_len = 16\ncalib_seqs = 8\n\
         prune_ratio = 0.5\nrank = 2\nfinetune_steps = 10\ndecode_tokens = 12\n",
    )
    .unwrap();
    path
}

fn train_base(dir: &Path, cfg: &Path) -> PathBuf {
    let ckpt = dir.join("base.ckpt");
    let out = run(&["train-base", "--config", p(cfg), "--out", p(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["eval"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("x.ckpt");
    let bad_key = run(&["train-base", "--config", p(&cfg), "--set", "bogus=1", "--out", p(&ckpt)]);
    assert_eq!(code(&bad_key), 1);
    let bad_value = run(&["train-base", "--config", p(&cfg), "--set", "prune_ratio=1.5", "--out", p(&ckpt)]);
    assert_eq!(code(&bad_value), 1);
    let no_equals = run(&["train-base", "--config", p(&cfg), "--set", "steps", "--out", p(&ckpt)]);
    assert_eq!(code(&no_equals), 1);
    assert!(!ckpt.exists());
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(code(&run(&["eval", "--config", p(&cfg), "--ckpt", p(&missing)])), 2);
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"definitely not a model").unwrap();
    assert_eq!(code(&run(&["eval", "--config", p(&cfg), "--ckpt", p(&garbage)])), 2);
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn prune_and_recover_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let base = train_base(d, &cfg);
    assert!(d.join("base.loss.csv").exists());

    let eval = |ckpt: &Path| -> f64 {
        let out = run(&["eval", "--config", p(&cfg), "--ckpt", p(ckpt)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap().trim().parse().unwrap()
    };
    let base_ppl = eval(&base);
    assert!(base_ppl.is_finite() && base_ppl > 1.0);
    // evaluation of a reloaded checkpoint is reproducible to the bit
    assert_eq!(base_ppl.to_bits(), eval(&base).to_bits());

    let bi = d.join("bi.csv");
    assert_eq!(code(&run(&["bi-score", "--config", p(&cfg), "--ckpt", p(&base), "--out", p(&bi)])), 0);
    let sel_dir = d.join("sel");
    let out = run(&[
        "select-bases", "--config", p(&cfg), "--ckpt", p(&base), "--bi", p(&bi), "--out", p(&sel_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
    for name in ["selection.json", "distances_proposed.csv", "distances_no-hrp.csv", "distances_frobenius.csv"] {
        assert!(sel_dir.join(name).exists(), "{name}");
    }

    let pruned = d.join("pruned.ckpt");
    let selection = sel_dir.join("selection.json");
    let out = run(&["prune", "--config", p(&cfg), "--ckpt", p(&base), "--selection", p(&selection), "--out", p(&pruned)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let zero = d.join("zero.ckpt");
    let deleted = d.join("deleted.ckpt");
    assert_eq!(
        code(&run(&[
            "prune", "--config", p(&cfg), "--ckpt", p(&base), "--selection", p(&selection), "--gamma-init", "0", "--out",
            p(&zero),
        ])),
        0
    );
    assert_eq!(
        code(&run(&[
            "prune", "--config", p(&cfg), "--ckpt", p(&base), "--selection", p(&selection), "--delete-only", "--out",
            p(&deleted),
        ])),
        0
    );
    // zero gain makes the replaced blocks identities
    assert!((eval(&zero) - eval(&deleted)).abs() <= 1e-9 * eval(&deleted));

    let tuned = d.join("tuned.ckpt");
    let out = run(&["finetune", "--config", p(&cfg), "--ckpt", p(&pruned), "--steps", "5", "--out", p(&tuned)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // header, the step-0 evaluation and five steps
    assert_eq!(fs::read_to_string(d.join("tuned.loss.csv")).unwrap().lines().count(), 7);

    let prompt = d.join("prompt.bin");
    fs::write(&prompt, [1u32, 5, 3].iter().flat_map(|t| t.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
    let decode = |mode: &str| -> serde_json::Value {
        let path = d.join(format!("{mode}.json"));
        let out = run(&[
            "decode", "--config", p(&cfg), "--ckpt", p(&tuned), "--prompt-file", p(&prompt), "--mode", mode, "--out", p(&path),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
    };
    let (greedy, spec) = (decode("greedy"), decode("spec"));
    assert_eq!(greedy["generated"], spec["generated"]);
    assert_eq!(spec["generated"].as_array().unwrap().len(), 12);

    let ext = d.join("ext.ckpt");
    let out = run(&[
        "extend", "--config", p(&cfg), "--ckpt", p(&base), "--range", "1", "2", "--repeats", "2", "--gamma-init", "0",
        "--out", p(&ext),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!((eval(&ext) - base_ppl).abs() <= 1e-9 * base_ppl);
}

#[test]
fn ablation_writes_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let base = train_base(d, &cfg);
    let out_dir = d.join("abl");
    let out = run(&["ablate", "--config", p(&cfg), "--suite", "table4", "--ckpt", p(&base), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("table4.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows.iter().zip(["full", "no-high-rank-prune", "no-output-norm", "no-svd-init"]) {
        assert!(row.starts_with(name), "{row}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("table4.json")).unwrap()).unwrap();
    assert_eq!(json["delete_only"]["variant"], "delete-only");
}

#[test]
fn flags_override_config_and_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let snapshot = |sub: &str| {
        let out_dir = d.join(sub);
        let out = run(&["run", "--config", p(&cfg), "--set", "finetune_steps=4", "--out", p(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        (files, String::from_utf8(out.stdout).unwrap())
    };
    let (a, stdout_a) = snapshot("a");
    let (b, stdout_b) = snapshot("b");
    assert!(!a.is_empty());
    assert_eq!(stdout_a, stdout_b);
    // the rendered config records the output directory, everything else matches
    for ((na, fa), (nb, fb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        if na == "config.txt" {
            let text = String::from_utf8_lossy(fa);
            assert!(text.contains("finetune_steps = 4"), "{text}");
        } else {
            assert_eq!(fa, fb, "{na} differs");
        }
    }
}
