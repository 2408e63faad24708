use std::path::Path;
use std::process::{Command, Output};

fn raremem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raremem"))
        .args(args)
        .env_remove("RAREMEM_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = raremem(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    stdout(&out)
}

fn gen_small(dir: &Path, seed: &str) {
    ok(&[
        "gen-data",
        "--seed",
        seed,
        "--train-count",
        "200",
        "--test-count",
        "40",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
}

fn metric_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| l.starts_with("step=")).collect()
}

#[test]
fn gen_data_defaults_match_the_standard_corpus_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "--out-dir", out.to_str().unwrap()]);
    let count = |name: &str| {
        std::fs::read_to_string(out.join(name))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .count()
    };
    assert_eq!(count("train.txt"), 40_000);
    assert_eq!(count("test.txt"), 10_000);
    assert!(out.join("task.ltrm").exists());
}

#[test]
fn gen_data_is_deterministic_in_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen_small(&a, "11");
    gen_small(&b, "11");
    gen_small(&c, "12");
    for name in ["train.txt", "test.txt", "task.ltrm"] {
        let read = |d: &Path| std::fs::read(d.join(name)).unwrap();
        assert_eq!(read(&a), read(&b), "{name}");
        assert_ne!(read(&a), read(&c), "{name}");
    }
}

#[test]
fn zero_training_examples_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = raremem(&["gen-data", "--train-count", "0", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train-count"));
}

#[test]
fn config_file_supplies_values_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    let data = tmp.path().join("data");
    std::fs::write(&conf, format!("# small corpus\ntrain_count = 30\ntest-count=5\nout-dir={}\n", data.display())).unwrap();
    let out = raremem(&["gen-data", "--config", conf.to_str().unwrap(), "--test-count", "7"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = stderr(&out);
    assert!(log.contains("gen-data.train-count=30 (config)"));
    assert!(log.contains("gen-data.test-count=7 (flag)"));
    assert!(log.contains("gen-data.seed=0 (default)"));
    assert!(stdout(&out).contains("30 train and 7 test"));

    std::fs::write(&conf, "train-count=30\nbogus=1\n").unwrap();
    let out = raremem(&["gen-data", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "42");
    let out = Command::new(env!("CARGO_BIN_EXE_raremem"))
        .args(["gen-data", "--train-count", "200", "--test-count", "40", "--out-dir", b.to_str().unwrap()])
        .env("RAREMEM_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stderr(&out).contains("gen-data.seed=42 (env)"));
    assert_eq!(std::fs::read(a.join("train.txt")).unwrap(), std::fs::read(b.join("train.txt")).unwrap());
}

#[test]
fn training_emits_one_metric_line_per_step_and_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "5");
    let d = data.to_str().unwrap();
    let train = |steps: &str, extra: &[&str]| {
        let mut args = vec![
            "train", "--data-dir", d, "--memory-size", "256", "--batch-size", "4", "--seed", "9", "--steps", steps,
        ];
        args.extend_from_slice(extra);
        ok(&args)
    };

    let full = train("30", &[]);
    let lines = metric_lines(&full);
    assert_eq!(lines.len(), 30);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields[0], format!("step={}", i + 1));
        assert!(fields[1].starts_with("loss=") && fields[2].starts_with("seq_acc=") && fields[3].starts_with("pos_acc="));
    }

    let ck = tmp.path().join("ck");
    let first = train("20", &["--checkpoint-out", ck.to_str().unwrap()]);
    for f in ["encoder.ltrm", "memory.ltrm"] {
        assert!(ck.join(f).exists());
    }
    let rest = ok(&[
        "train", "--data-dir", d, "--resume", ck.to_str().unwrap(), "--batch-size", "4", "--steps", "10",
    ]);
    let mut joined = metric_lines(&first);
    joined.extend(metric_lines(&rest));
    assert_eq!(joined, lines, "a resumed run continues the interrupted one");

    let clash = raremem(&["train", "--data-dir", d, "--resume", ck.to_str().unwrap(), "--memory-size", "512"]);
    assert_eq!(clash.status.code(), Some(2));
}

#[test]
fn both_backends_train_and_report_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "6");
    for backend in ["exact", "lsh"] {
        let ck = tmp.path().join(backend);
        let out = ok(&[
            "train",
            "--data-dir",
            data.to_str().unwrap(),
            "--memory-size",
            "512",
            "--batch-size",
            "4",
            "--steps",
            "10",
            "--backend",
            backend,
            "--checkpoint-out",
            ck.to_str().unwrap(),
        ]);
        let eval = out.lines().find(|l| l.starts_with("eval ")).expect("final evaluation");
        assert!(eval.contains(&format!("backend={backend}")) && eval.contains("digit_acc="));
        assert_eq!(ck.join("lsh.ltrm").exists(), backend == "lsh");

        let ev = ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
        assert!(eval.ends_with(ev.trim()), "eval reproduces the end-of-training numbers");
    }
}

#[test]
fn oracle_context_is_mostly_recalled_and_the_checkpoint_is_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "7");
    let ck = tmp.path().join("ck");
    ok(&[
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--memory-size",
        "4096",
        "--batch-size",
        "4",
        "--steps",
        "5",
        "--checkpoint-out",
        ck.to_str().unwrap(),
    ]);
    let before = std::fs::read(ck.join("memory.ltrm")).unwrap();
    let test = data.join("test.txt");
    let out = ok(&[
        "oneshot-eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--context-file",
        test.to_str().unwrap(),
        "--eval-file",
        test.to_str().unwrap(),
    ]);
    let field = |prefix: &str, name: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(prefix)).unwrap();
        line.split(' ')
            .find_map(|f| f.strip_prefix(name))
            .unwrap()
            .parse()
            .unwrap()
    };
    // A barely trained encoder still separates most windows once they are stored.
    assert!(field("after ", "seq_acc=") > field("before ", "seq_acc=") + 0.5);
    assert!(field("after ", "digit_acc=") >= 0.95);
    assert_eq!(std::fs::read(ck.join("memory.ltrm")).unwrap(), before);
}

#[test]
fn exact_benchmark_has_perfect_recall() {
    let out = ok(&["bench-nn", "--memory-size", "65536", "--batch", "200", "--backend", "exact"]);
    assert!(out.contains("recall@1=1.0000") && out.contains("recall@k=1.0000"), "{out}");
    let lsh = ok(&["bench-nn", "--memory-size", "4096", "--batch", "200", "--backend", "lsh", "--l", "8", "--tables", "4"]);
    assert!(lsh.contains("candidate_fraction="), "{lsh}");
}

#[test]
fn inspect_memory_prints_requested_slots() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "8");
    let ck = tmp.path().join("ck");
    ok(&[
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--memory-size",
        "128",
        "--batch-size",
        "2",
        "--steps",
        "3",
        "--checkpoint-out",
        ck.to_str().unwrap(),
    ]);
    let out = ok(&["inspect-memory", "--snapshot", ck.join("memory.ltrm").to_str().unwrap(), "--top-ages", "3"]);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("slots=128 key_size=64"));
    assert_eq!(lines.len(), 4);
    let ages: Vec<u64> = lines[1..]
        .iter()
        .map(|l| l.split(' ').nth(1).unwrap().strip_prefix("age=").unwrap().parse().unwrap())
        .collect();
    assert!(ages.windows(2).all(|w| w[0] >= w[1]));

    let one = ok(&["inspect-memory", "--snapshot", ck.to_str().unwrap(), "--slot", "5"]);
    assert!(one.lines().nth(1).unwrap().starts_with("slot=5 "));
    let bad = raremem(&["inspect-memory", "--snapshot", ck.to_str().unwrap(), "--slot", "500"]);
    assert_eq!(bad.status.code(), Some(2));
    let neither = raremem(&["inspect-memory", "--snapshot", ck.to_str().unwrap()]);
    assert_eq!(neither.status.code(), Some(2));
}

#[test]
fn loading_a_corrupt_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("memory.ltrm"), b"NOPE").unwrap();
    let out = raremem(&["inspect-memory", "--snapshot", tmp.path().to_str().unwrap(), "--top-ages", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("memory.ltrm"));
}
