use std::path::Path;
use std::process::{Command, Output};

fn dfcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfcr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).expect("utf-8 stderr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SUBCOMMANDS: [(&str, &[&str]); 7] = [
    ("gen-data", &["--out", "--regular", "--curved", "--tilted", "--seed", "--charset", "--min-len", "--max-len", "--canvas"]),
    (
        "train",
        &[
            "--data", "--eval-data", "--out", "--eval-every", "--quiet", "--dry-run", "--preset", "--config", "--seed",
            "--deform", "--residual", "--no-residual", "--input", "--lr", "--batch-size", "--steps", "--epochs",
            "--momentum", "--set",
        ],
    ),
    ("eval", &["--checkpoint", "--data", "--batch", "--predictions"]),
    ("gradcheck", &["--instances", "--seed", "--tolerance", "--model-tolerance", "--skip-model"]),
    ("ablate", &["--grid", "--out", "--train-size", "--test-size", "--min-len", "--max-len", "--steps", "--deform", "--config"]),
    ("trace", &["--checkpoint", "--image", "--text", "--distortion", "--layer", "--channel", "--row", "--col", "--levels", "--out"]),
    ("ctc-oracle", &["--instances", "--seed", "--max-frames", "--max-symbols", "--max-label", "--tolerance"]),
];

#[test]
fn every_subcommand_help_exits_zero_and_lists_flags() {
    let top = dfcr(&["--help"]);
    assert_eq!(code(&top), 0);
    for (cmd, flags) in SUBCOMMANDS {
        assert!(stdout(&top).contains(cmd), "top-level help misses {cmd}");
        let o = dfcr(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd} --help");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help misses {f}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["bogus"][..],
        &["gen-data"],
        &["gen-data", "--out", "x", "--frobnicate"],
        &["train"],
        &["eval", "--data", "d"],
        &["ctc-oracle", "--instances", "many"],
        &["train", "--data", "d", "--deform", "2,5"],
        &["train", "--data", "d", "--input", "200by64"],
        &["train", "--data", "d", "--residual", "--no-residual"],
        &["train", "--data", "d", "--set", "nonsense=1"],
    ] {
        let o = dfcr(args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
}

#[test]
fn runtime_failures_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = dfcr(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", "nowhere"]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));
    let o = dfcr(&["train", "--data", dir.path().join("none").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_count_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = dfcr(&["gen-data", "--out", out.to_str().unwrap(), "--regular", "10", "--curved", "10", "--tilted", "10", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let images = std::fs::read_dir(out.join("images")).unwrap().count();
    assert_eq!(images, 30);
    let manifest = std::fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 30);
    for tag in ["regular", "curved", "tilted"] {
        assert_eq!(manifest.lines().filter(|l| l.ends_with(tag)).count(), 10);
    }
}

fn gen(dir: &Path, name: &str, n: &str, seed: &str) -> String {
    let out = dir.join(name);
    let o = dfcr(&[
        "gen-data", "--out", out.to_str().unwrap(), "--regular", n, "--curved", n, "--tilted", n, "--seed", seed,
        "--charset", "012", "--max-len", "3", "--canvas", "64x32",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.to_str().unwrap().to_string()
}

#[test]
fn train_eval_trace_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train", "8", "1");
    let test = gen(dir.path(), "test", "3", "2");
    let run = dir.path().join("run");
    let o = dfcr(&[
        "train", "--data", &train, "--eval-data", &test, "--out", run.to_str().unwrap(), "--preset", "tiny",
        "--steps", "12", "--batch-size", "4", "--seed", "5", "-q",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("overall"));
    for f in ["final.ckpt", "loss.csv", "settings.cfg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 13);

    let ckpt = run.join("final.ckpt");
    let preds = dir.path().join("preds.csv");
    let o = dfcr(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &test, "--predictions", preds.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for tag in ["regular", "curved", "tilted", "overall"] {
        assert!(stdout(&o).contains(tag));
    }
    let rows = std::fs::read_to_string(&preds).unwrap();
    assert!(rows.starts_with("index,tag,truth,predicted,edit_distance\n"));
    assert_eq!(rows.lines().count(), 1 + 9);

    let trace = dir.path().join("trace.csv");
    let o = dfcr(&["trace", "--checkpoint", ckpt.to_str().unwrap(), "--out", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("layer,tap,row,col\n"));
    // two levels of 3x3 taps
    assert_eq!(csv.lines().count(), 1 + 9 + 81);

    let image = Path::new(&train).join("images").join("000000.pgm");
    let o = dfcr(&["trace", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--levels", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 9);
}

#[test]
fn gradcheck_and_oracle_pass() {
    let o = dfcr(&["gradcheck", "--instances", "1", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for op in ["conv2d", "deform_conv2d", "ctc_loss", "model"] {
        assert!(text.lines().any(|l| l.starts_with("PASS") && l.contains(op)), "{op}\n{text}");
    }
    let o = dfcr(&["ctc-oracle", "--instances", "50", "--seed", "9"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("PASS"));
    // an impossible tolerance turns the same check into a failure
    let o = dfcr(&["ctc-oracle", "--instances", "5", "--tolerance", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).starts_with("FAIL"));
}

fn merged(extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "unused", "--dry-run"];
    args.extend_from_slice(extra);
    let o = dfcr(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    stdout(&o)
}

fn value_of(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing in\n{text}"))
        .to_string()
}

#[test]
fn flag_over_file_over_defaults_per_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let cases: [(&str, &str, &[&str], &str); 9] = [
        ("learning_rate", "0.1", &["--lr", "0.3"], "0.3"),
        ("batch_size", "7", &["--batch-size", "9"], "9"),
        ("steps", "11", &["--steps", "13"], "13"),
        ("epochs", "2", &["--epochs", "3"], "3"),
        ("momentum", "0.5", &["--momentum", "0.25"], "0.25"),
        ("seed", "21", &["--seed", "22"], "22"),
        ("deformable_set", "3", &["--deform", "4,5"], "4,5"),
        ("use_residual", "false", &["--residual"], "true"),
        ("input_size", "100x32", &["--input", "200x64"], "200x64"),
    ];
    let defaults = merged(&[]);
    for (key, file_value, flag, flag_value) in cases {
        std::fs::write(&cfg, format!("# {key}\n{key} = {file_value}\n")).unwrap();
        let from_file = merged(&["--config", cfg.to_str().unwrap()]);
        assert_eq!(value_of(&from_file, key), file_value, "file sets {key}");
        let mut args = vec!["--config", cfg.to_str().unwrap()];
        args.extend_from_slice(flag);
        let from_flag = merged(&args);
        assert_eq!(value_of(&from_flag, key), flag_value, "flag overrides {key}");
        assert_ne!(value_of(&defaults, key), file_value, "default of {key} must differ for the test to bite");
        // keys the file does not mention keep their defaults
        for other in ["clip_norm", "hidden", "charset"] {
            assert_eq!(value_of(&from_file, other), value_of(&defaults, other));
        }
    }
}

#[test]
fn config_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "# comment\n\ndeformable_set = 2,5\n").unwrap();
    let o = dfcr(&["train", "--data", "d", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3") && stderr(&o).contains("{3,4,5}"), "{}", stderr(&o));
    std::fs::write(&cfg, "steps = 3\nwhat is this\n").unwrap();
    let o = dfcr(&["train", "--data", "d", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    std::fs::write(&cfg, "").unwrap();
    assert_eq!(merged(&["--config", cfg.to_str().unwrap()]), merged(&[]));
    std::fs::write(&cfg, "learning_rate = 0.00005\n").unwrap();
    let text = merged(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(value_of(&text, "learning_rate"), "0.00005");
    assert_eq!(value_of(&merged(&["--preset", "full"]), "learning_rate"), "0.00005");
}
