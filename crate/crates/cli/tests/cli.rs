use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radiogen_cli::{EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC};

const SMALL: &str = r#"
seed = 3

[data]
input_size = 16

[model]
cnn_channels = [4, 8]
token_dim = 16
encoder_layers = 1
heads = 2
mlp_hidden = 16

[train]
epochs = 2
batch_size = 4

[eval]
permutations = 200

[synth]
n_patients = 40
planted_genes = 4
null_genes = 4
dims = [24, 24, 24]
radius_range = [3.0, 6.0]
tissue_radius_mm = 8.0
"#;

fn radiogen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radiogen"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Parse the `key=value` summary line of a successful run.
fn ok(out: Output) -> BTreeMap<String, String> {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let line = String::from_utf8(out.stdout).unwrap();
    line.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let path = root.join("run.toml");
        fs::write(&path, config).unwrap();
        Workspace {
            config: path.to_str().unwrap().to_string(),
            _dir: dir,
            root,
        }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", self.config.as_str()];
        all.extend_from_slice(args);
        radiogen(&all)
    }

    /// synth → preprocess → train, returning the cohort and checkpoint dirs.
    fn prepared(&self) -> (String, String) {
        let (raw, cohort, ck) = (self.path("raw"), self.path("cohort"), self.path("ck"));
        ok(self.run(&["synth", "--out", &raw]));
        ok(self.run(&["preprocess", "--raw", &raw, "--out", &cohort]));
        ok(self.run(&["train", "--cohort", &cohort, "--out", &ck]));
        (cohort, ck)
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_pipeline_writes_reports() {
    let ws = Workspace::new(SMALL);
    let raw = ws.path("raw");
    let synth = ok(ws.run(&["synth", "--out", &raw]));
    assert_eq!((synth["patients"].as_str(), synth["genes"].as_str()), ("40", "8"));

    let before = snapshot(Path::new(&raw));
    let cohort = ws.path("cohort");
    let pre = ok(ws.run(&["preprocess", "--raw", &raw, "--out", &cohort]));
    assert_eq!(pre["patients"], "40");
    assert_eq!((pre["train"].as_str(), pre["validation"].as_str(), pre["test"].as_str()), ("24", "8", "8"));
    assert_eq!(snapshot(Path::new(&raw)), before, "preprocess must not touch its input");

    let ck = ws.path("ck");
    let train = ok(ws.run(&["train", "--cohort", &cohort, "--out", &ck]));
    assert_eq!(train["epochs"], "2");
    let log = fs::read_to_string(Path::new(&ck).join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("epoch=") && l.contains("val_loss=")));

    let report = ws.path("report");
    let eval = ok(ws.run(&["eval", "--checkpoint", &ck, "--cohort", &cohort, "--out", &report]));
    assert_eq!((eval["n"].as_str(), eval["genes"].as_str(), eval["alpha"].as_str()), ("8", "8", "0.05"));
    for file in ["summary.toml", "genes.tsv", "histogram.tsv"] {
        assert!(Path::new(&report).join(file).exists(), "{file}");
    }
    // every output manifest carries the resolved configuration
    for manifest in [
        Path::new(&raw).join("generation.toml"),
        Path::new(&cohort).join("manifest.toml"),
        Path::new(&ck).join("checkpoint.toml"),
        Path::new(&report).join("summary.toml"),
    ] {
        let text = fs::read_to_string(&manifest).unwrap();
        assert!(text.contains("[run_config.synth]"), "{}", manifest.display());
    }
}

#[test]
fn oracle_predictions_flag_every_gene() {
    let ws = Workspace::new(SMALL);
    let (cohort, ck) = ws.prepared();
    let report = ws.path("oracle");
    let eval = ok(ws.run(&["eval", "--checkpoint", &ck, "--cohort", &cohort, "--out", &report, "--oracle"]));
    assert_eq!(eval["significant_count"], eval["genes"]);
    assert_eq!(eval["r_min"], "1");
}

#[test]
fn alpha_flag_overrides_the_file() {
    let ws = Workspace::new(SMALL);
    let (cohort, ck) = ws.prepared();
    let report = ws.path("strict");
    let eval = ok(ws.run(&["eval", "--checkpoint", &ck, "--cohort", &cohort, "--out", &report, "--alpha", "0.01"]));
    assert_eq!(eval["alpha"], "0.01");
}

#[test]
fn comparing_reports() {
    let ws = Workspace::new(SMALL);
    let (cohort, ck) = ws.prepared();
    let (a, b) = (ws.path("a"), ws.path("b"));
    ok(ws.run(&["eval", "--checkpoint", &ck, "--cohort", &cohort, "--out", &a]));
    ok(ws.run(&["eval", "--checkpoint", &ck, "--cohort", &cohort, "--out", &b, "--oracle"]));

    let same = ok(radiogen(&["compare", &a, &a]));
    assert_eq!(same["count_delta"], "+0");
    assert_eq!((same["only_a"].as_str(), same["only_b"].as_str()), ("0", "0"));
    assert_eq!(same["max_abs_r_delta"], "0");

    let diff = ok(radiogen(&["compare", &b, &a]));
    let (ca, cb): (i64, i64) = (diff["count_a"].parse().unwrap(), diff["count_b"].parse().unwrap());
    assert_eq!(diff["count_delta"], format!("{:+}", ca - cb));

    // a report over a different gene set cannot be compared
    let other = ws.path("other");
    fs::create_dir(&other).unwrap();
    for file in ["summary.toml", "histogram.tsv"] {
        fs::copy(Path::new(&a).join(file), Path::new(&other).join(file)).unwrap();
    }
    let genes = fs::read_to_string(Path::new(&a).join("genes.tsv")).unwrap();
    fs::write(Path::new(&other).join("genes.tsv"), genes.replacen("GENE0", "XENO0", 1)).unwrap();
    let out = radiogen(&["compare", &a, &other]);
    assert_eq!(code(&out), EXIT_INPUT);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different gene sets"));
}

#[test]
fn non_empty_output_needs_overwrite() {
    let ws = Workspace::new(SMALL);
    let raw = ws.path("raw");
    ok(ws.run(&["synth", "--out", &raw]));
    let again = ws.run(&["synth", "--out", &raw]);
    assert_eq!(code(&again), EXIT_INPUT);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    ok(ws.run(&["--overwrite", "synth", "--out", &raw]));
}

#[test]
fn exit_codes_separate_failure_kinds() {
    let bad_key = Workspace::new("[model]\nlayers = 3\n");
    assert_eq!(code(&bad_key.run(&["synth", "--out", &bad_key.path("raw")])), EXIT_CONFIG);

    let ws = Workspace::new(SMALL);
    assert_eq!(code(&ws.run(&["--threads", "0", "synth", "--out", &ws.path("raw")])), EXIT_CONFIG);
    assert_eq!(code(&ws.run(&["synth"])), EXIT_CONFIG, "no output directory anywhere");
    assert_eq!(code(&ws.run(&["preprocess", "--raw", &ws.path("missing"), "--out", &ws.path("c")])), EXIT_INPUT);

    let tiny = Workspace::new(&SMALL.replace("n_patients = 40", "n_patients = 2"));
    let out = tiny.run(&["synth", "--out", &tiny.path("raw")]);
    assert_eq!(code(&out), EXIT_INPUT);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 3 patients"));

    let wild = Workspace::new(&SMALL.replace("epochs = 2", "epochs = 2\nlr = 1e300"));
    let (raw, cohort) = (wild.path("raw"), wild.path("cohort"));
    ok(wild.run(&["synth", "--out", &raw]));
    ok(wild.run(&["preprocess", "--raw", &raw, "--out", &cohort]));
    let out = wild.run(&["train", "--cohort", &cohort, "--out", &wild.path("ck")]);
    assert_eq!(code(&out), EXIT_NUMERIC, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn paths_can_come_from_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display();
    let text = SMALL.replace(
        "[data]\n",
        &format!("[data]\nraw_dir = \"{d}/raw\"\ncohort_dir = \"{d}/cohort\"\ncheckpoint_dir = \"{d}/ck\"\nreport_dir = \"{d}/report\"\n"),
    );
    let ws = Workspace::new(&text);
    for cmd in ["synth", "preprocess", "train", "eval"] {
        ok(ws.run(&[cmd]));
    }
    assert!(dir.path().join("report/genes.tsv").exists());
}
