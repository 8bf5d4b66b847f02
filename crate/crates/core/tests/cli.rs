mod common;

use std::fs;
use std::path::{Path, PathBuf};

use star_kgc::cli::run;
use star_kgc::io::Container;

const SMALL: &str = r#"
[star.encoder]
d_h = 8
n_layers = 1
n_heads = 2
d_ff = 16
max_len_hr = 12
max_len_t = 8

[train]
epochs = 2
batch_size = 4
n_negatives = 2

[geo]
epochs = 20
dim = 8

[ensemble]
epochs = 3
hidden = 4
m_sim = 3
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        common::toy_graph().write_dir(&root.join("data")).unwrap();
        fs::write(root.join("small.toml"), SMALL).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    /// Runs the CLI with the small config and `out` as output directory.
    fn run(&self, out: &str, args: &[&str]) -> i32 {
        let mut argv = vec!["star-kgc".to_string()];
        argv.extend(args.iter().map(|a| a.to_string()));
        argv.extend([
            "--config".into(),
            self.s("small.toml"),
            "--out".into(),
            self.s(out),
        ]);
        run(argv)
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_then_eval_writes_reports() {
    let ws = Workspace::new();
    let data = ws.s("data");
    assert_eq!(ws.run("a", &["train", "--data", &data, "--seed", "3"]), 0);
    assert!(ws.path("a/model.ckpt").exists());
    assert!(ws.path("a/checkpoints/epoch-002.ckpt").exists());
    assert!(ws.path("a/manifest.json").exists());
    let log = fs::read_to_string(ws.path("a/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = ws.s("a/model.ckpt");
    assert_eq!(
        ws.run(
            "e",
            &["eval", "--data", &data, "--checkpoint", &ckpt, "--records"]
        ),
        0
    );
    let m = json(&ws.path("e/metrics.json"));
    assert_eq!(m["split"], "test");
    let q = m["metrics"]["queries"].as_u64().unwrap();
    assert_eq!(q, 4);
    let mrr = m["metrics"]["mrr"].as_f64().unwrap();
    assert!(mrr > 0.0 && mrr <= 1.0);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let ws = Workspace::new();
    let data = ws.s("data");
    for out in ["a", "b"] {
        assert_eq!(ws.run(out, &["train", "--data", &data, "--seed", "11"]), 0);
        let ckpt = ws.s(&format!("{out}/model.ckpt"));
        assert_eq!(
            ws.run(
                &format!("{out}/eval"),
                &["eval", "--data", &data, "--checkpoint", &ckpt]
            ),
            0
        );
    }
    assert_eq!(
        fs::read(ws.path("a/model.ckpt")).unwrap(),
        fs::read(ws.path("b/model.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(ws.path("a/eval/metrics.json")).unwrap(),
        fs::read(ws.path("b/eval/metrics.json")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_environment() {
    let ws = Workspace::new();
    let data = ws.s("data");
    std::env::set_var("STAR_KGC_SEED", "5");
    assert_eq!(ws.run("env", &["train-geo", "--data", &data]), 0);
    assert_eq!(
        ws.run("flag", &["train-geo", "--data", &data, "--seed", "6"]),
        0
    );
    std::env::remove_var("STAR_KGC_SEED");
    assert_eq!(json(&ws.path("env/manifest.json"))["seed"], 5);
    assert_eq!(json(&ws.path("flag/manifest.json"))["seed"], 6);
}

#[test]
fn cache_and_no_cache_give_identical_ranks() {
    let ws = Workspace::new();
    let data = ws.s("data");
    assert_eq!(ws.run("m", &["train", "--data", &data]), 0);
    let ckpt = ws.s("m/model.ckpt");
    assert_eq!(
        ws.run(
            "pre",
            &["precompute", "--data", &data, "--checkpoint", &ckpt]
        ),
        0
    );
    let cache = ws.s("pre/entity_cache.bin");
    assert_eq!(
        ws.run(
            "c",
            &[
                "eval",
                "--data",
                &data,
                "--checkpoint",
                &ckpt,
                "--entity-cache",
                &cache,
                "--records"
            ]
        ),
        0
    );
    assert_eq!(
        ws.run(
            "n",
            &[
                "eval",
                "--data",
                &data,
                "--checkpoint",
                &ckpt,
                "--no-cache",
                "--records"
            ]
        ),
        0
    );
    let ranks = |out: &str| -> Vec<u64> {
        fs::read_to_string(ws.path(&format!("{out}/records.jsonl")))
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l).unwrap()["rank"]
                    .as_u64()
                    .unwrap()
            })
            .collect()
    };
    assert_eq!(ranks("c"), ranks("n"));
    let calls = |out: &str| {
        json(&ws.path(&format!("{out}/metrics.json")))["metrics"]["cost"]["encoder_calls"]
            .as_u64()
            .unwrap()
    };
    assert!(calls("c") < calls("n"));
}

#[test]
fn ensemble_pipeline_leaves_bases_untouched() {
    let ws = Workspace::new();
    let data = ws.s("data");
    assert_eq!(ws.run("star", &["train", "--data", &data]), 0);
    assert_eq!(ws.run("geo", &["train-geo", "--data", &data]), 0);
    let star = ws.s("star/model.ckpt");
    let geo = ws.s("geo/geo.ckpt");
    let before = (fs::read(&star).unwrap(), fs::read(&geo).unwrap());
    for (model, name) in [(&star, "star"), (&geo, "geo")] {
        for split in ["dev", "test"] {
            let scores = ws.s(&format!("scores/{name}-{split}.bin"));
            let code = ws.run(
                &format!("e-{name}-{split}"),
                &[
                    "eval",
                    "--data",
                    &data,
                    "--checkpoint",
                    model,
                    "--split",
                    split,
                    "--scores",
                    &scores,
                ],
            );
            assert_eq!(code, 0);
        }
    }
    let inputs = |split: &str| {
        vec![
            "--data".to_string(),
            data.clone(),
            "--star-scores".into(),
            ws.s(&format!("scores/star-{split}.bin")),
            "--geo-scores".into(),
            ws.s(&format!("scores/geo-{split}.bin")),
            "--checkpoint".into(),
            star.clone(),
        ]
    };
    let mut train = vec!["ensemble-train".to_string()];
    train.extend(inputs("dev"));
    let train: Vec<&str> = train.iter().map(String::as_str).collect();
    assert_eq!(ws.run("ens", &train), 0);

    let params = ws.s("ens/ensemble.ckpt");
    let mut eval = vec!["ensemble-eval".to_string()];
    eval.extend(inputs("test"));
    eval.extend([
        "--alpha-params".into(),
        params.clone(),
        "--dump-alphas".into(),
    ]);
    let eval: Vec<&str> = eval.iter().map(String::as_str).collect();
    assert_eq!(ws.run("ens-eval", &eval), 0);
    let alphas = fs::read_to_string(ws.path("ens-eval/alphas.jsonl")).unwrap();
    assert_eq!(alphas.lines().count(), 4);

    // both α sources at once is a configuration error
    let mut both = eval.clone();
    both.extend(["--fixed-alpha", "0.5"]);
    assert_eq!(ws.run("both", &both), 4);

    assert_eq!(before, (fs::read(&star).unwrap(), fs::read(&geo).unwrap()));
    Container::load(&ws.path("ens/ensemble.ckpt"))
        .unwrap()
        .expect_kind("ensemble")
        .unwrap();
}

#[test]
fn probe_and_cost_report() {
    let ws = Workspace::new();
    let data = ws.s("data");
    assert_eq!(
        ws.run(
            "p",
            &[
                "probe",
                "--data",
                &data,
                "--kind",
                "probe2",
                "--n-removed",
                "1"
            ]
        ),
        0
    );
    assert!(ws.path("p/probe/support.tsv").exists());
    assert_eq!(
        ws.run(
            "c",
            &[
                "cost-report",
                "--L",
                "64",
                "--entities",
                "100",
                "--relations",
                "5"
            ]
        ),
        0
    );
    let r = json(&ws.path("c/cost_report.json"));
    assert!((r["whole_graph_ratio"].as_f64().unwrap() - 2000.0 / 6.0).abs() < 1e-9);
}

#[test]
fn gradcheck_passes_on_the_toy_graph() {
    let ws = Workspace::new();
    assert_eq!(ws.run("g", &["gradcheck", "--coords", "40"]), 0);
    assert!(ws.path("g/gradcheck.json").exists());
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    let data = ws.s("data");
    assert_eq!(ws.run("x", &["train", "--bogus"]), 2);
    assert_eq!(ws.run("x", &["train", "--data", &ws.s("missing")]), 3);
    assert_eq!(
        ws.run(
            "x",
            &[
                "train",
                "--data",
                &data,
                "--epochs",
                "1",
                "--batch-size",
                "0"
            ]
        ),
        4
    );
    fs::write(ws.path("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        ws.run(
            "x",
            &["eval", "--data", &data, "--checkpoint", &ws.s("junk.ckpt")]
        ),
        5
    );
    fs::write(ws.path("bad.toml"), "[train]\nnot_a_key = 1\n").unwrap();
    let argv = [
        "star-kgc",
        "cost-report",
        "--entities",
        "10",
        "--config",
        &ws.s("bad.toml"),
        "--out",
        &ws.s("x"),
    ];
    assert_eq!(run(argv), 4);
}
