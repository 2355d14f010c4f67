use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lyapdet::ingest::{write_image_dir, Dataset, Image, Provenance};
use serde_json::{json, Value};

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist() -> Value {
    let dir = repo_root().join("data/mnist-1k");
    json!({
        "format": "idx",
        "images": dir.join("images-idx3-ubyte"),
        "labels": dir.join("labels-idx1-ubyte"),
    })
}

fn mnist_range(a: usize, b: usize) -> Value {
    let mut v = mnist();
    v["range"] = json!([a, b]);
    v
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn lyapdet(config: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_lyapdet"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    rd.records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exponents_on_ten_images() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({
            "seed": 1,
            "datasets": {"ten": mnist_range(0, 10)},
            "exponents": {"datasets": ["ten"]},
        }),
    );
    assert_eq!(lyapdet(&cfg, &["exponents"]), 0);
    let csv = tmp.path().join("out/features/ten.csv");
    let first = fs::read(&csv).unwrap();
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.len() == 3 + 4));
    assert_eq!(read_json(&tmp.path().join("out/errors-exponents.json")), json!([]));

    assert_eq!(lyapdet(&cfg, &["exponents", "--jobs", "3"]), 0);
    assert_eq!(fs::read(&csv).unwrap(), first);
    assert_eq!(lyapdet(&cfg, &["exponents", "--jobs", "1"]), 0);
    assert_eq!(fs::read(&csv).unwrap(), first);
}

#[test]
fn constant_image_goes_to_the_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let src = lyapdet::ingest::read_idx_files(
        "mnist",
        &repo_root().join("data/mnist-1k/images-idx3-ubyte"),
        None,
    )
    .unwrap()
    .slice(0, 9);
    let mut images = src.into_images();
    images.push(Image::new("zz-flat", vec![0.5; 784], 28, 28, None, Provenance::Legitimate).unwrap());
    let dir = tmp.path().join("fixture");
    write_image_dir(&Dataset::new("fixture", images).unwrap(), &dir).unwrap();

    let cfg = write_config(
        tmp.path(),
        &json!({
            "seed": 1,
            "datasets": {"fx": {"format": "dir", "path": "fixture"}},
            "exponents": {"datasets": ["fx"]},
        }),
    );
    assert_eq!(lyapdet(&cfg, &["exponents"]), 2);
    assert_eq!(csv_rows(&tmp.path().join("out/features/fx.csv")).len(), 9);
    let ledger = read_json(&tmp.path().join("out/errors-exponents.json"));
    assert_eq!(ledger.as_array().unwrap().len(), 1);
    assert_eq!(ledger[0]["id"], "zz-flat");
    assert_eq!(read_json(&tmp.path().join("out/manifest-exponents.json"))["ledger_entries"], 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // no config file
    assert_eq!(lyapdet(&tmp.path().join("nope.json"), &["exponents"]), 1);
    // no seed
    let cfg = write_config(tmp.path(), &json!({"exponents": {"datasets": []}}));
    assert_eq!(lyapdet(&cfg, &["exponents"]), 1);
    // --seed supplies it
    assert_eq!(lyapdet(&cfg, &["exponents", "--seed", "4"]), 0);
    // unknown field
    let cfg = write_config(tmp.path(), &json!({"seed": 1, "featuredim": 2}));
    assert_eq!(lyapdet(&cfg, &["exponents"]), 1);
    // missing referenced path
    let cfg = write_config(
        tmp.path(),
        &json!({
            "seed": 1,
            "datasets": {"a": {"format": "idx", "images": "missing-idx3"}},
            "exponents": {"datasets": ["a"]},
        }),
    );
    assert_eq!(lyapdet(&cfg, &["exponents"]), 1);
    // present but unreadable
    fs::write(tmp.path().join("missing-idx3"), b"not an idx file").unwrap();
    assert_eq!(lyapdet(&cfg, &["exponents"]), 3);
    // section absent
    assert_eq!(lyapdet(&cfg, &["scatter"]), 1);
}

#[test]
fn salt_amount_one_saturates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({
            "seed": 1,
            "datasets": {
                "few": mnist_range(0, 5),
                "salted": {"format": "output", "name": "salted"},
            },
            "perturb": {
                "dataset": "few",
                "noise": {"kind": "salt", "params": {"amount": 1.0}, "seed": 9},
                "output": "salted",
            },
        }),
    );
    assert_eq!(lyapdet(&cfg, &["perturb"]), 0);
    let ds = lyapdet::ingest::load_image_dir(&tmp.path().join("out/images/salted"), &Default::default()).unwrap();
    assert_eq!(ds.len(), 5);
    for im in ds.images() {
        assert!(im.pixels().iter().all(|&p| p == 1.0));
        assert_eq!(im.provenance(), &Provenance::noisy("salt"));
        assert!(im.id().ends_with("-salt"));
    }
}

fn synthetic_features(path: &Path) {
    let mut s = String::from("id,provenance,label,l1,l2\n");
    let mut state = 7u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for k in 0..80 {
        s += &format!("n{k},legitimate,,{},{}\n", next(), next());
    }
    for fam in ["a", "b"] {
        for k in 0..40 {
            s += &format!("{fam}{k},adversarial:{fam}:untargeted,,{},{}\n", 0.6 + next(), next());
        }
    }
    fs::write(path, s).unwrap();
}

#[test]
fn loao_and_scatter_on_synthetic_features() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic_features(&tmp.path().join("syn.csv"));
    let cfg = write_config(
        tmp.path(),
        &json!({
            "seed": 2,
            "feature_dim": 2,
            "eval_loao": {"natural": "syn.csv", "attacks": ["syn.csv"]},
            "scatter": {"features": ["syn.csv"]},
        }),
    );
    assert_eq!(lyapdet(&cfg, &["eval-loao"]), 0);
    let out = tmp.path().join("out");
    let summary = read_json(&out.join("loao/summary.json"));
    let keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["a:untargeted", "b:untargeted"]);
    for k in keys {
        let auc = summary[k]["auroc"].as_f64().unwrap();
        assert!(auc > 0.5 && auc <= 1.0, "{k}: {auc}");
        let file = out.join(format!("loao/{}.csv", k.replace(':', "_")));
        let roc = lyapdet::metrics::RocCurve::read_csv(fs::File::open(file).unwrap()).unwrap();
        assert!((roc.auroc - auc).abs() < 1e-12);
    }

    assert_eq!(lyapdet(&cfg, &["scatter"]), 0);
    assert_eq!(csv_rows(&out.join("scatter.csv")).len(), 160);
    let pca = read_json(&out.join("scatter-pca.json"));
    assert!(pca["silhouette_legit_vs_adversarial"].as_f64().unwrap() > 0.0);
}

/// Train on 200 legitimate rows, score 100 legitimate + 100 noisy + 100 FGSM.
#[test]
fn full_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "seed": 11,
        "datasets": {
            "train": mnist_range(0, 200),
            "test": mnist_range(200, 300),
            "victim": mnist_range(500, 1000),
            "targets": mnist_range(300, 400),
            "noise_src": mnist_range(400, 500),
            "fgsm": {"format": "output", "name": "fgsm"},
            "noisy": {"format": "output", "name": "noisy"},
        },
        "attack_fgsm": {
            "train": "victim",
            "targets": "targets",
            "victim": {"epochs": 5},
            "fgsm": {"epsilon": 0.25},
        },
        "perturb": {
            "dataset": "noise_src",
            "noise": {"kind": "gaussian", "params": {"var": 0.01}, "seed": 5},
            "output": "noisy",
        },
        "exponents": {"datasets": ["train", "test", "fgsm", "noisy"]},
        "train": {"features": ["train"], "params": {"n_trees": 50}},
        "score": {"features": ["test", "noisy", "fgsm"]},
        "report": {"features": ["test", "fgsm"], "bootstrap": 200},
    });
    let steps = ["attack-fgsm", "perturb", "exponents", "train", "score", "report"];
    let mut runs = Vec::new();
    for r in 0..2 {
        let dir = tmp.path().join(format!("run{r}"));
        fs::create_dir_all(&dir).unwrap();
        let c = write_config(&dir, &cfg);
        for s in steps {
            assert_eq!(lyapdet(&c, &[s]), 0, "{s}");
        }
        runs.push(dir.join("out"));
    }

    let summary = read_json(&runs[0].join("summary.json"));
    let det = &summary["detection"];
    for rate in ["true_acceptance_rate", "false_alarm_rate", "attacker_rejection_rate"] {
        let v = det[rate].as_f64().unwrap_or_else(|| panic!("{rate} missing"));
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(summary["auroc_ci"].is_array());
    assert_eq!(csv_rows(&runs[0].join("scores.csv")).len(), 300);

    for s in steps {
        let name = format!("manifest-{s}.json");
        let a = fs::read(runs[0].join(&name)).unwrap();
        assert_eq!(a, fs::read(runs[1].join(&name)).unwrap(), "{name}");
        let m: Value = serde_json::from_slice(&a).unwrap();
        for f in m["outputs"].as_array().unwrap() {
            let rel = f["path"].as_str().unwrap().strip_prefix("$out/").unwrap();
            assert_eq!(
                fs::read(runs[0].join(rel)).unwrap(),
                fs::read(runs[1].join(rel)).unwrap(),
                "{rel}"
            );
        }
    }
}
