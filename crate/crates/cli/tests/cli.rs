use std::path::Path;
use std::process::{Command, Output};

fn ssm_pfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssm-pfn")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const TINY: &str = "seed = 4
[model]
embedding_size = 8
hidden_size = 16
num_layers = 2
num_heads = 2
state_dim = 4
[train]
learning_rate = 0.001
batch_size = 2
steps_per_epoch = 2
epochs = 1
aggregate_k_gradients = 1
validation_tasks = 2
[prior]
rows = 40
context_rows = 30
[rcp]
tasks = 3
";

/// Two informative features; row 0 is labelled `yes`.
fn dataset(rows: usize) -> String {
    let mut s = String::from("x1,x2,class\n");
    for i in 0..rows {
        let a = (i as f64 * 0.37).sin();
        let b = (i as f64 * 0.11).cos();
        s += &format!("{a},{b},{}\n", if a + b > 0.5 { "yes" } else { "no" });
    }
    s
}

#[test]
fn help_and_usage_errors() {
    let o = ssm_pfn(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("order-sensitivity"));
    assert_eq!(code(&ssm_pfn(&["frobnicate"])), 1);
    assert_eq!(code(&ssm_pfn(&["train", "--backbone", "lstm"])), 1);
    assert_eq!(code(&ssm_pfn(&["predict", "--context", "a.csv"])), 1);
}

#[test]
fn config_typo_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "[train]\nlaerning_rate = 0.1\n");
    let o = ssm_pfn(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("laerning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_files_and_bad_data_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out").display().to_string();
    let o = ssm_pfn(&["evaluate", "--checkpoint", "/nonexistent.ckpt", "--dataset", "x.csv", "--out-dir", &out]);
    assert_eq!(code(&o), 2);

    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let ckpt = dir.path().join("m.ckpt").display().to_string();
    assert_eq!(code(&ssm_pfn(&["train", "--config", &cfg, "--out-dir", &out, "--checkpoint", &ckpt])), 0);
    let bad = write(dir.path(), "bad.csv", "x1,label\n1,a\nfoo,b\n");
    let o = ssm_pfn(&["evaluate", "--config", &cfg, "--checkpoint", &ckpt, "--dataset", &bad, "--out-dir", &out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("row 3, column 1"), "{}", stderr(&o));
}

#[test]
fn train_evaluate_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.display().to_string();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let o = ssm_pfn(&["train", "--config", &cfg, "--backbone", "mamba", "--out-dir", &out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists() && out.join("loss_curve.csv").exists());
    let ckpt_s = ckpt.display().to_string();

    let data = write(dir.path(), "toy.csv", &dataset(40));
    let unlabeled = write(dir.path(), "unlabeled.csv", "f1,label\n1,0\n2,1\n");
    let o = ssm_pfn(&["evaluate", "--checkpoint", &ckpt_s, "--dataset", &unlabeled, "--label-column", "class", "--out-dir", &out_s]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let wide = write(dir.path(), "wide.csv", &format!("{}class\n{}a\n{}b\n", "f,".repeat(12), "1,".repeat(12), "2,".repeat(12)));
    let o = ssm_pfn(&[
        "evaluate", "--config", &cfg, "--checkpoint", &ckpt_s, "--dataset", &data, "--dataset", &wide, "--label-column", "class",
        "--r", "1,2", "--compare", &ckpt_s, "--out-dir", &out_s,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("skipped wide"));
    let splits = std::fs::read_to_string(out.join("evaluation_splits.csv")).unwrap();
    assert_eq!(splits.lines().count(), 1 + 2 * 16);
    let cmp = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(cmp.lines().skip(1).all(|l| l.ends_with(",1e0")), "{cmp}");

    let queries = write(dir.path(), "q.csv", "x2,x1\n0.1,0.2\n-1,3\n");
    let o = ssm_pfn(&[
        "predict", "--config", &cfg, "--checkpoint", &ckpt_s, "--context", &data, "--queries", &queries, "--label-column", "class",
        "--r", "3", "--out-dir", &out_s,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("row,p_yes,p_no,predicted"));
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let total: f64 = cells[1..3].iter().map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(["yes", "no"].contains(&cells[3]));
    }
}

#[test]
fn order_sensitivity_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out_s = out.display().to_string();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let o = ssm_pfn(&["order-sensitivity", "--config", &cfg, "--backbone", "hydra", "--r", "1,4", "--out-dir", &out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("order_sensitivity.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    let o = ssm_pfn(&["bench", "--config", &cfg, "--backbone", "attention", "--rows", "8,16,32", "--out-dir", &out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(csv.starts_with("backbone,rows,mean_s,se_s,status\n"));
    assert_eq!(csv.lines().count(), 4);
}
