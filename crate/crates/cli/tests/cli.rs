use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "image_size=32",
    "crop_size=16",
    "patch_size=4",
    "layers=2",
    "width=16",
    "hidden=32",
    "tokens=4",
    "rank=2",
    "query_dim=8",
    "train_per_domain=4",
    "test_per_domain=2",
    "batch_size=2",
    "iterations=4",
];

fn reinseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reinseg")).args(args).output().expect("binary runs")
}

fn with_small(mut args: Vec<&str>) -> Vec<&str> {
    for s in SMALL {
        args.extend(["--set", s]);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = with_small(vec!["--single-thread", "gen-data", "--out", out.to_str().unwrap()]);
    args.extend(extra);
    reinseg(&args)
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(read_tree(&p));
        } else {
            out.push((p.to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_counts_refusal_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = gen_small(&a, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("wrote 12 train images (3 domains) and 12 test images"));
    assert_eq!(fs::read_dir(a.join("train/images")).unwrap().count(), 12);
    assert_eq!(fs::read_dir(a.join("test/masks")).unwrap().count(), 12);

    let again = gen_small(&a, &[]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(gen_small(&a, &["--force"]).status.success());

    assert!(gen_small(&b, &[]).status.success());
    let strip = |root: &Path| -> Vec<(String, Vec<u8>)> {
        read_tree(root)
            .into_iter()
            .map(|(p, bytes)| (p.strip_prefix(root.to_str().unwrap()).unwrap().to_string(), bytes))
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn paper_dry_run_prints_full_schedule() {
    let o = reinseg(&["train", "--preset", "paper", "--dry-run"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("# preset paper"));
    assert!(s.contains("# iterations 60000  batch_size 4  crop_size 512"));
    assert!(s.contains("lr_backbone 1e-5  lr_rein 1e-4  lr_head 1e-4"));
}

#[test]
fn bad_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = format!("data_dir=\"{}\"", tmp.path().join("nope").display());
    let o = reinseg(&["train", "--set", &missing, "--out", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));

    let o = reinseg(&["param-report", "--set", "learning_rate=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(reinseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(reinseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn score_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(gen_small(&data, &[]).status.success());
    let gt = data.join("test");
    let csv = tmp.path().join("scores.csv");
    let o = reinseg(&["score", gt.to_str().unwrap(), gt.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("name,dsc,miou,jsc,score\n"));
    assert!(text.lines().last().unwrap().starts_with("AGGREGATE,1.000000,1.000000,1.000000,1.000000"));
    assert_eq!(text.lines().count(), 14);
}

#[test]
fn rank_orders_a_leaderboard() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("scores.csv");
    fs::write(
        &path,
        "name,score\nbaseline,0.7351\nZhijian Life,0.7719\nagalaran,0.7865\nICT_team,0.7714\ndeepmicroscopy,0.7776\n",
    )
    .unwrap();
    let o = reinseg(&["rank", path.to_str().unwrap()]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().skip(1).collect::<Vec<_>>())
        .map(|w| w[..w.len() - 1].join(" "))
        .collect();
    assert_eq!(names, ["agalaran", "deepmicroscopy", "Zhijian Life", "ICT_team", "baseline"]);
}

#[test]
fn param_report_lists_groups() {
    let o = reinseg(&["param-report"]);
    assert!(o.status.success());
    let s = stdout(&o);
    for group in ["backbone", "rein", "head"] {
        assert!(s.contains(group), "{s}");
    }
}

#[test]
fn tiny_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(gen_small(&data, &[]).status.success());
    let run = tmp.path().join("run");
    let set_data = format!("data_dir=\"{}\"", data.display());
    let mut args = with_small(vec!["--single-thread", "train", "--out", run.to_str().unwrap(), "--set", &set_data]);
    args.extend(["--set", "checkpoint_every=2"]);
    let o = reinseg(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "train_log.csv", "checkpoint_000002.rseg", "final.rseg", "best.rseg"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let eval = tmp.path().join("eval");
    let o = reinseg(&["eval", run.join("final.rseg").to_str().unwrap(), data.to_str().unwrap(), "--out", eval.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    for d in ["A", "B", "C", "D", "E", "F", "AGGREGATE"] {
        assert!(s.lines().any(|l| l.starts_with(d)), "{s}");
    }
    assert_eq!(fs::read_dir(eval.join("masks")).unwrap().count(), 12);
    assert!(eval.join("metrics.csv").is_file());

    let rescored = reinseg(&["score", eval.to_str().unwrap(), data.join("test").to_str().unwrap()]);
    assert!(rescored.status.success(), "{}", String::from_utf8_lossy(&rescored.stderr));
    let from_eval = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(stdout(&rescored), from_eval);
}
