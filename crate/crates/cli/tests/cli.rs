use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn optmat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optmat"))
        .args(args)
        .env_remove("OPTMAT_STORE_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json_of(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn arity_one_is_a_usage_error() {
    assert_eq!(code(&optmat(&["gen", "--n", "1"])), 64);
}

#[test]
fn malformed_arguments_are_usage_errors() {
    assert_eq!(code(&optmat(&["frobnicate"])), 64);
    assert_eq!(
        code(&optmat(&["verify", "optimality", "--refs", "1:0"])),
        64
    );
    assert_eq!(code(&optmat(&["gen", "--fuel", "1.5"])), 64);
    // two blocks of one partition
    assert_eq!(
        code(&optmat(&["verify", "optimality", "--refs", "1:0:0,1:0:1"])),
        64
    );
    assert_eq!(code(&optmat(&["--help"])), 0);
}

#[test]
fn gen_writes_the_restriction_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.json");
    let out = dir.path().join("m.json");
    let args = [
        "gen",
        "--n",
        "2",
        "--rows",
        "2",
        "--window",
        "30",
        "--fuel",
        "1e7",
        "--store",
        path_str(&store),
        "--out",
        path_str(&out),
    ];
    let first = optmat(&args);
    assert_eq!(
        code(&first),
        0,
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    assert_eq!(std::fs::read(&out).unwrap(), first.stdout);
    let v = json_of(&first);
    let stages = v["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 4);
    // row 0, column 1: 2 = code of (0, 1)
    assert_eq!(stages[1]["blocks"][2], 1);
    assert_eq!(stages[2]["blocks"].as_array().unwrap().len(), 30);

    let again = optmat(&args);
    assert_eq!(code(&again), 0);
    assert_eq!(again.stdout, first.stdout);
    assert!(!store.with_extension("lock").exists());
}

#[test]
fn warm_store_matches_cold_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.json");
    let warm_args = [
        "decide",
        "--row",
        "1",
        "--column",
        "0",
        "--value",
        "40",
        "--store",
        path_str(&store),
    ];
    assert_eq!(
        code(&optmat(&[
            "decide",
            "--row",
            "1",
            "--column",
            "0",
            "--value",
            "70",
            "--store",
            path_str(&store)
        ])),
        0
    );
    let warm = optmat(&warm_args);
    let cold = optmat(&[
        "decide", "--row", "1", "--column", "0", "--value", "40", "--fuel", "1e8",
    ]);
    assert_eq!(code(&warm), 0);
    assert_eq!(warm.stdout, cold.stdout);
}

#[test]
fn decide_reports_blocks_and_membership() {
    let v = json_of(&optmat(&[
        "decide", "--row", "1", "--column", "0", "--value", "5",
    ]));
    assert_eq!(v["verdict"], "in");
    assert_eq!(v["block"], 0);
    let o = optmat(&[
        "decide", "--row", "1", "--column", "0", "--value", "5", "--index", "1",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(json_of(&o)["verdict"], "not_in");
    let o = optmat(&[
        "decide", "--row", "1", "--column", "1", "--value", "90", "--fuel", "3",
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(json_of(&o)["verdict"], "undecided");
}

#[test]
fn verify_commands() {
    let o = optmat(&[
        "verify",
        "partition",
        "--row",
        "1",
        "--column",
        "0",
        "--window",
        "40",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(json_of(&o)["witnessed"], 40);
    let o = optmat(&[
        "verify",
        "optimality",
        "--refs",
        "0:0:1,0:1:2",
        "--window",
        "1000",
    ]);
    assert_eq!(code(&o), 0);
    let o = optmat(&[
        "verify",
        "agreement",
        "--column",
        "1",
        "--chain",
        "3",
        "--window",
        "10000",
    ]);
    assert_eq!(code(&o), 0);
    let o = optmat(&[
        "verify",
        "subtuple",
        "--n",
        "3",
        "--refs",
        "0:0:1,0:2:0",
        "--window",
        "10000",
    ]);
    assert_eq!(code(&o), 0);
    // bounds at the window edge cannot be witnessed
    let o = optmat(&[
        "verify",
        "agreement",
        "--column",
        "0",
        "--chain",
        "0",
        "--window",
        "100",
        "--bounds",
        "100",
    ]);
    assert_eq!(code(&o), 2);
    let o = optmat(&[
        "verify",
        "sweep",
        "--max-row",
        "1",
        "--max-index",
        "2",
        "--window",
        "300",
        "--bounds",
        "10,20",
    ]);
    assert_eq!(code(&o), 0);
    let v = json_of(&o);
    assert!(v["optimality"]["instances"].as_u64().unwrap() > 0);
}

#[test]
fn tree_commands() {
    let v = json_of(&optmat(&[
        "tree", "simple", "--node", "0.2", "--column", "0",
    ]));
    assert_eq!(v["label"], serde_json::json!([0, 0]));
    let o = optmat(&["tree", "--depth", "1", "--branch", "4", "decompose"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        json_of(&o)["levels"][0]["nodes"].as_array().unwrap().len(),
        4
    );
    let o = optmat(&["tree", "--depth", "1", "--branch", "6", "check"]);
    assert_eq!(code(&o), 0);
    let o = optmat(&[
        "tree", "--depth", "2", "--branch", "4", "claim", "--anchor", "0", "--target", "0.1",
        "--column", "0",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        code(&optmat(&[
            "tree", "probe", "--s", "0", "--q", "1", "--column", "0"
        ])),
        64
    );
}

#[test]
fn export_and_default_store_dir() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_optmat"))
            .args(args)
            .env("OPTMAT_STORE_DIR", dir.path())
            .output()
            .unwrap()
    };
    assert_eq!(
        code(&run(&[
            "decide", "--row", "1", "--column", "0", "--value", "9"
        ])),
        0
    );
    assert!(dir.path().join("n2.json").exists());
    let o = run(&["export"]);
    assert_eq!(code(&o), 0);
    let v = json_of(&o);
    assert_eq!(v["format"], "optmat-store");
    assert!(!v["stages"].as_array().unwrap().is_empty());
}

#[test]
fn locked_store_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.json");
    std::fs::write(store.with_extension("lock"), "").unwrap();
    let o = optmat(&["export", "--store", path_str(&store)]);
    assert_eq!(code(&o), 74);
}
