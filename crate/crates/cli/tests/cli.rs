use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn arfl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arfl"))
        .args(args)
        .env("ARFL_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &[&str] = &["--n-train", "64", "--n-test", "40", "--epochs", "2", "--batch-size", "16", "--resolution", "6,5"];

#[test]
fn run_writes_table_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--name", "smoke", "--seeds", "1,2", "--svg"];
    args.extend_from_slice(TINY);
    let out = arfl(&args, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("F. Dual adversarial training + ARFL"), "{stdout}");
    let root = tmp.path().join("smoke");
    let results = fs::read_to_string(root.join("results.csv")).unwrap();
    assert!(results.starts_with(
        "row,scheme,arfl,r,seeds,std_metric_mean,std_metric_std,adv_metric_mean,adv_metric_std,mean_metric\n"
    ));
    assert_eq!(results.lines().count(), 7);
    for f in ["model.txt", "train_log.csv", "boundary.csv", "saliency.csv", "boundary.svg"] {
        assert!(root.join("E/seed_2").join(f).is_file(), "{f}");
    }

    // exported models feed the standalone verbs
    let model = root.join("F/seed_1/model.txt");
    let grid = arfl(&["boundary", "--model", model.to_str().unwrap(), "--resolution", "3,2"], tmp.path());
    assert!(grid.status.success());
    let text = String::from_utf8_lossy(&grid.stdout);
    assert_eq!(text.lines().next(), Some("x,y,prob"));
    assert_eq!(text.lines().count(), 7);
    let grid_again = arfl(&["boundary", "--model", model.to_str().unwrap(), "--resolution", "6,5"], tmp.path());
    assert_eq!(grid_again.stdout, fs::read(root.join("F/seed_1/boundary.csv")).unwrap());

    let sal = arfl(
        &["saliency", "--model", model.to_str().unwrap(), "--x", "0.5,-0.25", "--y", "-1"],
        tmp.path(),
    );
    assert!(sal.status.success());
    let text = String::from_utf8_lossy(&sal.stdout);
    assert!(text.starts_with("dim,grad,scaled\n0,"));

    let per_seed = root.join("per_seed.csv");
    let cmp = arfl(
        &["compare", "--a", per_seed.to_str().unwrap(), "--row-a", "F", "--row-b", "E"],
        tmp.path(),
    );
    assert!(cmp.status.success(), "{}", String::from_utf8_lossy(&cmp.stderr));
    assert!(String::from_utf8_lossy(&cmp.stdout).starts_with("F vs E: n=2"));
}

#[test]
fn config_file_round_trips_through_print_config() {
    let tmp = tempfile::tempdir().unwrap();
    let printed = arfl(&["run", "--print-config", "--epochs", "7", "--lambda", "2.5"], tmp.path());
    assert!(printed.status.success());
    let path = tmp.path().join("exp.toml");
    fs::write(&path, &printed.stdout).unwrap();
    let again = arfl(&["run", "--print-config", "--config", path.to_str().unwrap()], tmp.path());
    assert_eq!(printed.stdout, again.stdout);
    let text = String::from_utf8_lossy(&printed.stdout);
    assert!(text.contains("epochs = 7"));
    assert!(text.contains("lambda = 2.5"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // configuration errors
    assert_eq!(arfl(&["run", "--seeds", "", "--epochs", "1"], tmp.path()).status.code(), Some(2));
    assert_eq!(arfl(&["run", "--rows", "A:standard+arfl@0.5"], tmp.path()).status.code(), Some(2));
    assert_eq!(
        arfl(&["sweep", "r", "--values", "0.5,1.5", "--epochs", "1"], tmp.path()).status.code(),
        Some(2)
    );
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = 3\n").unwrap();
    assert_eq!(arfl(&["run", "--config", bad.to_str().unwrap()], tmp.path()).status.code(), Some(2));

    // run failure: unreadable training file
    let missing = tmp.path().join("missing.csv");
    let code = arfl(
        &["run", "--train-csv", missing.to_str().unwrap(), "--test-csv", missing.to_str().unwrap(), "--seeds", "0"],
        tmp.path(),
    )
    .status
    .code();
    assert_eq!(code, Some(3));
    assert!(tmp.path().join("two_moon/per_seed.csv").is_file(), "partial results are still written");

    // comparison error: different seed counts
    let a = tmp.path().join("a.csv");
    fs::write(&a, "row,seed,status,std_metric,adv_metric,mean_metric\nF,0,ok,1,1,1\nF,1,ok,1,1,1\nE,0,ok,1,1,1\n").unwrap();
    let out = arfl(&["compare", "--a", a.to_str().unwrap(), "--row-a", "F", "--row-b", "E"], tmp.path());
    assert_eq!(out.status.code(), Some(4));
}
