use std::process::Command;

fn xaba(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_xaba"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(xaba(&["--help"]).0, 0);
    assert_eq!(xaba(&[]).0, 2);
    assert_eq!(xaba(&["align", "--ref", "a.ppm"]).0, 2);
    assert_eq!(xaba(&["train", "--out", "w.xaba", "--steps", "many"]).0, 2);
}

#[test]
fn runtime_errors_print_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.xaba");
    let (code, _, err) = xaba(&["inspect", "--weights", missing.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: kind=io msg="), "{err}");

    let junk = dir.path().join("junk.xaba");
    std::fs::write(&junk, b"not a weight file").unwrap();
    let (code, _, err) = xaba(&["inspect", "--weights", junk.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error: kind=format"), "{err}");
}

#[test]
fn train_inspect_and_misfit_align() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let args = [
        "train",
        "--out",
        &p("w.xaba"),
        "--steps",
        "2",
        "--pairs",
        "2",
        "--size",
        "16",
        "--block",
        "4",
        "--scales",
        "1,2",
        "--fe",
        "4",
        "--fm",
        "2",
        "--max-shift",
        "1",
        "--loss-csv",
        &p("loss.csv"),
        "--export-pairs",
        &p("pairs"),
    ];
    assert_eq!(xaba(&args).0, 0);
    let csv = std::fs::read_to_string(p("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss"));
    assert_eq!(csv.lines().count(), 3);

    let (code, out, _) = xaba(&["inspect", "--weights", &p("w.xaba")]);
    assert_eq!(code, 0);
    assert!(out.contains("scale2/feat0/weight"), "{out}");

    // A block size that does not divide the padded image is a runtime error, not a crash.
    let (code, _, err) = xaba(&[
        "align",
        "--ref",
        &p("pairs/pair000_ref.ppm"),
        "--tgt",
        &p("pairs/pair001_tgt.ppm"),
        "--weights",
        &p("w.xaba"),
        "--out",
        &p("o.ppm"),
        "--block",
        "4",
        "--scales",
        "1,2,4",
    ]);
    assert_eq!(code, 1, "{err}");

    let (code, _, err) = xaba(&[
        "align",
        "--ref",
        &p("pairs/pair000_ref.ppm"),
        "--tgt",
        &p("pairs/pair001_tgt.ppm"),
        "--weights",
        &p("w.xaba"),
        "--out",
        &p("o.ppm"),
        "--block",
        "4",
        "--dump-attention",
        &p("att"),
    ]);
    assert_eq!(code, 0, "{err}");
    let summary = std::fs::read_to_string(p("att/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(std::path::Path::new(&p("att/scale2.xaba")).exists());
}
