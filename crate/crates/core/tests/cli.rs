use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn emseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run emseg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = emseg(dir, args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

#[test]
fn pipeline_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.toml"),
        "seed = 4\nsteps = 300\nchannels = 4\noffsets = [3, 9]\nmin_size = 5\n\
         fill_noise = true\nlargest_is_background = true\n\
         labels = \"gt.lbl\"\nfield = \"f.emb\"\nout = \"pred.lbl\"\n",
    )
    .unwrap();
    let cfg = ["--config", "run.toml"];
    ok(d, &[&cfg[..], &["gen", "--height", "24", "--width", "24", "--instances", "2", "--radius-min", "3", "--radius-max", "4"]].concat());
    ok(d, &[&cfg[..], &["optimize", "--history-csv", "h.csv"]].concat());
    ok(d, &[&cfg[..], &["cluster"]].concat());
    let csv = ok(d, &[&cfg[..], &["eval", "--out-csv", "eval.csv"]].concat());
    assert_eq!(fs::read_to_string(d.join("eval.csv")).unwrap(), csv);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sbd,abs_dic,arand,ap@0.5,map"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(row[2] < 0.05 && row[1] == 0.0, "{row:?}");

    let history = fs::read_to_string(d.join("h.csv")).unwrap();
    assert_eq!(history.lines().count(), 301);
    assert!(history.starts_with("step,l_var,l_dist,l_reg,l_obj,l_u_dist,l_u_con,total\n"));
}

#[test]
fn flags_echo_through_print_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["cluster", "--method", "hdbscan", "--min-size", "200", "--print-config"]);
    assert!(out.contains("method = \"hdbscan\"\n"), "{out}");
    assert!(out.contains("min_size = 200\n"));

    fs::write(dir.path().join("c.toml"), "min_size = 50\nbandwidth = 0.7\n").unwrap();
    let out = ok(dir.path(), &["--config", "c.toml", "cluster", "--min-size", "7", "--print-config"]);
    assert!(out.contains("min_size = 7\n"));
    assert!(out.contains("bandwidth = 0.7\n"));
}

#[test]
fn exit_codes_and_error_prefixes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = emseg(d, &["eval", "--pred", "missing.lbl", "--gt", "missing.lbl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ERROR:IO_ERROR:"), "{}", stderr(&o));

    fs::write(d.join("bad.lbl"), b"XXXX\x01\x02\x00\x00").unwrap();
    let o = emseg(d, &["eval", "--pred", "bad.lbl", "--gt", "bad.lbl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ERROR:BAD_MAGIC:"));

    ok(d, &["gen", "--out", "gt.lbl"]);
    let mut bytes = fs::read(d.join("gt.lbl")).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(d.join("short.lbl"), bytes).unwrap();
    let o = emseg(d, &["eval", "--pred", "short.lbl", "--gt", "gt.lbl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("ERROR:TRUNCATED_FILE:"));

    let o = emseg(d, &["optimize", "--labels", "gt.lbl", "--out-field", "f.emb", "--kernel-t", "0.97"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ERROR:INVALID_CONFIG:"));

    let o = emseg(d, &["optimize", "--labels", "gt.lbl", "--out-field", "f.emb", "--p", "0.5"]);
    assert_eq!(o.status.code(), Some(1));

    let o = emseg(d, &["cluster", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR:USAGE:"));

    fs::write(d.join("typo.toml"), "min_sise = 3\n").unwrap();
    let o = emseg(d, &["--config", "typo.toml", "cluster"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR:CONFIG_ERROR:"));

    let o = emseg(d, &["gen", "--height", "10", "--width", "10", "--instances", "9", "--out", "x.lbl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR:INFEASIBLE_SPEC:"));

    let o = emseg(d, &["cluster"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing --field"));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_emseg"))
            .current_dir(dir.path())
            .env("EMSEG_THREADS", threads)
            .args(["gen", "--out", &format!("gt{threads}.lbl")])
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    assert!(run("0").status.success());
    let bad = run("many");
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).starts_with("ERROR:INVALID_CONFIG:"));
    assert_eq!(fs::read(dir.path().join("gt1.lbl")).unwrap(), fs::read(dir.path().join("gt0.lbl")).unwrap());
}

#[test]
fn gradcheck_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--trials", "5"]);
    assert!(out.lines().last().unwrap().starts_with("PASS max_rel_err < 1e-5"), "{out}");
    assert!(out.contains("mode,trial,max_rel_err,compared,min_hinge_gap\n"));
}

#[test]
fn f32_fields_round_trip_through_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--height", "20", "--width", "20", "--instances", "2", "--radius-min", "3", "--radius-max", "4", "--out", "gt.lbl"]);
    ok(d, &["optimize", "--labels", "gt.lbl", "--steps", "50", "--channels", "3", "--dtype", "f32", "--out-field", "f.emb"]);
    // 20-byte header plus 20 * 20 * 3 four-byte values
    assert_eq!(fs::metadata(d.join("f.emb")).unwrap().len(), 20 + 1200 * 4);
    ok(d, &["cluster", "--field", "f.emb", "--method", "meanshift", "--out", "p.lbl"]);
    assert_eq!(fs::metadata(d.join("p.lbl")).unwrap().len(), 16 + 400 * 4);
}
