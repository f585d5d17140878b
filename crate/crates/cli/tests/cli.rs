use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn streamsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamsel")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "\
[scenario]
n_clips = 3
n_events = 2
seed = 11
";

/// Writes a small config and generates its scenario files.
fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.ini"), SMALL).unwrap();
    let o = streamsel(&["gen-scenario", "--config", p(&dir.path().join("c.ini")), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn gen_scenario_is_deterministic() {
    let a = setup();
    let b = setup();
    for name in ["scenario.txt", "ground_truth.txt", "queries.txt"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name}");
        assert!(!x.is_empty());
    }
}

#[test]
fn simulate_reports_are_byte_identical() {
    let dir = setup();
    let cfg = dir.path().join("c.ini");
    let run = |out: &str| {
        let report = dir.path().join(out);
        let o = streamsel(&["simulate", "--config", p(&cfg), "--scenario", p(&dir.path().join("scenario.txt")), "--report", p(&report)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(report).unwrap()
    };
    let a = run("a.txt");
    assert_eq!(a, run("b.txt"));
    assert!(a.contains("clips_processed=3\n"));
    assert!(!a.contains("[timings]"));
}

#[test]
fn defaults_are_echoed_and_missing_keys_noticed() {
    let dir = setup();
    let o = streamsel(&["simulate", "--config", p(&dir.path().join("c.ini"))]);
    assert!(o.status.success());
    let report = stdout(&o);
    assert!(report.contains("window=6272\n"));
    assert!(report.contains("max_mem=16\n"));
    let notices = stderr(&o);
    assert!(notices.contains("[scenario] dim not set"), "{notices}");
    assert!(notices.contains("section [pipeline] absent"), "{notices}");

    fs::write(dir.path().join("noseed.ini"), "[scenario]\nn_clips = 2\n").unwrap();
    let o = streamsel(&["gen-scenario", "--config", p(&dir.path().join("noseed.ini")), "--out", p(&dir.path().join("g"))]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("seed not set, using default 0"));
}

#[test]
fn flags_override_the_file() {
    let dir = setup();
    let cfg = dir.path().join("c.ini");
    fs::write(&cfg, format!("{SMALL}\n[pipeline]\nmax_mem = 4\nwindow = 4000\n")).unwrap();
    let o = streamsel(&["simulate", "--config", p(&cfg), "--max-mem", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = stdout(&o);
    assert!(r.contains("max_mem=2\n"));
    assert!(r.contains("window=4000\n"));
}

#[test]
fn malformed_config_cites_the_line() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[pipeline]\nmax_mem = 4\n# fine\nwindow 6272\n").unwrap();
    let o = streamsel(&["simulate", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));

    fs::write(&cfg, "[pipeline]\nmax_memory = 4\n").unwrap();
    let o = streamsel(&["simulate", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"));
}

#[test]
fn invalid_selector_lists_valid_names() {
    let o = streamsel(&["simulate", "--selector", "random"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    for name in ["attention", "uniform", "mean-pool", "kmeans"] {
        assert!(e.contains(name), "{e}");
    }
}

#[test]
fn context_overflow_exits_three() {
    let dir = setup();
    let o = streamsel(&["simulate", "--config", p(&dir.path().join("c.ini")), "--window", "3000"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("error [memory]: context overflow"), "{}", stderr(&o));
}

fn write_trace(dir: &TempDir) -> std::path::PathBuf {
    let trace = dir.path().join("run.trace");
    let o = streamsel(&["simulate", "--config", p(&dir.path().join("c.ini")), "--trace", p(&trace)]);
    assert!(o.status.success(), "{}", stderr(&o));
    trace
}

#[test]
fn select_lists_each_clip() {
    let dir = setup();
    let trace = write_trace(&dir);
    let o = streamsel(&["select", "--trace", p(&trace), "--n", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().skip(1).map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f[0], i.to_string());
        assert_eq!(f[1], "3136");
        let idx: Vec<usize> = f[2].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(idx.len(), 7);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
    let o = streamsel(&["select", "--trace", p(&trace), "--n", "4000"]);
    assert_eq!(o.status.code(), Some(2));
    let o = streamsel(&["select", "--trace", p(&trace), "--layers", "3"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn avg_and_max_agree_on_a_single_head_model() {
    let dir = setup();
    let cfg = dir.path().join("c.ini");
    fs::write(&cfg, format!("{SMALL}\n[model]\nn_heads = 1\nhead_dim = 16\n")).unwrap();
    let trace = write_trace(&dir);
    let run = |agg: &str| {
        let o = streamsel(&["select", "--trace", p(&trace), "--agg", agg, "--n", "20"]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    assert_eq!(run("avg"), run("max"));
}

#[test]
fn retrieve_ranks_captions() {
    let dir = setup();
    let trace = write_trace(&dir);
    let queries = dir.path().join("queries.txt");
    let run = |extra: &[&str]| {
        let mut args = vec!["retrieve", "--state", p(&trace), "--query-file", p(&queries)];
        args.extend_from_slice(extra);
        let o = streamsel(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let full = run(&["--lambda", "1.0"]);
    assert!(full.contains("tokens_used="));
    // with lambda 1 the ranking is by similarity alone, so the scores never increase
    let block: Vec<f64> = full
        .lines()
        .skip(2)
        .take_while(|l| l.starts_with("rank="))
        .map(|l| l.split(' ').find_map(|f| f.strip_prefix("score=")).unwrap().parse().unwrap())
        .collect();
    assert_eq!(block.len(), 3);
    assert!(block.windows(2).all(|w| w[0] >= w[1]));
    let top1 = run(&["--lambda", "1.0", "--k", "1"]);
    assert_eq!(top1.lines().filter(|l| l.starts_with("rank=")).count(), 2);
}

#[test]
fn unreadable_state_exits_three() {
    let dir = setup();
    let bad = dir.path().join("bad.trace");
    fs::write(&bad, b"not a trace").unwrap();
    let queries = dir.path().join("queries.txt");
    let o = streamsel(&["retrieve", "--state", p(&bad), "--query-file", p(&queries)]);
    assert_eq!(o.status.code(), Some(3));
    let o = streamsel(&["retrieve", "--state", p(&dir.path().join("missing")), "--query-file", p(&queries)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn empty_store_exits_four() {
    let dir = setup();
    let cfg = dir.path().join("c.ini");
    fs::write(&cfg, "[scenario]\nn_clips = 1\nt_frames = 8\nn_events = 0\n").unwrap();
    let trace = write_trace(&dir);
    let o = streamsel(&["retrieve", "--state", p(&trace), "--query-file", p(&dir.path().join("queries.txt"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("error [caption_retrieval]"));
}

#[test]
fn sweep_table_is_deterministic() {
    let dir = setup();
    let cfg = dir.path().join("c.ini");
    let run = || {
        let o = streamsel(&["sweep", "--config", p(&cfg), "--param", "max-mem", "--values", "0,4"]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let t = run();
    assert_eq!(t, run());
    assert_eq!(t.lines().count(), 3);
    assert!(t.lines().nth(1).unwrap().starts_with("0 3 "));
    let o = streamsel(&["sweep", "--config", p(&cfg), "--param", "lambda"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn global_uniform_is_labelled_offline() {
    let dir = setup();
    let o = streamsel(&["simulate", "--config", p(&dir.path().join("c.ini")), "--global-uniform"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = stdout(&o);
    assert!(r.contains("offline"));
    assert_eq!(r.lines().find_map(|l| l.strip_prefix("frames=")).unwrap().split(',').count(), 32);
}
