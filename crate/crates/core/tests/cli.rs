use std::path::Path;
use std::process::{Command, Output};

fn scraw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scraw"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run scraw")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = scraw(dir, args);
    assert!(
        out.status.success(),
        "scraw {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn simulate(dir: &Path, clusters: &str) {
    ok(
        dir,
        &[
            "simulate",
            "--genes",
            "60",
            "--cells",
            "120",
            "--clusters",
            clusters,
            "--seed",
            "5",
            "--out",
            "sim",
        ],
    );
}

#[test]
fn help_lists_module_flags() {
    let dir = tempfile::tempdir().unwrap();
    let expect: &[(&str, &[&str])] = &[
        (
            "ingest",
            &["--format", "--min-total", "--gene-ids", "--cell-ids", "--out"],
        ),
        ("estimate", &["--estimator", "--out"]),
        ("fit-zero", &["--estimator", "--out"]),
        ("coex", &["--pairs", "--out", "--tile", "--threads", "--output"]),
        ("diffexp", &["--conditions"]),
        ("gdi", &["--alpha", "--quantile", "--floor"]),
        (
            "simulate",
            &["--config", "--clusters", "--genes", "--cells", "--seed", "--out"],
        ),
        (
            "plot-data",
            &["--run-dir", "--truth", "--max-points", "--bins", "--output"],
        ),
        ("validate", &["--criterion"]),
        (
            "run",
            &[
                "--config",
                "--out",
                "--pairs-format",
                "--estimator",
                "--alpha",
                "--tile",
                "--threads",
                "--seed",
            ],
        ),
    ];
    for (cmd, flags) in expect {
        let help = ok(dir.path(), &[cmd, "--help"]);
        for f in *flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}:\n{help}");
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(scraw(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(scraw(d, &["coex", "x.mtx", "--out", "xml"]).status.code(), Some(2));
    assert_eq!(scraw(d, &["gdi", "x.mtx", "--alpha", "2"]).status.code(), Some(2));
    assert_eq!(scraw(d, &["validate", "--criterion", "12"]).status.code(), Some(2));

    let missing = scraw(d, &["estimate", "missing.mtx"]);
    assert_eq!(missing.status.code(), Some(3));
    std::fs::write(
        d.join("bad.mtx"),
        "%%MatrixMarket matrix coordinate integer general\n2 2 1\n3 1 4\n",
    )
    .unwrap();
    let bad = scraw(d, &["run", "bad.mtx"]);
    assert_eq!(bad.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("ingest-error") && msg.contains("bad.mtx:3"), "{msg}");

    // One gene cannot form a pair table.
    std::fs::write(d.join("one.tsv"), "gene\tc1\tc2\ng1\t1\t2\n").unwrap();
    assert_eq!(scraw(d, &["gdi", "one.tsv"]).status.code(), Some(3));
}

#[test]
fn pipeline_run_is_cached_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "1");
    for f in ["matrix.mtx", "truth_cells.csv", "truth_genes.csv", "simulation.toml"] {
        assert!(d.join("sim").join(f).exists(), "{f}");
    }
    std::fs::write(
        d.join("run.toml"),
        "input = \"sim/matrix.mtx\"\nout_dir = \"out\"\nestimator = \"sqrt\"\ntile = 7\nthreads = 2\n",
    )
    .unwrap();
    let first = ok(d, &["run", "--config", "run.toml"]);
    assert!(!first.contains("cached"), "{first}");
    let manifest = std::fs::read_to_string(d.join("out/manifest.toml")).unwrap();
    let second = ok(d, &["run", "--config", "run.toml", "--threads", "1", "--tile", "256"]);
    assert!(
        second
            .lines()
            .filter(|l| l.contains('\t'))
            .all(|l| !l.ends_with("\tran")),
        "{second}"
    );
    assert_eq!(std::fs::read_to_string(d.join("out/manifest.toml")).unwrap(), manifest);

    // A flag overrides the file and reruns only what depends on it.
    let third = ok(d, &["run", "--config", "run.toml", "--alpha", "0.01"]);
    assert!(third.contains("gdi\tran") && third.contains("coex\tcached"), "{third}");

    // The same inputs in a fresh directory give the same hashes.
    ok(d, &["run", "--config", "run.toml", "--out", "again"]);
    assert_eq!(
        std::fs::read_to_string(d.join("again/manifest.toml")).unwrap(),
        manifest
    );

    let p = ok(
        d,
        &["plot-data", "pvalue-ecdf", "--run-dir", "out", "--output", "ecdf.csv"],
    );
    assert!(p.is_empty());
    let ecdf = std::fs::read_to_string(d.join("ecdf.csv")).unwrap();
    assert_eq!(ecdf.lines().count(), 1 + 60 * 59 / 2);
    ok(
        d,
        &[
            "plot-data",
            "gdi-hist",
            "--run-dir",
            "out",
            "--bins",
            "5",
            "--output",
            "hist.csv",
        ],
    );
    assert_eq!(std::fs::read_to_string(d.join("hist.csv")).unwrap().lines().count(), 6);
    ok(
        d,
        &["estimate", "sim/matrix.mtx", "--estimator", "sqrt", "--out", "est"],
    );
    ok(
        d,
        &[
            "plot-data",
            "estimator-scatter",
            "--run-dir",
            "est",
            "--truth",
            "sim",
            "--estimator",
            "sqrt",
            "--output",
            "s.csv",
        ],
    );
    let s = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(s.contains("nu-sqrt") && s.contains("lambda-sqrt"));
}

#[test]
fn subcommands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "2");
    let m = "sim/matrix.mtx";

    let info = ok(d, &["ingest", m, "--min-total", "1", "--out", "filtered.mtx"]);
    assert!(info.contains("cells\t120"), "{info}");
    ok(d, &["fit-zero", m, "--out", "fz"]);
    let disp = std::fs::read_to_string(d.join("fz/dispersion.csv")).unwrap();
    assert!(disp.starts_with("gene,a,residual,negative_a,fitted\n"));
    assert!(d.join("fz/rho.bin").exists() && d.join("fz/genes.csv").exists());

    std::fs::write(d.join("pairs.txt"), "g1 g2\ng3,g1\n").unwrap();
    ok(d, &["coex", m, "--pairs", "pairs.txt", "--output", "listed.csv"]);
    let listed = std::fs::read_to_string(d.join("listed.csv")).unwrap();
    let lines: Vec<&str> = listed.lines().collect();
    assert_eq!(lines[0], "g1,g2,O11,O10,O01,O00,e11,e10,e01,e00,W,R,p");
    assert_eq!(lines.len(), 3);
    std::fs::write(d.join("unknown.txt"), "g1 nope\n").unwrap();
    assert_eq!(scraw(d, &["coex", m, "--pairs", "unknown.txt"]).status.code(), Some(3));

    ok(d, &["coex", m, "--out", "binary", "--threads", "2", "--tile", "8"]);
    let bin = std::fs::read(d.join("coex.bin")).unwrap();
    assert_eq!(&bin[..8], b"SCRAWCOX");

    ok(d, &["gdi", m, "--alpha", "0.05", "--output", "gdi.csv"]);
    let gdi = std::fs::read_to_string(d.join("gdi.csv")).unwrap();
    assert!(gdi.starts_with("gene,S,GDI,flagged\n"));

    let truth = std::fs::read_to_string(d.join("sim/truth_cells.csv")).unwrap();
    let mut cond = String::from("cell\tcondition\n");
    for line in truth.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        cond.push_str(&format!("{}\tcluster{}\n", f[0], f[1]));
    }
    std::fs::write(d.join("cond.tsv"), cond).unwrap();
    ok(d, &["diffexp", m, "--conditions", "cond.tsv", "--output", "de.csv"]);
    let de = std::fs::read_to_string(d.join("de.csv")).unwrap();
    assert!(de.starts_with("gene,W,dof,p\n"));
    assert_eq!(de.lines().count(), 61);
}

#[test]
fn validate_selected_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["validate", "--criterion", "2", "--criterion", "3"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    assert!(lines[0].starts_with("[PASS] criterion 2"));
    assert!(lines[1].starts_with("[PASS] criterion 3"));
}
