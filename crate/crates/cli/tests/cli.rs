use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_conan");

/// Shrinks the synthetic world so every command runs in well under a second.
const SMALL: &[&str] = &[
    "--set",
    "synth.n_subjects=10",
    "--set",
    "synth.train_subjects=6",
    "--set",
    "synth.val_subjects=2",
    "--set",
    "synth.d=16",
    "--set",
    "train.max_epochs=3",
    "--set",
    "train.subjects_per_batch=4",
];

fn conan(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env_remove("CONAN_CONFIG_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn small_run(dir: &Path) {
    ok(&conan(dir, &with_small(&["gen-synth", "--out", "ds.toml"])));
    ok(&conan(
        dir,
        &with_small(&[
            "train",
            "--dataset",
            "ds.toml",
            "--out-checkpoint",
            "m.cnck",
            "--log",
            "m.log",
        ]),
    ));
}

#[test]
fn help_lists_every_flag_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&[&str], &[&str])] = &[
        (
            &["--help"],
            &[
                "gen-synth",
                "train",
                "aggregate",
                "eval",
                "inspect",
                "gradcheck",
                "--config",
                "--set",
                "--seed",
                "--threads",
                "--verbose",
            ],
        ),
        (&["gen-synth", "--help"], &["--out", "--width"]),
        (
            &["train", "--help"],
            &["--dataset", "--out-checkpoint", "--log", "--resume"],
        ),
        (
            &["aggregate", "--help"],
            &["--checkpoint", "--dataset", "--template-id", "--all", "--out"],
        ),
        (
            &["eval", "--help"],
            &["--checkpoint", "--dataset", "--baselines", "--split", "--report"],
        ),
        (&["inspect", "--help"], &["--checkpoint", "--dataset", "--template-id"]),
        (
            &["gradcheck", "--help"],
            &["--sizes", "--instances", "--max-entries", "--seed"],
        ),
    ];
    for (args, flags) in cases {
        let text = ok(&conan(dir.path(), args));
        for f in *flags {
            assert!(text.contains(f), "{args:?} help lacks {f}");
        }
        for code in 0..=8 {
            assert!(
                text.contains(&format!("\n  {code}  ")),
                "{args:?} help lacks exit code {code}"
            );
        }
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(conan(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(
        conan(dir.path(), &["--threads", "0", "gradcheck"]).status.code(),
        Some(2)
    );
}

#[test]
fn error_classes_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let code = |args: &[&str]| conan(p, args).status.code();
    assert_eq!(
        code(&[
            "eval",
            "--dataset",
            "missing.toml",
            "--baselines",
            "gap",
            "--report",
            "r.toml"
        ]),
        Some(3)
    );
    assert_eq!(
        code(&["gen-synth", "--out", "x.toml", "--set", "train.no_such_key=1"]),
        Some(4)
    );
    assert_eq!(
        code(&["gen-synth", "--out", "x.toml", "--set", "synth.rho=2.0"]),
        Some(4)
    );

    small_run(p);
    let mut bytes = std::fs::read(p.join("m.cnck")).unwrap();
    let n = bytes.len();
    bytes[n - 16] ^= 0xff;
    std::fs::write(p.join("bad.cnck"), bytes).unwrap();
    assert_eq!(
        code(&[
            "inspect",
            "--checkpoint",
            "bad.cnck",
            "--dataset",
            "ds.toml",
            "--template-id",
            "s0009-p0"
        ]),
        Some(5)
    );
}

#[test]
fn small_pipeline_and_inspect_weights() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_run(p);

    let log = std::fs::read_to_string(p.join("m.log")).unwrap();
    assert!(
        log.lines().any(|l| l == "# n_subjects = 10"),
        "config echo missing:\n{log}"
    );
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "epoch\ttrain_loss\tval_rank1");
    assert!(rows.len() >= 2);
    assert!(p.join("m.log.timing").exists());

    let table = ok(&conan(
        p,
        &[
            "eval",
            "--checkpoint",
            "m.cnck",
            "--dataset",
            "ds.toml",
            "--baselines",
            "gap",
            "--split",
            "test",
            "--report",
            "r.toml",
        ],
    ));
    assert!(table.contains("gap") && table.contains("rank-1"));
    let report: toml::Table = toml::from_str(&std::fs::read_to_string(p.join("r.toml")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(report["config"]["train"].is_table());

    let out = ok(&conan(
        p,
        &[
            "inspect",
            "--checkpoint",
            "m.cnck",
            "--dataset",
            "ds.toml",
            "--template-id",
            "s0009-p0",
        ],
    ));
    let weights: Vec<f64> = out
        .lines()
        .skip(2)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    let (ds, _) = conan::io::read_dataset(&p.join("ds.toml")).unwrap();
    let n = ds.templates.iter().find(|t| t.id == "s0009-p0").unwrap().len();
    assert_eq!(weights.len(), n);
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(weights.windows(2).all(|w| w[0] <= w[1]));

    ok(&conan(
        p,
        &[
            "aggregate",
            "--checkpoint",
            "m.cnck",
            "--dataset",
            "ds.toml",
            "--all",
            "--out",
            "agg.toml",
        ],
    ));
    let agg: toml::Table = toml::from_str(&std::fs::read_to_string(p.join("agg.toml")).unwrap()).unwrap();
    assert_eq!(agg["results"].as_array().unwrap().len(), ds.templates.len());
    assert_eq!(
        conan(
            p,
            &[
                "aggregate",
                "--checkpoint",
                "m.cnck",
                "--dataset",
                "ds.toml",
                "--out",
                "x.toml"
            ]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn same_seed_gives_identical_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_run(a.path());
    small_run(b.path());
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "m.log"), read(b.path(), "m.log"));
    assert_eq!(read(a.path(), "m.cnck"), read(b.path(), "m.cnck"));
    assert_eq!(read(a.path(), "ds.cnan"), read(b.path(), "ds.cnan"));
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&conan(p, &with_small(&["gen-synth", "--out", "a.toml"])));
    ok(&conan(p, &with_small(&["gen-synth", "--out", "b.toml", "--seed", "9"])));
    assert_ne!(
        std::fs::read(p.join("a.cnan")).unwrap(),
        std::fs::read(p.join("b.cnan")).unwrap()
    );
    let m: toml::Table = toml::from_str(&std::fs::read_to_string(p.join("b.toml")).unwrap()).unwrap();
    assert_eq!(m["config"]["synth"]["seed"].as_integer(), Some(9));
}

#[test]
fn resumed_training_continues_the_log() {
    let straight = tempfile::tempdir().unwrap();
    small_run(straight.path());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&conan(p, &with_small(&["gen-synth", "--out", "ds.toml"])));
    let mut first = with_small(&[
        "train",
        "--dataset",
        "ds.toml",
        "--out-checkpoint",
        "m.cnck",
        "--log",
        "m.log",
    ]);
    first.extend(["--set", "train.max_epochs=1"]);
    ok(&conan(p, &first));
    ok(&conan(
        p,
        &with_small(&[
            "train",
            "--dataset",
            "ds.toml",
            "--out-checkpoint",
            "m.cnck",
            "--log",
            "m.log",
            "--resume",
            "m.cnck",
        ]),
    ));
    let rows = |d: &Path| {
        std::fs::read_to_string(d.join("m.log"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(rows(p), rows(straight.path()));
}

#[test]
fn config_dir_supplies_defaults_and_set_wins() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("conan.toml"),
        "[synth]\nn_subjects = 7\ntrain_subjects = 3\nval_subjects = 2\nd = 8\n",
    )
    .unwrap();
    let out = Command::new(BIN)
        .current_dir(p)
        .env("CONAN_CONFIG_DIR", p)
        .args(["gen-synth", "--out", "ds.toml", "--set", "synth.d=12"])
        .output()
        .unwrap();
    ok(&out);
    let m: toml::Table = toml::from_str(&std::fs::read_to_string(p.join("ds.toml")).unwrap()).unwrap();
    assert_eq!(m["config"]["synth"]["n_subjects"].as_integer(), Some(7));
    assert_eq!(m["d"].as_integer(), Some(12));
}

#[test]
fn gradcheck_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&conan(
        dir.path(),
        &["gradcheck", "--sizes", "8x2", "--instances", "2", "--seed", "3"],
    ));
    assert_eq!(out.matches("PASS").count(), 2);
}

#[test]
fn default_config_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&conan(p, &["gen-synth", "--out", "ds.toml"]));
    ok(&conan(
        p,
        &[
            "train",
            "--dataset",
            "ds.toml",
            "--out-checkpoint",
            "m.cnck",
            "--log",
            "m.log",
        ],
    ));
    ok(&conan(
        p,
        &[
            "eval",
            "--checkpoint",
            "m.cnck",
            "--dataset",
            "ds.toml",
            "--baselines",
            "gap",
            "--report",
            "r.toml",
        ],
    ));
    assert!(p.join("r.toml").exists());
}
