use std::path::Path;
use std::process::{Command, Output};

fn rhsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rhsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "\
banks_per_rank = 1
rows_per_bank = 64
columns_per_row = 1024
bytes_per_row = 128
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    std::fs::write(
        dir.path().join("map.json"),
        r#"{"0":{"0":{"10":[1,5,9],"12":[2]}}}"#,
    )
    .unwrap();
    dir
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = setup();
    assert_eq!(code(&rhsim(dir.path(), &[])), 1);
    assert_eq!(code(&rhsim(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&rhsim(dir.path(), &["simulate", "--bogus"])), 1);
    assert_eq!(code(&rhsim(dir.path(), &["--help"])), 0);
    assert_eq!(code(&rhsim(dir.path(), &["--version"])), 0);
}

#[test]
fn missing_or_malformed_inputs_exit_two() {
    let dir = setup();
    let o = rhsim(dir.path(), &["simulate", "--trace", "absent.trace"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    std::fs::write(dir.path().join("bad.trace"), "10 ACT 0 0 1\n5 ACT 0 0 2\n").unwrap();
    assert_eq!(
        code(&rhsim(dir.path(), &["simulate", "--trace", "bad.trace"])),
        2
    );
    std::fs::write(dir.path().join("bad.toml"), "rows_per_bank = [").unwrap();
    assert_eq!(code(&rhsim(dir.path(), &["simulate", "-c", "bad.toml"])), 2);
    std::fs::write(dir.path().join("pm.txt"), "0101\n").unwrap();
    assert_eq!(
        code(&rhsim(dir.path(), &["ecc-check", "--pmatrix", "pm.txt"])),
        2
    );
}

#[test]
fn invalid_values_exit_three() {
    let dir = setup();
    let o = rhsim(dir.path(), &["simulate", "--set", "single_sided_prob=1.5"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("single_sided_prob"));
    let o = rhsim(
        dir.path(),
        &[
            "analyze",
            "--traffic",
            "pattern=single_sided,rows=5,rounds=10",
            "--sweep",
            "0.5,2",
        ],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn ecc_check_reports_and_fails_on_aliasing_matrix() {
    let dir = setup();
    let o = rhsim(dir.path(), &["ecc-check", "--write-default", "pm.txt"]);
    assert_eq!(code(&o), 0);
    let o = rhsim(
        dir.path(),
        &[
            "ecc-check",
            "--pmatrix",
            "pm.txt",
            "--exhaustive",
            "--words",
            "10",
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("singles_corrected=720/720"));
    assert!(stdout(&o).contains("doubles_silent=0"));

    // replace data column 1 by the XOR of columns 0 and 2: still distinct
    // and non-zero, but some doubles now look like singles
    let text = std::fs::read_to_string(dir.path().join("pm.txt")).unwrap();
    let mut rows: Vec<Vec<u8>> = text.lines().map(|l| l.bytes().collect()).collect();
    for r in &mut rows {
        r[1] = if r[0] != r[2] { b'1' } else { b'0' };
    }
    let alias: String = rows
        .iter()
        .map(|r| String::from_utf8(r.clone()).unwrap() + "\n")
        .collect();
    std::fs::write(dir.path().join("alias.txt"), alias).unwrap();
    let o = rhsim(
        dir.path(),
        &[
            "ecc-check",
            "--pmatrix",
            "alias.txt",
            "--exhaustive",
            "--words",
            "4",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stdout(&o));
}

#[test]
fn simulate_with_empty_map_reports_no_flips() {
    let dir = setup();
    let o = rhsim(
        dir.path(),
        &[
            "simulate",
            "-c",
            "small.toml",
            "--set",
            "double_sided_prob=1",
            "--set",
            "rowhammer_threshold=0",
            "--traffic",
            "pattern=double_sided,rows=11,acts_per_round=2,rounds=100",
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("\"total_bitflips\": 0"));
}

#[test]
fn simulate_writes_flip_log_and_side_files() {
    let dir = setup();
    let o = rhsim(
        dir.path(),
        &[
            "simulate",
            "-c",
            "small.toml",
            "--set",
            "device_file=\"map.json\"",
            "--set",
            "double_sided_prob=1",
            "--set",
            "rowhammer_threshold=0",
            "--set",
            "rh_stat_file=\"flips.txt\"",
            "--set",
            "trr_stats_dump=\"trr.txt\"",
            "--set",
            "enable_memory_corruption=true",
            "--traffic",
            "pattern=double_sided,rows=10,acts_per_round=2,rounds=5",
            "--report",
            "report.json",
            "--dump-memory",
            "mem.txt",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = stdout(&o);
    assert_eq!(log.lines().filter(|l| l.starts_with("bitflip ")).count(), 3);
    let flips = std::fs::read_to_string(dir.path().join("flips.txt")).unwrap();
    let cols: Vec<&str> = flips
        .lines()
        .map(|l| l.split(' ').nth(4).unwrap())
        .collect();
    assert_eq!(cols, ["1", "5", "9"]);
    assert!(flips.lines().all(|l| l.ends_with("double_sided")));
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(report.contains("\"total_bitflips\": 3"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("trr.txt"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    let mem = std::fs::read_to_string(dir.path().join("mem.txt")).unwrap();
    // bits 1, 5 and 9 cleared from the 0xFF fill
    assert!(mem.starts_with("0 0 10 ddfd"), "{mem}");
}

#[test]
fn analyze_counts_crossings_by_hand() {
    let dir = setup();
    // row 20 hammered 300 times: victims 19 and 21 at exposure 300
    let trace: String = (1..=300).map(|t| format!("{t} ACT 0 0 20\n")).collect();
    std::fs::write(dir.path().join("h.trace"), trace).unwrap();
    let run = |threshold: &str| {
        let o = rhsim(
            dir.path(),
            &[
                "analyze",
                "-c",
                "small.toml",
                "--trace",
                "h.trace",
                "--sweep",
                "0,1",
                "--threshold",
                threshold,
            ],
        );
        assert_eq!(code(&o), 0);
        stdout(&o)
    };
    assert_eq!(run("300"), "p,expected_flips,crossings\n0e0,0,2\n1e0,2,2\n");
    assert_eq!(run("301"), "p,expected_flips,crossings\n0e0,0,0\n1e0,0,0\n");
    let o = rhsim(
        dir.path(),
        &[
            "analyze",
            "-c",
            "small.toml",
            "--trace",
            "h.trace",
            "--sweep",
            "1",
            "--threshold",
            "0",
            "--map",
            "map.json",
            "--windows",
            "w.csv",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "p,expected_flips,crossings\n1e0,0,2\n");
    let w = std::fs::read_to_string(dir.path().join("w.csv")).unwrap();
    assert_eq!(
        w,
        "window,acts,victims,max_exposure,crossings\n0,300,2,300,2\n"
    );
}

#[test]
fn genmap_is_deterministic() {
    let dir = setup();
    let args = |out: &'static str| {
        vec![
            "genmap",
            "--geometry",
            "small.toml",
            "--params",
            "density=0.01,strong_fraction=0.5",
            "--seed",
            "4",
            "-o",
            out,
        ]
    };
    assert_eq!(code(&rhsim(dir.path(), &args("a.json"))), 0);
    assert_eq!(code(&rhsim(dir.path(), &args("b.json"))), 0);
    let mut seq = args("c.json");
    seq.insert(0, "--sequential");
    assert_eq!(code(&rhsim(dir.path(), &seq)), 0);
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert!(a.len() > 2);
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());
    assert_eq!(a, std::fs::read(dir.path().join("c.json")).unwrap());
}

#[test]
fn compare_self_is_zero_and_grid_is_a_matrix() {
    let dir = setup();
    std::fs::write(
        dir.path().join("other.json"),
        r#"{"0":{"0":{"10":[1,5,700]}}}"#,
    )
    .unwrap();
    let o = rhsim(
        dir.path(),
        &[
            "compare",
            "-c",
            "small.toml",
            "--ref",
            "map.json",
            "--test",
            "map.json",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        stdout(&o),
        "# jsd_log_base=2\nreference,map.json\nmap.json,0.000000\n"
    );
    let o = rhsim(
        dir.path(),
        &[
            "compare",
            "-c",
            "small.toml",
            "--grid",
            "--ref",
            "map.json",
            "other.json",
            "--test",
            "map.json",
            "other.json",
            "--row",
            "10",
            "--pgm",
            "g.pgm",
        ],
    );
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2].split(',').nth(1), Some("0.000000"));
    assert_eq!(lines[3].split(',').nth(2), Some("0.000000"));
    assert_ne!(lines[2].split(',').nth(2), Some("0.000000"));
    let pgm = std::fs::read_to_string(dir.path().join("g.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n32 32\n"));
    // the superimposed grid reads back as a comparison input
    let o = rhsim(
        dir.path(),
        &[
            "compare",
            "-c",
            "small.toml",
            "--ref",
            "g.pgm",
            "--test",
            "g.pgm",
            "--binary",
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).ends_with(",0.000000\n"));
}
