//! End-to-end subcommand tests against the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gridmend")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Manifest lines that must be identical across reruns (everything except
/// wall time).
fn manifest_stable_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .expect("manifest exists")
        .lines()
        .filter(|l| !l.starts_with("wall_ms="))
        .map(String::from)
        .collect()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

#[test]
fn synth_emits_expected_dims_and_manifest() {
    let ws = Workspace::new();
    let out = ws.p("d.ugb");
    run_ok(&["synth", "--days", "4", "--seed", "7", "-o", &out]);
    let bytes = std::fs::read(ws.path("d.ugb")).unwrap();
    assert_eq!(&bytes[0..4], b"UGB1");
    assert_eq!(bytes[4], 1); // version
    assert_eq!(bytes[5], 0); // f32
    assert_eq!(bytes[6], 3); // ndim
    let dims: Vec<u32> = (0..3)
        .map(|i| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()))
        .collect();
    assert_eq!(dims, vec![96, 64, 64]);
    assert!(ws.path("d.ugb.manifest").exists());
}

#[test]
fn impute_with_all_valid_mask_reproduces_input() {
    let ws = Workspace::new();
    run_ok(&["synth", "--days", "1", "--seed", "3", "-o", &ws.p("s.ugb")]);
    run_ok(&["chunk", "--input", &ws.p("s.ugb"), "--t", "2", "-o", &ws.p("blocks")]);
    run_ok(&[
        "train",
        "--data",
        &ws.p("blocks"),
        "--t",
        "2",
        "--iters",
        "1",
        "--seed",
        "1",
        "--width-scale",
        "1/32",
        "--batch-size",
        "2",
        "-o",
        &ws.p("m.uckp"),
        "--log",
        &ws.p("log.csv"),
    ]);
    // all-valid mask: composite must return the input bit-for-bit
    let block = ws.p("blocks/block_00000.ugb");
    let ones_mask = ws.path("ones.ugb");
    {
        let blk = gridmend_core::io::ugb::read_grid_block(Path::new(&block)).unwrap();
        let m = gridmend_core::masking::MaskBlock::all_valid(blk.t(), blk.h(), blk.w());
        gridmend_core::io::ugb::write_mask_block(&ones_mask, &m).unwrap();
    }
    run_ok(&[
        "impute",
        "--ckpt",
        &ws.p("m.uckp"),
        "--input",
        &block,
        "--mask",
        &ws.p("ones.ugb"),
        "-o",
        &ws.p("out.ugb"),
    ]);
    let a = std::fs::read(&block).unwrap();
    let b = std::fs::read(ws.path("out.ugb")).unwrap();
    assert_eq!(a, b, "composite with all-valid mask must be byte-identical to the input");
}

#[test]
fn rasterize_round_trip() {
    let ws = Workspace::new();
    std::fs::write(
        ws.path("events.csv"),
        "timestamp,lon,lat\n2016-02-01T00:30:00,0.5,7.5\n2016-02-01T02:10:00,3.5,4.5\nbadrow\n",
    )
    .unwrap();
    std::fs::write(
        ws.path("region.kv"),
        "lon_min=0\nlon_max=8\nlat_min=0\nlat_max=8\ngrid_w=8\ngrid_h=8\n",
    )
    .unwrap();
    let out = run_ok(&[
        "rasterize",
        "--events",
        &ws.p("events.csv"),
        "--region",
        &ws.p("region.kv"),
        "--start",
        "2016-02-01T00:00:00",
        "--frames",
        "3",
        "-o",
        &ws.p("r.ugb"),
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("2 events"), "stdout: {text}");
    assert!(text.contains("1 malformed"), "stdout: {text}");
    let series = gridmend_core::io::ugb::read_series(&ws.path("r.ugb")).unwrap();
    assert_eq!(series.n_frames(), 3);
    // (lon 0.5, lat 7.5) -> row 0, col 0 at frame 0
    assert_eq!(series.frame(0)[0], 1.0);
}

#[test]
fn exit_codes_match_error_classes() {
    let ws = Workspace::new();
    // usage: unknown flag
    let out = run(&["synth", "--nope"]);
    assert_eq!(out.status.code(), Some(1));
    // data error: bad magic
    std::fs::write(ws.path("bad.ugb"), b"XXXXxxxxxxxxxxxxxxxx").unwrap();
    let out = run(&["chunk", "--input", &ws.p("bad.ugb"), "--t", "2", "-o", &ws.p("out")]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // usage error from a core Param error: bad mask mode
    run_ok(&["synth", "--days", "1", "--seed", "0", "-o", &ws.p("s.ugb")]);
    let out = run(&[
        "mask", "--mode", "nope", "--input", &ws.p("s.ugb"), "--seed", "0", "-o", &ws.p("m.ugb"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical_with_equal_digests() {
    // the determinism contract: identical flags + --threads 1 reproduce
    // byte-identical outputs and manifest digests
    let ws1 = Workspace::new();
    let ws2 = Workspace::new();
    for ws in [&ws1, &ws2] {
        run_ok(&["--threads", "1", "synth", "--days", "2", "--seed", "11", "-o", &ws.p("s.ugb")]);
        run_ok(&["--threads", "1", "chunk", "--input", &ws.p("s.ugb"), "--t", "3", "-o", &ws.p("blk")]);
        run_ok(&[
            "--threads",
            "1",
            "mask",
            "--mode",
            "biased",
            "--input",
            &ws.p("blk/block_00000.ugb"),
            "--seed",
            "4",
            "-o",
            &ws.p("m.ugb"),
        ]);
        run_ok(&[
            "--threads",
            "1",
            "train",
            "--data",
            &ws.p("blk"),
            "--t",
            "3",
            "--iters",
            "2",
            "--seed",
            "5",
            "--width-scale",
            "1/32",
            "--batch-size",
            "2",
            "-o",
            &ws.p("c.uckp"),
            "--log",
            &ws.p("log.csv"),
        ]);
        run_ok(&[
            "--threads",
            "1",
            "impute",
            "--ckpt",
            &ws.p("c.uckp"),
            "--input",
            &ws.p("blk/block_00000.ugb"),
            "--mask",
            &ws.p("m.ugb"),
            "-o",
            &ws.p("i.ugb"),
        ]);
        run_ok(&[
            "--threads",
            "1",
            "eval",
            "--pred",
            &ws.p("i.ugb"),
            "--gt",
            &ws.p("blk/block_00000.ugb"),
            "--mask",
            &ws.p("m.ugb"),
            "-o",
            &ws.p("metrics.csv"),
        ]);
    }
    for name in ["s.ugb", "m.ugb", "c.uckp", "log.csv", "i.ugb", "metrics.csv"] {
        let a = std::fs::read(ws1.path(name)).unwrap();
        let b = std::fs::read(ws2.path(name)).unwrap();
        assert_eq!(a, b, "output {name} differs between identical reruns");
    }
    for name in ["s.ugb.manifest", "m.ugb.manifest", "c.uckp.manifest", "i.ugb.manifest"] {
        // paths differ across workspaces; compare digest values only
        let digests = |p: &Path| -> Vec<String> {
            manifest_stable_lines(p)
                .iter()
                .filter(|l| l.starts_with("input.") || l.starts_with("output."))
                .map(|l| l.rsplit('=').next().unwrap().to_string())
                .collect()
        };
        assert_eq!(
            digests(&ws1.path(name)),
            digests(&ws2.path(name)),
            "manifest digests differ for {name}"
        );
    }
}

#[test]
fn train_log_csv_schema() {
    let ws = Workspace::new();
    run_ok(&["synth", "--days", "1", "--seed", "2", "-o", &ws.p("s.ugb")]);
    run_ok(&["chunk", "--input", &ws.p("s.ugb"), "--t", "2", "-o", &ws.p("blk")]);
    run_ok(&[
        "train",
        "--data",
        &ws.p("blk"),
        "--t",
        "2",
        "--iters",
        "2",
        "--seed",
        "0",
        "--width-scale",
        "1/32",
        "--batch-size",
        "2",
        "--val-frac",
        "0.2",
        "-o",
        &ws.p("c.uckp"),
        "--log",
        &ws.p("log.csv"),
    ]);
    let log = std::fs::read_to_string(ws.path("log.csv")).unwrap();
    assert!(log.starts_with("iter,lr,l_total,l_hole,l_valid\n"));
    assert_eq!(log.lines().count(), 3);
    let val = std::fs::read_to_string(ws.path("log.csv.val.csv")).unwrap();
    assert!(val.starts_with("iter,scenario,val_l1_hole\n"));
    assert!(val.contains("random") && val.contains("biased"));
}

#[test]
fn scenario_subcommand_runs_baselines() {
    let ws = Workspace::new();
    run_ok(&["synth", "--days", "2", "--seed", "6", "-o", &ws.p("s.ugb")]);
    // static mask with holes over the dense core
    {
        let mut data = vec![1u8; 64 * 64];
        for r in 18..24 {
            for c in 20..26 {
                data[r * 64 + c] = 0;
            }
        }
        let m = gridmend_core::masking::MaskBlock::new(1, 64, 64, data).unwrap();
        gridmend_core::io::ugb::write_mask_block(&ws.path("scn.ugb"), &m).unwrap();
    }
    std::fs::write(
        ws.path("scn.kv"),
        format!("name=core\nmask={}\nstart_frame=24\nend_frame=48\n", ws.p("scn.ugb")),
    )
    .unwrap();
    run_ok(&[
        "scenario",
        "--baseline",
        "mean",
        "--t",
        "3",
        "--train-series",
        &ws.p("s.ugb"),
        "--series",
        &ws.p("s.ugb"),
        "--scenario",
        &ws.p("scn.kv"),
        "-o",
        &ws.p("mean.csv"),
    ]);
    let text = std::fs::read_to_string(ws.path("mean.csv")).unwrap();
    assert!(text.starts_with("hour,gt_mean,pred_mean\n"));
    assert_eq!(text.lines().count(), 25);
    run_ok(&[
        "scenario",
        "--baseline",
        "nn2",
        "--t",
        "3",
        "--series",
        &ws.p("s.ugb"),
        "--scenario",
        &ws.p("scn.kv"),
        "-o",
        &ws.p("nn2.csv"),
    ]);
}
