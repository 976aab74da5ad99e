use std::path::Path;
use std::process::{Command, Output};

use thickslice::nifti::write_nifti;
use thickslice::simulate::{make_phantom, make_smooth_phantom, PhantomSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_thickslice"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "
target_spacing = 2.0
total_epochs = 4
svr_interval = 2
[v2v]
iterations = 5
[svr]
mode = \"direct\"
iterations = 3
smoothing = [0.0]
[srr]
[srr.decoder]
levels = 2
channels = 4
";

fn simulated(dir: &Path) -> Vec<String> {
    let gt = make_smooth_phantom([16; 3], 2.0, 10, 1).unwrap();
    let gt_path = dir.join("gt.nii");
    write_nifti(&gt, &gt_path).unwrap();
    let sim = dir.join("sim");
    let cfg = dir.join("data.toml");
    std::fs::write(&cfg, "in_plane = 2.0\nthickness = 6.0\n").unwrap();
    let out = run(&["simulate", "--out", path(&sim), "--gt", path(&gt_path), "--config", path(&cfg), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ["axial", "coronal", "sagittal"]
        .iter()
        .map(|o| path(&sim.join("gt").join(format!("{o}.nii"))).to_string())
        .collect()
}

#[test]
fn simulate_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let stacks = simulated(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out_vol = dir.path().join("vol.nii");
    let report = dir.path().join("report");
    let mut args = vec!["reconstruct", "--stacks"];
    args.extend(stacks.iter().map(String::as_str));
    args.extend(["--config", path(&cfg), "--out", path(&out_vol), "--report", path(&report)]);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 SVR passes, 4 SRR epochs"));
    assert!(out_vol.exists());
    for f in ["report.toml", "srr_trace.csv", "transforms.txt"] {
        assert!(report.join(f).exists(), "{f}");
    }
    let out = run(&["eval", "--volume", path(&out_vol), "--reference", path(&out_vol)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("psnr inf"));
}

#[test]
fn svr_and_srr_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let stacks = simulated(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let table = dir.path().join("t.txt");
    let gt = dir.path().join("gt.nii");
    let mut args = vec!["svr", "--stacks"];
    args.extend(stacks.iter().map(String::as_str));
    args.extend(["--volume", path(&gt), "--config", path(&cfg), "--out", path(&table)]);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.lines().filter(|l| !l.starts_with('#')).count() > 0);

    let vol = dir.path().join("srr.nii");
    let mut args = vec!["srr", "--stacks"];
    args.extend(stacks.iter().map(String::as_str));
    args.extend(["--transforms", path(&table), "--config", path(&cfg), "--out", path(&vol)]);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(vol.exists());
}

#[test]
fn gmm_pve_reports_components() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec {
        dims: [32; 3],
        spacing: [1.6; 3],
        ..PhantomSpec::default()
    };
    let gt = make_phantom(&spec).unwrap().grid;
    let mut mask = gt.clone();
    mask.data.iter_mut().for_each(|v| *v = f64::from(u8::from(*v > 0.1)));
    let p = dir.path().join("v.nii");
    let m = dir.path().join("m.nii");
    write_nifti(&gt, &p).unwrap();
    write_nifti(&mask, &m).unwrap();
    let hist = dir.path().join("h.csv");
    let out = run(&["gmm-pve", "--volume", path(&p), "--mask", path(&m), "--hist", path(&hist)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = String::from_utf8_lossy(&out.stdout);
    assert_eq!(s.matches("component").count(), 3);
    assert!(s.contains("pve_proxy"));
    assert!(hist.exists());
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.nii");
    std::fs::write(&bad, [0u8; 400]).unwrap();
    let out = run(&["eval", "--volume", path(&bad), "--reference", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["eval", "--volume", "/no/such/file.nii", "--reference", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "total_epochs = 1\nsvr_interval = 5\n").unwrap();
    let out = run(&["reconstruct", "--stacks", path(&bad), "--config", path(&cfg), "--out", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let stacks = simulated(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY.replace("[srr]\n", "[srr]\nlr = 1e300\n")).unwrap();
    let out_vol = dir.path().join("vol.nii");
    let report = dir.path().join("report");
    let mut args = vec!["reconstruct", "--stacks"];
    args.extend(stacks.iter().map(String::as_str));
    args.extend(["--config", path(&cfg), "--out", path(&out_vol), "--report", path(&report)]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report.join("report.toml").exists());
}
