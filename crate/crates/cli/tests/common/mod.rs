//! End-to-end checks that drive the `qsm` binary. Each returns a short
//! summary on success and a description of the first problem otherwise, so
//! the same checks serve the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use qsm_cli::config::{ExperimentConfig, WeightSweep};
use qsm_cli::error::{EXIT_CONFIG, EXIT_FILE, EXIT_GRID, EXIT_STATE};
use qsm_core::classical::{tkd_invert, TkdConfig};
use qsm_core::dipole::{dipole_kernel, forward_field, Orientation};
use qsm_core::io::read_volume;
use qsm_core::loss::HyperParams;
use qsm_core::metrics::nrmse;
use qsm_core::phantom::{build_phantom, PhantomSpec};

pub type Check = Result<String, String>;

pub fn qsm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("qsm binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output, what: &str) -> Result<(), String> {
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{what} failed with {:?}: {}", o.status.code(), stderr(o)))
    }
}

fn expect_code(o: &Output, code: i32, what: &str) -> Result<(), String> {
    match o.status.code() {
        Some(c) if c == code => Ok(()),
        c => Err(format!("{what}: expected exit {code}, got {c:?}: {}", stderr(o))),
    }
}

pub fn small_config(n: usize, steps: u64) -> ExperimentConfig {
    ExperimentConfig {
        phantom: PhantomSpec::sphere_cylinder(n).unwrap(),
        steps,
        ..ExperimentConfig::default()
    }
}

pub fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

/// phantom, forward and tkd through the binary against the same steps
/// through the library.
pub fn pipeline_matches_library(dir: &Path) -> Check {
    let cfg = small_config(16, 2);
    let c = write_config(dir, "pipe.json", &cfg);
    let c = c.to_str().unwrap();
    ok(&qsm(dir, &["--config", c, "--out", "p", "phantom"]), "phantom")?;
    let chi = read_volume(&dir.join("p/chi.qsmv")).map_err(|e| e.to_string())?;
    let (lib_chi, lib_mask) = build_phantom(&cfg.phantom).unwrap();
    if chi.data().iter().zip(lib_chi.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("phantom written by the binary differs from the library".into());
    }
    let b = Orientation::from_direction([0.2, -0.1, 1.0]).unwrap();
    ok(
        &qsm(dir, &["--config", c, "--out", "p", "forward", "--chi", "p/chi.qsmv", "--b", "0.2,-0.1,1"]),
        "forward",
    )?;
    let field = read_volume(&dir.join("p/field.qsmv")).map_err(|e| e.to_string())?;
    let lib_field = forward_field(&lib_chi, &dipole_kernel(lib_chi.grid(), b)).unwrap();
    let field_err = nrmse(&field, &lib_field, None).map_err(|e| e.to_string())?;
    if field_err > 1e-12 {
        return Err(format!("forward field differs from the library by {field_err:e}"));
    }
    let o = qsm(
        dir,
        &[
            "--config", c, "--out", "p", "tkd", "--field", "p/field.qsmv", "--b", "0.2,-0.1,1", "--reference", "p/chi.qsmv",
            "--mask", "p/mask.qsmv",
        ],
    );
    ok(&o, "tkd")?;
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(|e| format!("tkd output: {e}"))?;
    let cli_nrmse = printed["nrmse"].as_f64().ok_or("tkd output has no nrmse")?;
    let lib_tkd = tkd_invert(&lib_field, &dipole_kernel(lib_chi.grid(), b), &TkdConfig::new(HyperParams::default().t_tkd).unwrap()).unwrap();
    let lib_nrmse = nrmse(&lib_tkd, &lib_chi, Some(&lib_mask)).unwrap();
    if (cli_nrmse - lib_nrmse).abs() > 1e-12 * lib_nrmse {
        return Err(format!("tkd nrmse {cli_nrmse:e} vs library {lib_nrmse:e}"));
    }
    Ok(format!("bit-exact phantom, forward nrmse {field_err:.1e}, tkd nrmse {cli_nrmse:.6} matches"))
}

pub fn unknown_key_is_a_config_error(dir: &Path) -> Check {
    let p = dir.join("typo.json");
    std::fs::write(&p, r#"{"noise": {"kind": "gaussian", "sgima": 0.01}}"#).unwrap();
    let o = qsm(dir, &["--config", p.to_str().unwrap(), "config"]);
    expect_code(&o, EXIT_CONFIG, "unknown key")?;
    if !stderr(&o).contains("sgima") {
        return Err(format!("message does not name the key: {}", stderr(&o)));
    }
    Ok("exit 2, key named".into())
}

pub fn cosmos_needs_three_orientations(dir: &Path) -> Check {
    ok(&qsm(dir, &["--out", "c", "phantom"]), "phantom")?;
    for b in ["0,0,1", "1,0,1"] {
        let o = qsm(dir, &["--out", &format!("c/{b}"), "forward", "--chi", "c/chi.qsmv", "--b", b]);
        ok(&o, "forward")?;
    }
    let o = qsm(
        dir,
        &["--out", "c", "cosmos", "--field", "c/0,0,1/field.qsmv", "--b", "0,0,1", "--field", "c/1,0,1/field.qsmv", "--b", "1,0,1"],
    );
    expect_code(&o, EXIT_CONFIG, "cosmos with two orientations")?;
    Ok("two orientations rejected with exit 2".into())
}

pub fn mask_grid_mismatch_is_a_grid_error(dir: &Path) -> Check {
    let a = write_config(dir, "a.json", &small_config(16, 2));
    let b = write_config(dir, "b.json", &small_config(12, 2));
    ok(&qsm(dir, &["--config", a.to_str().unwrap(), "--out", "g16", "phantom"]), "phantom")?;
    ok(&qsm(dir, &["--config", b.to_str().unwrap(), "--out", "g12", "phantom"]), "phantom")?;
    let o = qsm(dir, &["--out", "g", "forward", "--chi", "g16/chi.qsmv", "--mask", "g12/mask.qsmv"]);
    expect_code(&o, EXIT_GRID, "mask on another grid")?;
    Ok("exit 4".into())
}

pub fn malformed_volume_is_a_file_error(dir: &Path) -> Check {
    std::fs::write(dir.join("junk.qsmv"), b"QSMV1 not really\n\x00\x01").unwrap();
    let o = qsm(dir, &["--out", "m", "tkd", "--field", "junk.qsmv"]);
    expect_code(&o, EXIT_FILE, "junk volume")?;
    ok(&qsm(dir, &["--out", "m", "phantom"]), "phantom")?;
    let mut bytes = std::fs::read(dir.join("m/chi.qsmv")).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(dir.join("short.qsmv"), bytes).unwrap();
    let o = qsm(dir, &["--out", "m", "tkd", "--field", "short.qsmv"]);
    expect_code(&o, EXIT_FILE, "truncated volume")?;
    Ok("junk and truncated files give exit 3".into())
}

pub fn missing_checkpoint_is_a_state_error(dir: &Path) -> Check {
    let o = qsm(dir, &["--out", "s", "sweep-orientations", "--checkpoint", "nope.ckpt"]);
    expect_code(&o, EXIT_STATE, "missing checkpoint")?;
    std::fs::write(dir.join("bad.ckpt"), b"QSMCK1\n{}\n").unwrap();
    let o = qsm(dir, &["--out", "s", "kernel-export", "--checkpoint", "bad.ckpt"]);
    expect_code(&o, EXIT_STATE, "corrupt checkpoint")?;
    Ok("missing and corrupt checkpoints give exit 5".into())
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Run configs record their output directory, so those are compared with it
/// blanked out.
fn first_difference(a: &[(PathBuf, Vec<u8>)], b: &[(PathBuf, Vec<u8>)]) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("file count {} vs {}", a.len(), b.len()));
    }
    let config = |bytes: &[u8]| {
        let mut c = ExperimentConfig::from_json(std::str::from_utf8(bytes).ok()?).ok()?;
        c.out_dir = PathBuf::new();
        Some(c)
    };
    a.iter()
        .zip(b)
        .find(|(x, y)| {
            if x.0 != y.0 {
                return true;
            }
            if x.0.file_name().is_some_and(|n| n == "config.json") {
                return config(&x.1).is_none() || config(&x.1) != config(&y.1);
            }
            x.1 != y.1
        })
        .map(|(x, _)| x.0.display().to_string())
}

/// Two-step training on 16³: fast, complete, resumable and reproducible.
pub fn smoke_train_resume_and_determinism(dir: &Path) -> Check {
    let mut cfg = small_config(16, 2);
    cfg.sweep = Some(WeightSweep {
        combinations: vec![[0.5, 0.1, 0.3], [0.4, 0.1, 0.3]],
        ..WeightSweep::default()
    });
    let c = write_config(dir, "smoke.json", &cfg);
    let c = c.to_str().unwrap();
    let start = Instant::now();
    ok(&qsm(dir, &["--config", c, "--out", "t1", "train"]), "train")?;
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(10) {
        return Err(format!("smoke run took {elapsed:?}"));
    }
    let run_dir = dir.join("t1/wm0.500_wg0.100_wd0.300");
    for f in ["config.json", "config.sha256", "loss.csv", "metrics.json", "chi_hat.qsmv", "kernel.qsmv", "checkpoint.ckpt"] {
        if !run_dir.join(f).is_file() {
            return Err(format!("{f} missing from the run directory"));
        }
    }
    let rows = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap().lines().count() - 1;
    if rows != 2 {
        return Err(format!("loss.csv has {rows} rows"));
    }
    let before = read_tree(&dir.join("t1"));
    let o = qsm(dir, &["--config", c, "--out", "t1", "train"]);
    ok(&o, "resumed train")?;
    let skips = stderr(&o).matches("skip ").count();
    if skips != 2 || stderr(&o).contains("train ") {
        return Err(format!("resume did not skip every run: {}", stderr(&o)));
    }
    if let Some(f) = first_difference(&before, &read_tree(&dir.join("t1"))) {
        return Err(format!("resume changed {f}"));
    }
    ok(&qsm(dir, &["--config", c, "--out", "t2", "--threads", "2", "train"]), "second train")?;
    if let Some(f) = first_difference(&before, &read_tree(&dir.join("t2"))) {
        return Err(format!("a second run differs in {f}"));
    }
    if let Ok(e) = std::fs::read_dir(dir.join("t1")) {
        if e.flatten().any(|e| e.file_name().to_string_lossy().starts_with(".staging")) {
            return Err("staging directory left behind".into());
        }
    }
    Ok(format!("2 runs in {:.1} s, resume skipped both, rerun byte-identical", elapsed.as_secs_f64()))
}
