//! The ten acceptance criteria, one pass/fail line each. Runs without the
//! libtest harness so the lines are printed even when everything passes.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use affinequant::affine::TransformKind;
use affinequant::block::{BlockParams, PlacementKind, TransformPlacementConfig};
use affinequant::io::{
    decode_container, encode_container, load_calibration, CalibrationSource, StoredTensor, TensorData,
};
use affinequant::optimizer::{optimize_block, BlockResult, OptimizerConfig};
use affinequant::quant::QuantConfig;
use affinequant::suites;
use affinequant::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_affinequant"))
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let t = started.elapsed();
    if t < limit {
        Ok(())
    } else {
        Err(format!("took {t:.1?}, limit {limit:?}"))
    }
}

fn suite(r: affinequant::Result<suites::SuiteReport>) -> Outcome {
    let r = r.map_err(|e| e.to_string())?;
    if r.passed() {
        Ok(r.summary)
    } else {
        Err(format!("{}; first failures: {:?}", r.summary, &r.failures[..r.failures.len().min(3)]))
    }
}

fn merge_error_ordering() -> Outcome {
    let started = Instant::now();
    let out = bin()
        .args(["merge-error", "--all-schemes", "--dims", "512", "--tokens", "256", "--trials", "50", "--seed", "7"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    within(Duration::from_secs(300), started)?;
    let text = String::from_utf8_lossy(&out.stdout);
    let mse = |scheme: &str| -> Result<f64, String> {
        text.lines()
            .find(|l| l.starts_with(&format!("{scheme},")))
            .and_then(|l| l.rsplit(',').next())
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("no {scheme} row in {text}"))
    };
    let (d, fd, f) = (mse("double")?, mse("float-double")?, mse("float")?);
    let band = 1e-7..=1e-1;
    let msg = format!("double {d:e}, float-double {fd:e}, float {f:e} in {:.1?}", started.elapsed());
    if d < 1e-12 && band.contains(&fd) && band.contains(&f) && d < fd && fd < f {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn equivalence() -> Outcome {
    let started = Instant::now();
    let s = suite(suites::equiv_suite(100, 1e-8))?;
    within(Duration::from_secs(120), started)?;
    Ok(s)
}

fn sdd_preservation() -> Outcome {
    let s = suite(suites::sdd_suite(&(0..10).collect::<Vec<_>>()))?;
    let stress = suites::sdd_stress(2.0).map_err(|e| e.to_string())?;
    let msg = format!(
        "{s}; stress: bound {:.3}, forced alpha {:.3}, {} violations, diverged {}",
        stress.bound, stress.forced_alpha, stress.violations, stress.diverged
    );
    if stress.forced_alpha > stress.bound && (stress.violations > 0 || stress.diverged) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn calibration(seed: u64) -> Vec<Tensor> {
    load_calibration(
        &CalibrationSource::Synthetic {
            seed,
            batches: 8,
            tokens: 128,
        },
        64,
    )
    .expect("synthetic calibration")
}

fn alpha_zero_reduction() -> Outcome {
    let params = BlockParams::random(64, 4, 42).map_err(|e| e.to_string())?;
    let calib = calibration(0);
    let full = TransformPlacementConfig::full(Some(QuantConfig::weight(4)));
    let diag = TransformPlacementConfig {
        pre_qkv: PlacementKind::DiagonalOnly,
        pre_out_proj: PlacementKind::DiagonalOnly,
        pre_fc1: PlacementKind::DiagonalOnly,
        ..full
    };
    let zero = OptimizerConfig {
        alpha: Some(0.0),
        ..OptimizerConfig::default()
    };
    let run = |pl: &TransformPlacementConfig, cfg: &OptimizerConfig| {
        optimize_block(0, &params, &calib, pl, cfg).map_err(|e| e.to_string())
    };
    let a = run(&full, &zero)?;
    let b = run(&diag, &OptimizerConfig::default())?;

    for (p, t) in &a.transforms.transforms {
        if t.kind == TransformKind::DiagonalOnly {
            return Err(format!("{p} should be a full or per-head transform"));
        }
        let m = &t.matrix_a;
        let nonzero = (0..m.rows()).flat_map(|i| (0..m.cols()).map(move |j| (i, j))).any(|(i, j)| i != j && m.get(i, j) != 0.0);
        if nonzero {
            return Err(format!("{p}: off-diagonal entries moved with alpha = 0"));
        }
    }
    let bits = |r: &BlockResult| {
        let mut v: Vec<u64> = r.report.epoch_loss.iter().map(|x| x.to_bits()).collect();
        v.push(r.report.final_loss.to_bits());
        v
    };
    if bits(&a) != bits(&b) {
        return Err(format!("trajectories differ: {:?} vs {:?}", a.report.epoch_loss, b.report.epoch_loss));
    }
    let same_diag = a
        .transforms
        .transforms
        .iter()
        .all(|(p, t)| t.matrix_a.diagonal() == b.transforms.transforms[p].matrix_a.diagonal());
    if !same_diag || a.report.label != "diagonal-only" {
        return Err("diagonals or label differ".into());
    }
    Ok(format!(
        "{} epochs bit-identical, final loss {:.3}, label {}",
        a.report.epoch_loss.len(),
        a.report.final_loss,
        a.report.label
    ))
}

fn affine_beats_diagonal() -> Outcome {
    let started = Instant::now();
    let params = BlockParams::random(64, 4, 42).map_err(|e| e.to_string())?;
    let placement = TransformPlacementConfig::full(Some(QuantConfig::weight(4)));
    let mut wins = 0;
    let mut below_initial = true;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let calib = calibration(seed);
        let run = |alpha: f64| {
            let cfg = OptimizerConfig {
                alpha: Some(alpha),
                ..OptimizerConfig::default()
            };
            optimize_block(0, &params, &calib, &placement, &cfg).map_err(|e| e.to_string())
        };
        let affine = run(1e-2)?.report;
        let diag = run(0.0)?.report;
        if affine.initial_loss != diag.initial_loss {
            return Err(format!("seed {seed}: initial losses differ"));
        }
        if affine.final_loss <= diag.final_loss {
            wins += 1;
        }
        below_initial &= affine.final_loss < affine.initial_loss && diag.final_loss < diag.initial_loss;
        rows.push(format!("{:.0}/{:.0}/{:.0}", affine.initial_loss, affine.final_loss, diag.final_loss));
    }
    within(Duration::from_secs(300), started)?;
    let msg = format!("affine wins {wins}/5 (initial/affine/diagonal: {})", rows.join(", "));
    if wins >= 4 && below_initial {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_stored(rng: &mut ChaCha8Rng) -> StoredTensor {
    let rank = rng.random_range(0..4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..5)).collect();
    let n: usize = shape.iter().product();
    let data = match rng.random_range(0..4) {
        0 => TensorData::F32((0..n).map(|_| f32::from_bits(rng.random())).filter(|v| !v.is_nan()).chain(std::iter::repeat(0.5)).take(n).collect()),
        1 => TensorData::F64((0..n).map(|_| f64::from_bits(rng.random())).filter(|v| !v.is_nan()).chain(std::iter::repeat(-0.0)).take(n).collect()),
        2 => TensorData::U8((0..n).map(|_| rng.random()).collect()),
        _ => TensorData::U16((0..n).map(|_| rng.random()).collect()),
    };
    StoredTensor::new(shape, data).expect("consistent shape")
}

fn io_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tensors: Vec<(String, StoredTensor)> = (0..1000).map(|i| (format!("t{i}"), random_stored(&mut rng))).collect();
    let bytes = encode_container(&tensors).map_err(|e| e.to_string())?;
    let back = decode_container(&bytes).map_err(|e| e.to_string())?;
    let bit_exact = back.len() == tensors.len()
        && back.iter().zip(&tensors).all(|((na, a), (nb, b))| {
            na == nb
                && a.shape == b.shape
                && match (&a.data, &b.data) {
                    (TensorData::F32(x), TensorData::F32(y)) => x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())),
                    (TensorData::F64(x), TensorData::F64(y)) => x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())),
                    (x, y) => x == y,
                }
        });
    if !bit_exact {
        return Err("round trip is not bit-exact".into());
    }

    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[1] = b'x';
    let mut bad_version = bytes.clone();
    bad_version[4] = 2;
    // point the last entry's offset back to zero, keeping the header length
    let last = header.rfind("\"byte_offset\":").unwrap();
    let digits_at = last + "\"byte_offset\":".len();
    let digits = header[digits_at..].chars().take_while(char::is_ascii_digit).count();
    let mut overlap = bytes.clone();
    for k in 0..digits {
        overlap[16 + digits_at + k] = if k + 1 == digits { b'0' } else { b' ' };
    }
    let truncated = &bytes[..bytes.len() - 3];

    let checks = [
        ("bad magic", matches!(decode_container(&bad_magic), Err(Error::BadMagic))),
        ("version", matches!(decode_container(&bad_version), Err(Error::VersionMismatch { .. }))),
        ("overlap", matches!(decode_container(&overlap), Err(Error::OverlappingOffsets(_)))),
        ("truncated", matches!(decode_container(truncated), Err(Error::Truncated(_)))),
    ];
    if let Some((name, _)) = checks.iter().find(|c| !c.1) {
        return Err(format!("corruption `{name}` did not give its error"));
    }
    Ok(format!("1000 tensors bit-exact in {} bytes; 4 corruptions give distinct errors", bytes.len()))
}

fn quantize_into(dir: &Path) -> Result<(), String> {
    let out = bin()
        .args(["quantize", "--synthetic", "--out"])
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    quantize_into(&a)?;
    quantize_into(&b)?;
    let files = ["report.json", "report.csv", "transforms.afqt", "fused.afqt", "model.afqt"];
    for f in files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("merge-error ordering", merge_error_ordering),
        ("equivalence", equivalence),
        ("SDD preservation", sdd_preservation),
        ("alpha=0 reduction", alpha_zero_reduction),
        ("affine beats diagonal-only", affine_beats_diagonal),
        ("gradient correctness", || suite(suites::grad_suite(100, 1e-4))),
        ("quantizer properties", || suite(suites::quant_suite(100_000))),
        ("gradual-mask exactness", || suite(Ok(suites::mask_suite()))),
        ("I/O round trip", io_round_trip),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("acceptance {:2} {name}: PASS ({secs:.1}s) {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("acceptance {:2} {name}: FAIL ({secs:.1}s) {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
