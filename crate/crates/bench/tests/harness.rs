use std::process::Command;

use fusekit::flce::plan_chunks;
use fusekit::ops::{sigmoid, silu, GluInputs};
use fusekit::{Element, Matrix, OpKind};
use fusekit_bench::bench::{bench_cell, cmd_bench, Cell};
use fusekit_bench::converge::{cmd_converge, ConvergeOptions, PathKind};
use fusekit_bench::record::{read_records_file, write_records, Variant};
use fusekit_bench::report::{aggregate, cmd_report};
use fusekit_bench::suite::cmd_correctness;
use fusekit_bench::{BenchError, Config, KernelTable};

/// SwiGLU backward with the `(1 − σ)` factor of the SiLU derivative dropped.
fn swiglu_backward_broken<T: Element>(dy: &Matrix<T>, g: GluInputs<'_, T>) -> fusekit::Result<(Matrix<T>, Matrix<T>)> {
    let (x1, x2) = (g.gate(), g.value());
    let (r, c) = x1.shape();
    let dx1 = Matrix::from_fn(r, c, |i, j| {
        let z = x1.get(i, j);
        dy.get(i, j) * x2.get(i, j) * sigmoid(z) * (T::one() + z)
    });
    let dx2 = Matrix::from_fn(r, c, |i, j| dy.get(i, j) * silu(x1.get(i, j)));
    Ok((dx1, dx2))
}

#[test]
fn correctness_catches_broken_swiglu_derivative() {
    let good = cmd_correctness(&KernelTable::fused(), &KernelTable::fused(), 0, 8);
    assert!(good.passed(), "{:?}", good.rows.iter().find(|r| !r.passed));
    assert!(good.rows.iter().any(|r| r.shape.ends_with("x1")), "n = 1 column case missing");

    let mut t32 = KernelTable::<f32>::fused();
    let mut t64 = KernelTable::<f64>::fused();
    t32.swiglu_backward = swiglu_backward_broken::<f32>;
    t64.swiglu_backward = swiglu_backward_broken::<f64>;
    let bad = cmd_correctness(&t32, &t64, 0, 8);
    assert!(!bad.passed());
    let failed: Vec<_> = bad.rows.iter().filter(|r| !r.passed).collect();
    assert!(failed.iter().all(|r| r.op == "swiglu"));
    assert!(failed.iter().any(|r| r.check.starts_with("fd:")));
}

#[test]
fn correctness_exit_status() {
    let out = Command::new(env!("CARGO_BIN_EXE_fusekit")).args(["correctness", "--gradient-instances", "2"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("op,shape,dtype,check,max_abs,max_rel,atol,rtol,passed"));
}

#[test]
fn strided_replay() {
    let opts = ConvergeOptions { steps: 30, strided_grad: true, ..Default::default() };
    match cmd_converge::<f32>(&opts) {
        Err(BenchError::Kernel(fusekit::Error::NonContiguousInput(name))) => assert_eq!(name, "dq_rot"),
        other => panic!("expected NonContiguousInput, got {other:?}"),
    }
    let rep = cmd_converge::<f32>(&ConvergeOptions { guards: false, ..opts }).unwrap();
    assert!(!rep.passed);
    assert!(rep.loss_maxdiff > 1e-3);
}

#[test]
fn reference_paths_are_bitwise_identical() {
    let opts = ConvergeOptions { steps: 20, paths: (PathKind::Reference, PathKind::Reference), ..Default::default() };
    let rep = cmd_converge::<f32>(&opts).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&rep.step_losses_fused), bits(&rep.step_losses_ref));
    assert_eq!((rep.final_weight_maxdiff, rep.final_logits_maxdiff), (0.0, 0.0));
}

#[test]
fn zero_learning_rate_keeps_losses_constant() {
    let rep = cmd_converge::<f64>(&ConvergeOptions { steps: 10, lr: 0.0, ..Default::default() }).unwrap();
    for losses in [&rep.step_losses_fused, &rep.step_losses_ref] {
        assert!(losses.iter().all(|l| l.to_bits() == losses[0].to_bits()));
    }
    // the two paths round differently, so they agree to f64 precision, not bit for bit
    assert!((rep.step_losses_fused[0] - rep.step_losses_ref[0]).abs() <= 1e-12);
    assert_eq!(rep.final_weight_maxdiff, 0.0);
    assert!(rep.passed);
}

#[test]
fn cross_entropy_memory_ratio_at_largest_vocab() {
    let cfg = Config { repeats: 1, warmup: 0, ..Config::default() };
    let cell = |variant| Cell { op: OpKind::CrossEntropy, rows: 512, cols: 163_840, hidden: 512, variant };
    let fused = bench_cell(&cell(Variant::Fused), &cfg).unwrap();
    let reference = bench_cell(&cell(Variant::Reference), &cfg).unwrap();
    let buffer = 512 * 163_840 * 4;
    assert_eq!(fused.peak_logits_bytes, buffer);
    assert_eq!(reference.peak_logits_bytes, buffer);
    assert_eq!(fused.peak_bytes, buffer);
    assert!(reference.peak_bytes >= 2 * buffer);
    assert!(fused.peak_bytes as f64 / reference.peak_bytes as f64 <= 0.5);
}

#[test]
fn flce_memory_ratio_through_report() {
    let (bt, v, h) = (4096, 40_960, 512);
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flce.csv");
    let cfg = Config {
        ops: vec![OpKind::LinearCrossEntropy],
        vocab: vec![v],
        rows: bt,
        hidden: h,
        repeats: 1,
        warmup: 0,
        csv: Some(csv.clone()),
        ..Config::default()
    };
    let records = cmd_bench(&cfg).unwrap();
    let plan = plan_chunks(bt, v, h);
    assert_eq!(plan.chunk_rows(), 64);
    let fused = records.iter().find(|r| r.variant == Variant::Fused).unwrap();
    let reference = records.iter().find(|r| r.variant == Variant::Reference).unwrap();
    assert_eq!(fused.peak_logits_bytes, (plan.chunk_rows() * v * 4) as u64);
    assert_eq!(reference.peak_logits_bytes, (bt * v * 4) as u64);

    let rows = cmd_report(&[&csv]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mem_ratio, plan.chunk_rows() as f64 / bt as f64);
    assert_eq!(1.0 / rows[0].mem_ratio, plan.num_chunks() as f64);
}

#[test]
fn single_repeat_collapses_quantiles() {
    let cfg = Config { repeats: 1, warmup: 0, ..Config::default() };
    for op in [OpKind::RmsNorm, OpKind::Rope, OpKind::GeGlu] {
        let rec = bench_cell(&Cell { op, rows: 8, cols: 256, hidden: 64, variant: Variant::Fused }, &cfg).unwrap();
        assert_eq!(rec.repeats, 1);
        assert_eq!((rec.q20_ns, rec.q80_ns), (rec.median_ns, rec.median_ns));
    }
}

#[test]
fn report_pairs_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config {
        ops: vec![OpKind::RmsNorm, OpKind::CrossEntropy],
        shapes: vec![64],
        vocab: vec![100],
        rows: 8,
        repeats: 2,
        warmup: 0,
        ..Config::default()
    };
    let mut records = cmd_bench(&cfg).unwrap();
    let path = dir.path().join("a.csv");
    // identical timings give speedup 1, a reference twice as slow gives 2
    for r in records.iter_mut() {
        r.median_ns = if r.op == "rmsnorm" { 1000.0 } else if r.variant == Variant::Fused { 500.0 } else { 1000.0 };
    }
    write_records(std::fs::File::create(&path).unwrap(), &records).unwrap();
    assert_eq!(read_records_file(&path).unwrap(), records);
    let rows = cmd_report(&[&path]).unwrap();
    let speedup = |op: &str| rows.iter().find(|r| r.op == op).unwrap().speedup;
    assert_eq!(speedup("rmsnorm"), 1.0);
    assert_eq!(speedup("cross_entropy"), 2.0);
    assert_eq!(aggregate(&records), rows);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "op,shape,speedup\nx,1x1,1.0\n").unwrap();
    assert!(matches!(cmd_report(&[&bad]), Err(BenchError::SchemaMismatch { .. })));
}

#[test]
fn cli_flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bench.conf");
    let csv = dir.path().join("out.csv");
    std::fs::write(&conf, "# small sweep\nops = rmsnorm\nshapes = 32, 48\nrows = 4\nrepeats = 5\nwarmup = 0\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_fusekit"))
        .args(["bench", "--config"])
        .arg(&conf)
        .args(["--repeats", "2", "--shapes", "16", "--csv"])
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let recs = read_records_file(&csv).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.repeats == 2 && r.shape == "4x16" && r.op == "rmsnorm"));

    let out = Command::new(env!("CARGO_BIN_EXE_fusekit"))
        .args(["bench", "--config"])
        .arg(&conf)
        .args(["--budget-bytes", "64"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("over the budget of 64 bytes"));
}
