//! One PASS/FAIL line per acceptance criterion, written straight to stdout so
//! it shows without `--nocapture`. Criteria run one after another so wall
//! clock limits are measured without contention.

use std::io::Write;
use std::time::{Duration, Instant};

use fusekit::flce::{flce_forward_backward, linear_cross_entropy_unchunked, plan_chunks, ChunkPlan, ProjectionHead};
use fusekit::mem::{self, TAG_LOGITS};
use fusekit::ops::cross_entropy;
use fusekit::tensor::check_index_width;
use fusekit::{logits_bytes, DType, Element, IndexWidth, Matrix, OpKind, Reduction};
use fusekit_bench::bench::{cells, cmd_bench, declared_bytes};
use fusekit_bench::converge::{cmd_converge, ConvergeOptions};
use fusekit_bench::suite::{check_against_fd, check_against_oracle, default_cases, gradient_cases};
use fusekit_bench::{data, BenchError, Config, KernelTable};

struct Outcome {
    passed: bool,
    detail: String,
}

fn line(name: &str, o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    let _ = out.flush();
}

fn exactness() -> Outcome {
    let start = Instant::now();
    let t64 = KernelTable::<f64>::fused();
    let cases = default_cases(0);
    let rows: Vec<_> = cases.iter().flat_map(|&c| check_against_oracle(&t64, c)).collect();
    let elapsed = start.elapsed();
    let failed = rows.iter().filter(|r| !r.passed).count();
    let worst = rows.iter().map(|r| r.max_abs).fold(0.0, f64::max);
    Outcome {
        passed: failed == 0 && elapsed < Duration::from_secs(120),
        detail: format!(
            "{} checks over {} cases at f64 (atol 1e-7, rtol 1e-5), {failed} failed, max abs diff {worst:.2e}, {:.1}s",
            rows.len(),
            cases.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn gradients() -> Outcome {
    let t64 = KernelTable::<f64>::fused();
    let mut failed = 0;
    let mut counts = Vec::new();
    for op in OpKind::ALL {
        let cases = gradient_cases(op, 100, 7);
        let rows: Vec<_> = cases.iter().flat_map(|&c| check_against_fd(&t64, c)).collect();
        failed += rows.iter().filter(|r| !r.passed).count();
        counts.push(format!("{}={}", op.name(), cases.len()));
    }
    Outcome {
        passed: failed == 0,
        detail: format!("central differences (atol 1e-6, rtol 1e-4), instances {}, {failed} failed checks", counts.join(" ")),
    }
}

fn flce_run<T: Element>(h: &Matrix<T>, w: &Matrix<T>, t: &[usize], red: Reduction, chunk: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut head = ProjectionHead::new(w.clone());
    let plan = ChunkPlan::with_chunk_rows(h.rows(), chunk).unwrap();
    let out = flce_forward_backward(h, &mut head, t, red, &plan).unwrap();
    let f = |m: &Matrix<T>| m.as_slice().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    (out.loss, f(&out.grad_hidden), f(head.grad()))
}

fn flce_invariance() -> Outcome {
    let shapes = [(128, 32, 512), (100, 16, 50), (64, 16, 50), (37, 8, 97), (1, 4, 9)];
    let mut max_diff = 0.0f64;
    let mut ok = true;
    let mut bitwise = true;
    for (seed, &(bt, hid, v)) in shapes.iter().enumerate() {
        let mut r = data::rng(seed as u64);
        let h: Matrix<f64> = data::matrix(&mut r, bt, hid, 1.0);
        let w: Matrix<f64> = data::matrix(&mut r, hid, v, 1.0 / (hid as f64).sqrt());
        let t = data::targets(&mut r, bt, v);
        for red in [Reduction::Mean, Reduction::Sum] {
            let full_chunk = bt.next_power_of_two();
            let base = flce_run(&h, &w, &t, red, full_chunk);
            for chunk in [1, 2, 8, 64, full_chunk] {
                let got = flce_run(&h, &w, &t, red, chunk);
                let d = got.1.iter().zip(&base.1).chain(got.2.iter().zip(&base.2)).map(|(a, b)| (a - b).abs()).fold((got.0 - base.0).abs(), f64::max);
                max_diff = max_diff.max(d);
                ok &= d <= 1e-6;
            }
            let mut head = ProjectionHead::new(w.clone());
            let un = linear_cross_entropy_unchunked(&h, &mut head, &t, red).unwrap();
            bitwise &= un.loss.to_bits() == base.0.to_bits()
                && un.grad_hidden.as_slice() == base.1.as_slice()
                && head.grad().as_slice() == base.2.as_slice();

            let (h32, w32) = (h.cast::<f32>(), w.cast::<f32>());
            let b32 = flce_run(&h32, &w32, &t, red, full_chunk);
            for chunk in [1, 2, 8, 64] {
                let g = flce_run(&h32, &w32, &t, red, chunk);
                let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 + 1e-4 * y.abs());
                ok &= close(&g.1, &b32.1) && close(&g.2, &b32.2) && close(&[g.0], &[b32.0]);
            }
        }
    }
    Outcome {
        passed: ok && bitwise,
        detail: format!(
            "chunk_rows in {{1,2,8,64,>=BT}} on BT<=128: f64 max diff {max_diff:.2e} (atol 1e-6), f32 within 1e-6/1e-4, single chunk bitwise equal to unchunked: {bitwise}"
        ),
    }
}

fn memory_arithmetic() -> Outcome {
    let full_vocab = logits_bytes(8, 4096, 256_000, 2);
    let gb = format!("{:.1}", full_vocab as f64 / 1e9);
    let mut ok = full_vocab == 16_777_216_000 && gb == "16.8";
    let mut notes = Vec::new();
    for &(bt, hid, v, chunk) in &[(100, 8, 64, 16), (256, 16, 300, 32), (64, 8, 50, 8), (33, 4, 20, 4)] {
        let mut r = data::rng(bt as u64);
        let h: Matrix<f32> = data::matrix(&mut r, bt, hid, 1.0);
        let w: Matrix<f32> = data::matrix(&mut r, hid, v, 0.5);
        let t = data::targets(&mut r, bt, v);
        let plan = ChunkPlan::with_chunk_rows(bt, chunk).unwrap();
        let mut head = ProjectionHead::new(w.clone());
        let (_, fused) = mem::session(|| flce_forward_backward(&h, &mut head, &t, Reduction::Mean, &plan).unwrap());
        let mut head = ProjectionHead::new(w);
        let (_, full) = mem::session(|| linear_cross_entropy_unchunked(&h, &mut head, &t, Reduction::Mean).unwrap());
        let (fp, rp) = (fused.peak_for_tag(TAG_LOGITS), full.peak_for_tag(TAG_LOGITS));
        ok &= fp == (chunk * v * 4) as u64 && rp == (bt * v * 4) as u64;
        let ratio = rp as f64 / fp as f64;
        ok &= ratio <= plan.num_chunks() as f64 && ratio > plan.num_chunks() as f64 - 1.0;
        notes.push(format!("{bt}/{chunk}: {ratio:.3} vs {} chunks", plan.num_chunks()));
    }
    Outcome {
        passed: ok,
        detail: format!("logits_bytes(8,4096,256000,2) = {full_vocab} = {gb} GB; logits peak ratio {}", notes.join(", ")),
    }
}

fn ce_in_place() -> Outcome {
    let mut ok = true;
    let mut worst_sum = 0.0f64;
    for (rows, v) in [(8, 4096), (3, 41), (1, 1000)] {
        let mut r = data::rng(v as u64);
        let mut logits: Matrix<f64> = data::matrix(&mut r, rows, v, 8.0);
        let t = data::targets(&mut r, rows, v);
        let (res, ledger) = mem::session(|| cross_entropy(&mut logits, &t, Reduction::Sum));
        ok &= res.is_ok() && ledger.alloc_count(TAG_LOGITS) == 0;
        ok &= ledger.events().iter().all(|e| e.bytes < (rows * v * 8) as u64);
        for i in 0..rows {
            worst_sum = worst_sum.max(logits.row(i).iter().sum::<f64>().abs());
        }
    }
    let mut uniform_err = 0.0f64;
    for v in [4, 41, 32_000] {
        let mut z = Matrix::<f64>::zeros(2, v);
        let loss = cross_entropy(&mut z, &[0, v - 1], Reduction::Mean).unwrap().loss;
        uniform_err = uniform_err.max((loss - (v as f64).ln()).abs());
    }
    ok &= worst_sum <= 1e-6 && uniform_err <= 1e-7;
    Outcome {
        passed: ok,
        detail: format!("no logits-sized allocations; max |row sum of grad| {worst_sum:.1e}; |loss - ln V| {uniform_err:.1e}"),
    }
}

fn chunk_formula() -> Outcome {
    fn ceil_div(a: u64, b: u64) -> u64 {
        a.div_ceil(b)
    }
    fn pow2_at_least(n: u64) -> u64 {
        let mut p = 1;
        while p < n {
            p *= 2;
        }
        p
    }
    let triples: [(u64, u64, u64); 12] = [
        (4096, 131_072, 4096),
        (1, 50_000, 64),
        (100, 512, 512),
        (4096, 40_960, 512),
        (32_768, 256_000, 3072),
        (4096, 32_000, 4096),
        (512, 163_840, 512),
        (1000, 7, 3),
        (3, 1000, 1),
        (2048, 2048, 1),
        (77, 300, 16),
        (65, 64, 64),
    ];
    let mut bad = Vec::new();
    for (bt, v, h) in triples {
        let want = pow2_at_least(ceil_div(bt, ceil_div(v, h)));
        let plan = plan_chunks(bt as usize, v as usize, h as usize);
        if plan.chunk_rows() as u64 != want || plan.num_chunks() as u64 != ceil_div(bt, want) {
            bad.push(format!("({bt},{v},{h})"));
        }
    }
    let headline = plan_chunks(4096, 131_072, 4096).chunk_rows();
    Outcome {
        passed: bad.is_empty() && headline == 128,
        detail: format!("{} triples, (4096,131072,4096) -> {headline}, mismatches: [{}]", triples.len(), bad.join(" ")),
    }
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let opts = ConvergeOptions { steps: 100, seed: 0, ..Default::default() };
    let res = cmd_converge::<f32>(&opts);
    let elapsed = start.elapsed();
    match res {
        Ok(rep) => Outcome {
            passed: rep.passed && rep.step_losses_fused.len() == 100 && elapsed < Duration::from_secs(300),
            detail: format!(
                "100 steps f32 seed 0: loss maxdiff {:.2e}, weight maxdiff {:.2e}, logits maxdiff {:.2e} (atol 1e-5, rtol 1e-4), loss {:.4} -> {:.4}, {:.1}s",
                rep.loss_maxdiff,
                rep.final_weight_maxdiff,
                rep.final_logits_maxdiff,
                rep.step_losses_fused[0],
                rep.step_losses_fused[99],
                elapsed.as_secs_f64()
            ),
        },
        Err(e) => Outcome { passed: false, detail: format!("error: {e}") },
    }
}

fn guards() -> Outcome {
    let opts = ConvergeOptions { steps: 5, strided_grad: true, ..Default::default() };
    let raised = matches!(
        cmd_converge::<f32>(&opts),
        Err(BenchError::Kernel(fusekit::Error::NonContiguousInput("dq_rot")))
    );
    let width = check_index_width(46_341, 46_341);
    let offset = fusekit::tensor::flat_offset(46_340, 46_340, 46_341) as u64;
    let ok = raised && width == IndexWidth::Wide64 && offset == 46_341u64 * 46_341 - 1;
    Outcome {
        passed: ok,
        detail: format!("strided RoPE gradient raises NonContiguousInput: {raised}; 46341x46341 -> {width:?}, last offset {offset}"),
    }
}

fn bench_protocol() -> Outcome {
    let cfg = Config::default();
    let sweep = cells(&cfg);
    let max_declared = sweep.iter().map(|c| declared_bytes(c, DType::F32)).max().unwrap_or(0);
    let start = Instant::now();
    let records = match cmd_bench(&cfg) {
        Ok(r) => r,
        Err(e) => return Outcome { passed: false, detail: format!("error: {e}") },
    };
    let ops: std::collections::BTreeSet<_> = records.iter().map(|r| r.op.clone()).collect();
    let quantiles_ok = records.iter().all(|r| r.repeats == 10 && r.q20_ns <= r.median_ns && r.median_ns <= r.q80_ns);
    let peaks_ok = records.iter().zip(&sweep).all(|(r, c)| r.peak_bytes <= declared_bytes(c, DType::F32));
    let rejected = matches!(cmd_bench(&Config { budget_bytes: max_declared - 1, ..cfg.clone() }), Err(BenchError::ShapeTooLarge { .. }));
    let ok = records.len() == 48
        && ops.len() == 6
        && quantiles_ok
        && peaks_ok
        && max_declared <= cfg.budget_bytes
        && rejected;
    Outcome {
        passed: ok,
        detail: format!(
            "{} records over {} kernels, repeats 10 with q20 <= median <= q80: {quantiles_ok}; largest declared cell {max_declared} bytes under budget {}; tighter budget refused: {rejected}; {:.0}s",
            records.len(),
            ops.len(),
            cfg.budget_bytes,
            start.elapsed().as_secs_f64()
        ),
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("exactness", exactness),
        ("gradients", gradients),
        ("flce chunk invariance", flce_invariance),
        ("memory arithmetic", memory_arithmetic),
        ("cross entropy in place", ce_in_place),
        ("chunk formula", chunk_formula),
        ("convergence", convergence),
        ("guards", guards),
        ("bench protocol", bench_protocol),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let o = f();
        line(name, &o);
        if !o.passed {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
