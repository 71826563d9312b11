//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use common::{blobs, oracle_min_peak, oracle_tetris, random_inputs};
use tinydeploy::backend::{emit, Program};
use tinydeploy::frontend::{lower, Scenario};
use tinydeploy::ir::Graph;
use tinydeploy::kernels::{interpret, Registry};
use tinydeploy::memalloc::{solve_joint, tetris_allocate, AllocItem, AllocationProblem, Budget, Cost, Lifetime, MemoryMap};
use tinydeploy::pipeline::{compile, CompileOptions, Compiled};
use tinydeploy::sim::{compare_buffering, cycle_model, run};
use tinydeploy::target::TargetDescription;
use tinydeploy::tileflow::ConstraintProgram;
use tinydeploy::zoo::{
    argmax_last_row, build_encoder_layer, build_gemm_chain, build_identity, build_llama, build_llama_family, count_macs,
    next_caches, LlamaConfig, Mode,
};

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn siracusa() -> TargetDescription {
    TargetDescription::preset("siracusa-like").unwrap()
}

fn opts(scenario: Scenario, double_buffer: bool) -> CompileOptions {
    CompileOptions {
        scenario,
        double_buffer,
        ..CompileOptions::default()
    }
}

fn llama(layers: usize, mode: Mode) -> Graph {
    let mut cfg = LlamaConfig::tiny(mode);
    cfg.layers = layers;
    build_llama(&cfg).unwrap()
}

fn corpus() -> Vec<Graph> {
    let mut v = vec![
        build_identity(vec![4, 8]),
        build_gemm_chain(16, &[64, 64, 64], 1).unwrap(),
        build_gemm_chain(32, &[64, 128, 64], 2).unwrap(),
        build_encoder_layer(64, 16, 256, 32).unwrap(),
    ];
    for layers in [1, 2, 4, 8] {
        v.push(llama(layers, Mode::Parallel { seq: 8 }));
        v.push(llama(layers, Mode::Autoregressive { past: 7 }));
    }
    v
}

/// One compilation of the corpus matrix with its simulated peaks.
struct Run {
    label: String,
    compiled: Compiled,
    sim_peaks: BTreeMap<String, usize>,
}

/// Compiles every corpus graph in every configuration and compares 16
/// simulated inferences per compilation with the interpreter.
fn corpus_matrix() -> Result<Vec<Run>, String> {
    let t = siracusa();
    let mut runs = Vec::new();
    for g in corpus() {
        for s in Scenario::ALL {
            for db in [true, false] {
                let label = format!("{} {s} db={db}", g.name);
                let c = compile(&g, &t, opts(s, db)).map_err(|e| format!("{label}: {e}"))?;
                let mut peaks = BTreeMap::new();
                for seed in 0..16 {
                    let inputs = random_inputs(&g, seed);
                    let want = interpret(&g, &inputs).map_err(|e| format!("{label}: {e}"))?;
                    let got = run(&c.program, &blobs(&inputs), &t).map_err(|e| format!("{label} seed {seed}: {e}"))?;
                    for (name, w) in &want {
                        check(w.to_bytes() == got.outputs[name], || format!("{label} seed {seed}: `{name}` differs"))?;
                    }
                    if seed == 0 {
                        peaks = got.trace.levels.iter().map(|l| (l.clone(), got.trace.peak(l))).collect();
                    }
                }
                runs.push(Run {
                    label,
                    compiled: c,
                    sim_peaks: peaks,
                });
            }
        }
    }
    Ok(runs)
}

fn c1(runs: &Result<Vec<Run>, String>, elapsed: Duration) -> Verdict {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    check(elapsed < Duration::from_secs(600), || format!("matrix took {elapsed:?}"))?;
    Ok(format!("{} compilations x 16 seeds bit-exact in {:.1}s", runs.len(), elapsed.as_secs_f64()))
}

/// Placed ranges of a program, checked pairwise without the allocator.
fn disjoint(p: &Program) -> Result<usize, String> {
    let regions: Vec<(&str, &str, usize, usize, usize, usize)> = p
        .buffers
        .iter()
        .map(|b| (b.name.as_str(), b.level.as_str(), b.offset, b.reserved, b.start, b.end))
        .chain(p.arenas.iter().map(|a| (a.name.as_str(), a.level.as_str(), a.offset, a.reserved, a.start, a.end)))
        .filter(|r| r.3 > 0)
        .collect();
    let mut pairs = 0;
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            if a.1 != b.1 || a.4 > b.5 || b.4 > a.5 {
                continue;
            }
            pairs += 1;
            check(a.2 + a.3 <= b.2 || b.2 + b.3 <= a.2, || format!("`{}` and `{}` overlap in {}", a.0, b.0, a.1))?;
        }
    }
    Ok(pairs)
}

fn c2(runs: &Result<Vec<Run>, String>) -> Verdict {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let mut pairs = 0;
    for r in runs {
        for (level, lm) in &r.compiled.memory.levels {
            let sim = r.sim_peaks.get(level).copied().unwrap_or(0);
            check(sim == lm.peak, || format!("{}: {level} simulated {sim}, planned {}", r.label, lm.peak))?;
            check(lm.peak <= lm.capacity, || format!("{}: {level} peak {} > {}", r.label, lm.peak, lm.capacity))?;
        }
        pairs += disjoint(&r.compiled.program).map_err(|e| format!("{}: {e}", r.label))?;
    }
    Ok(format!("{} compilations, {pairs} live pairs disjoint, peaks match", runs.len()))
}

fn fixed_problem(spans: &[(usize, usize)], sizes: &[usize]) -> AllocationProblem {
    AllocationProblem {
        level: "L".into(),
        capacity: usize::MAX / 4,
        items: spans
            .iter()
            .zip(sizes)
            .enumerate()
            .map(|(i, (&(start, end), &s))| AllocItem {
                name: format!("b{i}"),
                start,
                end,
                cost: Cost::Fixed(s),
            })
            .collect(),
    }
}

/// Replays each level's order with the independent stacking oracle.
fn replay(m: &MemoryMap) -> Result<(), String> {
    for (level, lm) in &m.levels {
        let spans: Vec<(usize, usize)> = lm.entries.iter().map(|e| (e.start, e.end)).collect();
        let sizes: Vec<usize> = lm.entries.iter().map(|e| e.reserved).collect();
        let (off, peak) = oracle_tetris(&lm.order, &spans, &sizes);
        let got: Vec<usize> = lm.entries.iter().map(|e| e.offset).collect();
        check(off == got && peak == lm.peak, || format!("{level}: replay gives {off:?}/{peak}, map has {got:?}/{}", lm.peak))?;
    }
    Ok(())
}

fn c3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..500 {
        let n = rng.gen_range(1..=7);
        let steps = rng.gen_range(1..=10);
        let spans: Vec<(usize, usize)> = (0..n)
            .map(|_| {
                let a = rng.gen_range(0..steps);
                let b = rng.gen_range(0..steps);
                (a.min(b), a.max(b))
            })
            .collect();
        let sizes: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=64)).collect();
        let (_, m) = solve_joint(&ConstraintProgram::new(), &[fixed_problem(&spans, &sizes)], Budget::default())
            .map_err(|e| format!("instance {k}: {e}"))?;
        let want = oracle_min_peak(&spans, &sizes);
        let got = m.levels["L"].peak;
        check(got == want, || format!("instance {k}: peak {got}, exhaustive minimum {want}"))?;
        replay(&m).map_err(|e| format!("instance {k}: {e}"))?;
    }
    let el = start.elapsed();
    check(el < Duration::from_secs(60), || format!("took {el:?}"))?;
    Ok(format!("500 instances optimal in {:.2}s", el.as_secs_f64()))
}

fn c4(runs: &Result<Vec<Run>, String>) -> Verdict {
    let spans = [(0, 1), (2, 3), (1, 2)];
    let sizes = [4, 3, 2];
    let lts: Vec<Lifetime> = spans
        .iter()
        .enumerate()
        .map(|(i, &(start, end))| Lifetime {
            buffer: format!("b{i}"),
            start,
            end,
        })
        .collect();
    let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut peaks = Vec::new();
    for o in orders {
        let (off, peak) = tetris_allocate(&o, &lts, &sizes);
        let want = oracle_tetris(&o, &spans, &sizes);
        check((off.clone(), peak) == want, || format!("order {o:?}: {off:?}/{peak} vs {want:?}"))?;
        peaks.push(peak);
    }
    check(peaks[0] == 6 && peaks[1] == 9, || format!("peaks {peaks:?}"))?;
    let min = *peaks.iter().min().unwrap();
    check(min == 6 && oracle_min_peak(&spans, &sizes) == 6, || format!("minimum {min}"))?;
    let runs = runs.as_ref().map_err(Clone::clone)?;
    for r in runs {
        replay(&r.compiled.memory).map_err(|e| format!("{}: {e}", r.label))?;
    }
    Ok(format!("peaks per order {peaks:?}, minimum 6; {} solver maps replayed", runs.len()))
}

fn c5() -> Verdict {
    let t = siracusa();
    let o = opts(Scenario::OctaCore, true);
    let cfg = LlamaConfig::tiny(Mode::Parallel { seq: 16 });
    let pasts: Vec<usize> = (0..16).collect();
    let (_, steps) = build_llama_family(&cfg, &pasts).map_err(|e| e.to_string())?;
    let v = cfg.vocab;
    let mut tokens = vec![1i32];
    let mut caches: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (n, ar) in steps.iter().enumerate() {
        // Full recompute of the prefix.
        let par = build_llama(&LlamaConfig {
            mode: Mode::Parallel { seq: n + 1 },
            ..cfg
        })
        .map_err(|e| e.to_string())?;
        let pc = compile(&par, &t, o).map_err(|e| format!("parallel {n}: {e}"))?;
        let mut pin = BTreeMap::new();
        pin.insert("tokens".to_string(), tokens.iter().flat_map(|x| x.to_le_bytes()).collect());
        let want = run(&pc.program, &pin, &t).map_err(|e| format!("parallel {n}: {e}"))?.outputs["logits"].clone();

        let ac = compile(ar, &t, o).map_err(|e| format!("step {n}: {e}"))?;
        let mut ain = caches.clone();
        ain.insert("tokens".to_string(), tokens[n].to_le_bytes().to_vec());
        let got = run(&ac.program, &ain, &t).map_err(|e| format!("step {n}: {e}"))?.outputs;
        check(got["logits"][..] == want[n * v * 4..], || format!("step {n}: logits differ"))?;

        let decoded: BTreeMap<String, tinydeploy::kernels::Tensor> = ar
            .outputs
            .iter()
            .map(|name| {
                let b = ac.program.buffer(name).unwrap();
                let tensor = tinydeploy::kernels::Tensor::from_bytes(b.dtype, b.shape.clone(), &got[name]).unwrap();
                (name.clone(), tensor)
            })
            .collect();
        caches = next_caches(ar, &decoded).into_iter().map(|(k, t)| (k, t.to_bytes())).collect();
        tokens.push(argmax_last_row(&decoded["logits"]) as i32);
    }
    let ar = llama(8, Mode::Autoregressive { past: 127 });
    let par = llama(8, Mode::Parallel { seq: 128 });
    let macs = count_macs(&ar) as f64 / count_macs(&par) as f64;
    check(macs < 1.0 / 20.0, || format!("MAC ratio {macs:.4}"))?;
    // Reported only: the parallel prompt may not fit the scratchpad.
    let cy = |g: &Graph| compile(g, &t, o).map(|c| cycle_model(&c.program, &t).total).map_err(|e| e.to_string());
    let cycles = match (cy(&par), cy(&ar)) {
        (Ok(p), Ok(a)) => format!("modeled cycles ratio {:.1}x", p as f64 / a as f64),
        (Err(e), _) | (_, Err(e)) => format!("modeled cycles at S=128 unavailable ({e})"),
    };
    Ok(format!(
        "16 greedy steps equal, tokens {:?}; MACs ratio 1/{:.1}; {cycles}",
        &tokens[1..],
        1.0 / macs
    ))
}

fn marshaling_floor(p: &Program, t: &TargetDescription) -> f64 {
    let setup = t.level("L1").unwrap().dma.unwrap().setup;
    let reg = Registry::builtin();
    let (mut total, mut kernel) = (0u64, 0u64);
    for st in &p.steps {
        let e = t.engine(&st.engine).unwrap();
        let out = st.operands.len() - 1;
        let k: u64 = st
            .loops
            .regions
            .iter()
            .map(|r| {
                let ins: Vec<Vec<usize>> = r[..out].iter().map(|b| b.extent.clone()).collect();
                e.kernel_cycles(st.node.op, reg.get(&st.kernel).unwrap().work(&st.node, &ins, &r[out].extent))
            })
            .sum();
        let d: u64 = st.loops.transfers.iter().map(|x| x.descriptors.len() as u64 * (setup + 1)).sum();
        let s = e.offload_setup * st.loops.tiles.len() as u64;
        kernel += k;
        total += if p.double_buffer && st.loops.double_buffered { k.max(d) + s } else { k + d + s };
    }
    (total - kernel) as f64 / total as f64
}

fn c6() -> Verdict {
    let g = build_encoder_layer(64, 16, 256, 32).unwrap();
    let t = siracusa();
    let mut report = Vec::new();
    for s in Scenario::ALL {
        let (d, sg) = compare_buffering(&g, &t, opts(s, true)).map_err(|e| e.to_string())?;
        check(d < sg, || format!("{s}: double {d} vs single {sg}"))?;
        report.push(format!("{s} {d}<{sg}"));
    }
    let c = compile(&g, &t, opts(Scenario::OctaCore, true)).map_err(|e| e.to_string())?;
    let mut last = f64::INFINITY;
    let mut fr = Vec::new();
    for bw in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 256.0, 1e6, 1e12] {
        let m = cycle_model(&c.program, &t.with_dma_bandwidth(bw)).marshaling;
        check(m <= last + 1e-12, || format!("marshaling rises at bandwidth {bw}: {m} > {last}"))?;
        last = m;
        fr.push(m);
    }
    let floor = marshaling_floor(&c.program, &t);
    check((last - floor).abs() < 1e-9, || format!("limit {last} vs setup floor {floor}"))?;
    check(fr[0] > last, || "no dependence on bandwidth".into())?;
    Ok(format!(
        "{}; marshaling {:.3} -> {:.3}, floor {floor:.3}",
        report.join(", "),
        fr[0],
        last
    ))
}

fn c7() -> Verdict {
    let g = build_encoder_layer(64, 16, 256, 32).unwrap();
    let t = siracusa();
    let mut lat = Vec::new();
    for s in Scenario::ALL {
        let c = compile(&g, &t, opts(s, true)).map_err(|e| e.to_string())?;
        lat.push(cycle_model(&c.program, &t).total);
        if s == Scenario::NpuWeightMem {
            let r = run(&c.program, &blobs(&random_inputs(&g, 0)), &t).map_err(|e| e.to_string())?;
            let w: usize = r.trace.transfers.iter().filter(|x| x.constant).map(|x| x.bytes).sum();
            let names: Vec<&str> = r.trace.transfers.iter().filter(|x| x.constant).map(|x| x.tensor.as_str()).collect();
            check(w == 0, || format!("{w} weight bytes moved by DMA: {names:?}"))?;
        }
    }
    check(lat.windows(2).all(|w| w[0] > w[1]), || format!("latencies {lat:?}"))?;
    Ok(format!("cycles single/octa/npu/npu+wmem {lat:?}, zero weight DMA"))
}

fn c8() -> Verdict {
    let t = siracusa();
    let reg = Registry::builtin();
    let mut counts = Vec::new();
    for layers in 1..=8 {
        let g = llama(layers, Mode::Autoregressive { past: 127 });
        let (lowered, _) = lower(&g, &t, Scenario::NpuWeightMem, &reg).map_err(|e| e.to_string())?;
        counts.push(lowered.nodes.len());
    }
    let slope = counts[1] - counts[0];
    check(counts.windows(2).all(|w| w[1] - w[0] == slope), || format!("node counts {counts:?}"))?;
    let g = llama(8, Mode::Autoregressive { past: 127 });
    let start = Instant::now();
    let c = compile(&g, &t, opts(Scenario::NpuWeightMem, true)).map_err(|e| e.to_string())?;
    let el = start.elapsed();
    check(el <= Duration::from_secs(120), || format!("compile took {el:?}"))?;
    let exact: Vec<String> = c.memory.levels.iter().map(|(l, m)| format!("{l}:{}", if m.exact { "exact" } else { "heuristic" })).collect();
    Ok(format!(
        "nodes {counts:?} (slope {slope}); 8-layer step-128 compile {:.2}s, tiling optimal {}, levels {}",
        el.as_secs_f64(),
        c.tiling.optimal,
        exact.join(" ")
    ))
}

fn artifact_hash(g: &Graph, o: CompileOptions, dir: &Path) -> Result<String, String> {
    let c = compile(g, &siracusa(), o).map_err(|e| e.to_string())?;
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    emit(&c.program).and_then(|a| a.write(dir)).map_err(|e| e.to_string())?;
    c.program.save(dir).map_err(|e| e.to_string())?;
    fs::write(dir.join("solver.log"), c.solver_log()).map_err(|e| e.to_string())?;
    let mut names: Vec<_> = fs::read_dir(dir).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.to_string_lossy().as_bytes());
        h.update(fs::read(dir.join(&n)).map_err(|e| e.to_string())?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn c9() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases = [
        (build_encoder_layer(64, 16, 256, 32).unwrap(), opts(Scenario::Npu, true)),
        (llama(2, Mode::Autoregressive { past: 7 }), opts(Scenario::NpuWeightMem, false)),
    ];
    let mut out = Vec::new();
    for (i, (g, o)) in cases.iter().enumerate() {
        let hashes: Vec<String> = (0..3)
            .map(|k| artifact_hash(g, *o, &tmp.path().join(format!("{i}_{k}"))))
            .collect::<Result<_, _>>()?;
        check(hashes.iter().all(|h| *h == hashes[0]), || format!("{}: hashes {hashes:?}", g.name))?;
        out.push(format!("{} {}", g.name, &hashes[0][..12]));
    }
    Ok(format!("3 runs identical: {}", out.join(", ")))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let start = Instant::now();
    let runs = catch_unwind(corpus_matrix).unwrap_or_else(|_| Err("corpus matrix panicked".into()));
    let matrix_time = start.elapsed();
    let results: Vec<(usize, &str, Verdict)> = vec![
        (1, "bit-exact pipeline", guarded(|| c1(&runs, matrix_time))),
        (2, "memory safety", guarded(|| c2(&runs))),
        (3, "allocator optimality", guarded(c3)),
        (4, "stacking recurrence", guarded(|| c4(&runs))),
        (5, "kv-cache equivalence", guarded(c5)),
        (6, "double buffering", guarded(c6)),
        (7, "scenario ordering", guarded(c7)),
        (8, "scaling", guarded(c8)),
        (9, "determinism", guarded(c9)),
    ];
    let mut failed = 0;
    for (n, name, v) in &results {
        match v {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(e) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {e}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.1}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
