mod common;

use common::*;
use tinydeploy::frontend::Scenario;
use tinydeploy::kernels::interpret;
use tinydeploy::memalloc::Event;
use tinydeploy::pipeline::{compile, CompileOptions};
use tinydeploy::sim::{compare_buffering, cycle_model, run, SimError};
use tinydeploy::target::TargetDescription;
use tinydeploy::zoo::{build_encoder_layer, build_llama, LlamaConfig, Mode};

fn opts(scenario: Scenario, double_buffer: bool) -> CompileOptions {
    CompileOptions {
        scenario,
        double_buffer,
        ..Default::default()
    }
}

#[test]
fn identity_passes_through() {
    let t = TargetDescription::preset("minimal").unwrap();
    let g = identity(vec![4, 8]);
    let (_, r) = check_exact(&g, &t, opts(Scenario::SingleCore, true), 2);
    assert_eq!(r.cycles.kernel, 0);
    assert_eq!(r.cycles.total, 0);
}

#[test]
fn chain_on_minimal_target() {
    let t = TargetDescription::preset("minimal").unwrap();
    let g = gemm_chain(8, &[16, 32, 16], 1);
    let (c, r) = check_exact(&g, &t, opts(Scenario::SingleCore, true), 4);
    assert!(c.transfers.is_empty());
    assert_eq!(r.cycles.dma, 0);
    assert_eq!(r.cycles.marshaling, 0.0);
}

#[test]
fn chain_tiled_in_small_scratchpad() {
    let t = TargetDescription::preset("siracusa-like").unwrap().with_capacity("L1", 40 * 1024);
    let g = gemm_chain(32, &[64, 128, 64], 2);
    for s in Scenario::ALL {
        for db in [true, false] {
            let (c, _) = check_exact(&g, &t, opts(s, db), 3);
            if db && s != Scenario::NpuWeightMem {
                assert!(c.transfers.steps.iter().any(|n| n.tiles.len() > 1), "{s:?} untiled");
            }
        }
    }
}

#[test]
fn llama_layer_matches_reference_everywhere() {
    use tinydeploy::zoo::{build_llama, LlamaConfig, Mode};
    let t = TargetDescription::preset("siracusa-like").unwrap();
    for mode in [Mode::Parallel { seq: 8 }, Mode::Autoregressive { past: 7 }] {
        let g = build_llama(&LlamaConfig {
            layers: 1,
            seed: 42,
            ..LlamaConfig::tiny(mode)
        })
        .unwrap();
        for s in Scenario::ALL {
            for db in [true, false] {
                let t0 = std::time::Instant::now();
                check_exact(&g, &t, opts(s, db), 2);
                eprintln!("{mode:?} {s:?} {db} {:?}", t0.elapsed());
            }
        }
    }
}

#[test]
fn encoder_layer_matches_reference() {
    let t = TargetDescription::preset("siracusa-like").unwrap();
    let g = tinydeploy::zoo::build_encoder_layer(64, 16, 256, 32).unwrap();
    for s in Scenario::ALL {
        let t0 = std::time::Instant::now();
        let (c, r) = check_exact(&g, &t, opts(s, true), 2);
        eprintln!("{s:?} {:?} cycles {} optimal {}", t0.elapsed(), r.cycles.total, c.tiling.optimal);
    }
}

fn siracusa() -> TargetDescription {
    TargetDescription::preset("siracusa-like").unwrap()
}

#[test]
fn llama_parallel_seed_42_is_byte_exact() {
    let mut cfg = LlamaConfig::tiny(Mode::Parallel { seq: 8 });
    cfg.layers = 1;
    cfg.seed = 42;
    let g = build_llama(&cfg).unwrap();
    let c = compile(&g, &siracusa(), opts(Scenario::OctaCore, true)).unwrap();
    let inputs = random_inputs(&g, 42);
    let want = interpret(&g, &inputs).unwrap();
    let got = run(&c.program, &blobs(&inputs), &siracusa()).unwrap();
    assert_eq!(want.len(), got.outputs.len());
    for (name, w) in &want {
        assert_eq!(w.to_bytes(), got.outputs[name], "{name}");
    }
}

#[test]
fn trace_peak_equals_allocation_peak() {
    let g = build_encoder_layer(64, 4, 128, 8).unwrap();
    for s in Scenario::ALL {
        for db in [true, false] {
            let (c, r) = check_exact(&g, &siracusa(), opts(s, db), 1);
            for (level, lm) in &c.memory.levels {
                assert_eq!(r.trace.peak(level), lm.peak, "{s:?} db={db} {level}");
                assert!(lm.peak <= lm.capacity);
                let li = r.trace.levels.iter().position(|l| l == level).unwrap();
                let live_max = r.trace.live.iter().map(|v| v[li]).max().unwrap_or(0);
                assert!(live_max <= lm.peak);
            }
        }
    }
}

#[test]
fn corrupted_memory_map_raises_capacity_violation() {
    let g = gemm_chain(32, &[64, 128, 64], 2);
    let t = siracusa().with_capacity("L1", 40 * 1024);
    let c = compile(&g, &t, CompileOptions::default()).unwrap();
    let inputs = blobs(&random_inputs(&g, 0));
    // Push one arena past the end of its level.
    let mut p = c.program.clone();
    let a = p.arenas.iter_mut().find(|a| a.level == "L1").unwrap();
    a.offset = 40 * 1024;
    match run(&p, &inputs, &t) {
        Err(SimError::Capacity { level, bytes, capacity, .. }) => {
            assert_eq!(level, "L1");
            assert!(bytes > capacity);
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
    // The same program against a smaller level than it was placed for.
    let small = t.with_capacity("L1", c.memory.levels["L1"].peak - 1);
    assert!(matches!(run(&c.program, &inputs, &small), Err(SimError::Capacity { .. })));
}

#[test]
fn overlapping_live_regions_are_rejected() {
    let g = gemm_chain(32, &[64, 128, 64], 2);
    let t = siracusa().with_capacity("L1", 40 * 1024);
    let c = compile(&g, &t, CompileOptions::default()).unwrap();
    let mut p = c.program.clone();
    let step0: Vec<usize> = p
        .arenas
        .iter()
        .enumerate()
        .filter(|(_, a)| a.level == "L1" && a.start == 0)
        .map(|(i, _)| i)
        .collect();
    assert!(step0.len() >= 2);
    // Move the smallest live arena onto the largest: still inside the level.
    let small = *step0.iter().min_by_key(|&&i| p.arenas[i].reserved).unwrap();
    let big = *step0.iter().max_by_key(|&&i| p.arenas[i].reserved).unwrap();
    p.arenas[small].offset = p.arenas[big].offset;
    let r = run(&p, &blobs(&random_inputs(&g, 0)), &t);
    assert!(matches!(r, Err(SimError::Overlap { step: 0, .. })), "{:?}", r.map(|_| ()));
}

#[test]
fn reading_unwritten_memory_is_an_error() {
    let g = gemm_chain(32, &[64, 128, 64], 2);
    let t = siracusa().with_capacity("L1", 40 * 1024);
    let c = compile(&g, &t, CompileOptions::default()).unwrap();
    let mut p = c.program.clone();
    // Drop the first inbound transfer: its tile is computed on unwritten bytes.
    let loops = &mut p.steps[0].loops;
    let first = loops.events.iter().position(|e| matches!(e, Event::Transfer(_))).unwrap();
    loops.events.remove(first);
    assert!(matches!(
        run(&p, &blobs(&random_inputs(&g, 0)), &t),
        Err(SimError::Uninitialized { step: 0, .. })
    ));
}

#[test]
fn missing_or_misshaped_inputs_are_rejected() {
    let g = gemm_chain(8, &[16, 16], 1);
    let t = TargetDescription::preset("minimal").unwrap();
    let c = compile(&g, &t, CompileOptions::default()).unwrap();
    assert!(matches!(run(&c.program, &Default::default(), &t), Err(SimError::Input { .. })));
    let mut inputs = blobs(&random_inputs(&g, 0));
    inputs.get_mut("x").unwrap().pop();
    assert!(matches!(run(&c.program, &inputs, &t), Err(SimError::Input { .. })));
}

#[test]
fn cycle_accounting_invariants() {
    let g = build_encoder_layer(64, 4, 128, 8).unwrap();
    for s in Scenario::ALL {
        for db in [true, false] {
            let c = compile(&g, &siracusa(), opts(s, db)).unwrap();
            let r = cycle_model(&c.program, &siracusa());
            assert_eq!(r.total, r.nodes.iter().map(|n| n.latency).sum::<u64>());
            assert_eq!(r.kernel, r.nodes.iter().map(|n| n.kernel).sum::<u64>());
            assert!((0.0..=1.0).contains(&r.marshaling));
            let by_hand = (r.total - r.kernel) as f64 / r.total as f64;
            assert!((r.marshaling - by_hand).abs() < 1e-12);
            for (n, st) in r.nodes.iter().zip(&c.program.steps) {
                assert!(n.overlapped <= n.kernel.min(n.dma));
                let want = if db && st.loops.double_buffered {
                    n.kernel.max(n.dma) + n.setup
                } else {
                    n.kernel + n.dma + n.setup
                };
                assert_eq!(n.latency, want, "{}", n.node);
            }
            assert!(r.table().contains("marshaling"));
        }
    }
}

#[test]
fn double_buffering_pays_off_on_a_compute_bound_chain() {
    let g = gemm_chain(64, &[256, 256, 256], 9);
    for s in [Scenario::SingleCore, Scenario::OctaCore] {
        let (d, sgl) = compare_buffering(&g, &siracusa(), opts(s, true)).unwrap();
        assert!(d < sgl, "{s:?}: {d} vs {sgl}");
    }
}

#[test]
fn buffering_is_irrelevant_without_dma() {
    let g = gemm_chain(8, &[16, 32, 16], 1);
    let (d, s) = compare_buffering(&g, &TargetDescription::preset("minimal").unwrap(), CompileOptions::default()).unwrap();
    assert_eq!(d, s);
    assert!(d > 0);
}

/// Bandwidth sweep: the marshaling fraction never grows with bandwidth and
/// tends to the fraction left when every descriptor costs its setup only.
#[test]
fn marshaling_falls_with_bandwidth_towards_the_setup_floor() {
    let g = build_encoder_layer(64, 4, 128, 8).unwrap();
    let base = siracusa();
    let c = compile(&g, &base, opts(Scenario::OctaCore, true)).unwrap();
    let with_bw = |bw: f64| {
        let mut t = base.clone();
        for l in &mut t.levels {
            if let Some(ch) = &mut l.dma {
                ch.bandwidth = bw;
            }
        }
        t
    };
    let mut last = f64::INFINITY;
    let mut fr = Vec::new();
    for bw in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 1e6, 1e12] {
        let r = cycle_model(&c.program, &with_bw(bw));
        assert!(r.marshaling <= last + 1e-12, "bandwidth {bw}");
        last = r.marshaling;
        fr.push(r.marshaling);
    }
    // Floor from first principles: each descriptor costs `setup` cycles.
    let setup = base.level("L1").unwrap().dma.unwrap().setup;
    let mut total = 0u64;
    let mut kernel = 0u64;
    let reg = tinydeploy::kernels::Registry::builtin();
    for st in &c.program.steps {
        let e = base.engine(&st.engine).unwrap();
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
        // At unbounded bandwidth every descriptor moves its bytes in one cycle.
        let d: u64 = st.loops.transfers.iter().map(|x| x.descriptors.len() as u64 * (setup + 1)).sum();
        let s = e.offload_setup * st.loops.tiles.len() as u64;
        kernel += k;
        total += if st.loops.double_buffered { k.max(d) + s } else { k + d + s };
    }
    let floor = (total - kernel) as f64 / total as f64;
    let at_inf = *fr.last().unwrap();
    assert!((at_inf - floor).abs() < 1e-9, "{at_inf} vs {floor}");
    assert!(fr[0] > at_inf);
}
