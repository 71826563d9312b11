use std::collections::BTreeMap;

use tinydeploy::ir::{serialize_graph, validate, DataType, OpKind};
use tinydeploy::kernels::{interpret, interpret_all, Tensor};
use tinydeploy::zoo::*;

fn cfg(layers: usize, mode: Mode) -> LlamaConfig {
    LlamaConfig {
        layers,
        ..LlamaConfig::tiny(mode)
    }
}

#[test]
fn reference_config_validates_with_constant_layer_size() {
    let g = build_llama(&LlamaConfig::tiny(Mode::Parallel { seq: 1 })).unwrap();
    assert!(validate(&g).is_empty());
    let per_layer: Vec<usize> = (0..8)
        .map(|l| g.nodes.iter().filter(|n| n.name.starts_with(&format!("l{l}."))).count())
        .collect();
    assert!(per_layer.iter().all(|&c| c == per_layer[0] && c > 0), "{per_layer:?}");
}

#[test]
fn node_count_is_affine_in_layers() {
    for mode in [Mode::Parallel { seq: 4 }, Mode::Autoregressive { past: 3 }] {
        let n: Vec<usize> = [1, 2, 8].iter().map(|&l| build_llama(&cfg(l, mode)).unwrap().nodes.len()).collect();
        let slope = n[1] - n[0];
        assert_eq!(n[2] - n[0], 7 * slope, "{mode:?} {n:?}");
        assert!(n[0] > slope);
    }
}

#[test]
fn first_autoregressive_step_has_unit_caches() {
    let g = build_llama(&cfg(2, Mode::Autoregressive { past: 0 })).unwrap();
    assert_eq!(g.inputs, vec!["tokens".to_string()]);
    assert_eq!(g.outputs.len(), 1 + 2 * 2);
    assert_eq!(g.outputs[0], "logits");
    for o in &g.outputs[1..] {
        assert_eq!(g.buffer(o).unwrap().shape, vec![1, 64]);
    }
}

#[test]
fn builders_are_deterministic_and_modes_share_weights() {
    let a = serialize_graph(&build_llama(&cfg(2, Mode::Parallel { seq: 8 })).unwrap());
    let b = serialize_graph(&build_llama(&cfg(2, Mode::Parallel { seq: 8 })).unwrap());
    assert_eq!(a, b);
    let ar = serialize_graph(&build_llama(&cfg(2, Mode::Autoregressive { past: 5 })).unwrap());
    assert_eq!(a.1, ar.1, "weight blobs differ between modes");
    let other = serialize_graph(&build_llama(&LlamaConfig { seed: 1, ..cfg(2, Mode::Parallel { seq: 8 }) }).unwrap());
    assert_ne!(a.1, other.1);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(build_llama(&cfg(0, Mode::Parallel { seq: 4 })).is_err());
    assert!(build_llama(&LlamaConfig { heads: 5, ..cfg(1, Mode::Parallel { seq: 4 }) }).is_err());
    assert!(build_llama(&cfg(1, Mode::Parallel { seq: 0 })).is_err());
    assert!(build_llama(&cfg(1, Mode::Autoregressive { past: 256 })).is_err());
    assert!(build_encoder_layer(64, 5, 256, 8).is_err());
}

#[test]
fn calibrated_activations_cover_a_quarter_of_int8() {
    let g = build_llama(&cfg(2, Mode::Parallel { seq: 16 })).unwrap();
    let inputs = sample_inputs(&g, 3);
    let all = interpret_all(&g, &inputs).unwrap();
    for n in &g.nodes {
        if !matches!(n.op, OpKind::Requant | OpKind::RmsNorm | OpKind::Add | OpKind::Mul) {
            continue;
        }
        let t = &all[&n.outputs[0]];
        let (lo, hi) = (t.data.iter().min().unwrap(), t.data.iter().max().unwrap());
        assert!(hi - lo >= 64, "{} spans [{lo}, {hi}]", n.name);
    }
}

#[test]
fn encoder_layer_shapes() {
    let g = build_encoder_layer(64, 16, 256, 32).unwrap();
    assert!(validate(&g).is_empty());
    assert_eq!(g.buffer("x").unwrap().shape, vec![32, 64]);
    assert!(g.nodes.iter().all(|n| n.op != OpKind::ConcatSeq && n.op != OpKind::Rope));
    let sm = g.nodes.iter().find(|n| n.op == OpKind::Softmax).unwrap();
    assert_eq!(sm.int_or("causal", 0), 0);
    let g1 = build_encoder_layer(64, 16, 256, 1).unwrap();
    let sc = g1.nodes.iter().find(|n| n.op == OpKind::Softmax).unwrap();
    assert_eq!(g1.buffer(&sc.inputs[0]).unwrap().shape, vec![16, 1, 1]);
    let out = interpret(&g1, &sample_inputs(&g1, 0)).unwrap();
    assert_eq!(out.len(), 1);
}

#[test]
fn autoregressive_steps_match_parallel_prefixes() {
    let c = cfg(2, Mode::Parallel { seq: 6 });
    let pasts: Vec<usize> = (0..6).collect();
    let (_, steps) = build_llama_family(&c, &pasts).unwrap();
    let mut tokens = vec![7i32];
    let mut caches: BTreeMap<String, Tensor> = BTreeMap::new();
    for (n, ar) in steps.iter().enumerate() {
        let par = build_llama(&LlamaConfig {
            mode: Mode::Parallel { seq: n + 1 },
            ..c
        })
        .unwrap();
        let mut pin = BTreeMap::new();
        pin.insert("tokens".to_string(), Tensor::i32(vec![n + 1], &tokens));
        let want = &interpret(&par, &pin).unwrap()["logits"];
        let mut ain = caches.clone();
        ain.insert("tokens".to_string(), Tensor::i32(vec![1], &tokens[n..]));
        let got = interpret(ar, &ain).unwrap();
        let v = 256;
        assert_eq!(got["logits"].data[..], want.data[n * v..], "step {n}");
        caches = next_caches(ar, &got);
        tokens.push(argmax_last_row(&got["logits"]) as i32);
        assert_eq!(got["logits"].dtype, DataType::I32);
    }
}

#[test]
fn autoregressive_macs_shrink_with_sequence() {
    let mut last = f64::INFINITY;
    for s in [8, 32, 128] {
        let par = build_llama(&cfg(1, Mode::Parallel { seq: s })).unwrap();
        let ar = build_llama(&cfg(1, Mode::Autoregressive { past: s - 1 })).unwrap();
        let r = count_macs(&ar) as f64 / count_macs(&par) as f64;
        assert!(r < last, "S={s}: {r}");
        last = r;
    }
    assert!(last < 1.0 / 20.0);
}
