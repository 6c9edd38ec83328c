mod common;

use common::{softmax_contract, tiny_config, tokens};
use outlierlab::model::{AttentionVariant, Model, NormVariant, PositionVariant};
use outlierlab::quant::{quantize_model, QuantPreset};

#[test]
fn softmax_plus_one_contract() {
    let c = softmax_contract(10_000, 1);
    assert!(c.canonical_dev < 1e-9, "{}", c.canonical_dev);
    assert!(c.plus_one_max_sum < 1.0, "{}", c.plus_one_max_sum);
    assert!(c.plus_one_max_sum_any <= 1.0 + 1e-12, "{}", c.plus_one_max_sum_any);
    assert!(c.large_logit_gap < 1e-9, "{}", c.large_logit_gap);
}

#[test]
fn batch_rows_are_independent() {
    let model = Model::new(tiny_config(AttentionVariant::SoftmaxPlusOne, NormVariant::LayerNorm), 2).unwrap();
    let seqs: Vec<Vec<usize>> = (0..3).map(|s| tokens(6, s)).collect();
    let run = |order: &[usize]| {
        let packed: Vec<usize> = order.iter().flat_map(|&i| seqs[i].clone()).collect();
        let mut tape = outlierlab::Tape::new();
        let f = model.forward_tape(&mut tape, &packed, 3, 0, false, None).unwrap();
        tape.value(f.logits).data().to_vec()
    };
    let a = run(&[0, 1, 2]);
    let b = run(&[2, 0, 1]);
    let row = 6 * 256;
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        assert_eq!(a[i * row..(i + 1) * row], b[j * row..(j + 1) * row]);
    }
}

#[test]
fn strict_causality_and_relaxed_prefix() {
    let mut cfg = tiny_config(AttentionVariant::Softmax, NormVariant::RmsNormPerChannel);
    let mut x = tokens(8, 4);
    let strict = Model::new(cfg.clone(), 3).unwrap();
    let before = strict.forward(&x, false).unwrap().0;
    let mut y = x.clone();
    y[5] = if y[5] == 120 { 121 } else { 120 };
    let after = strict.forward(&y, false).unwrap().0;
    let v = 256;
    assert_eq!(before.data()[..5 * v], after.data()[..5 * v]);
    assert_ne!(before.data()[5 * v..6 * v], after.data()[5 * v..6 * v]);

    cfg.causal_relax_k = 3;
    let relaxed = Model::new(cfg, 3).unwrap();
    let before = relaxed.forward(&x, false).unwrap().0;
    x[2] = if x[2] == 120 { 121 } else { 120 };
    let after = relaxed.forward(&x, false).unwrap().0;
    // position 0 now sees position 2
    assert_ne!(before.data()[..v], after.data()[..v]);
}

#[test]
fn capture_covers_every_layer_and_head() {
    let mut cfg = tiny_config(AttentionVariant::SoftmaxPlusOne, NormVariant::RmsNormSingle);
    cfg.n_layers = 2;
    cfg.position = PositionVariant::None;
    let model = Model::new(cfg, 8).unwrap();
    let (_, cap) = model.forward(&tokens(7, 1), true).unwrap();
    let cap = cap.unwrap();
    assert_eq!(cap.hidden_states.shape(), &[2, 7, 8]);
    assert_eq!(cap.attention_maps.shape(), &[2, 2, 7, 7]);
    for row in cap.attention_maps.data().chunks(7) {
        let s: f64 = row.iter().sum();
        assert!(s > 0.0 && s < 1.0);
    }
}

#[test]
fn weight_quantisation_touches_only_block_linears() {
    let model = Model::new(tiny_config(AttentionVariant::Softmax, NormVariant::LayerNorm), 6).unwrap();
    for preset in QuantPreset::ALL {
        let q = quantize_model(&model, preset).unwrap();
        assert_eq!(q.weights.len(), 4);
        for (name, t) in model.params().iter() {
            let changed = q.model.params().get(name).unwrap() != t;
            let linear = name.ends_with(".weight") && (name.contains(".attn.") || name.contains(".mlp."));
            assert!(!changed || linear, "{preset} changed {name}");
        }
        assert_eq!(q.activation_hook().is_some(), preset != QuantPreset::W4);
    }
}
