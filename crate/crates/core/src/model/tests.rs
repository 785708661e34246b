use super::*;
use crate::data::{pack_dialogue, DialogueSample, NUM_RESERVED};

fn tok(i: u32) -> u32 {
    NUM_RESERVED + i
}

fn tiny_config(conditions: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        hidden_size: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_size: 16,
        max_length: 24,
        num_condition_layers: 1,
        num_conditions: conditions,
        dropout_p: 0.0,
        gate_variant: GateVariant::AttentionRouting,
    }
}

fn tiny_model(conditions: usize, seed: u64) -> Model {
    let mut rng = Rng::seed_from_u64(seed);
    Model::new(tiny_config(conditions), &mut rng).unwrap()
}

fn set_param(model: &mut Model, name: &str, value: f64) {
    let idx = model.params().index_of(name).unwrap();
    model
        .params_mut()
        .get_mut(idx)
        .tensor
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = value);
}

fn set_param_data(model: &mut Model, name: &str, data: &[f64]) {
    let idx = model.params().index_of(name).unwrap();
    let t = &mut model.params_mut().get_mut(idx).tensor;
    assert_eq!(t.numel(), data.len());
    t.data_mut().copy_from_slice(data);
}

fn sample_encoding(model: &Model, condition: Option<u32>) -> InputEncoding {
    let sample = DialogueSample {
        history: vec![vec![tok(0), tok(1)]],
        condition_id: condition.unwrap_or(0),
        response: vec![tok(2), tok(3), tok(4)],
    };
    let mut enc = pack_dialogue(&sample, model.config().max_length).unwrap();
    enc.condition_id = condition;
    enc
}

fn forward_values(model: &Model, enc: &InputEncoding) -> Vec<f64> {
    model.forward_logits_eval(enc).unwrap().0
}

#[test]
fn embed_zero_tables_give_zero_h0() {
    let mut model = tiny_model(1, 3);
    set_param(&mut model, "embedding.token", 0.0);
    set_param(&mut model, "embedding.position", 0.0);
    set_param(&mut model, "embedding.type", 0.0);
    let enc = sample_encoding(&model, None);
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(model.params());
    let h0 = model.embed(&mut tape, &mut binder, &enc).unwrap();
    assert!(tape.value(h0).iter().all(|&v| v == 0.0));
}

#[test]
fn embed_matches_table_lookup_oracle() {
    let model = tiny_model(1, 4);
    let enc = sample_encoding(&model, None);
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(model.params());
    let h0 = model.embed(&mut tape, &mut binder, &enc).unwrap();
    let dh = model.config().hidden_size;
    let tokt = model
        .params()
        .by_name("embedding.token")
        .unwrap()
        .tensor
        .data();
    let post = model
        .params()
        .by_name("embedding.position")
        .unwrap()
        .tensor
        .data();
    let typt = model
        .params()
        .by_name("embedding.type")
        .unwrap()
        .tensor
        .data();
    for (i, &t) in enc.token_ids.iter().enumerate() {
        for c in 0..dh {
            let expect = tokt[t as usize * dh + c]
                + post[enc.position_ids[i] * dh + c]
                + typt[enc.type_ids[i] as usize * dh + c];
            let got = tape.value(h0)[i * dh + c];
            assert!((got - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn embed_type_change_is_row_local() {
    let model = tiny_model(1, 5);
    let enc = sample_encoding(&model, None);
    let mut enc2 = enc.clone();
    // Flip one target position's type (3 is [BOS], keep non-decreasing by
    // flipping the final position).
    let last = enc2.len() - 1;
    enc2.type_ids[last] = 0;
    // type ids must stay non-decreasing for validate(); bypass by comparing
    // raw embeddings only.
    let value = |enc: &InputEncoding| {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(model.params());
        let h0 = model.embed(&mut tape, &mut binder, enc).unwrap();
        tape.value(h0).to_vec()
    };
    let a = value(&enc);
    let b = value(&enc2);
    let dh = model.config().hidden_size;
    assert_eq!(a[..last * dh], b[..last * dh]);
    assert_ne!(a[last * dh..], b[last * dh..]);
}

#[test]
fn attention_diagonal_mask_is_position_local() {
    let model = tiny_model(1, 7);
    let n = 4;
    let dh = model.config().hidden_size;
    let mut diag = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        diag[i * n + i] = 0.0;
    }
    let mask = mask_from_raw(n, diag);
    let mut rng = Rng::seed_from_u64(11);
    let h1 = Tensor::from_fn(vec![n, dh], |_| rng.normal());
    let mut h2 = h1.clone();
    h2.data_mut()[2 * dh] += 5.0; // perturb row 2 only
    let a1 = model.multi_head_attention(&h1, &mask, 0).unwrap();
    let a2 = model.multi_head_attention(&h2, &mask, 0).unwrap();
    for i in 0..n {
        let same = a1.data()[i * dh..(i + 1) * dh] == a2.data()[i * dh..(i + 1) * dh];
        assert_eq!(same, i != 2, "row {i}");
    }
}

#[test]
fn attention_causal_mask_blocks_future() {
    let model = tiny_model(1, 8);
    let n = 5;
    let dh = model.config().hidden_size;
    let mask = AttentionMask::causal(n);
    let mut rng = Rng::seed_from_u64(13);
    let h1 = Tensor::from_fn(vec![n, dh], |_| rng.normal());
    let mut h2 = h1.clone();
    for c in 0..dh {
        h2.data_mut()[4 * dh + c] = -h1.data()[4 * dh + c] + 0.3;
    }
    let a1 = model.multi_head_attention(&h1, &mask, 0).unwrap();
    let a2 = model.multi_head_attention(&h2, &mask, 0).unwrap();
    // Rows before the perturbed position are bit-identical.
    assert_eq!(a1.data()[..4 * dh], a2.data()[..4 * dh]);
    assert_ne!(a1.data()[4 * dh..], a2.data()[4 * dh..]);
}

fn mask_from_raw(n: usize, data: Vec<f64>) -> AttentionMask {
    AttentionMask::from_raw(n, data).unwrap()
}

#[test]
fn single_head_attention_matches_hand_computation() {
    let cfg = ModelConfig {
        vocab_size: 8,
        hidden_size: 2,
        num_layers: 1,
        num_heads: 1,
        ffn_size: 4,
        max_length: 8,
        num_condition_layers: 0,
        num_conditions: 0,
        dropout_p: 0.0,
        gate_variant: GateVariant::AttentionRouting,
    };
    let mut rng = Rng::seed_from_u64(1);
    let mut model = Model::new(cfg, &mut rng).unwrap();
    let eye = [1.0, 0.0, 0.0, 1.0];
    for name in [
        "layer.0.attn.q.weight",
        "layer.0.attn.k.weight",
        "layer.0.attn.v.weight",
        "layer.0.attn.out.weight",
    ] {
        set_param_data(&mut model, name, &eye);
    }
    for name in [
        "layer.0.attn.q.bias",
        "layer.0.attn.k.bias",
        "layer.0.attn.v.bias",
        "layer.0.attn.out.bias",
    ] {
        set_param(&mut model, name, 0.0);
    }
    let h = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let out = model
        .multi_head_attention(&h, &AttentionMask::bidirectional(2), 0)
        .unwrap();

    // Hand evaluation with d_k = 2: scores = H Hᵀ/√2 = [[s,0],[0,s]], s=1/√2.
    let s = 1.0 / 2.0f64.sqrt();
    let e = s.exp();
    let p_hi = e / (e + 1.0);
    let p_lo = 1.0 / (e + 1.0);
    let expect = [p_hi, p_lo, p_lo, p_hi];
    for (got, want) in out.data().iter().zip(expect) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn block_with_zeroed_residual_branches_is_double_layer_norm() {
    let mut model = tiny_model(1, 21);
    set_param(&mut model, "layer.0.attn.out.weight", 0.0);
    set_param(&mut model, "layer.0.attn.out.bias", 0.0);
    set_param(&mut model, "layer.0.ffn.out.weight", 0.0);
    set_param(&mut model, "layer.0.ffn.out.bias", 0.0);

    let n = 3;
    let dh = model.config().hidden_size;
    let mut rng = Rng::seed_from_u64(2);
    let h = Tensor::from_fn(vec![n, dh], |_| rng.normal());
    let mask = AttentionMask::bidirectional(n);

    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(model.params());
    let h_id = tape.constant(&h);
    let mask_id = tape
        .constant_from(vec![n, n], mask.data().to_vec())
        .unwrap();
    let out = model
        .block(
            &mut tape,
            &mut binder,
            h_id,
            mask_id,
            0,
            None,
            &[1; 3],
            &mut RunMode::eval(),
        )
        .unwrap();

    // Reference: LN2(LN1(h)) with unit gains and zero biases.
    let ln = |m: &Tensor| -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(m);
        let g = tape.constant(&Tensor::full(vec![dh], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![dh]));
        let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
        Tensor::new(vec![n, dh], tape.value(y).to_vec()).unwrap()
    };
    let expect = ln(&ln(&h));
    for (got, want) in tape.value(out).iter().zip(expect.data()) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn routing_zero_value_vector_gives_zero_bias() {
    let mut model = tiny_model(2, 31);
    set_param(&mut model, "condition.values", 0.0);
    let n = 4;
    let dh = model.config().hidden_size;
    let mut rng = Rng::seed_from_u64(3);
    let c = Tensor::from_fn(vec![n, dh], |_| rng.normal());
    let b = model
        .attention_routing_bias(&c, Some(1), &[0, 0, 1, 1])
        .unwrap();
    assert!(b.data().iter().all(|&v| v == 0.0));
}

#[test]
fn routing_source_rows_exactly_zero() {
    let model = tiny_model(2, 32);
    let n = 5;
    let dh = model.config().hidden_size;
    let mut rng = Rng::seed_from_u64(4);
    let c = Tensor::from_fn(vec![n, dh], |_| rng.normal());
    let types = [0, 0, 0, 1, 1];
    let b = model.attention_routing_bias(&c, Some(0), &types).unwrap();
    for i in 0..3 {
        assert!(
            b.data()[i * dh..(i + 1) * dh].iter().all(|&v| v == 0.0),
            "source row {i} must be exactly zero"
        );
    }
    assert!(b.data()[3 * dh..].iter().any(|&v| v != 0.0));
}

#[test]
fn routing_symmetric_logits_give_half_value_vector() {
    let mut model = tiny_model(1, 33);
    // kᶜ = kᵍ → identical route logits → weights exactly 0.5/0.5.
    let dh = model.config().hidden_size;
    let key: Vec<f64> = (0..dh).map(|i| 0.1 * i as f64).collect();
    set_param_data(&mut model, "condition.keys", &key);
    set_param_data(&mut model, "condition.generic_key", &key);
    let vc: Vec<f64> = (0..dh).map(|i| 1.0 + i as f64).collect();
    set_param_data(&mut model, "condition.values", &vc);

    let mut rng = Rng::seed_from_u64(5);
    let c = Tensor::from_fn(vec![2, dh], |_| rng.normal());
    let b = model.attention_routing_bias(&c, Some(0), &[1, 1]).unwrap();
    for t in 0..2 {
        for j in 0..dh {
            assert!((b.data()[t * dh + j] - 0.5 * vc[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn routing_bias_norm_bounded_by_value_norm() {
    let model = tiny_model(3, 34);
    let dh = model.config().hidden_size;
    let vc = model
        .params()
        .by_name("condition.values")
        .unwrap()
        .tensor
        .clone();
    let mut rng = Rng::seed_from_u64(6);
    for trial in 0..50 {
        let n = 2 + rng.below(6);
        let types: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
        let cond = (trial % 3) as u32;
        let c = Tensor::from_fn(vec![n, dh], |_| rng.normal() * 2.0);
        let b = model
            .attention_routing_bias(&c, Some(cond), &types)
            .unwrap();
        let vnorm: f64 = vc.data()[cond as usize * dh..(cond as usize + 1) * dh]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        for t in 0..n {
            let bnorm: f64 = b.data()[t * dh..(t + 1) * dh]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!(bnorm <= vnorm + 1e-12, "‖b‖ {bnorm} > ‖vᶜ‖ {vnorm}");
        }
    }
}

#[test]
fn routing_none_condition_gives_zero_bias() {
    let model = tiny_model(2, 35);
    let dh = model.config().hidden_size;
    let c = Tensor::full(vec![3, dh], 0.7);
    let b = model.attention_routing_bias(&c, None, &[1, 1, 1]).unwrap();
    assert!(b.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_gate_closed_gives_zero_bias() {
    let mut cfg = tiny_config(2);
    cfg.gate_variant = GateVariant::SingleGate;
    let mut rng = Rng::seed_from_u64(7);
    let mut model = Model::new(cfg, &mut rng).unwrap();
    // Drive the gate shut: zero weight, hugely negative bias.
    set_param(&mut model, "gate.c.weight", 0.0);
    set_param_data(&mut model, "gate.c.bias", &[-40.0]);
    let dh = model.config().hidden_size;
    let c = Tensor::from_fn(vec![3, dh], |i| i as f64 * 0.1);
    let out = model
        .condition_combined_output(&c, Some(1), &[1, 1, 1])
        .unwrap();
    for (got, want) in out.data().iter().zip(c.data()) {
        assert!(
            (got - want).abs() < 1e-12,
            "closed gate must leave C unchanged"
        );
    }
}

#[test]
fn double_gates_identity_combination() {
    let mut cfg = tiny_config(2);
    cfg.gate_variant = GateVariant::DoubleGates;
    let mut rng = Rng::seed_from_u64(8);
    let mut model = Model::new(cfg, &mut rng).unwrap();
    // w → 1 (huge positive bias), u → 0 (huge negative bias): C' = C.
    set_param(&mut model, "gate.c.weight", 0.0);
    set_param_data(&mut model, "gate.c.bias", &[40.0]);
    set_param(&mut model, "gate.v.weight", 0.0);
    set_param_data(&mut model, "gate.v.bias", &[-40.0]);
    let dh = model.config().hidden_size;
    let c = Tensor::from_fn(vec![2, dh], |i| (i as f64).sin());
    let out = model
        .condition_combined_output(&c, Some(0), &[1, 1])
        .unwrap();
    for (got, want) in out.data().iter().zip(c.data()) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn gates_leave_source_rows_untouched() {
    for variant in [GateVariant::SingleGate, GateVariant::DoubleGates] {
        let mut cfg = tiny_config(2);
        cfg.gate_variant = variant;
        let mut rng = Rng::seed_from_u64(9);
        let model = Model::new(cfg, &mut rng).unwrap();
        let dh = model.config().hidden_size;
        let c = Tensor::from_fn(vec![4, dh], |i| (i as f64) * 0.01 - 0.1);
        let out = model
            .condition_combined_output(&c, Some(1), &[0, 0, 1, 1])
            .unwrap();
        assert_eq!(
            out.data()[..2 * dh],
            c.data()[..2 * dh],
            "{variant}: source rows"
        );
        assert_ne!(
            out.data()[2 * dh..],
            c.data()[2 * dh..],
            "{variant}: target rows"
        );
    }
}

#[test]
fn condition_parameter_count_formula() {
    for (c, dh) in [(1usize, 8usize), (5, 8), (200, 16), (5, 32)] {
        let cfg = ModelConfig {
            vocab_size: 16,
            hidden_size: dh,
            num_heads: 2,
            num_conditions: c,
            ..tiny_config(1)
        };
        let mut rng = Rng::seed_from_u64(1);
        let model = Model::new(cfg, &mut rng).unwrap();
        assert_eq!(model.condition_parameter_count(), (2 * c + 1) * dh);
        assert_eq!(model.gate_parameter_count(), 0);
    }
    // C=5, d_h=8 → 88.
    let cfg = ModelConfig {
        vocab_size: 16,
        hidden_size: 8,
        num_conditions: 5,
        ..tiny_config(1)
    };
    let mut rng = Rng::seed_from_u64(1);
    let model = Model::new(cfg, &mut rng).unwrap();
    assert_eq!(model.condition_parameter_count(), 88);
}

#[test]
fn gate_variants_add_documented_parameters() {
    let mk = |variant| {
        let cfg = ModelConfig {
            gate_variant: variant,
            ..tiny_config(3)
        };
        let mut rng = Rng::seed_from_u64(1);
        Model::new(cfg, &mut rng).unwrap()
    };
    let dh = 8;
    assert_eq!(mk(GateVariant::AttentionRouting).gate_parameter_count(), 0);
    assert_eq!(mk(GateVariant::SingleGate).gate_parameter_count(), dh + 1);
    assert_eq!(
        mk(GateVariant::DoubleGates).gate_parameter_count(),
        2 * (dh + 1)
    );
}

#[test]
fn forward_shape_and_length_error() {
    let model = tiny_model(2, 41);
    let enc = sample_encoding(&model, Some(1));
    let (logits, v) = model.forward_logits_eval(&enc).unwrap();
    assert_eq!(logits.len(), enc.len() * v);

    let long = DialogueSample {
        history: vec![vec![tok(0); 30]],
        condition_id: 0,
        response: vec![tok(1); 3],
    };
    // pack at a larger budget, then feed to the smaller model
    let enc_long = pack_dialogue(&long, 64).unwrap();
    let err = model.forward_logits_eval(&enc_long).unwrap_err();
    assert!(err.to_string().contains("max_length"));
}

#[test]
fn unconditioned_forward_equals_plain_stack_bitwise() {
    let model = tiny_model(2, 42);
    let mut plain_cfg = model.config().clone();
    plain_cfg.num_conditions = 0;
    plain_cfg.num_condition_layers = 0;
    let mut rng = Rng::seed_from_u64(999);
    let mut plain = Model::new(plain_cfg, &mut rng).unwrap();
    for p in model.params().iter() {
        if let Some(idx) = plain.params().index_of(&p.name) {
            plain.params_mut().get_mut(idx).tensor = p.tensor.clone();
        }
    }
    let enc = sample_encoding(&model, None);
    assert_eq!(forward_values(&model, &enc), forward_values(&plain, &enc));
}

#[test]
fn condition_changes_target_logits() {
    let model = tiny_model(2, 43);
    let enc0 = sample_encoding(&model, Some(0));
    let enc1 = sample_encoding(&model, Some(1));
    assert_ne!(forward_values(&model, &enc0), forward_values(&model, &enc1));
}

#[test]
fn fully_blocked_source_column_cannot_affect_target_logits() {
    // Custom mask: column 1 blocked for every other row.
    let model = tiny_model(1, 44);
    let enc = sample_encoding(&model, None);
    let n = enc.len();
    let mut raw = enc.mask.data().to_vec();
    for i in 0..n {
        if i != 1 {
            raw[i * n + 1] = f64::NEG_INFINITY;
        }
    }
    let mut enc_blocked = enc.clone();
    enc_blocked.mask = mask_from_raw(n, raw);
    let mut enc_changed = enc_blocked.clone();
    enc_changed.token_ids[1] = tok(7);

    let a = forward_values(&model, &enc_blocked);
    let b = forward_values(&model, &enc_changed);
    let v = model.config().vocab_size;
    for i in 0..n {
        if i == 1 {
            continue;
        }
        assert_eq!(a[i * v..(i + 1) * v], b[i * v..(i + 1) * v], "row {i}");
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_forward_bitwise() {
    let model = tiny_model(2, 45);
    let vocab = crate::data::Vocabulary::build(["a b c d e f g h i"], 1).unwrap();
    let conditions = crate::data::ConditionMap::from_labels(vec!["x".into(), "y".into()]);
    let enc = sample_encoding(&model, Some(1));
    let before = forward_values(&model, &enc);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::capture(&model, &vocab, &conditions, 7, None)
        .save(&path)
        .unwrap();
    let (restored, vocab2, conditions2) = Checkpoint::load(&path).unwrap().restore().unwrap();
    assert_eq!(vocab2.fingerprint(), vocab.fingerprint());
    assert_eq!(conditions2.labels(), conditions.labels());
    assert_eq!(forward_values(&restored, &enc), before);
}

#[test]
fn condition_bias_mask_layout() {
    let mb = ConditionBiasMask::from_type_ids(&[0, 0, 1, 1]);
    let d = mb.data();
    assert_eq!(&d[0..2], &[f64::NEG_INFINITY, 0.0]);
    assert_eq!(&d[4..6], &[0.0, 0.0]);
}
