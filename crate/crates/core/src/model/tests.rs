use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::ParamStore;
use crate::gradcheck::{check_graph, ParamSelection};
use crate::losses::charbonnier_loss_grad;

fn small(n: usize) -> ModelConfig {
    ModelConfig {
        base_width: 8,
        n_subdecoders: n,
        chunks: 2,
        bank_depth: 1,
        state_dim: 4,
        encoder_blocks_per_scale: 1,
        decoder_blocks_per_stage: 1,
        ..ModelConfig::default()
    }
}

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform([3, h, w], 0.0, 1.0, &mut rng)
}

/// Gives the residual heads nonzero weights so outputs depend on everything.
fn randomize_heads(model: &Model, store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.head_params() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(shape, -0.1, 0.1, &mut rng);
    }
}

#[test]
fn config_validation() {
    ModelConfig::default().validate().unwrap();
    for n in [1, 2, 4] {
        small(n).validate().unwrap();
    }
    let bad = ModelConfig { n_subdecoders: 3, ..small(1) };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = ModelConfig { chunks: 3, ..small(1) };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { base_width: 0, ..small(1) };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { decoder_blocks_per_stage: 0, ..small(1) };
    assert!(bad.validate().is_err());
}

#[test]
fn encoder_pyramid_shapes() {
    let mut store = ParamStore::new();
    let model = Model::new(small(1), &mut store, 0).unwrap();
    let f = shallow_extract(&image(32, 48, 1), &model, &store).unwrap();
    assert_eq!(f.shape(), &[8, 32, 48]);
    let enc = encoder_forward(&f, &model, &store).unwrap();
    let shapes: Vec<_> = enc.scales.iter().map(|e| e.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![8, 32, 48], vec![16, 16, 24], vec![32, 8, 12], vec![64, 4, 6], vec![128, 2, 3]]
    );
}

#[test]
fn untrained_model_is_identity() {
    for n in [1, 2, 4] {
        let mut store = ParamStore::new();
        let model = Model::new(small(n), &mut store, 3).unwrap();
        let img = image(16, 16, 2);
        let out = model_forward(&img, &model, &store).unwrap();
        assert_eq!(out.restored.len(), n);
        for (x, r) in out.residuals.iter().zip(&out.restored) {
            assert_eq!(x.max_abs(), 0.0);
            assert_eq!(r, &img);
        }
    }
}

#[test]
fn restored_is_residual_plus_input() {
    let mut store = ParamStore::new();
    let model = Model::new(small(2), &mut store, 4).unwrap();
    randomize_heads(&model, &mut store, 5);
    let img = image(16, 32, 6);
    let out = model_forward(&img, &model, &store).unwrap();
    for (x, r) in out.residuals.iter().zip(&out.restored) {
        assert!(x.max_abs() > 0.0);
        assert_eq!(r, &x.add(&img).unwrap());
        assert!(r.all_finite());
    }
}

#[test]
fn plain_pipeline_matches_graph_forward() {
    let mut store = ParamStore::new();
    let model = Model::new(small(2), &mut store, 7).unwrap();
    randomize_heads(&model, &mut store, 8);
    let img = image(16, 16, 9);
    let full = model_forward(&img, &model, &store).unwrap();

    let f = shallow_extract(&img, &model, &store).unwrap();
    let enc = encoder_forward(&f, &model, &store).unwrap();
    let (d_a, x_a) = subdecoder_forward(&enc, None, 0, &model, &store).unwrap();
    let (_, x_b) = subdecoder_forward(&enc, Some(&d_a), 1, &model, &store).unwrap();
    assert_eq!(x_a, full.residuals[0]);
    assert_eq!(x_b, full.residuals[1]);
    assert!(subdecoder_forward(&enc, None, 1, &model, &store).is_err());
    assert!(subdecoder_forward(&enc, Some(&d_a), 0, &model, &store).is_err());
}

#[test]
fn first_subdecoder_ignores_later_ones() {
    // Parameters are drawn in registration order, so the first sub-decoder
    // of a two-decoder model has the same weights as a one-decoder model.
    let img = image(16, 16, 10);
    let mut s1 = ParamStore::new();
    let m1 = Model::new(small(1), &mut s1, 11).unwrap();
    randomize_heads(&m1, &mut s1, 12);
    let mut s2 = ParamStore::new();
    let m2 = Model::new(small(2), &mut s2, 11).unwrap();
    randomize_heads(&m2, &mut s2, 12);
    let o1 = model_forward(&img, &m1, &s1).unwrap();
    let o2 = model_forward(&img, &m2, &s2).unwrap();
    assert_eq!(o1.residuals[0], o2.residuals[0]);
    assert_ne!(o2.residuals[0], o2.residuals[1]);
}

#[test]
fn rejects_bad_images() {
    let mut store = ParamStore::new();
    let model = Model::new(small(1), &mut store, 0).unwrap();
    for shape in [[3, 20, 32], [3, 8, 8], [3, 16, 24]] {
        let err = model_forward(&Tensor::zeros(shape), &model, &store).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{shape:?}");
    }
    assert!(model_forward(&Tensor::zeros([1, 16, 16]), &model, &store).is_err());
}

#[test]
fn decoder_block_naming() {
    let mut store = ParamStore::new();
    let model = Model::new(small(2), &mut store, 0).unwrap();
    assert_eq!(model.num_decoder_blocks(), 8);
    assert_eq!(model.decoder_block_name(0).unwrap(), "decoder0.stage4.block0");
    assert_eq!(model.decoder_block_width(0), Some(64));
    assert_eq!(model.decoder_block_name(7).unwrap(), "decoder1.stage1.block0");
    assert_eq!(model.decoder_block_width(7), Some(8));
    assert!(model.decoder_block_name(8).is_none());
}

fn loss_grads(model: &Model, store: &ParamStore, img: &Tensor, target: &Tensor) -> crate::autodiff::Gradients {
    let mut g = Graph::with_params(store);
    let x = g.constant(img.clone());
    let out = model.forward(&mut g, x).unwrap();
    let r = out.restored[0];
    let (value, grad) = charbonnier_loss_grad(g.value(r), target, 1e-3).unwrap();
    let loss = g.scalar_loss(r, value, grad).unwrap();
    g.backward(loss).unwrap().into_params()
}

#[test]
fn frozen_encoder_copies_weights_and_gets_no_gradient() {
    let mut pre = ParamStore::new();
    let pre_model = Model::new(small(1), &mut pre, 20).unwrap();
    let ckpt = Checkpoint {
        model: pre_model.config.clone(),
        step: 0,
        params: pre.clone(),
        optimizer: None,
        meta: serde_json::Value::Null,
    };

    let mut store = ParamStore::new();
    let model = Model::new(small(2), &mut store, 21).unwrap();
    randomize_heads(&model, &mut store, 22);
    let frozen = freeze_encoder(&mut store, &ckpt).unwrap();
    assert_eq!(frozen, 2 + 5 * 4 + 4 * 2);

    for (id, p) in store.iter() {
        let is_enc = ENCODER_PREFIXES.iter().any(|pre| p.name.starts_with(pre));
        assert_eq!(p.trainable, !is_enc, "{}", p.name);
        if is_enc {
            assert_eq!(&p.value, ckpt.params.get(ckpt.params.id(&p.name).unwrap()));
        }
        let _ = id;
    }

    let img = image(16, 16, 23);
    let target = image(16, 16, 24);
    let grads = loss_grads(&model, &store, &img, &target);
    for (id, p) in store.iter() {
        if !p.trainable {
            assert!(grads.get(id).is_none(), "{} received a gradient", p.name);
        }
    }
    assert!(grads.iter().count() > 0);

    let a = model_forward(&img, &model, &store).unwrap();
    let b = model_forward(&img, &model, &store).unwrap();
    assert_eq!(a, b);

    assert_eq!(unfreeze_encoder(&mut store), frozen);
    assert!(store.iter().all(|(_, p)| p.trainable));
}

#[test]
fn freezing_without_checkpoint_is_a_config_error() {
    let mut store = ParamStore::new();
    Model::new(small(1), &mut store, 0).unwrap();
    let err = freeze_encoder_from(&mut store, Path::new("/nonexistent/stage1.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let ckpt = Checkpoint {
        model: small(1),
        step: 0,
        params: ParamStore::new(),
        optimizer: None,
        meta: serde_json::Value::Null,
    };
    assert!(matches!(freeze_encoder(&mut store, &ckpt), Err(Error::Config(_))));
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = ModelConfig { n_subdecoders: 2, ..small(2) };
    let mut store = ParamStore::new();
    let model = Model::new(cfg, &mut store, 30).unwrap();
    randomize_heads(&model, &mut store, 31);
    let img = image(16, 16, 32);
    let target = image(16, 16, 33);
    // A few entries from parameters spread through the network.
    let picks = [
        "shallow.weight",
        "encoder.scale3.block0.conv1.weight",
        "decoder0.stage2.block0.memvssm.mamba.a_log",
        "decoder1.stage1.block0.memvssm.fcam.query_cur.weight",
        "decoder1.head.weight",
    ];
    let params: Vec<_> = picks
        .iter()
        .map(|n| ParamSelection {
            id: store.id(n).unwrap_or_else(|| panic!("no parameter {n}")),
            indices: Some(vec![0, 3]),
        })
        .collect();
    let report = check_graph(&mut store, &[], &params, 1e-5, |g, _| {
        let x = g.constant(img.clone());
        let out = model.forward(g, x)?;
        let mut terms = Vec::new();
        for &r in &out.restored {
            let (v, gr) = charbonnier_loss_grad(g.value(r), &target, 1e-3)?;
            terms.push(g.scalar_loss(r, v, gr)?);
        }
        g.add_all(&terms)
    })
    .unwrap();
    for c in &report {
        assert!(c.max_rel_error < 1e-4, "{}: {}", c.name, c.max_rel_error);
    }
}
