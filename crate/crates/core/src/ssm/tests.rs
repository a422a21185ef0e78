use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_graph, worst, ParamSelection, FD_STEP};

fn scalar_params() -> ScanParams {
    ScanParams {
        a_log: Tensor::new([1, 1], vec![0.5f64.ln()]).unwrap(),
        dt_weight: Tensor::new([1, 1], vec![0.3]).unwrap(),
        dt_bias: Tensor::new([1], vec![0.1]).unwrap(),
        b_proj: Tensor::new([1, 1], vec![0.7]).unwrap(),
        c_proj: Tensor::new([1, 1], vec![-1.2]).unwrap(),
        d_skip: Tensor::new([1], vec![0.4]).unwrap(),
    }
}

#[test]
fn three_step_scalar_recurrence_matches_high_precision_oracle() {
    // Expected values from a 40-digit evaluation of the scalar recurrence.
    let want = [-0.36693281201596020388, 0.14470773500504771808, -7.4076602299375016657];
    let x = Tensor::new([3, 1], vec![1.0, -0.5, 2.0]).unwrap();
    let y = selective_scan(&x, &scalar_params()).unwrap();
    for (got, w) in y.data().iter().zip(want) {
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = ScanParams::init(3, 4, &mut rng).unwrap();
    let y = selective_scan(&Tensor::zeros([7, 3]), &p).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn skip_only_readout_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ScanParams::init(4, 3, &mut rng).unwrap();
    p.c_proj = Tensor::zeros([3, 4]);
    p.d_skip = Tensor::full([4], 1.0);
    let x = Tensor::randn([9, 4], 1.0, &mut rng);
    assert_eq!(selective_scan(&x, &p).unwrap(), x);
}

#[test]
fn scan_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = ScanParams::init(3, 5, &mut rng).unwrap();
    let x = Tensor::randn([12, 3], 1.0, &mut rng);
    let full = selective_scan(&x, &p).unwrap();
    for t in [1, 4, 7, 11] {
        let prefix = Tensor::new([t, 3], x.data()[..t * 3].to_vec()).unwrap();
        let y = selective_scan(&prefix, &p).unwrap();
        assert_eq!(y.data(), &full.data()[..t * 3]);
    }
}

#[test]
fn step_api_reproduces_the_batched_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = ScanParams::init(2, 3, &mut rng).unwrap();
    let x = Tensor::randn([6, 2], 1.0, &mut rng);
    let batched = selective_scan(&x, &p).unwrap();
    let mut state = HiddenState::zeros(2, 3);
    for t in 0..6 {
        let y = p.step(&mut state, &x.data()[t * 2..t * 2 + 2]).unwrap();
        for ch in 0..2 {
            assert!((y[ch] - batched.data()[t * 2 + ch]).abs() < 1e-14);
        }
        assert!(state.h.all_finite());
    }
}

#[test]
fn init_follows_s4d_real_and_small_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = ScanParams::init(2, 4, &mut rng).unwrap();
    let a: Vec<f64> = p.a_log.data().iter().map(|v| -v.exp()).collect();
    assert!(a.iter().all(|&v| v < 0.0));
    assert!((a[0] + 1.0).abs() < 1e-12 && (a[3] + 4.0).abs() < 1e-12);
    assert!((softplus(p.dt_bias.data()[0]) - INITIAL_STEP).abs() < 1e-15);
}

#[test]
fn scan_errors() {
    let p = scalar_params();
    assert!(matches!(selective_scan(&Tensor::zeros([3, 2]), &p), Err(Error::Config(_))));
    let x = Tensor::new([3, 1], vec![0.0, f64::NAN, 1.0]).unwrap();
    match selective_scan(&x, &p) {
        Err(Error::Numeric { detail, .. }) => assert!(detail.contains("step 1"), "{detail}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
    let mut bad = scalar_params();
    bad.b_proj = Tensor::zeros([2, 1]);
    assert!(selective_scan(&Tensor::zeros([2, 1]), &bad).is_err());
}

fn block(store: &mut ParamStore, c: usize, s: usize, seed: u64) -> MambaBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(store, &mut rng);
    MambaBlock::new(&mut init.scope("mamba"), c, s).unwrap()
}

#[test]
fn mamba_block_preserves_shape() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 4, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn([4, 8, 8], 1.0, &mut rng);
    let y = mamba_block(&x, &b, &store).unwrap();
    assert_eq!(y.shape(), &[4, 8, 8]);
    assert!(y.all_finite());
}

#[test]
fn zero_gate_leaves_only_the_output_bias() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 3, 4, 8);
    store.get_mut(b.gate_proj.weight).data_mut().fill(0.0);
    store.get_mut(b.gate_proj.bias.unwrap()).data_mut().fill(0.0);
    let out_bias = [0.25, -0.5, 1.5];
    store.get_mut(b.out_proj.bias.unwrap()).data_mut().copy_from_slice(&out_bias);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = mamba_block(&Tensor::randn([3, 4, 5], 1.0, &mut rng), &b, &store).unwrap();
    for ch in 0..3 {
        for v in &y.data()[ch * 20..(ch + 1) * 20] {
            assert_eq!(*v, out_bias[ch]);
        }
    }
}

#[test]
fn scalar_mamba_block_matches_composed_oracle() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 1, 1, 10);
    let set = |store: &mut ParamStore, id: ParamId, v: f64| store.get_mut(id).data_mut()[0] = v;
    for (lin, w, bias) in [
        (&b.in_proj, 0.8, 0.05),
        (&b.conv, 1.1, -0.02),
        (&b.gate_proj, 0.6, 0.1),
        (&b.out_proj, 0.9, 0.03),
        (&b.dt_proj, 0.3, 0.1),
    ] {
        set(&mut store, lin.weight, w);
        set(&mut store, lin.bias.unwrap(), bias);
    }
    set(&mut store, b.b_proj.weight, 0.7);
    set(&mut store, b.c_proj.weight, -1.2);
    set(&mut store, b.a_log, 0.5f64.ln());
    set(&mut store, b.d_skip, 0.4);
    // 40-digit evaluation of the composed scalar maps around the scan.
    let want = [0.051649028422896022417, 0.04387864031990891089, -0.36166709575708259139];
    let x = Tensor::new([1, 1, 3], vec![0.5, -1.0, 1.5]).unwrap();
    let y = mamba_block(&x, &b, &store).unwrap();
    for (got, w) in y.data().iter().zip(want) {
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }
}

#[test]
fn mamba_block_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 2, 3, 11);
    // Larger steps than the default init so the scan state carries signal.
    for v in store.get_mut(b.dt_proj.bias.unwrap()).data_mut() {
        *v = 0.3;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::randn([2, 4, 4], 1.0, &mut rng);
    let sel: Vec<ParamSelection> = store.ids().map(ParamSelection::all).collect();
    let cmp = check_graph(&mut store, &[x], &sel, FD_STEP, |g, v| {
        let y = b.forward(g, v[0])?;
        let sq = g.mul(y, y)?;
        let flat = g.reshape(sq, &[1, 32])?;
        let ones = g.constant(Tensor::full([32, 1], 1.0));
        let s = g.matmul(flat, ones, false, false)?;
        g.reshape(s, &[1])
    })
    .unwrap();
    assert_eq!(cmp.len(), 1 + store.len());
    assert!(worst(&cmp) < 1e-4, "{cmp:#?}");
}
