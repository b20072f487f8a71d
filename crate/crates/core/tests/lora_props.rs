mod common;

use forge_core::lora::{
    count_lora_params, grad_check, lora_forward, merge, quantize_absmax, weight_memory_bytes, AdapterPair,
    ArchSpec, LinearModule, LoraConfig, Matrix,
};
use proptest::prelude::*;
use rand::Rng;

fn arch(n_layers: u64, dims: &[(u64, u64)]) -> ArchSpec {
    ArchSpec {
        name: "random".into(),
        vocab_size: 100,
        d_model: 16,
        n_layers,
        layer_modules: dims
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| LinearModule { name: format!("m{i}"), in_dim: a, out_dim: b, has_bias: i % 2 == 0 })
            .collect(),
        per_layer_norms: vec![],
        final_norm_dim: 16,
        tied_head: false,
        head_out_dim: 100,
    }
}

fn all_targets(a: &ArchSpec, r: u64) -> LoraConfig {
    LoraConfig {
        r,
        alpha: 16.0,
        dropout: 0.0,
        target_modules: a.layer_modules.iter().map(|m| m.name.clone()).collect(),
    }
}

fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-2.0..2.0))
}

fn random_adapter(r: &mut impl Rng, in_dim: usize, out_dim: usize, rank: usize) -> AdapterPair {
    AdapterPair::new(
        random_matrix(r, rank, in_dim),
        random_matrix(r, out_dim, rank),
        r.random_range(0.5..32.0),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn lora_count_is_linear(dims in prop::collection::vec((8u64..512, 8u64..512), 1..5), r in 1u64..8, layers in 0u64..50) {
        let a = arch(layers, &dims);
        let one = count_lora_params(&a, &all_targets(&a, 1)).unwrap();
        prop_assert_eq!(count_lora_params(&a, &all_targets(&a, r)).unwrap(), r * one);
        let single = arch(1, &dims);
        prop_assert_eq!(one, layers * count_lora_params(&single, &all_targets(&single, 1)).unwrap());
    }

    #[test]
    fn quantization_error_bound(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10, eight in any::<bool>()) {
        let mut r = common::rng(seed);
        let scale = 10f64.powi(r.random_range(-3..4));
        let w = Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0) * scale);
        let bits = if eight { 8 } else { 4 };
        let q = quantize_absmax(&w, bits).unwrap();
        let d = q.dequantize();
        let qmax = (1 << (bits - 1)) - 1;
        prop_assert!(q.values.iter().all(|v| v.abs() <= qmax));
        for (a, b) in w.data().iter().zip(d.data()) {
            prop_assert!((a - b).abs() <= q.scale / 2.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn memory_halves(n in 0u64..1u64 << 50) {
        let even = n * 2;
        prop_assert_eq!(weight_memory_bytes(even, 8).unwrap() * 2, weight_memory_bytes(even, 16).unwrap());
        prop_assert_eq!(weight_memory_bytes(n, 32).unwrap(), 4 * n);
        prop_assert_eq!(weight_memory_bytes(n, 4).unwrap(), n.div_ceil(2));
    }
}

#[test]
fn forward_matches_dense_oracle() {
    let mut r = common::rng(21);
    for _ in 0..100 {
        let w = random_matrix(&mut r, 4, 6);
        let ad = random_adapter(&mut r, 6, 4, 2);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        // (W + s * B A) x written out with explicit loops
        let s = ad.alpha() / 2.0;
        for i in 0..4 {
            let mut expect = 0.0;
            for j in 0..6 {
                let mut ba = 0.0;
                for k in 0..2 {
                    ba += ad.b().get(i, k) * ad.a().get(k, j);
                }
                expect += (w.get(i, j) + s * ba) * x[j];
            }
            let got = lora_forward(&w, &ad, &x).unwrap()[i];
            assert!((got - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{got} vs {expect}");
        }
    }
}

#[test]
fn merged_path_equals_adapter_path() {
    let mut r = common::rng(22);
    for _ in 0..100 {
        let rank = [1, 2, 4][r.random_range(0..3)];
        let w = random_matrix(&mut r, 16, 32);
        let ad = random_adapter(&mut r, 32, 16, rank);
        let x: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = lora_forward(&w, &ad, &x).unwrap();
        let ym = merge(&w, &ad).unwrap().matvec(&x).unwrap();
        for (a, b) in y.iter().zip(&ym) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn fresh_adapters_change_nothing() {
    let mut r = common::rng(23);
    for seed in 0..100 {
        let w = random_matrix(&mut r, 16, 32);
        let ad = AdapterPair::init(32, 16, 4, 8.0, seed).unwrap();
        let bound = 1.0 / 32f64.sqrt();
        assert!(ad.a().data().iter().all(|v| v.abs() <= bound));
        let x: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = lora_forward(&w, &ad, &x).unwrap();
        let base = w.matvec(&x).unwrap();
        assert!(y.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(merge(&w, &ad).unwrap(), w);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = common::rng(24);
    for _ in 0..100 {
        let w = random_matrix(&mut r, 4, 6);
        let ad = random_adapter(&mut r, 6, 4, 2);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let err = grad_check(&w, &ad, &x, &t).unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
