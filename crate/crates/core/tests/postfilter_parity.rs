mod common;

use common::OracleNet;
use hybrid_aec::postfilter::{Activation, LayerSpec, MappingSpec};
use hybrid_aec::{ModelArch, ModelWeights, Postfilter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_arch(rng: &mut ChaCha8Rng) -> ModelArch {
    let bands = rng.random_range(2..12);
    let mut layers = Vec::new();
    for _ in 0..rng.random_range(0..4) {
        let w = rng.random_range(1..24);
        layers.push(if rng.random_bool(0.5) {
            LayerSpec::gru(w)
        } else {
            LayerSpec::fc(w, [Activation::Relu, Activation::Tanh, Activation::Linear][rng.random_range(0..3)])
        });
    }
    layers.push(LayerSpec::fc(bands, Activation::Sigmoid));
    ModelArch {
        input_dim: 3 * bands,
        layers,
        mapping: Some(MappingSpec { bins: 4 * bands, bands }),
    }
}

fn features(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-12.0..4.0)).collect()
}

#[test]
fn engine_matches_oracle_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst64: f64 = 0.0;
    let mut worst32: f64 = 0.0;
    for case in 0..60 {
        let arch = random_arch(&mut rng);
        let b = arch.num_bands();
        let w = ModelWeights::random(arch, case).unwrap();
        let e64 = Postfilter::<f64>::new(&w);
        let e32 = Postfilter::<f32>::new(&w);
        let (mut s64, mut s32) = (e64.new_state(), e32.new_state());
        let mut oracle = OracleNet::new(&w);
        for _ in 0..5 {
            let f = features(&mut rng, 3 * b);
            let want = oracle.step(&f[..b], &f[b..2 * b], &f[2 * b..]);
            let mut m64 = vec![0.0; b];
            e64.infer_mask(&mut s64, &f[..b], &f[b..2 * b], &f[2 * b..], &mut m64).unwrap();
            let f32v: Vec<f32> = f.iter().map(|&v| v as f32).collect();
            let mut m32 = vec![0.0f32; b];
            e32.infer_mask(&mut s32, &f32v[..b], &f32v[b..2 * b], &f32v[2 * b..], &mut m32).unwrap();
            for j in 0..b {
                worst64 = worst64.max((m64[j] - want[j]).abs());
                worst32 = worst32.max((m32[j] as f64 - want[j]).abs());
            }
        }
    }
    assert!(worst64 <= 1e-6, "f64 engine deviates by {worst64:e}");
    assert!(worst32 <= 1e-4, "f32 engine deviates by {worst32:e}");
}

#[test]
fn default_architecture_matches_oracle_after_file_round_trip() {
    let w = ModelWeights::random(ModelArch::default_for(257, 86), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.weights");
    w.save(&path).unwrap();
    let loaded = ModelWeights::load(&path).unwrap();
    assert_eq!(loaded, w);
    let engine = Postfilter::<f64>::new(&loaded);
    let mut st = engine.new_state();
    let mut oracle = OracleNet::new(&w);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let f = features(&mut rng, 258);
        let want = oracle.step(&f[..86], &f[86..172], &f[172..]);
        let mut got = vec![0.0; 86];
        engine.infer_mask(&mut st, &f[..86], &f[86..172], &f[172..], &mut got).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn zero_weights_emit_half_masks_in_both_implementations() {
    let w = ModelWeights::zeros(ModelArch::default_for(257, 86)).unwrap();
    let mut oracle = OracleNet::new(&w);
    let f = vec![1.5; 258];
    assert!(oracle.step(&f[..86], &f[86..172], &f[172..]).iter().all(|&v| v == 0.5));
}
