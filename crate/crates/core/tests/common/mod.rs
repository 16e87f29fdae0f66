//! Shared helpers for the integration tests, including an independent,
//! deliberately plain re-implementation of the postfilter network used as a
//! parity oracle.

#![allow(dead_code)]

use hybrid_aec::postfilter::{Activation, LayerKind, LayerWeights, ModelWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn white_noise(seed: u64, len: usize, amplitude: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-amplitude..amplitude)).collect()
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn erle_db(y: &[f64], e: &[f64]) -> f64 {
    10.0 * (energy(y) / energy(e)).log10()
}

/// `y[n] = gain * x[n - delay]`.
pub fn delayed(x: &[f64], delay: usize, gain: f64) -> Vec<f64> {
    (0..x.len())
        .map(|n| if n >= delay { gain * x[n - delay] } else { 0.0 })
        .collect()
}

/// Straight-line forward pass over the weights file contents, f64 throughout.
pub struct OracleNet {
    layers: Vec<OracleLayer>,
    pub hidden: Vec<Vec<f64>>,
}

enum OracleLayer {
    Dense {
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
        act: Activation,
    },
    Gru {
        wi: Vec<Vec<f64>>,
        wh: Vec<Vec<f64>>,
        bi: Vec<f64>,
        bh: Vec<f64>,
        size: usize,
    },
}

fn rows(flat: &[f32], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

fn vec64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| {
            let mut acc = 0.0;
            for j in 0..v.len() {
                acc += row[j] * v[j];
            }
            acc
        })
        .collect()
}

impl OracleNet {
    pub fn new(w: &ModelWeights) -> Self {
        let arch = w.arch();
        let mut input = arch.input_dim;
        let mut layers = Vec::new();
        let mut hidden = Vec::new();
        for (spec, lw) in arch.layers.iter().zip(w.layers()) {
            match (spec.kind, lw) {
                (LayerKind::Fc, LayerWeights::Fc { weight, bias }) => layers.push(OracleLayer::Dense {
                    w: rows(weight, input),
                    b: vec64(bias),
                    act: spec.activation,
                }),
                (
                    LayerKind::Gru,
                    LayerWeights::Gru {
                        weight_ih,
                        weight_hh,
                        bias_ih,
                        bias_hh,
                    },
                ) => {
                    layers.push(OracleLayer::Gru {
                        wi: rows(weight_ih, input),
                        wh: rows(weight_hh, spec.width),
                        bi: vec64(bias_ih),
                        bh: vec64(bias_hh),
                        size: spec.width,
                    });
                    hidden.push(vec![0.0; spec.width]);
                }
                _ => panic!("layer kind mismatch"),
            }
            input = spec.width;
        }
        Self { layers, hidden }
    }

    pub fn step(&mut self, fe: &[f64], fy: &[f64], fx: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = fe.iter().chain(fy).chain(fx).copied().collect();
        let mut g = 0;
        for layer in &self.layers {
            v = match layer {
                OracleLayer::Dense { w, b, act } => matvec(w, &v)
                    .into_iter()
                    .zip(b)
                    .map(|(a, bias)| {
                        let z = a + bias;
                        match act {
                            Activation::Linear => z,
                            Activation::Relu => {
                                if z > 0.0 {
                                    z
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => logistic(z),
                            Activation::Tanh => z.tanh(),
                        }
                    })
                    .collect(),
                OracleLayer::Gru { wi, wh, bi, bh, size } => {
                    let h = &self.hidden[g];
                    let a = matvec(wi, &v);
                    let c = matvec(wh, h);
                    let n = *size;
                    let mut next = vec![0.0; n];
                    for j in 0..n {
                        let r = logistic(a[j] + bi[j] + c[j] + bh[j]);
                        let z = logistic(a[n + j] + bi[n + j] + c[n + j] + bh[n + j]);
                        let cand = (a[2 * n + j] + bi[2 * n + j] + r * (c[2 * n + j] + bh[2 * n + j])).tanh();
                        next[j] = (1.0 - z) * cand + z * h[j];
                    }
                    self.hidden[g] = next.clone();
                    g += 1;
                    next
                }
            };
        }
        v
    }
}
