//! Multi-head scaled dot-product attention with an explicit backward pass.

use rand::Rng;
use rayon::prelude::*;

use crate::ops::{softmax_backward, softmax_in_place};
use crate::tensor::{nest, nest_mut, LinearMap, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Mha {
    pub n_heads: usize,
    pub wq: LinearMap,
    pub wk: LinearMap,
    pub wv: LinearMap,
    pub wo: LinearMap,
}

/// Projected keys and values for one key/value set.
#[derive(Clone, Debug)]
pub struct KeyValues {
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Mha {
    pub fn new<R: Rng + ?Sized>(channels: usize, n_heads: usize, rng: &mut R) -> Self {
        Self {
            n_heads,
            wq: LinearMap::random(channels, channels, 1.0, rng),
            wk: LinearMap::random(channels, channels, 1.0, rng),
            wv: LinearMap::random(channels, channels, 1.0, rng),
            wo: LinearMap::random(channels, channels, 0.5, rng),
        }
    }

    pub fn zeros(channels: usize, n_heads: usize) -> Self {
        Self {
            n_heads,
            wq: LinearMap::zeros(channels, channels),
            wk: LinearMap::zeros(channels, channels),
            wv: LinearMap::zeros(channels, channels),
            wo: LinearMap::zeros(channels, channels),
        }
    }

    fn head_dim(&self) -> usize {
        self.wq.out_dim() / self.n_heads
    }

    pub fn project_kv(&self, xkv: &[Vec<f64>]) -> KeyValues {
        let (k, v) = xkv
            .par_iter()
            .map(|x| (self.wk.forward(x), self.wv.forward(x)))
            .unzip();
        KeyValues { k, v }
    }

    /// Attention weights of one query row for head `h`.
    fn weights(&self, q: &[f64], kv: &KeyValues, h: usize) -> Vec<f64> {
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let qs = &q[h * d..(h + 1) * d];
        let mut a: Vec<f64> = kv
            .k
            .iter()
            .map(|k| qs.iter().zip(&k[h * d..(h + 1) * d]).map(|(x, y)| x * y).sum::<f64>() * scale)
            .collect();
        softmax_in_place(&mut a);
        a
    }

    fn mixed(&self, q: &[f64], kv: &KeyValues) -> Vec<f64> {
        let d = self.head_dim();
        let mut o = vec![0.0; q.len()];
        for h in 0..self.n_heads {
            let a = self.weights(q, kv, h);
            for (aj, v) in a.iter().zip(&kv.v) {
                for (oi, vi) in o[h * d..(h + 1) * d].iter_mut().zip(&v[h * d..(h + 1) * d]) {
                    *oi += aj * vi;
                }
            }
        }
        o
    }

    /// Output for a single query input (without residual).
    pub fn attend(&self, xq: &[f64], kv: &KeyValues) -> Vec<f64> {
        let q = self.wq.forward(xq);
        self.wo.forward(&self.mixed(&q, kv))
    }

    pub fn forward(&self, xq: &[Vec<f64>], xkv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let kv = self.project_kv(xkv);
        xq.par_iter().map(|x| self.attend(x, &kv)).collect()
    }

    /// Backward of [`Mha::attend`]; accumulates into `grads`, `d_k`, `d_v` and
    /// returns the gradient of the query input.
    pub fn attend_backward(
        &self,
        xq: &[f64],
        kv: &KeyValues,
        d_out: &[f64],
        grads: &mut Mha,
        d_k: &mut [Vec<f64>],
        d_v: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let q = self.wq.forward(xq);
        let o = self.mixed(&q, kv);
        let d_o = self.wo.backward(&o, d_out, &mut grads.wo);
        let mut d_q = vec![0.0; q.len()];
        for h in 0..self.n_heads {
            let hs = h * d..(h + 1) * d;
            let a = self.weights(&q, kv, h);
            let d_oh = &d_o[hs.clone()];
            let d_a: Vec<f64> = kv
                .v
                .iter()
                .map(|v| v[hs.clone()].iter().zip(d_oh).map(|(x, y)| x * y).sum())
                .collect();
            for (j, aj) in a.iter().enumerate() {
                for (dv, g) in d_v[j][hs.clone()].iter_mut().zip(d_oh) {
                    *dv += aj * g;
                }
            }
            let d_s = softmax_backward(&a, &d_a);
            for (j, ds) in d_s.iter().enumerate() {
                let ds = ds * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in hs.clone() {
                    d_q[c] += ds * kv.k[j][c];
                    d_k[j][c] += ds * q[c];
                }
            }
        }
        self.wq.backward(xq, &d_q, &mut grads.wq)
    }

    /// Backward of [`Mha::project_kv`]; returns the key/value input gradients.
    pub fn kv_backward(&self, xkv: &[Vec<f64>], d_k: &[Vec<f64>], d_v: &[Vec<f64>], grads: &mut Mha) -> Vec<Vec<f64>> {
        xkv.iter()
            .zip(d_k.iter().zip(d_v))
            .map(|(x, (dk, dv))| {
                let mut dx = self.wk.backward(x, dk, &mut grads.wk);
                for (a, b) in dx.iter_mut().zip(self.wv.backward(x, dv, &mut grads.wv)) {
                    *a += b;
                }
                dx
            })
            .collect()
    }

    /// Full backward; returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        xq: &[Vec<f64>],
        xkv: &[Vec<f64>],
        d_out: &[Vec<f64>],
        grads: &mut Mha,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let kv = self.project_kv(xkv);
        let c = self.wk.out_dim();
        let mut d_k = vec![vec![0.0; c]; xkv.len()];
        let mut d_v = vec![vec![0.0; c]; xkv.len()];
        let d_xq = xq
            .iter()
            .zip(d_out)
            .map(|(x, g)| self.attend_backward(x, &kv, g, grads, &mut d_k, &mut d_v))
            .collect();
        let d_xkv = self.kv_backward(xkv, &d_k, &d_v, grads);
        (d_xq, d_xkv)
    }
}

impl ParamSet for Mha {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = nest("wq", self.wq.tensors());
        v.extend(nest("wk", self.wk.tensors()));
        v.extend(nest("wv", self.wv.tensors()));
        v.extend(nest("wo", self.wo.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = nest_mut("wq", self.wq.tensors_mut());
        v.extend(nest_mut("wk", self.wk.tensors_mut()));
        v.extend(nest_mut("wv", self.wv.tensors_mut()));
        v.extend(nest_mut("wo", self.wo.tensors_mut()));
        v
    }
}
