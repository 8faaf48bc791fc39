//! Pruning-free reference decoder written with plain loops over `f64`.
#![allow(dead_code)]

use dra_core::model::{Head, Model};
use dra_core::Element;

pub struct Reference {
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub head: Head,
}

impl Reference {
    pub fn new<T: Element>(m: &Model<T>) -> Self {
        let c = m.config();
        Reference {
            params: m
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone(), p.data.iter().map(|v| v.to_f64_lossy()).collect()))
                .collect(),
            d: c.d_model,
            heads: c.n_heads,
            layers: c.n_layers,
            head: c.head,
        }
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.params.iter().find(|(n, _, _)| n == name).unwrap_or_else(|| panic!("no {name}")).2
    }

    fn cols(&self, name: &str) -> usize {
        *self.params.iter().find(|(n, _, _)| n == name).unwrap().1.last().unwrap()
    }

    /// Logits for every position (LM) or the single class row.
    pub fn logits(&self, tokens: &[u32]) -> Vec<Vec<f64>> {
        let d = self.d;
        let n = tokens.len();
        let (wte, wpe) = (self.p("wte"), self.p("wpe"));
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| (0..d).map(|k| wte[t as usize * d + k] + wpe[i * d + k]).collect())
            .collect();
        for l in 0..self.layers {
            let name = |s: &str| format!("h{l}.{s}");
            let a: Vec<Vec<f64>> = x.iter().map(|r| ln(r, self.p(&name("ln_1.g")), self.p(&name("ln_1.b")))).collect();
            let qkv: Vec<Vec<f64>> = a
                .iter()
                .map(|r| affine(r, self.p(&name("attn.w_qkv")), self.p(&name("attn.b_qkv")), 3 * d))
                .collect();
            let dh = d / self.heads;
            let mut ctx = vec![vec![0.0; d]; n];
            for h in 0..self.heads {
                for i in 0..n {
                    let q = &qkv[i][h * dh..(h + 1) * dh];
                    let s: Vec<f64> = (0..=i)
                        .map(|j| {
                            let k = &qkv[j][d + h * dh..d + (h + 1) * dh];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        for k in 0..dh {
                            ctx[i][h * dh + k] += ej / z * qkv[j][2 * d + h * dh + k];
                        }
                    }
                }
            }
            for i in 0..n {
                let o = affine(&ctx[i], self.p(&name("attn.w_out")), self.p(&name("attn.b_out")), d);
                for k in 0..d {
                    x[i][k] += o[k];
                }
                let m = ln(&x[i], self.p(&name("ln_2.g")), self.p(&name("ln_2.b")));
                let f = self.cols(&name("mlp.w_fc"));
                let hdn: Vec<f64> = affine(&m, self.p(&name("mlp.w_fc")), self.p(&name("mlp.b_fc")), f)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let o = affine(&hdn, self.p(&name("mlp.w_proj")), self.p(&name("mlp.b_proj")), d);
                for k in 0..d {
                    x[i][k] += o[k];
                }
            }
        }
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, self.p("ln_f.g"), self.p("ln_f.b"))).collect();
        match self.head {
            Head::LanguageModel => {
                let v = wte.len() / d;
                h.iter()
                    .map(|r| (0..v).map(|t| (0..d).map(|k| r[k] * wte[t * d + k]).sum()).collect())
                    .collect()
            }
            Head::Classifier { n_classes } => {
                vec![affine(&h[n - 1], self.p("cls.w"), self.p("cls.b"), n_classes)]
            }
        }
    }

    pub fn greedy(&self, prompt: &[u32], n_new: usize) -> Vec<u32> {
        let mut t = prompt.to_vec();
        for _ in 0..n_new {
            let logits = self.logits(&t);
            let last = logits.last().unwrap();
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            t.push(best as u32);
        }
        t
    }
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(k, v)| (v - mu) * r * g[k] + b[k]).collect()
}

fn affine(x: &[f64], w: &[f64], b: &[f64], cols: usize) -> Vec<f64> {
    (0..cols).map(|c| b[c] + x.iter().enumerate().map(|(k, v)| v * w[k * cols + c]).sum::<f64>()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Parameter count of a tied-embedding GPT block stack, counted from the
/// architecture description rather than from any manifest.
pub fn closed_form_param_count(vocab: usize, max_len: usize, d: usize, layers: usize, d_mlp: usize, classes: Option<usize>) -> usize {
    let embeddings = vocab * d + max_len * d;
    let attention = (d * 3 * d + 3 * d) + (d * d + d);
    let mlp = (d * d_mlp + d_mlp) + (d_mlp * d + d);
    let norms = 2 * (2 * d);
    let final_norm = 2 * d;
    let head = classes.map_or(0, |c| d * c + c);
    embeddings + layers * (attention + mlp + norms) + final_norm + head
}
