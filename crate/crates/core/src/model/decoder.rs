//! Incremental forward pass with a key/value cache.
//!
//! Computes the same function as the graph forward, one position at a time,
//! without building a tape. Used for generation, evaluation and for the
//! self-fed plan when latent supervision is switched off.

use super::{matvec_acc, Model};
use crate::error::{Error, Result};
use crate::layout::Token;
use crate::numerics::{gelu, softmax_in_place, LAYER_NORM_EPS};

pub struct Decoder<'m> {
    model: &'m Model,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model) -> Self {
        let layers = model.config.n_layers;
        Decoder {
            model,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds a text or marker token; returns the final hidden state.
    pub fn push_text(&mut self, tok: u32) -> Result<Vec<f64>> {
        let m = self.model;
        let tok = m.check_text(tok)?;
        let row = m.params.get(m.ids.text_emb).row(tok as usize).to_vec();
        self.push(row)
    }

    /// Feeds a latent slot: the start vector when `prev` is `None`, else the
    /// adapter applied to the previous plan vector.
    pub fn push_latent(&mut self, prev: Option<&[f64]>) -> Result<Vec<f64>> {
        let m = self.model;
        let x = match prev {
            None => m.params.get(m.ids.latent_start).data().to_vec(),
            Some(h) => {
                if h.len() != m.config.d_sem {
                    return Err(Error::Dimension {
                        op: "latent_adapter",
                        left: vec![h.len()],
                        right: vec![m.config.d_sem],
                    });
                }
                let mut x = m.params.get(m.ids.adapter_b).data().to_vec();
                matvec_acc(h, m.params.get(m.ids.adapter_w).data(), m.config.d_model, &mut x);
                x
            }
        };
        self.push(x)
    }

    /// Feeds all K latent slots after SOL, given the hidden state at SOL.
    ///
    /// SOL predicts plan vector 1 and slot k predicts vector k + 1. Slot 1 is
    /// fed the start vector, slot k ≥ 2 the adapter image of vector k − 1.
    pub fn run_plan(&mut self, mut hidden: Vec<f64>) -> Result<Vec<Vec<f64>>> {
        let m = self.model;
        let k_steps = m.config.latent_steps;
        let mut plan: Vec<Vec<f64>> = Vec::with_capacity(k_steps);
        for k in 0..k_steps {
            plan.push(m.project_latent(&hidden));
            hidden = match k {
                0 => self.push_latent(None)?,
                _ => self.push_latent(Some(&plan[k - 1]))?,
            };
        }
        Ok(plan)
    }

    /// Feeds one delayed frame step (pads allowed).
    pub fn push_frame(&mut self, step: &[Token]) -> Result<Vec<f64>> {
        let m = self.model;
        let step = m.check_frame(step)?;
        let table = m.params.get(m.ids.audio_emb);
        let mut x = vec![0.0; m.config.d_model];
        for (q, &t) in step.iter().enumerate() {
            for (a, e) in x.iter_mut().zip(table.row(m.audio_row(q, t))) {
                *a += e;
            }
        }
        self.push(x)
    }

    fn push(&mut self, mut x: Vec<f64>) -> Result<Vec<f64>> {
        let m = self.model;
        let c = &m.config;
        if self.len >= c.max_positions {
            return Err(Error::contract(format!(
                "generation exceeds max_positions {}",
                c.max_positions
            )));
        }
        let p = &m.params;
        let d = c.d_model;
        for (a, e) in x.iter_mut().zip(p.get(m.ids.pos_emb).row(self.len)) {
            *a += e;
        }
        let t = self.len + 1;
        let dh = d / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, b) in m.ids.blocks.iter().enumerate() {
            let h = layer_norm(&x, p.get(b.ln1_g).data(), p.get(b.ln1_b).data());
            let mut qkv = vec![0.0; 3 * d];
            matvec_acc(&h, p.get(b.w_qkv).data(), 3 * d, &mut qkv);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut attn = vec![0.0; d];
            let mut scores = vec![0.0; t];
            for hd in 0..c.n_heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[hd * dh..(hd + 1) * dh];
                for (j, &pj) in scores.iter().enumerate() {
                    let v = &values[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += pj * vv;
                    }
                }
            }
            let mut a = p.get(b.b_o).data().to_vec();
            matvec_acc(&attn, p.get(b.w_o).data(), d, &mut a);
            x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);

            let h = layer_norm(&x, p.get(b.ln2_g).data(), p.get(b.ln2_b).data());
            let mut f = p.get(b.b_1).data().to_vec();
            matvec_acc(&h, p.get(b.w_1).data(), c.d_ff, &mut f);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let mut o = p.get(b.b_2).data().to_vec();
            matvec_acc(&f, p.get(b.w_2).data(), d, &mut o);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);
        }
        self.len = t;
        Ok(layer_norm(&x, p.get(m.ids.lnf_g).data(), p.get(m.ids.lnf_b).data()))
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gg, bb))| (v - mean) * rs * gg + bb)
        .collect()
}
