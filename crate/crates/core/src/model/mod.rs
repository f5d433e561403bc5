//! Decoder-only causal transformer over the unified sequence.
//!
//! Inputs come from three adapters: a text/marker embedding table, a latent
//! adapter (learned start vector for slot 1, linear map of the previous plan
//! vector for later slots) and summed per-codebook frame embeddings. Outputs
//! are the plan projection φ at the positions preceding each latent slot and
//! Q classification heads at the positions preceding each frame step.
//!
//! The row after the last frame step (the one preceding EOA) is the stop row:
//! its target is an all-PAD step, which is how end of audio is represented.
//!
//! The fused query/key/value projection has no bias: a key bias shifts every
//! score of a query row equally, so it is invisible through the softmax and
//! would only be a dead parameter.

mod decoder;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Marker, MarkerIds, Position, Token, UnifiedSequence};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::{normal, stream};

pub use decoder::Decoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub v_text: usize,
    /// Codebook vocabulary without the pad class.
    pub v_audio: usize,
    pub codebooks: usize,
    pub d_sem: usize,
    pub latent_steps: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            v_text: 81,
            v_audio: 64,
            codebooks: 4,
            d_sem: 32,
            latent_steps: 6,
            max_positions: 160,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.v_audio,
            self.codebooks,
            self.d_sem,
            self.latent_steps,
            self.max_positions,
        ];
        if extents.contains(&0) {
            return Err(Error::contract("model extents must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.v_text < 5 {
            return Err(Error::contract("text vocabulary must hold the four markers and a word"));
        }
        Ok(())
    }

    /// Classes per audio head: the codebook vocabulary plus PAD.
    pub fn head_width(&self) -> usize {
        self.v_audio + 1
    }

    pub fn pad(&self) -> Token {
        self.v_audio as Token
    }

    pub fn markers(&self) -> MarkerIds {
        MarkerIds::reserved_tail(self.v_text as u32)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, s) = (self.d_model, self.d_ff, self.d_sem);
        let heads = self.codebooks * self.head_width();
        let embeddings = self.v_text * d + heads * d + self.max_positions * d + d;
        let adapter = s * d + d;
        let block = 2 * d + 3 * d * d + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let out = 2 * d + (d * s + s) + (d * heads + heads);
        embeddings + adapter + self.n_layers * block + out
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_1: ParamId,
    b_1: ParamId,
    w_2: ParamId,
    b_2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    text_emb: ParamId,
    audio_emb: ParamId,
    pos_emb: ParamId,
    latent_start: ParamId,
    adapter_w: ParamId,
    adapter_b: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    phi_w: ParamId,
    phi_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// `K × d_model`, final-layer hidden states at the plan-predicting rows.
    pub latent_hidden: NodeId,
    /// `K × d_sem`.
    pub latent_pred: NodeId,
    /// `((T + 1)·Q) × (V_audio + 1)`: frame steps then the stop row, each
    /// step's Q channel rows contiguous.
    pub audio_logits: NodeId,
    pub frame_steps: usize,
}

/// Plain-tensor forward result.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub latent_hidden: Tensor,
    pub latent_pred: Tensor,
    /// `T × Q × (V_audio + 1)`; row `t` is read at the position preceding
    /// frame step `t + 1`.
    pub audio_logits: Tensor,
    /// `Q × (V_audio + 1)`, read at the last frame step (SOA if there are
    /// none); an all-PAD argmax means end of audio.
    pub stop_logits: Tensor,
}

/// Sequence prepared for the embedding adapters.
struct Prepared {
    /// Rows of `[SOT, text.., SOL]`.
    prefix: Vec<u32>,
    steps: Vec<Vec<Token>>,
}

impl Model {
    /// Fresh model with seeded initialisation: weights `N(0, 0.02²)`, residual
    /// output projections additionally scaled by `1/√(2L)`, layer-norm gains
    /// one and every bias zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = stream(seed, "model/init");
        let mut params = ParamStore::new();
        let c = &config;
        let (d, f) = (c.d_model, c.d_ff);
        let heads = c.codebooks * c.head_width();
        let resid = 0.02 / ((2 * c.n_layers) as f64).sqrt();
        let mut w = |params: &mut ParamStore, name: String, shape: &[usize], std: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| std * normal(&mut rng)).collect();
            params.insert(name, Tensor::new(shape, data)?)
        };
        let text_emb = w(&mut params, "text_emb".into(), &[c.v_text, d], 0.02)?;
        let audio_emb = w(&mut params, "audio_emb".into(), &[heads, d], 0.02)?;
        let pos_emb = w(&mut params, "pos_emb".into(), &[c.max_positions, d], 0.02)?;
        let latent_start = w(&mut params, "latent_start".into(), &[1, d], 0.02)?;
        let adapter_w = w(&mut params, "adapter.w".into(), &[c.d_sem, d], 0.02)?;
        let adapter_b = params.insert("adapter.b", Tensor::zeros(&[d]))?;
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = format!("block{l}");
            blocks.push(BlockIds {
                ln1_g: params.insert(format!("{p}.ln1.g"), Tensor::filled(&[d], 1.0))?,
                ln1_b: params.insert(format!("{p}.ln1.b"), Tensor::zeros(&[d]))?,
                w_qkv: w(&mut params, format!("{p}.attn.w_qkv"), &[d, 3 * d], 0.02)?,
                w_o: w(&mut params, format!("{p}.attn.w_o"), &[d, d], resid)?,
                b_o: params.insert(format!("{p}.attn.b_o"), Tensor::zeros(&[d]))?,
                ln2_g: params.insert(format!("{p}.ln2.g"), Tensor::filled(&[d], 1.0))?,
                ln2_b: params.insert(format!("{p}.ln2.b"), Tensor::zeros(&[d]))?,
                w_1: w(&mut params, format!("{p}.ff.w1"), &[d, f], 0.02)?,
                b_1: params.insert(format!("{p}.ff.b1"), Tensor::zeros(&[f]))?,
                w_2: w(&mut params, format!("{p}.ff.w2"), &[f, d], resid)?,
                b_2: params.insert(format!("{p}.ff.b2"), Tensor::zeros(&[d]))?,
            });
        }
        let lnf_g = params.insert("ln_f.g", Tensor::filled(&[d], 1.0))?;
        let lnf_b = params.insert("ln_f.b", Tensor::zeros(&[d]))?;
        let phi_w = w(&mut params, "phi.w".into(), &[d, c.d_sem], 0.02)?;
        let phi_b = params.insert("phi.b", Tensor::zeros(&[c.d_sem]))?;
        let head_w = w(&mut params, "heads.w".into(), &[d, heads], 0.02)?;
        let head_b = params.insert("heads.b", Tensor::zeros(&[heads]))?;
        let ids = Ids {
            text_emb,
            audio_emb,
            pos_emb,
            latent_start,
            adapter_w,
            adapter_b,
            blocks,
            lnf_g,
            lnf_b,
            phi_w,
            phi_b,
            head_w,
            head_b,
        };
        Ok(Model { config, params, ids })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn prepare(&self, seq: &UnifiedSequence) -> Result<Prepared> {
        let c = &self.config;
        let off = seq.offsets()?;
        if off.latent_slots() != c.latent_steps {
            return Err(Error::MalformedSequence(format!(
                "model expects {} latent slots, sequence has {}",
                c.latent_steps,
                off.latent_slots()
            )));
        }
        if seq.len() > c.max_positions {
            return Err(Error::contract(format!(
                "sequence of {} positions exceeds max_positions {}",
                seq.len(),
                c.max_positions
            )));
        }
        let m = c.markers();
        let mut prefix = Vec::with_capacity(off.sol + 1);
        for p in &seq.positions()[..=off.sol] {
            let id = match p {
                Position::Marker(mk) => m.id(*mk),
                Position::Text(t) => *t,
                _ => unreachable!("validated by offsets()"),
            };
            prefix.push(self.check_text(id)?);
        }
        let mut steps = Vec::with_capacity(off.frame_steps());
        for p in &seq.positions()[off.soa + 1..off.eoa] {
            let Position::Frame(f) = p else {
                unreachable!("validated by offsets()")
            };
            steps.push(self.check_frame(f)?.to_vec());
        }
        Ok(Prepared { prefix, steps })
    }

    fn check_text(&self, id: u32) -> Result<u32> {
        if id as usize >= self.config.v_text {
            return Err(Error::Index {
                what: "text token",
                index: id as usize,
                bound: self.config.v_text,
            });
        }
        Ok(id)
    }

    fn check_frame<'a>(&self, f: &'a [Token]) -> Result<&'a [Token]> {
        let c = &self.config;
        if f.len() != c.codebooks {
            return Err(Error::Dimension {
                op: "frame_embedding",
                left: vec![f.len()],
                right: vec![c.codebooks],
            });
        }
        if let Some(&t) = f.iter().find(|&&t| t as usize > c.v_audio) {
            return Err(Error::Index {
                what: "codebook token",
                index: t as usize,
                bound: c.head_width(),
            });
        }
        Ok(f)
    }

    /// Row of the shared audio embedding table for token `tok` of codebook `q`.
    fn audio_row(&self, q: usize, tok: Token) -> usize {
        q * self.config.head_width() + tok as usize
    }

    fn latent_check(&self, plan: &[Vec<f64>]) -> Result<()> {
        let c = &self.config;
        if plan.len() + 1 < c.latent_steps || plan.iter().any(|h| h.len() != c.d_sem) {
            return Err(Error::Dimension {
                op: "latent_inputs",
                left: vec![plan.len(), plan.first().map_or(0, Vec::len)],
                right: vec![c.latent_steps, c.d_sem],
            });
        }
        Ok(())
    }

    /// Input vectors (positions included) for every position of `seq`,
    /// as a graph node of shape `L × d_model`.
    ///
    /// `plan` supplies the vector fed into latent slot `k + 1` as `plan[k]`;
    /// only the first `K − 1` entries are read.
    fn embed_node(&self, g: &mut Graph, seq: &UnifiedSequence, prep: &Prepared, plan: &[Vec<f64>]) -> Result<NodeId> {
        self.latent_check(plan)?;
        let c = &self.config;
        let m = c.markers();
        let text_table = g.param(self.ids.text_emb);
        let prefix = g.gather_sum(text_table, prep.prefix.iter().map(|&t| vec![t as usize]).collect())?;
        let mut parts = vec![prefix, g.param(self.ids.latent_start)];
        if c.latent_steps > 1 {
            let rows: Vec<f64> = plan[..c.latent_steps - 1].concat();
            let inp = g.input(Tensor::new(&[c.latent_steps - 1, c.d_sem], rows)?);
            let (aw, ab) = (g.param(self.ids.adapter_w), g.param(self.ids.adapter_b));
            let lin = g.matmul(inp, aw)?;
            parts.push(g.add_row(lin, ab)?);
        }
        let soa = vec![m.soa as usize];
        let eoa = vec![m.eoa as usize];
        let mut tail_ids = vec![soa];
        let audio_ids: Vec<Vec<usize>> = prep
            .steps
            .iter()
            .map(|f| f.iter().enumerate().map(|(q, &t)| self.audio_row(q, t)).collect())
            .collect();
        parts.push(g.gather_sum(text_table, std::mem::take(&mut tail_ids))?);
        if !audio_ids.is_empty() {
            let audio_table = g.param(self.ids.audio_emb);
            parts.push(g.gather_sum(audio_table, audio_ids)?);
        }
        parts.push(g.gather_sum(text_table, vec![eoa])?);
        let x = g.concat_rows(&parts)?;
        let pos_table = g.param(self.ids.pos_emb);
        let pos = g.slice_rows(pos_table, 0, seq.len())?;
        g.add(x, pos)
    }

    /// Input vectors for every position of `seq` (positions included).
    pub fn embed_position(&self, seq: &UnifiedSequence, plan: &[Vec<f64>]) -> Result<Tensor> {
        let prep = self.prepare(seq)?;
        let mut g = Graph::new(&self.params);
        let x = self.embed_node(&mut g, seq, &prep, plan)?;
        Ok(g.value(x).clone())
    }

    /// Builds the forward pass into `g`.
    pub fn build(&self, g: &mut Graph, seq: &UnifiedSequence, plan: &[Vec<f64>]) -> Result<ForwardNodes> {
        let prep = self.prepare(seq)?;
        let c = &self.config;
        let mut x = self.embed_node(g, seq, &prep, plan)?;
        for b in &self.ids.blocks {
            let (g1, b1) = (g.param(b.ln1_g), g.param(b.ln1_b));
            let h = g.layer_norm(x, g1, b1)?;
            let w = g.param(b.w_qkv);
            let qkv = g.matmul(h, w)?;
            let a = g.causal_attention(qkv, c.n_heads)?;
            let (w, bias) = (g.param(b.w_o), g.param(b.b_o));
            let a = g.matmul(a, w)?;
            let a = g.add_row(a, bias)?;
            x = g.add(x, a)?;
            let (g2, b2) = (g.param(b.ln2_g), g.param(b.ln2_b));
            let h = g.layer_norm(x, g2, b2)?;
            let (w, bias) = (g.param(b.w_1), g.param(b.b_1));
            let h = g.matmul(h, w)?;
            let h = g.add_row(h, bias)?;
            let h = g.gelu(h);
            let (w, bias) = (g.param(b.w_2), g.param(b.b_2));
            let h = g.matmul(h, w)?;
            let h = g.add_row(h, bias)?;
            x = g.add(x, h)?;
        }
        let (gf, bf) = (g.param(self.ids.lnf_g), g.param(self.ids.lnf_b));
        let x = g.layer_norm(x, gf, bf)?;

        // SOL predicts the first plan vector, slot k the (k+1)-th.
        let sol = prep.prefix.len() - 1;
        let latent_hidden = g.slice_rows(x, sol, c.latent_steps)?;
        let (pw, pb) = (g.param(self.ids.phi_w), g.param(self.ids.phi_b));
        let z = g.matmul(latent_hidden, pw)?;
        let latent_pred = g.add_row(z, pb)?;

        // SOA predicts step 1, step t predicts step t+1, the last step the stop row.
        let soa = sol + c.latent_steps + 1;
        let t = prep.steps.len();
        let rows = g.slice_rows(x, soa, t + 1)?;
        let (hw, hb) = (g.param(self.ids.head_w), g.param(self.ids.head_b));
        let logits = g.matmul(rows, hw)?;
        let logits = g.add_row(logits, hb)?;
        let audio_logits = g.reshape(logits, &[(t + 1) * c.codebooks, c.head_width()])?;
        Ok(ForwardNodes {
            latent_hidden,
            latent_pred,
            audio_logits,
            frame_steps: t,
        })
    }

    /// Full forward pass. With `plan = None` the latent slots are fed the
    /// model's own predictions, as at inference.
    pub fn forward(&self, seq: &UnifiedSequence, plan: Option<&[Vec<f64>]>) -> Result<ModelOutput> {
        let own;
        let plan = match plan {
            Some(p) => p,
            None => {
                let prep = self.prepare(seq)?;
                own = self.predict_plan(&prep.prefix)?;
                &own
            }
        };
        let mut g = Graph::new(&self.params);
        let nodes = self.build(&mut g, seq, plan)?;
        let c = &self.config;
        let t = nodes.frame_steps;
        let w = c.head_width();
        let logits = g.value(nodes.audio_logits).data();
        let split = t * c.codebooks * w;
        Ok(ModelOutput {
            latent_hidden: g.value(nodes.latent_hidden).clone(),
            latent_pred: g.value(nodes.latent_pred).clone(),
            audio_logits: Tensor::from_parts(vec![t, c.codebooks, w], logits[..split].to_vec()),
            stop_logits: Tensor::from_parts(vec![c.codebooks, w], logits[split..].to_vec()),
        })
    }

    /// Runs the latent phase on `[SOT, text.., SOL]` and returns the K plan
    /// vectors.
    pub fn predict_plan(&self, prefix: &[u32]) -> Result<Vec<Vec<f64>>> {
        let mut dec = Decoder::new(self);
        let mut hidden = Vec::new();
        for &t in prefix {
            hidden = dec.push_text(t)?;
        }
        dec.run_plan(hidden)
    }

    /// φ: the affine map from a final hidden state to plan space.
    pub fn project_latent(&self, hidden: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let mut out = self.params.get(self.ids.phi_b).data().to_vec();
        matvec_acc(hidden, self.params.get(self.ids.phi_w).data(), c.d_sem, &mut out);
        out
    }

    /// Q·(V_audio + 1) head logits for one hidden state.
    pub fn audio_head(&self, hidden: &[f64]) -> Vec<f64> {
        let w = self.config.codebooks * self.config.head_width();
        let mut out = self.params.get(self.ids.head_b).data().to_vec();
        matvec_acc(hidden, self.params.get(self.ids.head_w).data(), w, &mut out);
        out
    }

    /// `[SOT, text.., SOL]` for a prompt.
    pub fn prompt_prefix(&self, text: &[u32]) -> Result<Vec<u32>> {
        let m = self.config.markers();
        let mut p = Vec::with_capacity(text.len() + 2);
        p.push(m.id(Marker::Sot));
        for &t in text {
            if m.is_marker(t) {
                return Err(Error::contract(format!("marker id {t} inside prompt text")));
            }
            p.push(self.check_text(t)?);
        }
        p.push(m.id(Marker::Sol));
        Ok(p)
    }
}

/// `out += x · W` for row-major `W` of shape `len(x) × cols`.
pub(crate) fn matvec_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), x.len() * cols);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                *o += xi * wv;
            }
        }
    }
}
