//! Sequence-level transformer forward on the differentiation tape.
//!
//! Used by pretraining (weights as tracked leaves) and by router training
//! (weights as constants, gradients flowing through an injected hidden). The
//! whole sequence is processed as matrices, unlike the incremental engine in
//! the parent module; both compute the same function.

use crate::error::Result;
use crate::model::{FrozenModel, ModelConfig, Weights, RMS_EPS};
use crate::tape::{Tape, Var};
use crate::tasks::Token;
use crate::tensor::Tensor;

pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
    pub g1: Var,
    pub g2: Var,
}

/// Tape handles for every model parameter, in the same fixed order as
/// [`Weights::tensors`].
pub struct ModelVars {
    pub emb: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
    pub gf: Var,
    pub w_out: Var,
}

impl ModelVars {
    pub fn leaves(tape: &mut Tape, w: &Weights) -> Self {
        Self::build(w, |t| tape.leaf(t))
    }

    pub fn constants(tape: &mut Tape, w: &Weights) -> Self {
        Self::build(w, |t| tape.constant(t))
    }

    fn build(w: &Weights, mut f: impl FnMut(Tensor) -> Var) -> Self {
        let emb = f(w.emb.clone());
        let pos = f(w.pos.clone());
        let layers = w
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: f(l.wq.clone()),
                wk: f(l.wk.clone()),
                wv: f(l.wv.clone()),
                wo: f(l.wo.clone()),
                w1: f(l.w1.clone()),
                w2: f(l.w2.clone()),
                g1: f(l.g1.clone()),
                g2: f(l.g2.clone()),
            })
            .collect();
        let gf = f(w.gf.clone());
        let w_out = f(w.w_out.clone());
        ModelVars {
            emb,
            pos,
            layers,
            gf,
            w_out,
        }
    }

    /// Leaf handles in the fixed parameter order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.emb, self.pos];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.wo, l.w1, l.w2, l.g1, l.g2]);
        }
        out.push(self.gf);
        out.push(self.w_out);
        out
    }
}

fn tape_block(tape: &mut Tape, cfg: &ModelConfig, lv: &LayerVars, x: Var) -> Result<Var> {
    let xn = tape.rmsnorm_rows(x, RMS_EPS);
    let xn = tape.mul_row(xn, lv.g1)?;
    let q = tape.matmul_bt(xn, lv.wq)?;
    let k = tape.matmul_bt(xn, lv.wk)?;
    let v = tape.matmul_bt(xn, lv.wv)?;
    let attn = tape.causal_attention(q, k, v, cfg.num_heads)?;
    let proj = tape.matmul_bt(attn, lv.wo)?;
    let x = tape.add(x, proj)?;

    let xn2 = tape.rmsnorm_rows(x, RMS_EPS);
    let xn2 = tape.mul_row(xn2, lv.g2)?;
    let h1 = tape.matmul_bt(xn2, lv.w1)?;
    let h1 = tape.gelu(h1);
    let m = tape.matmul_bt(h1, lv.w2)?;
    tape.add(x, m)
}

fn tape_head(tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
    let xn = tape.rmsnorm_rows(x, RMS_EPS);
    let xn = tape.mul_row(xn, vars.gf)?;
    tape.matmul_bt(xn, vars.w_out)
}

/// Embed + run blocks `1..=upto` over the whole sequence. Returns `[n, d]`
/// hiddens after block `upto`.
pub fn tape_hidden_to(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, tokens: &[Token], upto: usize) -> Result<Var> {
    let te = tape.gather_rows(vars.emb, tokens)?;
    let pos_ids: Vec<usize> = (0..tokens.len()).collect();
    let pe = tape.gather_rows(vars.pos, &pos_ids)?;
    let mut x = tape.add(te, pe)?;
    for lv in vars.layers.iter().take(upto) {
        x = tape_block(tape, cfg, lv, x)?;
    }
    Ok(x)
}

/// Resume from a `[n, d]` hidden after block `from` and produce logits
/// `[n, vocab]`.
pub fn tape_continue_from(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, hidden: Var, from: usize) -> Result<Var> {
    let mut x = hidden;
    for lv in vars.layers.iter().skip(from) {
        x = tape_block(tape, cfg, lv, x)?;
    }
    tape_head(tape, vars, x)
}

/// Full-depth logits `[n, vocab]` for a token sequence.
pub fn tape_logits(tape: &mut Tape, vars: &ModelVars, cfg: &ModelConfig, tokens: &[Token]) -> Result<Var> {
    let x = tape_hidden_to(tape, vars, cfg, tokens, cfg.num_layers)?;
    tape_head(tape, vars, x)
}

/// Plain (untracked) sequence-level hiddens after block `l` for a frozen
/// model; the starting point for teacher-forced routed losses.
pub fn seq_hidden_to_layer(model: &FrozenModel, tokens: &[Token], l: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ModelVars::constants(&mut tape, model.weights());
    let h = tape_hidden_to(&mut tape, &vars, model.config(), tokens, l)?;
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrozenModel;
    use crate::model::ModelConfig;

    fn tiny() -> FrozenModel {
        let cfg = ModelConfig {
            num_layers: 3,
            model_dim: 16,
            num_heads: 2,
            vocab_size: 64,
            max_context: 32,
            intervention_layer: 2,
        };
        FrozenModel::random(cfg, 31).unwrap()
    }

    #[test]
    fn sequence_logits_match_incremental_forward() {
        let model = tiny();
        let tokens = vec![5usize, 12, 3, 44, 7, 1];
        let mut tape = Tape::new();
        let vars = ModelVars::constants(&mut tape, model.weights());
        let logits = tape_logits(&mut tape, &vars, model.config(), &tokens).unwrap();
        let last_row = tape.value(logits).row(tokens.len() - 1).to_vec();
        let inc = model.forward(&tokens).unwrap();
        let max_diff = last_row
            .iter()
            .zip(inc.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-11, "sequence vs incremental: {}", max_diff);
    }

    #[test]
    fn split_tape_matches_full_tape() {
        let model = tiny();
        let tokens = vec![2usize, 9, 33, 21];
        let l = 2;

        let mut t1 = Tape::new();
        let v1 = ModelVars::constants(&mut t1, model.weights());
        let full = tape_logits(&mut t1, &v1, model.config(), &tokens).unwrap();

        let h = seq_hidden_to_layer(&model, &tokens, l).unwrap();
        let mut t2 = Tape::new();
        let v2 = ModelVars::constants(&mut t2, model.weights());
        let hv = t2.constant(h);
        let cont = tape_continue_from(&mut t2, &v2, model.config(), hv, l).unwrap();

        assert_eq!(t1.value(full).data(), t2.value(cont).data());
    }

    #[test]
    fn hidden_rows_match_incremental_states() {
        let model = tiny();
        let tokens = vec![8usize, 3, 60, 17, 9];
        let l = 2;
        let h = seq_hidden_to_layer(&model, &tokens, l).unwrap();
        // last row equals the incremental split state's hidden
        let state = model.forward_to_layer(&tokens, l).unwrap();
        let last = h.row(tokens.len() - 1);
        let max_diff = last
            .iter()
            .zip(state.hidden.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-11, "{}", max_diff);
    }
}
