//! Frozen decoder-only transformer with a split forward pass.
//!
//! The inference engine is incremental: positions are processed one at a time
//! through all layers against a per-layer KV cache. `forward_to_layer` stops
//! the last position after block `l` and hands back an [`ActivationState`];
//! `continue_from_layer` resumes from block `l+1` with the (possibly
//! injected) hidden, so the composition of the two is op-for-op the same
//! computation as the monolithic forward. Injected hiddens enter the cache at
//! the layers above `l` and stay there for the rest of the generation.

mod checkpoint;
mod pretrain;
mod seq;

pub use checkpoint::{load_model, save_model};
pub use pretrain::{
    family_accuracy, headroom_report, pretrain, train_base_model, HeadroomReport,
    PretrainOptions, PretrainOutput,
};
pub use seq::{tape_continue_from, tape_logits, ModelVars};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tasks::Token;
use crate::tensor::{self, Tensor};

pub const RMS_EPS: f64 = 1e-5;

/// Architecture of the toy base model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    /// 1-based intervention layer; hidden states are read after this block.
    pub intervention_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 8,
            model_dim: 128,
            num_heads: 4,
            vocab_size: 64,
            max_context: 128,
            intervention_layer: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config("num_layers must be at least 2".into()));
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.max_context == 0 {
            return Err(Error::Config("vocab_size and max_context must be positive".into()));
        }
        if self.intervention_layer < 1 || self.intervention_layer >= self.num_layers {
            return Err(Error::Config(format!(
                "intervention_layer {} must lie in [1, {}]",
                self.intervention_layer,
                self.num_layers - 1
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn hidden_mlp(&self) -> usize {
        4 * self.model_dim
    }
}

/// One transformer block's parameters. Linear weights are stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub g1: Tensor,
    pub g2: Tensor,
}

#[derive(Clone, Debug)]
pub struct Weights {
    pub emb: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub gf: Tensor,
    pub w_out: Tensor,
}

impl Weights {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let h = cfg.hidden_mlp();
        let std = 0.06;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                wq: Tensor::randn(&[d, d], std, rng),
                wk: Tensor::randn(&[d, d], std, rng),
                wv: Tensor::randn(&[d, d], std, rng),
                wo: Tensor::randn(&[d, d], std, rng),
                w1: Tensor::randn(&[h, d], std, rng),
                w2: Tensor::randn(&[d, h], std, rng),
                g1: Tensor::new(vec![d], vec![1.0; d]).expect("gain"),
                g2: Tensor::new(vec![d], vec![1.0; d]).expect("gain"),
            })
            .collect();
        Weights {
            emb: Tensor::randn(&[cfg.vocab_size, d], 0.06, rng),
            pos: Tensor::randn(&[cfg.max_context, d], 0.06, rng),
            layers,
            gf: Tensor::new(vec![d], vec![1.0; d]).expect("gain"),
            w_out: Tensor::randn(&[cfg.vocab_size, d], std, rng),
        }
    }

    /// All parameter tensors in a fixed order (serialization, fingerprint,
    /// optimizer registration all share it).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.emb, &self.pos];
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2, &l.g1, &l.g2]);
        }
        out.push(&self.gf);
        out.push(&self.w_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.emb, &mut self.pos];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2, &mut l.g1,
                &mut l.g2,
            ]);
        }
        out.push(&mut self.gf);
        out.push(&mut self.w_out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Round every weight through f32. Called once at freeze/save time so the
    /// in-memory model and its checkpoint describe the same numbers.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            let data: Vec<f64> = t.data().iter().map(|&x| x as f32 as f64).collect();
            *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        }
    }
}

/// Content hash over the f32 little-endian encoding of all weights.
pub fn weights_fingerprint(w: &Weights) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for t in w.tensors() {
        for &x in t.data() {
            hasher.update((x as f32).to_le_bytes());
        }
    }
    hasher.finalize().into()
}

pub fn fingerprint_hex(fp: &[u8; 32]) -> String {
    hex::encode(fp)
}

/// The pretrained, immutable base model.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    config: ModelConfig,
    weights: Weights,
    fingerprint: [u8; 32],
}

impl FrozenModel {
    /// Freeze a set of weights. Quantizes through f32 first, so the frozen
    /// model is bit-identical to its own checkpoint round-trip.
    pub fn freeze(config: ModelConfig, mut weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.quantize_f32();
        let fingerprint = weights_fingerprint(&weights);
        Ok(FrozenModel {
            config,
            weights,
            fingerprint,
        })
    }

    /// Random-init frozen model (tests, identity properties).
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "model-init", &[]);
        let weights = Weights::init(&config, &mut rng);
        Self::freeze(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    /// Recompute the content hash from the live weights; equal to
    /// `fingerprint()` as long as nothing violated the frozen invariant.
    pub fn recompute_fingerprint(&self) -> [u8; 32] {
        weights_fingerprint(&self.weights)
    }
}

// -- incremental engine -------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// KV cache over all layers plus the token prefix it was built from.
#[derive(Clone, Debug)]
pub struct DecodeState {
    cache: Vec<LayerCache>,
    tokens: Vec<Token>,
    fingerprint: [u8; 32],
}

impl DecodeState {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Snapshot of cached entry counts per layer (positions cached).
    pub fn cache_lens(&self) -> Vec<usize> {
        let d = if self.cache.is_empty() { 1 } else { 1 };
        let _ = d;
        self.cache.iter().map(|c| c.k.len()).collect()
    }

    /// Bitwise clone of the cache contents for invariant checks.
    pub fn cache_snapshot(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.cache.iter().map(|c| (c.k.clone(), c.v.clone())).collect()
    }
}

/// Resume point of the split forward: the last token's hidden after block
/// `layer`, plus the cache needed to continue from `layer + 1`.
#[derive(Clone, Debug)]
pub struct ActivationState {
    /// Last-token hidden vector after block `layer`. Replace it with an
    /// injected variant before resuming to steer the remaining computation.
    pub hidden: Vec<f64>,
    pub layer: usize,
    cache: Vec<LayerCache>,
    tokens: Vec<Token>,
    fingerprint: [u8; 32],
}

impl ActivationState {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

impl FrozenModel {
    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max context {}",
                tokens.len(),
                self.config.max_context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {} outside vocabulary {}",
                bad, self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, token: Token, pos: usize) -> Vec<f64> {
        let d = self.config.model_dim;
        let e = self.weights.emb.row(token);
        let p = self.weights.pos.row(pos);
        (0..d).map(|i| e[i] + p[i]).collect()
    }

    /// Process one position through blocks `from..=to` (1-based, inclusive),
    /// appending K/V to the cache at each block. `x` is the residual entering
    /// block `from`.
    fn run_blocks(&self, cache: &mut [LayerCache], mut x: Vec<f64>, from: usize, to: usize) -> Vec<f64> {
        let d = self.config.model_dim;
        let heads = self.config.num_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        for li in from..=to {
            let lw = &self.weights.layers[li - 1];
            let lc = &mut cache[li - 1];

            // attention sublayer
            let xn = rmsnorm_gain(&x, lw.g1.data());
            let q = linear(&xn, &lw.wq, d, d);
            let k = linear(&xn, &lw.wk, d, d);
            let v = linear(&xn, &lw.wv, d, d);
            lc.k.extend_from_slice(&k);
            lc.v.extend_from_slice(&v);
            let n_pos = lc.k.len() / d;

            let mut attn = vec![0.0; d];
            let mut scores = vec![0.0; n_pos];
            for h in 0..heads {
                let off = h * hd;
                let qh = &q[off..off + hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = tensor::dot(qh, &lc.k[j * d + off..j * d + off + hd]) * scale;
                }
                softmax_inplace(&mut scores);
                let out = &mut attn[off..off + hd];
                for (j, &w) in scores.iter().enumerate() {
                    let vh = &lc.v[j * d + off..j * d + off + hd];
                    for (o, &vv) in out.iter_mut().zip(vh.iter()) {
                        *o += w * vv;
                    }
                }
            }
            let proj = linear(&attn, &lw.wo, d, d);
            for (xi, p) in x.iter_mut().zip(proj.iter()) {
                *xi += p;
            }

            // mlp sublayer
            let xn2 = rmsnorm_gain(&x, lw.g2.data());
            let hmid = self.config.hidden_mlp();
            let mut h1 = linear(&xn2, &lw.w1, hmid, d);
            for v in h1.iter_mut() {
                *v = tensor::gelu_scalar(*v);
            }
            let m = linear(&h1, &lw.w2, d, hmid);
            for (xi, mv) in x.iter_mut().zip(m.iter()) {
                *xi += mv;
            }
        }
        x
    }

    fn head_logits(&self, x: &[f64]) -> Vec<f64> {
        let xn = rmsnorm_gain(x, self.weights.gf.data());
        linear(&xn, &self.weights.w_out, self.config.vocab_size, self.config.model_dim)
    }

    /// Monolithic forward pass: next-token logits after the full sequence.
    pub fn forward(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let l_total = self.config.num_layers;
        let mut cache: Vec<LayerCache> = vec![LayerCache::default(); l_total];
        let mut last = Vec::new();
        for (p, &t) in tokens.iter().enumerate() {
            let x0 = self.embed(t, p);
            last = self.run_blocks(&mut cache, x0, 1, l_total);
        }
        Ok(self.head_logits(&last))
    }

    /// Run the prefix to block `l` for the last token (earlier positions run
    /// to full depth so their cache can serve the remaining blocks).
    pub fn forward_to_layer(&self, tokens: &[Token], l: usize) -> Result<ActivationState> {
        self.check_tokens(tokens)?;
        let l_total = self.config.num_layers;
        if l < 1 || l >= l_total {
            return Err(Error::InvalidArgument(format!(
                "layer {} out of range [1, {}]",
                l,
                l_total - 1
            )));
        }
        let mut cache: Vec<LayerCache> = vec![LayerCache::default(); l_total];
        for (p, &t) in tokens.iter().enumerate().take(tokens.len() - 1) {
            let x0 = self.embed(t, p);
            let _ = self.run_blocks(&mut cache, x0, 1, l_total);
        }
        let p = tokens.len() - 1;
        let x0 = self.embed(tokens[p], p);
        let hidden = self.run_blocks(&mut cache, x0, 1, l);
        Ok(ActivationState {
            hidden,
            layer: l,
            cache,
            tokens: tokens.to_vec(),
            fingerprint: self.fingerprint,
        })
    }

    fn check_state(&self, state: &ActivationState) -> Result<()> {
        if state.fingerprint != self.fingerprint {
            return Err(Error::Provenance(
                "activation state was produced by a different model".into(),
            ));
        }
        if state.hidden.len() != self.config.model_dim {
            return Err(Error::Shape {
                op: "continue_from_layer",
                detail: format!(
                    "hidden length {} vs model dim {}",
                    state.hidden.len(),
                    self.config.model_dim
                ),
            });
        }
        let d = self.config.model_dim;
        let n = state.tokens.len();
        for (li, lc) in state.cache.iter().enumerate() {
            let want = if li < state.layer { n } else { n - 1 };
            if lc.k.len() != want * d || lc.v.len() != want * d {
                return Err(Error::Provenance(format!(
                    "stale resume context: block {} caches {} positions, expected {}",
                    li + 1,
                    lc.k.len() / d,
                    want
                )));
            }
        }
        Ok(())
    }

    /// Resume from block `layer + 1` with the state's hidden (injected or
    /// not). Returns next-token logits plus the completed decode state.
    pub fn continue_from_layer(&self, state: ActivationState) -> Result<(Vec<f64>, DecodeState)> {
        self.check_state(&state)?;
        let l_total = self.config.num_layers;
        let ActivationState {
            hidden,
            layer,
            mut cache,
            tokens,
            fingerprint,
        } = state;
        let x = self.run_blocks(&mut cache, hidden, layer + 1, l_total);
        let logits = self.head_logits(&x);
        Ok((
            logits,
            DecodeState {
                cache,
                tokens,
                fingerprint,
            },
        ))
    }

    /// Append one token to a completed state and run it to block `l`: the
    /// incremental analogue of `forward_to_layer` for the next decode step.
    pub fn advance_to_layer(&self, state: DecodeState, token: Token, l: usize) -> Result<ActivationState> {
        if state.fingerprint != self.fingerprint {
            return Err(Error::Provenance(
                "decode state was produced by a different model".into(),
            ));
        }
        if token >= self.config.vocab_size {
            return Err(Error::InvalidArgument(format!("token {} outside vocabulary", token)));
        }
        let DecodeState {
            mut cache,
            mut tokens,
            fingerprint,
        } = state;
        if tokens.len() + 1 > self.config.max_context {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max context {}",
                tokens.len() + 1,
                self.config.max_context
            )));
        }
        let p = tokens.len();
        tokens.push(token);
        let x0 = self.embed(token, p);
        let hidden = self.run_blocks(&mut cache, x0, 1, l);
        Ok(ActivationState {
            hidden,
            layer: l,
            cache,
            tokens,
            fingerprint,
        })
    }
}

fn linear(x: &[f64], w: &Tensor, out: usize, inp: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), inp);
    debug_assert_eq!(w.shape(), &[out, inp]);
    let wd = w.data();
    (0..out)
        .map(|o| tensor::dot(x, &wd[o * inp..(o + 1) * inp]))
        .collect()
}

fn rmsnorm_gain(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let inv = tensor::rms_inv(x, RMS_EPS);
    x.iter().zip(gain.iter()).map(|(&v, &g)| v * inv * g).collect()
}

fn softmax_inplace(scores: &mut [f64]) {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - mx).exp();
        z += *s;
    }
    for s in scores.iter_mut() {
        *s /= z;
    }
}

// -- decoding -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

/// Pick the next token. Greedy breaks ties toward the lowest index;
/// temperature sampling draws from `softmax(logits / t)` using the caller's
/// stream.
pub fn decode_token(logits: &[f64], sampling: Sampling, rng: &mut impl Rng) -> Result<Token> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits in decode_token".into()));
    }
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        Sampling::Temperature(t) => {
            if t <= 0.0 {
                return Err(Error::InvalidArgument("temperature must be > 0".into()));
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = logits.iter().map(|&x| ((x - mx) / t).exp()).collect();
            let z: f64 = probs.iter().sum();
            let mut dart = rng.gen::<f64>() * z;
            for (i, &p) in probs.iter().enumerate() {
                dart -= p;
                if dart <= 0.0 {
                    return Ok(i);
                }
            }
            Ok(probs.len() - 1)
        }
    }
}

/// Log-probability of `token` under `softmax(logits / t)`.
pub fn token_logprob(logits: &[f64], token: Token, t: f64) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| ((x - mx) / t).exp()).sum();
    (logits[token] - mx) / t - z.ln()
}

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub tokens: Vec<Token>,
    /// Number of generated tokens (the token-efficiency metric).
    pub token_count: usize,
    /// Log-probability of each emitted token under the sampling policy
    /// (`softmax(logits / t)`, with t = 1 for greedy).
    pub logps: Vec<f64>,
}

/// Steered generation: the injection vector is computed once by the caller
/// and re-added to the block-`l` last-token hidden at every decode step.
/// Stops at `eos` or after `max_steps` tokens.
pub fn generate(
    model: &FrozenModel,
    prompt: &[Token],
    steer: Option<&[f64]>,
    l: usize,
    max_steps: usize,
    sampling: Sampling,
    eos: Token,
    rng: &mut impl Rng,
) -> Result<GenerateOutput> {
    if max_steps < 1 {
        return Err(Error::InvalidArgument("max_steps must be >= 1".into()));
    }
    if let Some(v) = steer {
        if v.len() != model.config().model_dim {
            return Err(Error::Shape {
                op: "generate",
                detail: format!("injection length {} vs model dim {}", v.len(), model.config().model_dim),
            });
        }
    }
    let temp = match sampling {
        Sampling::Temperature(t) => t,
        Sampling::Greedy => 1.0,
    };
    let mut out = GenerateOutput {
        tokens: Vec::new(),
        token_count: 0,
        logps: Vec::new(),
    };
    let mut state = model.forward_to_layer(prompt, l)?;
    loop {
        if let Some(v) = steer {
            for (h, &vi) in state.hidden.iter_mut().zip(v.iter()) {
                *h += vi;
            }
        }
        let (logits, dstate) = model.continue_from_layer(state)?;
        let tok = decode_token(&logits, sampling, rng)?;
        out.logps.push(token_logprob(&logits, tok, temp));
        out.tokens.push(tok);
        out.token_count += 1;
        if tok == eos || out.token_count >= max_steps {
            return Ok(out);
        }
        if dstate.tokens.len() + 1 > model.config().max_context {
            return Ok(out); // context full: stop rather than error mid-stream
        }
        state = model.advance_to_layer(dstate, tok, l)?;
    }
}
