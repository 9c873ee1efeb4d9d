//! Decoder-only transformer with learned positional embeddings and pre-norm
//! blocks. The same backbone serves the policy (language-model head plus a
//! value head) and the reward model (scalar score head).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use salu_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Result, SaluError};
use crate::seed;
use crate::vocab::{self, TokenId, EOS, VOCAB_SIZE};

/// Standard deviation of the normal initializer for weights and embeddings.
pub const INIT_STD: f64 = 0.02;
/// Additive score for masked attention entries; exp underflows to exactly 0.
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 256,
            max_seq_len: 64,
            vocab_size: VOCAB_SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SaluError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad(format!("model extents must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key=value` lines, in a fixed order.
    pub fn to_header_lines(&self) -> Vec<String> {
        vec![
            format!("n_layers={}", self.n_layers),
            format!("d_model={}", self.d_model),
            format!("n_heads={}", self.n_heads),
            format!("ffn_dim={}", self.ffn_dim),
            format!("max_seq_len={}", self.max_seq_len),
            format!("vocab_size={}", self.vocab_size),
            format!("seed={}", self.seed),
        ]
    }
}

/// Which output heads sit on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Next-token projection plus a scalar value head.
    Policy,
    /// A single scalar score head.
    Reward,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Policy => "policy",
            HeadKind::Reward => "reward",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "policy" => Ok(HeadKind::Policy),
            "reward" => Ok(HeadKind::Reward),
            other => Err(SaluError::Checkpoint(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
    lm_weight: Option<ParamId>,
    lm_bias: Option<ParamId>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Backbone parameters together with their heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    kind: HeadKind,
    params: ParamStore,
    layout: Layout,
}

struct Init<'r, R: Rng> {
    store: ParamStore,
    rng: &'r mut R,
    normal: Normal<f64>,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(self.rng)).collect();
        Ok(self.store.insert(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(shape, v))?)
    }
}

fn head_names(kind: HeadKind) -> (&'static str, &'static str) {
    match kind {
        HeadKind::Policy => ("value_head.weight", "value_head.bias"),
        HeadKind::Reward => ("score_head.weight", "score_head.bias"),
    }
}

impl Transformer {
    /// Freshly initialized model. Weights and embeddings are drawn from
    /// N(0, 0.02²); biases start at 0, layer-norm gains at 1, and the scalar
    /// head at exactly 0.
    pub fn new(config: ModelConfig, kind: HeadKind) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let (d, f, v) = (config.d_model, config.ffn_dim, config.vocab_size);
        let tok_emb = init.normal("tok_emb".into(), &[v, d])?;
        let pos_emb = init.normal("pos_emb".into(), &[config.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockIds {
                ln1_gain: init.fill(p("ln1.gain"), &[d], 1.0)?,
                ln1_bias: init.fill(p("ln1.bias"), &[d], 0.0)?,
                wq: init.normal(p("attn.wq"), &[d, d])?,
                bq: init.fill(p("attn.bq"), &[d], 0.0)?,
                wk: init.normal(p("attn.wk"), &[d, d])?,
                bk: init.fill(p("attn.bk"), &[d], 0.0)?,
                wv: init.normal(p("attn.wv"), &[d, d])?,
                bv: init.fill(p("attn.bv"), &[d], 0.0)?,
                wo: init.normal(p("attn.wo"), &[d, d])?,
                bo: init.fill(p("attn.bo"), &[d], 0.0)?,
                ln2_gain: init.fill(p("ln2.gain"), &[d], 1.0)?,
                ln2_bias: init.fill(p("ln2.bias"), &[d], 0.0)?,
                w1: init.normal(p("ffn.w1"), &[d, f])?,
                b1: init.fill(p("ffn.b1"), &[f], 0.0)?,
                w2: init.normal(p("ffn.w2"), &[f, d])?,
                b2: init.fill(p("ffn.b2"), &[d], 0.0)?,
            });
        }
        let lnf_gain = init.fill("ln_f.gain".into(), &[d], 1.0)?;
        let lnf_bias = init.fill("ln_f.bias".into(), &[d], 0.0)?;
        let (lm_weight, lm_bias) = match kind {
            HeadKind::Policy => (
                Some(init.normal("lm_head.weight".into(), &[d, v])?),
                Some(init.fill("lm_head.bias".into(), &[v], 0.0)?),
            ),
            HeadKind::Reward => (None, None),
        };
        let (hw, hb) = head_names(kind);
        let head_weight = init.fill(hw.into(), &[d, 1], 0.0)?;
        let head_bias = init.fill(hb.into(), &[1], 0.0)?;
        Ok(Self {
            config,
            kind,
            params: init.store,
            layout: Layout {
                tok_emb,
                pos_emb,
                blocks,
                lnf_gain,
                lnf_bias,
                lm_weight,
                lm_bias,
                head_weight,
                head_bias,
            },
        })
    }

    /// Rebuilds a model from stored parameters, checking that names and
    /// shapes match the architecture implied by `config` and `kind`.
    pub fn from_params(config: ModelConfig, kind: HeadKind, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, kind)?;
        if params.len() != model.params.len() {
            return Err(SaluError::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, t) in model.params.iter() {
            let other = params
                .id(name)
                .ok_or_else(|| SaluError::Checkpoint(format!("missing tensor `{name}`")))?;
            if params.get(other).shape() != t.shape() {
                return Err(SaluError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    params.get(other).shape(),
                    t.shape()
                )));
            }
            debug_assert_eq!(id, model.params.id(name).unwrap());
        }
        let ids: Vec<(ParamId, ParamId)> = model
            .params
            .iter()
            .map(|(id, name, _)| (id, params.id(name).unwrap()))
            .collect();
        for (mine, theirs) in ids {
            *model.params.get_mut(mine) = params.get(theirs).clone();
        }
        if !model.params.all_finite() {
            return Err(SaluError::Checkpoint("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_weight_id(&self) -> ParamId {
        self.layout.head_weight
    }

    pub fn head_bias_id(&self) -> ParamId {
        self.layout.head_bias
    }

    /// Weight and bias of the language-model head; `None` for reward models.
    pub fn lm_head_ids(&self) -> Option<(ParamId, ParamId)> {
        self.layout.lm_weight.zip(self.layout.lm_bias)
    }

    pub fn check_input(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(SaluError::InvalidSequence("empty input".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(SaluError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        vocab::check_ids(ids)
    }

    /// Final-layer-normed hidden states for positions `from..ids.len()`.
    ///
    /// All positions are processed in every layer except the last, where only
    /// rows at or after `from` are computed (keys and values still cover the
    /// whole sequence). Outputs are identical to a full pass restricted to
    /// those rows.
    pub fn hidden<'a>(&'a self, g: &mut Graph<'a>, ids: &[TokenId], from: usize) -> Result<Var> {
        self.check_input(ids)?;
        let len = ids.len();
        if from >= len {
            return Err(SaluError::InvalidSequence(format!(
                "output start {from} beyond sequence length {len}"
            )));
        }
        let p = &self.params;
        let lay = &self.layout;
        let tok_table = g.param(p, lay.tok_emb);
        let tok = g.gather(tok_table, ids)?;
        let pos_table = g.param(p, lay.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &positions)?;
        let mut h = g.add(tok, pos)?;
        let n_blocks = lay.blocks.len();
        for (i, block) in lay.blocks.iter().enumerate() {
            let q_from = if i + 1 == n_blocks { from } else { 0 };
            h = self.block(g, block, h, len, q_from)?;
        }
        let gain = g.param(p, lay.lnf_gain);
        let bias = g.param(p, lay.lnf_bias);
        Ok(g.layer_norm(h, gain, bias)?)
    }

    fn linear<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let bv = g.param(&self.params, b);
        let y = g.matmul(x, wv)?;
        Ok(g.add(y, bv)?)
    }

    fn block<'a>(
        &'a self,
        g: &mut Graph<'a>,
        ids: &BlockIds,
        h: Var,
        len: usize,
        q_from: usize,
    ) -> Result<Var> {
        let p = &self.params;
        let (n_heads, dh) = (self.config.n_heads, self.config.head_dim());
        let gain = g.param(p, ids.ln1_gain);
        let bias = g.param(p, ids.ln1_bias);
        let a = g.layer_norm(h, gain, bias)?;
        let k = self.linear(g, a, ids.wk, ids.bk)?;
        let v = self.linear(g, a, ids.wv, ids.bv)?;
        let (a_q, h_res) = if q_from > 0 {
            (g.slice(a, 0, q_from, len)?, g.slice(h, 0, q_from, len)?)
        } else {
            (a, h)
        };
        let q = self.linear(g, a_q, ids.wq, ids.bq)?;
        let rows = len - q_from;
        let mut mask = Tensor::zeros(&[rows, len]);
        for r in 0..rows {
            let pos = q_from + r;
            mask.data_mut()[r * len + pos + 1..(r + 1) * len].fill(MASKED);
        }
        let mask = g.constant(mask);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let s = g.add(s, mask)?;
            let attn = g.softmax(s)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let o = if n_heads == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        };
        let o = self.linear(g, o, ids.wo, ids.bo)?;
        let h2 = g.add(h_res, o)?;
        let gain = g.param(p, ids.ln2_gain);
        let bias = g.param(p, ids.ln2_bias);
        let b = g.layer_norm(h2, gain, bias)?;
        let f = self.linear(g, b, ids.w1, ids.b1)?;
        let f = g.gelu(f)?;
        let f = self.linear(g, f, ids.w2, ids.b2)?;
        Ok(g.add(h2, f)?)
    }

    /// Next-token logits for every row of `hidden`. Policy models only.
    pub fn lm_logits<'a>(&'a self, g: &mut Graph<'a>, hidden: Var) -> Result<Var> {
        let (Some(w), Some(b)) = (self.layout.lm_weight, self.layout.lm_bias) else {
            return Err(SaluError::Invalid("reward model has no language-model head".into()));
        };
        self.linear(g, hidden, w, b)
    }

    /// Scalar head (value or score) applied to one row of `hidden`.
    pub fn scalar_head<'a>(&'a self, g: &mut Graph<'a>, hidden: Var, row: usize) -> Result<Var> {
        let r = g.slice(hidden, 0, row, row + 1)?;
        let y = self.linear(g, r, self.layout.head_weight, self.layout.head_bias)?;
        Ok(g.reshape(y, &[1])?)
    }
}

/// How [`LanguageModel::decode`] picks each next token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    /// Arg-max, ties broken by the lowest token id.
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Graph handles for a teacher-forced response.
pub struct ResponseVars {
    /// Per-token log-probabilities, shape `[m]`.
    pub token_log_probs: Var,
    /// Next-token logits at each response position, shape `[m, V]`.
    pub logits: Var,
    /// Value-head output at the final prompt position, shape `[1]`.
    pub value: Var,
}

/// The policy: a decoder-only language model with a value head.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    net: Transformer,
}

impl LanguageModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            net: Transformer::new(config, HeadKind::Policy)?,
        })
    }

    pub fn from_transformer(net: Transformer) -> Result<Self> {
        if net.kind() != HeadKind::Policy {
            return Err(SaluError::Checkpoint("expected a policy checkpoint".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Transformer {
        &self.net
    }

    pub fn into_net(self) -> Transformer {
        self.net
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn params(&self) -> &ParamStore {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.net.params_mut()
    }

    /// Next-token logits at every position of `prefix`, shape `[L, V]`.
    pub fn forward_logits(&self, prefix: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.net.hidden(&mut g, prefix, 0)?;
        let logits = self.net.lm_logits(&mut g, h)?;
        Ok(g.value(logits).clone())
    }

    fn last_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = self.net.hidden(&mut g, prefix, prefix.len() - 1)?;
        let logits = self.net.lm_logits(&mut g, h)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Records the teacher-forced pass of `response` after `prompt` on `g`.
    pub fn response_vars<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<ResponseVars> {
        if prompt.is_empty() || response.is_empty() {
            return Err(SaluError::InvalidSequence(
                "prompt and response must be non-empty".into(),
            ));
        }
        vocab::check_ids(response)?;
        let mut ids = Vec::with_capacity(prompt.len() + response.len() - 1);
        ids.extend_from_slice(prompt);
        ids.extend_from_slice(&response[..response.len() - 1]);
        let h = self.net.hidden(g, &ids, prompt.len() - 1)?;
        let logits = self.net.lm_logits(g, h)?;
        let nll = g.cross_entropy(logits, response)?;
        let token_log_probs = g.scale(nll, -1.0)?;
        let value = self.net.scalar_head(g, h, 0)?;
        Ok(ResponseVars {
            token_log_probs,
            logits,
            value,
        })
    }

    /// `log P(y_j | X, y_<j)` for each response token.
    pub fn token_log_probs(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.response_vars(&mut g, prompt, response)?;
        Ok(g.value(vars.token_log_probs).data().to_vec())
    }

    /// `Σ_j log P(y_j | X, y_<j)` under teacher forcing. The response must
    /// end with `[EOS]`.
    pub fn sequence_log_prob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        require_eos(response)?;
        Ok(self.token_log_probs(prompt, response)?.iter().sum())
    }

    /// Mean per-token log-probability of `response`; `exp` of it is the
    /// geometric mean of the token probabilities.
    pub fn confidence_score(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        require_eos(response)?;
        let lp = self.sequence_log_prob(prompt, response)?;
        Ok(lp / response.len() as f64)
    }

    /// Value-head estimate at the final prompt position.
    pub fn value_estimate(&self, prompt: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new();
        let h = self.net.hidden(&mut g, prompt, prompt.len().max(1) - 1)?;
        let v = self.net.scalar_head(&mut g, h, 0)?;
        Ok(g.item(v))
    }

    /// Autoregressive generation. Stops after `[EOS]` or `max_new` tokens,
    /// whichever comes first; the result may therefore lack `[EOS]`.
    pub fn decode(&self, prompt: &[TokenId], mode: DecodeMode, max_new: usize) -> Result<Vec<TokenId>> {
        if max_new == 0 {
            return Err(SaluError::Config("max_new must be at least 1".into()));
        }
        self.net.check_input(prompt)?;
        let mut rng = match mode {
            DecodeMode::Sample { temperature, seed } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(SaluError::Config(format!(
                        "sampling temperature must be positive, got {temperature}"
                    )));
                }
                Some(seed::rng(seed))
            }
            DecodeMode::Greedy => None,
        };
        let mut ids = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            if ids.len() >= self.config().max_seq_len {
                return Err(SaluError::SequenceTooLong {
                    len: ids.len() + 1,
                    max: self.config().max_seq_len,
                });
            }
            let logits = self.last_logits(&ids)?;
            let next = match (&mode, rng.as_mut()) {
                (DecodeMode::Sample { temperature, .. }, Some(r)) => {
                    sample_token(&logits, *temperature, r)
                }
                _ => argmax(&logits),
            };
            out.push(next);
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }
}

fn require_eos(response: &[TokenId]) -> Result<()> {
    if response.is_empty() {
        return Err(SaluError::InvalidSequence("empty response".into()));
    }
    if response.last() != Some(&EOS) {
        return Err(SaluError::InvalidSequence(format!(
            "response must end with [EOS]: {}",
            vocab::render(response)
        )));
    }
    Ok(())
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `softmax(logits / temperature)`.
pub fn sample_token<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    let mut probs: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    salu_autodiff::kernels::softmax_in_place(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; fall back to the last nonzero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{key, value, CLS, IS, SEP};

    fn model() -> LanguageModel {
        LanguageModel::new(ModelConfig {
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn parameter_count_and_init() {
        let m = model();
        let p = m.params();
        let id = p.id("blocks.0.ln1.gain").unwrap();
        assert!(p.get(id).data().iter().all(|&v| v == 1.0));
        let id = p.id("value_head.weight").unwrap();
        assert!(p.get(id).data().iter().all(|&v| v == 0.0));
        // 2 blocks of (4 d² + 2 d f + 9 d + f) plus embeddings and heads.
        let (d, f, v, l) = (64, 256, 64, 64);
        let block = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
        let expected = v * d + l * d + 2 * block + 2 * d + d * v + v + d + 1;
        assert_eq!(p.num_scalars(), expected);
    }

    #[test]
    fn rejects_overlong_prefix() {
        let m = model();
        let ids = vec![CLS; 65];
        assert!(matches!(
            m.forward_logits(&ids),
            Err(SaluError::SequenceTooLong { len: 65, max: 64 })
        ));
    }

    #[test]
    fn trimmed_pass_matches_full_pass() {
        let m = model();
        let ids = [CLS, key(1), IS, value(2), SEP, key(3), SEP];
        let full = m.forward_logits(&ids).unwrap();
        let mut g = Graph::new();
        let h = m.net().hidden(&mut g, &ids, 4).unwrap();
        let l = m.net().lm_logits(&mut g, h).unwrap();
        let trimmed = g.value(l);
        for r in 0..3 {
            for (a, b) in trimmed.row(r).iter().zip(full.row(r + 4)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
        assert_eq!(argmax(&[5.0, 5.0]), 0);
    }

    #[test]
    fn decode_rejects_zero_budget() {
        let m = model();
        assert!(m.decode(&[CLS, SEP], DecodeMode::Greedy, 0).is_err());
    }

    #[test]
    fn sequence_log_prob_requires_eos() {
        let m = model();
        assert!(m.sequence_log_prob(&[CLS, SEP], &[value(1)]).is_err());
        assert!(m.confidence_score(&[CLS, SEP], &[]).is_err());
        assert!(m.sequence_log_prob(&[CLS, SEP], &[99, EOS]).is_err());
    }
}
