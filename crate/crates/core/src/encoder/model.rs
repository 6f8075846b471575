//! Parameter registry, model construction and the shared turn encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{tokenize_with_limit, TokenizedTurn};
use super::vocab::Vocab;
use crate::autodiff::{Tape, Var};
use crate::corpus::{CtypeLabel, Ontology, Triplet};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Width of the hidden layer in front of the C-type and correction
    /// classifiers; 0 makes both a single linear map.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_len: 128,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// A small model of width `d` (used for gradient checks and benchmarks).
    pub fn tiny(d: usize) -> Self {
        Self {
            d_model: d,
            n_layers: 2,
            n_heads: if d.is_multiple_of(4) { 4 } else { 1 },
            ffn_dim: 2 * d,
            max_len: 64,
            head_hidden: d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_dim == 0 || self.max_len < 3 {
            return Err(Error::Config("ffn_dim must be positive and max_len at least 3".into()));
        }
        Ok(())
    }
}

/// Named tensors, each paired with a gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    grads: Vec<Tensor<F>>,
}

impl<F: Scalar> Parameters<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers a tensor; panics on a duplicate name.
    pub fn register(&mut self, name: &str, t: Tensor<F>) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "parameter {name} registered twice"
        );
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(t.rows(), t.cols()));
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn tensor(&self, id: usize) -> &Tensor<F> {
        &self.tensors[id]
    }

    pub fn grads(&self) -> &[Tensor<F>] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(F::zero()));
    }

    /// Fails naming the first tensor whose gradient is NaN or infinite.
    pub fn check_grads_finite(&self) -> Result<()> {
        match self.grads.iter().position(|g| !g.all_finite()) {
            Some(i) => Err(Error::NonFiniteGradient {
                tensor: self.names[i].clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

impl<F: Scalar> Default for Parameters<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// A classifier over `[features]`: either `W x` or `W gelu(U x + b)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct HeadIds {
    pub hidden: Option<(usize, usize)>,
    pub out: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ParamIds {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIds>,
    pub final_g: usize,
    pub final_b: usize,
    /// `W^d`: `[h_cls; E(D_l)] -> domains`
    pub domain: usize,
    /// `W^R`: `[h_cls; E(D_l)] -> s + 1`
    pub constraint: usize,
    /// `W^s`: `h_i -> 2s + 1`
    pub tag: usize,
    /// `W^c`: `[E(c); E(D_l); h_cls] -> {yes, no, dontcare, absent}`
    pub ctype: HeadIds,
    /// `W^p`: `[p_hat; E(D_l); h_cls] -> keep logit`
    pub keep: HeadIds,
}

/// Encoder plus the four heads, with the vocabulary and ontology they were
/// built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub ontology: Ontology,
    pub params: Parameters<F>,
    pub(crate) ids: ParamIds,
}

/// Output of the shared encoder for one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTurn<F> {
    pub tokens: TokenizedTurn,
    pub h_cls: Vec<F>,
    /// One row per token after `[CLS]`.
    pub h_tokens: Tensor<F>,
}

impl<F: Scalar> EncodedTurn<F> {
    pub fn d(&self) -> usize {
        self.h_cls.len()
    }
}

fn xavier<F: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| F::of(rng.gen_range(-a..a))).collect();
    Tensor::from_vec(rows, cols, data)
}

impl<F: Scalar> Model<F> {
    /// Seeded Xavier-uniform initialization; biases and layer-norm shifts
    /// start at zero, layer-norm gains at one.
    pub fn new(config: ModelConfig, vocab: Vocab, ontology: Ontology, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut p = Parameters::new();
        let mut dense = |p: &mut Parameters<F>, name: &str, rows: usize, cols: usize| {
            p.register(name, xavier(&mut rng, rows, cols, rows, cols))
        };
        let zeros = |p: &mut Parameters<F>, name: &str, cols: usize| p.register(name, Tensor::zeros(1, cols));
        let ones = |p: &mut Parameters<F>, name: &str, cols: usize| p.register(name, Tensor::filled(1, cols, F::one()));

        let tok_emb = dense(&mut p, "embed.token", vocab.len(), d);
        let pos_emb = dense(&mut p, "embed.position", config.max_len, d);
        // Embedding rows use the (d, d) fan so their scale does not depend on
        // the table height.
        let scale = |t: &mut Tensor<F>, rows: usize| {
            let f = F::of(((rows + d) as f64 / (2 * d) as f64).sqrt());
            t.scale_assign(f);
        };
        scale(&mut p.tensors[tok_emb], vocab.len());
        scale(&mut p.tensors[pos_emb], config.max_len);

        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIds {
                ln1_g: ones(&mut p, &n("ln1.gamma"), d),
                ln1_b: zeros(&mut p, &n("ln1.beta"), d),
                wq: dense(&mut p, &n("attn.wq"), d, d),
                bq: zeros(&mut p, &n("attn.bq"), d),
                wk: dense(&mut p, &n("attn.wk"), d, d),
                wv: dense(&mut p, &n("attn.wv"), d, d),
                bv: zeros(&mut p, &n("attn.bv"), d),
                wo: dense(&mut p, &n("attn.wo"), d, d),
                bo: zeros(&mut p, &n("attn.bo"), d),
                ln2_g: ones(&mut p, &n("ln2.gamma"), d),
                ln2_b: zeros(&mut p, &n("ln2.beta"), d),
                w1: dense(&mut p, &n("ffn.w1"), d, config.ffn_dim),
                b1: zeros(&mut p, &n("ffn.b1"), config.ffn_dim),
                w2: dense(&mut p, &n("ffn.w2"), config.ffn_dim, d),
                b2: zeros(&mut p, &n("ffn.b2"), d),
            });
        }
        let final_g = ones(&mut p, "final_ln.gamma", d);
        let final_b = zeros(&mut p, "final_ln.beta", d);

        let s = ontology.num_stype();
        let n_domains = ontology.domains().len();
        let domain = dense(&mut p, "head.domain.w", 2 * d, n_domains);
        let constraint = dense(&mut p, "head.constraint.w", 2 * d, s + 1);
        let tag = dense(&mut p, "head.tag.w", d, 2 * s + 1);
        let mut head = |p: &mut Parameters<F>, name: &str, outputs: usize| {
            if config.head_hidden == 0 {
                HeadIds {
                    hidden: None,
                    out: dense(p, &format!("head.{name}.w"), 3 * d, outputs),
                }
            } else {
                let h = config.head_hidden;
                let u = dense(p, &format!("head.{name}.hidden.w"), 3 * d, h);
                let b = zeros(p, &format!("head.{name}.hidden.b"), h);
                HeadIds {
                    hidden: Some((u, b)),
                    out: dense(p, &format!("head.{name}.out.w"), h, outputs),
                }
            }
        };
        let ctype = head(&mut p, "ctype", CtypeLabel::ALL.len());
        let keep = head(&mut p, "keep", 1);

        Ok(Self {
            config,
            vocab,
            ontology,
            params: p,
            ids: ParamIds {
                tok_emb,
                pos_emb,
                layers,
                final_g,
                final_b,
                domain,
                constraint,
                tag,
                ctype,
                keep,
            },
        })
    }

    /// Rebuilds a model around existing tensors (checkpoint loading). The
    /// registry layout is recreated from `config` and every tensor must
    /// match by name and shape.
    pub fn from_tensors(
        config: ModelConfig,
        vocab: Vocab,
        ontology: Ontology,
        named: Vec<(String, Tensor<F>)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, vocab, ontology, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if model.params.tensors[id].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.tensors[id].shape()
                )));
            }
            model.params.tensors[id] = t;
        }
        Ok(model)
    }

    pub fn d(&self) -> usize {
        self.config.d_model
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let mut params = Parameters::new();
        for (n, t) in self.params.names.iter().zip(&self.params.tensors) {
            params.register(n, t.cast());
        }
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            ontology: self.ontology.clone(),
            params,
            ids: self.ids.clone(),
        }
    }

    pub fn tokenize(&self, sys: &str, usr: &str) -> TokenizedTurn {
        tokenize_with_limit(sys, usr, self.config.max_len)
    }

    /// Records the encoder on `tape`; returns the `(n + 1) x d` output whose
    /// row 0 is `H_[CLS]`.
    pub(crate) fn encode_on_tape(&self, tape: &mut Tape<'_, F>, ids: &[usize]) -> Var {
        assert!(ids.len() <= self.config.max_len, "sequence longer than max_len");
        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let inv_sqrt = F::of(1.0 / (dh as f64).sqrt());
        let n = ids.len();

        let tok_table = tape.param(self.ids.tok_emb);
        let tok = tape.gather(tok_table, ids);
        let pos_table = tape.param(self.ids.pos_emb);
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(pos_table, &positions);
        let mut x = tape.add(tok, pos);

        for l in &self.ids.layers {
            let g = tape.param(l.ln1_g);
            let b = tape.param(l.ln1_b);
            let h = tape.layer_norm(x, g, b);
            let proj = |tape: &mut Tape<'_, F>, w: usize, bias: usize| {
                let w = tape.param(w);
                let bias = tape.param(bias);
                let y = tape.matmul(h, w);
                tape.add_row(y, bias)
            };
            let q = proj(tape, l.wq, l.bq);
            // No key bias: it shifts every score of a query row equally.
            let wk = tape.param(l.wk);
            let k = tape.matmul(h, wk);
            let v = proj(tape, l.wv, l.bv);
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for head in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let scores = tape.matmul_bt(qh, kh);
                let scores = tape.scale(scores, inv_sqrt);
                let att = tape.softmax_rows(scores);
                heads.push(tape.matmul(att, vh));
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            };
            let wo = tape.param(l.wo);
            let bo = tape.param(l.bo);
            let o = tape.matmul(cat, wo);
            let o = tape.add_row(o, bo);
            x = tape.add(x, o);

            let g = tape.param(l.ln2_g);
            let b = tape.param(l.ln2_b);
            let h = tape.layer_norm(x, g, b);
            let w1 = tape.param(l.w1);
            let b1 = tape.param(l.b1);
            let f = tape.matmul(h, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let w2 = tape.param(l.w2);
            let b2 = tape.param(l.b2);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            x = tape.add(x, f);
        }
        let g = tape.param(self.ids.final_g);
        let b = tape.param(self.ids.final_b);
        let _ = n;
        tape.layer_norm(x, g, b)
    }

    /// Runs the encoder on a tokenized turn.
    pub fn encode(&self, tokens: &TokenizedTurn) -> EncodedTurn<F> {
        let ids = self.vocab.ids(&tokens.tokens);
        let mut tape = Tape::new(self.params.tensors());
        let h = self.encode_on_tape(&mut tape, &ids);
        let out = tape.value(h);
        let d = self.d();
        EncodedTurn {
            tokens: tokens.clone(),
            h_cls: out.row(0).to_vec(),
            h_tokens: Tensor::from_vec(out.rows() - 1, d, out.data()[d..].to_vec()),
        }
    }

    /// `E(words)`: mean of the current input-embedding rows of the given
    /// tokens, read as a constant (no gradient flows back through it).
    pub fn embed_label(&self, ids: &[usize]) -> Vec<F> {
        embed_rows(self.params.tensor(self.ids.tok_emb), ids)
    }

    pub fn embed_text(&self, text: &str) -> Vec<F> {
        self.embed_label(&self.vocab.label_ids(text))
    }

    /// `E(D_l)`; `[NONE_DOMAIN]` when there is no previous domain.
    pub fn embed_domain(&self, domain: Option<&str>) -> Vec<F> {
        self.embed_label(&[self.vocab.domain_id(domain)])
    }

    /// `E(slot)`, from the short slot name's tokens.
    pub fn embed_slot(&self, slot: &str) -> Vec<F> {
        self.embed_text(slot)
    }

    /// `p_hat = E(domain) + E(slot) + E(value)`.
    pub fn embed_triplet(&self, t: &Triplet) -> Vec<F> {
        let ids = TripletIds::new(&self.vocab, t);
        ids.embed(self.params.tensor(self.ids.tok_emb))
    }

    pub(crate) fn token_table_id(&self) -> usize {
        self.ids.tok_emb
    }
}

/// Mean of the selected rows of an embedding table.
pub(crate) fn embed_rows<F: Scalar>(table: &Tensor<F>, ids: &[usize]) -> Vec<F> {
    let mut out = vec![F::zero(); table.cols()];
    for &i in ids {
        for (o, &v) in out.iter_mut().zip(table.row(i)) {
            *o = *o + v;
        }
    }
    let n = F::of(ids.len().max(1) as f64);
    out.iter_mut().for_each(|o| *o = *o / n);
    out
}

/// Token ids of the three items of a triplet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct TripletIds {
    pub domain: usize,
    pub slot: Vec<usize>,
    pub value: Vec<usize>,
}

impl TripletIds {
    pub fn new(vocab: &Vocab, t: &Triplet) -> Self {
        Self {
            domain: vocab.domain_id(Some(&t.domain)),
            slot: vocab.label_ids(&t.slot),
            value: vocab.label_ids(&t.value),
        }
    }

    pub fn embed<F: Scalar>(&self, table: &Tensor<F>) -> Vec<F> {
        let mut out = embed_rows(table, &[self.domain]);
        for part in [embed_rows(table, &self.slot), embed_rows(table, &self.value)] {
            for (o, v) in out.iter_mut().zip(part) {
                *o = *o + v;
            }
        }
        out
    }
}
