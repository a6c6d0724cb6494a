//! Question text pipeline: tokenizer and vocabulary, embedding tables, the
//! summed-embedding feature and a two-layer LSTM encoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id mapping. Ids 0 and 1 are reserved for padding and unknown
/// tokens; the rest are assigned in order of first occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Vocabulary over every token of every question, in first-seen order.
    pub fn build<'a>(questions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::new();
        for q in questions {
            for tok in split_tokens(q) {
                v.insert(&tok);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    /// Id of a token, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    /// JSON object `token -> id`, ordered by id.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), serde_json::Value::from(i)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Format("vocab must be a JSON object".into()))?;
        let mut pairs: Vec<(usize, &str)> = Vec::with_capacity(obj.len());
        for (tok, id) in obj {
            let id = id
                .as_u64()
                .ok_or_else(|| Error::Format(format!("vocab id for {tok:?} is not an integer")))?;
            pairs.push((id as usize, tok.as_str()));
        }
        pairs.sort_unstable();
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (expect, (id, tok)) in pairs.into_iter().enumerate() {
            if id != expect {
                return Err(Error::Format(format!("vocab ids are not contiguous at {expect}")));
            }
            v.insert(tok);
        }
        if v.token(PAD) != Some(PAD_TOKEN) || v.token(UNK) != Some(UNK_TOKEN) {
            return Err(Error::Format("vocab must reserve ids 0 and 1 for <pad> and <unk>".into()));
        }
        Ok(v)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_json()).expect("vocab json");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Lowercased whitespace tokens with trailing punctuation removed.
pub fn split_tokens(question: &str) -> Vec<String> {
    question
        .split_whitespace()
        .map(|t| t.trim_end_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn tokenize(question: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let ids: Vec<usize> = split_tokens(question).iter().map(|t| vocab.id(t)).collect();
    if ids.is_empty() {
        return Err(Error::Empty("tokenize"));
    }
    Ok(ids)
}

/// Word embedding matrix `[V×d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    weights: Tensor,
    trainable: bool,
}

impl EmbeddingTable {
    pub fn new(weights: Tensor, trainable: bool) -> Result<Self> {
        if weights.ndim() != 2 {
            return Err(shape_err("EmbeddingTable", format!("{:?}", weights.shape())));
        }
        Ok(EmbeddingTable { weights, trainable })
    }

    /// Normal(0, 1/√d) rows; the padding row is zero.
    pub fn random(vocab_size: usize, dim: usize, trainable: bool, rng: &mut Rng) -> Self {
        let scale = 1.0 / (dim.max(1) as f64).sqrt();
        let mut data: Vec<f64> = (0..vocab_size * dim).map(|_| rng.normal() * scale).collect();
        let pad = dim.min(data.len());
        data[..pad].fill(0.0);
        EmbeddingTable {
            weights: Tensor::new(vec![vocab_size, dim], data).unwrap(),
            trainable,
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextProvenance {
    Lstm,
    PretrainedSum,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature {
    pub values: Vec<f64>,
    pub provenance: TextProvenance,
}

impl TextFeature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(&self.values)
    }
}

fn check_ids(tokens: &[usize], vocab_size: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("text encoder"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Index {
            what: "embedding row",
            index: bad,
            len: vocab_size,
        });
    }
    Ok(())
}

/// Sum of the embedding rows of all tokens; padding contributes nothing.
pub fn embed_sum(tokens: &[usize], table: &EmbeddingTable) -> Result<TextFeature> {
    check_ids(tokens, table.vocab_size())?;
    let mut values = vec![0.0; table.dim()];
    for &t in tokens.iter().filter(|&&t| t != PAD) {
        for (o, v) in values.iter_mut().zip(table.weights.row(t)) {
            *o += v;
        }
    }
    Ok(TextFeature {
        values,
        provenance: TextProvenance::PretrainedSum,
    })
}

/// `[lstm, pretrained]`.
pub fn concat_text(lstm_out: &TextFeature, pretrained: &TextFeature) -> TextFeature {
    let mut values = lstm_out.values.clone();
    values.extend_from_slice(&pretrained.values);
    TextFeature {
        values,
        provenance: TextProvenance::Concat,
    }
}

/// Weights of one LSTM layer. Gate blocks along the `4H` axis are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `[in × 4H]`
    pub w_x: Tensor,
    /// `[H × 4H]`
    pub w_h: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

pub const LSTM_LAYERS: usize = 2;

impl LstmParams {
    /// Uniform(-1/√H, 1/√H) weights and biases, forget-gate bias +1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let layers = (0..LSTM_LAYERS)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden };
                let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform_range(-k, k)).collect() };
                let w_x = Tensor::new(vec![in_dim, 4 * hidden], draw(in_dim * 4 * hidden)).unwrap();
                let w_h = Tensor::new(vec![hidden, 4 * hidden], draw(hidden * 4 * hidden)).unwrap();
                let mut bias = draw(4 * hidden);
                for b in &mut bias[hidden..2 * hidden] {
                    *b += 1.0;
                }
                LstmLayer {
                    w_x,
                    w_h,
                    bias: Tensor::vector(&bias),
                }
            })
            .collect();
        LstmParams { layers, hidden }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let layers = (0..LSTM_LAYERS)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden };
                LstmLayer {
                    w_x: Tensor::zeros(vec![in_dim, 4 * hidden]),
                    w_h: Tensor::zeros(vec![hidden, 4 * hidden]),
                    bias: Tensor::zeros(vec![4 * hidden]),
                }
            })
            .collect();
        LstmParams { layers, hidden }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w_x.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden;
        for (l, layer) in self.layers.iter().enumerate() {
            let in_dim = if l == 0 { self.input_dim() } else { h };
            if layer.w_x.shape() != [in_dim, 4 * h] || layer.w_h.shape() != [h, 4 * h] || layer.bias.shape() != [4 * h] {
                return Err(shape_err("LstmParams", format!("layer {l} inconsistent with H={h}")));
            }
        }
        Ok(())
    }

    /// Adds the weights to `store` as `{prefix}.{layer}.{w_x|w_h|bias}`.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> LstmHandles {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                [
                    store.insert(format!("{prefix}.{l}.w_x"), layer.w_x.clone()),
                    store.insert(format!("{prefix}.{l}.w_h"), layer.w_h.clone()),
                    store.insert(format!("{prefix}.{l}.bias"), layer.bias.clone()),
                ]
            })
            .collect();
        LstmHandles {
            layers,
            hidden: self.hidden,
        }
    }
}

/// Parameter ids of an LSTM registered in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmHandles {
    pub layers: Vec<[ParamId; 3]>,
    pub hidden: usize,
}

impl LstmHandles {
    pub fn lookup(store: &ParamStore, prefix: &str, hidden: usize) -> Option<Self> {
        let layers = (0..LSTM_LAYERS)
            .map(|l| {
                Some([
                    store.id(&format!("{prefix}.{l}.w_x"))?,
                    store.id(&format!("{prefix}.{l}.w_h"))?,
                    store.id(&format!("{prefix}.{l}.bias"))?,
                ])
            })
            .collect::<Option<Vec<_>>>()?;
        Some(LstmHandles { layers, hidden })
    }
}

/// Batched two-layer LSTM on a tape. Returns the last hidden state of the top
/// layer for each sequence, `[B × H]`.
///
/// Sequences may differ in length; finished rows keep their state through a
/// blend mask, so each row's result is exactly its own final state.
pub fn lstm_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    embedding: Var,
    seqs: &[Vec<usize>],
    lstm: &LstmHandles,
) -> Result<Var> {
    let vocab = tape.value(embedding).rows();
    for s in seqs {
        check_ids(s, vocab)?;
        if s.contains(&PAD) {
            return Err(Error::Data("padding id inside an encoded sequence".into()));
        }
    }
    if seqs.is_empty() {
        return Err(Error::Empty("lstm batch"));
    }
    let hdim = lstm.hidden;
    let batch = seqs.len();
    let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let ragged = seqs.iter().any(|s| s.len() != steps);

    let masks: Vec<Option<Var>> = (0..steps)
        .map(|t| {
            if !ragged || seqs.iter().all(|s| t < s.len()) {
                return None;
            }
            let mut m = vec![0.0; batch * hdim];
            for (r, s) in seqs.iter().enumerate() {
                if t < s.len() {
                    m[r * hdim..(r + 1) * hdim].fill(1.0);
                }
            }
            Some(tape.constant(Tensor::new(vec![batch, hdim], m).unwrap()))
        })
        .collect();

    let mut inputs: Vec<Var> = (0..steps)
        .map(|t| {
            let ids: Vec<usize> = seqs.iter().map(|s| s[t.min(s.len() - 1)]).collect();
            tape.gather(embedding, &ids)
        })
        .collect();

    for ids in &lstm.layers {
        let w_x = tape.param(store, ids[0]);
        let w_h = tape.param(store, ids[1]);
        let bias = tape.param(store, ids[2]);
        let zeros = tape.constant(Tensor::zeros(vec![batch, hdim]));
        let (mut h, mut c) = (zeros, zeros);
        let mut outputs = Vec::with_capacity(steps);
        for (t, &x) in inputs.iter().enumerate() {
            let zx = tape.matmul(x, w_x);
            let z = if t == 0 {
                zx
            } else {
                let zh = tape.matmul(h, w_h);
                tape.add(zx, zh)
            };
            let z = tape.add_row(z, bias);
            let i_pre = tape.slice(z, 0, hdim);
            let f_pre = tape.slice(z, hdim, 2 * hdim);
            let g_pre = tape.slice(z, 2 * hdim, 3 * hdim);
            let o_pre = tape.slice(z, 3 * hdim, 4 * hdim);
            let i = tape.sigmoid(i_pre);
            let f = tape.sigmoid(f_pre);
            let g = tape.tanh(g_pre);
            let o = tape.sigmoid(o_pre);
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, g);
            let c_new = tape.add(fc, ig);
            let tc = tape.tanh(c_new);
            let h_new = tape.mul(o, tc);
            match masks[t] {
                None => {
                    h = h_new;
                    c = c_new;
                }
                Some(m) => {
                    h = blend(tape, m, h_new, h);
                    c = blend(tape, m, c_new, c);
                }
            }
            outputs.push(h);
        }
        inputs = outputs;
    }
    Ok(*inputs.last().expect("at least one step"))
}

/// `old + mask ∘ (new - old)`
fn blend(tape: &mut Tape, mask: Var, new: Var, old: Var) -> Var {
    let d = tape.sub(new, old);
    let md = tape.mul(mask, d);
    tape.add(old, md)
}

fn lstm_tape(
    tokens: &[usize],
    table: &EmbeddingTable,
    params: &LstmParams,
) -> Result<(Tape, ParamStore, ParamId, LstmHandles, Var)> {
    params.validate()?;
    if table.dim() != params.input_dim() {
        return Err(shape_err(
            "lstm_forward",
            format!("embedding dim {} vs LSTM input {}", table.dim(), params.input_dim()),
        ));
    }
    check_ids(tokens, table.vocab_size())?;
    let mut store = ParamStore::new();
    let emb_id = store.insert("embedding", table.weights.clone());
    let handles = params.register(&mut store, "lstm");
    let mut tape = Tape::new();
    let emb = tape.param(&store, emb_id);
    let out = lstm_on_tape(&mut tape, &store, emb, &[tokens.to_vec()], &handles)?;
    tape.check_finite()?;
    Ok((tape, store, emb_id, handles, out))
}

/// Last hidden state of the top layer after reading `tokens`.
pub fn lstm_forward(tokens: &[usize], table: &EmbeddingTable, params: &LstmParams) -> Result<TextFeature> {
    let (tape, _, _, _, out) = lstm_tape(tokens, table, params)?;
    Ok(TextFeature {
        values: tape.value(out).data().to_vec(),
        provenance: TextProvenance::Lstm,
    })
}

/// Gradients of `⟨upstream, lstm_forward(tokens)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub layers: Vec<LstmLayer>,
    pub embedding: Tensor,
}

pub fn lstm_backward(
    tokens: &[usize],
    table: &EmbeddingTable,
    params: &LstmParams,
    upstream: &[f64],
) -> Result<LstmGrads> {
    let (tape, store, emb_id, handles, out) = lstm_tape(tokens, table, params)?;
    if upstream.len() != params.hidden {
        return Err(shape_err("lstm_backward", format!("upstream {} vs H={}", upstream.len(), params.hidden)));
    }
    let grads = tape.backward_from(out, Tensor::new(vec![1, params.hidden], upstream.to_vec())?)?;
    let get = |id: ParamId| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
    Ok(LstmGrads {
        layers: handles
            .layers
            .iter()
            .map(|ids| LstmLayer {
                w_x: get(ids[0]),
                w_h: get(ids[1]),
                bias: get(ids[2]),
            })
            .collect(),
        embedding: get(emb_id),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;

    #[test]
    fn tokenizer_rules() {
        let v = Vocab::build(["What color?"]);
        let ids = tokenize("What color?", &v).unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(v.token(ids[0]), Some("what"));
        assert_eq!(v.token(ids[1]), Some("color"));
        assert!(matches!(tokenize("", &v), Err(Error::Empty(_))));
        assert!(tokenize("  ?! ", &v).is_err());
        let v = Vocab::build(["A a A"]);
        let ids = tokenize("A a A", &v).unwrap();
        assert!(ids.iter().all(|&i| i == ids[0]));
        assert_eq!(tokenize("zebra", &v).unwrap(), vec![UNK]);
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocab::build(["how many dogs", "what color is the dog"]);
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        let bad = serde_json::json!({"<pad>": 0, "x": 2});
        assert!(Vocab::from_json(&bad).is_err());
    }

    fn small_table() -> EmbeddingTable {
        EmbeddingTable::new(
            Tensor::matrix(4, 2, vec![0.0, 0.0, 9.0, 9.0, 1.0, 2.0, -3.0, 0.5]).unwrap(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn embed_sum_cases() {
        let t = small_table();
        assert_eq!(embed_sum(&[2], &t).unwrap().values, vec![1.0, 2.0]);
        assert_eq!(embed_sum(&[2, 2], &t).unwrap().values, vec![2.0, 4.0]);
        assert_eq!(embed_sum(&[2, PAD, 3], &t).unwrap().values, vec![-2.0, 2.5]);
        assert!(embed_sum(&[], &t).is_err());
        assert!(matches!(embed_sum(&[4], &t), Err(Error::Index { .. })));
    }

    #[test]
    fn concat_text_order() {
        let a = TextFeature {
            values: vec![1.0, 2.0],
            provenance: TextProvenance::Lstm,
        };
        let b = TextFeature {
            values: vec![3.0],
            provenance: TextProvenance::PretrainedSum,
        };
        assert_eq!(concat_text(&a, &b).values, vec![1.0, 2.0, 3.0]);
        let empty = TextFeature {
            values: vec![],
            provenance: TextProvenance::PretrainedSum,
        };
        assert_eq!(concat_text(&a, &empty).values, a.values);
        let zero = TextFeature {
            values: vec![0.0],
            provenance: TextProvenance::Lstm,
        };
        let one = TextFeature {
            values: vec![1.0],
            provenance: TextProvenance::PretrainedSum,
        };
        assert_eq!(concat_text(&zero, &one).values, vec![0.0, 1.0]);
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let out = lstm_forward(&[2, 3, 2], &small_table(), &LstmParams::zeros(2, 3)).unwrap();
        assert_eq!(out.values, vec![0.0; 3]);
    }

    #[test]
    fn scalar_lstm_single_step_by_hand() {
        // d = H = 1. Layer 0 weights per gate (i, f, g, o).
        let table = EmbeddingTable::new(Tensor::matrix(3, 1, vec![0.0, 0.0, 0.7]).unwrap(), true).unwrap();
        let mut p = LstmParams::zeros(1, 1);
        p.layers[0].w_x = Tensor::matrix(1, 4, vec![0.5, -0.3, 1.2, 0.8]).unwrap();
        p.layers[0].bias = Tensor::vector(&[0.1, 0.2, -0.1, 0.05]);
        p.layers[1].w_x = Tensor::matrix(1, 4, vec![-0.4, 0.6, 0.9, 1.1]).unwrap();
        p.layers[1].bias = Tensor::vector(&[0.0, 0.3, 0.2, -0.2]);

        let s = |v: f64| sigmoid(&Tensor::vector(&[v])).item();
        let cell = |x: f64, w: [f64; 4], b: [f64; 4]| {
            let i = s(w[0] * x + b[0]);
            let g = (w[2] * x + b[2]).tanh();
            let o = s(w[3] * x + b[3]);
            let c = i * g; // c_prev = 0
            o * c.tanh()
        };
        let h1 = cell(0.7, [0.5, -0.3, 1.2, 0.8], [0.1, 0.2, -0.1, 0.05]);
        let h2 = cell(h1, [-0.4, 0.6, 0.9, 1.1], [0.0, 0.3, 0.2, -0.2]);
        let out = lstm_forward(&[2], &table, &p).unwrap();
        assert!((out.values[0] - h2).abs() < 1e-14, "{} vs {h2}", out.values[0]);
    }

    #[test]
    fn no_recurrence_gives_constant_state() {
        // with zero recurrent weights and zero forget gate the state depends
        // only on the current input
        let table = EmbeddingTable::random(5, 3, true, &mut Rng::new(1));
        let mut p = LstmParams::init(3, 4, &mut Rng::new(2));
        for layer in &mut p.layers {
            layer.w_h = Tensor::zeros(layer.w_h.shape().to_vec());
            for b in &mut layer.bias.data_mut()[4..8] {
                *b = -1e3;
            }
            let h = 4;
            for r in 0..layer.w_x.rows() {
                for c in h..2 * h {
                    layer.w_x.data_mut()[r * 4 * h + c] = 0.0;
                }
            }
        }
        let one = lstm_forward(&[3], &table, &p).unwrap();
        for len in 2..5 {
            let many = lstm_forward(&vec![3; len], &table, &p).unwrap();
            for (a, b) in one.values.iter().zip(&many.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_bounded_and_deterministic() {
        let table = EmbeddingTable::random(6, 4, true, &mut Rng::new(3));
        let p = LstmParams::init(4, 5, &mut Rng::new(4));
        let a = lstm_forward(&[2, 5, 4, 3], &table, &p).unwrap();
        let b = lstm_forward(&[2, 5, 4, 3], &table, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn ragged_batch_matches_individual_runs() {
        let table = EmbeddingTable::random(7, 3, true, &mut Rng::new(5));
        let p = LstmParams::init(3, 4, &mut Rng::new(6));
        let mut store = ParamStore::new();
        let emb_id = store.insert("embedding", table.weights().clone());
        let handles = p.register(&mut store, "lstm");
        let seqs = vec![vec![2, 3], vec![4, 5, 6, 2], vec![3]];
        let mut tape = Tape::new();
        let emb = tape.param(&store, emb_id);
        let out = lstm_on_tape(&mut tape, &store, emb, &seqs, &handles).unwrap();
        for (r, s) in seqs.iter().enumerate() {
            let single = lstm_forward(s, &table, &p).unwrap();
            let row = &tape.value(out).data()[r * 4..(r + 1) * 4];
            for (a, b) in row.iter().zip(&single.values) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pad_inside_sequence_rejected() {
        let table = EmbeddingTable::random(4, 2, true, &mut Rng::new(1));
        let p = LstmParams::init(2, 2, &mut Rng::new(1));
        assert!(lstm_forward(&[2, PAD, 3], &table, &p).is_err());
        assert!(lstm_forward(&[], &table, &p).is_err());
    }

    #[test]
    fn backward_zero_upstream_and_unused_rows() {
        let table = EmbeddingTable::random(6, 3, true, &mut Rng::new(8));
        let p = LstmParams::init(3, 4, &mut Rng::new(9));
        let g = lstm_backward(&[2, 3, 2], &table, &p, &[0.0; 4]).unwrap();
        assert!(g.embedding.data().iter().all(|&v| v == 0.0));
        assert!(g.layers.iter().all(|l| l.w_x.data().iter().all(|&v| v == 0.0)));

        let g = lstm_backward(&[2, 3, 2], &table, &p, &[1.0, -0.5, 0.25, 2.0]).unwrap();
        for unused in [0, 1, 4, 5] {
            assert!(g.embedding.row(unused).iter().all(|&v| v == 0.0));
        }
        assert!(g.embedding.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_has_forget_bias() {
        let p = LstmParams::init(3, 4, &mut Rng::new(0));
        let k = 0.5;
        for layer in &p.layers {
            let b = layer.bias.data();
            assert!(b[4..8].iter().all(|&v| v > 1.0 - k && v < 1.0 + k));
            assert!(b[..4].iter().all(|&v| v.abs() <= k));
        }
    }
}
