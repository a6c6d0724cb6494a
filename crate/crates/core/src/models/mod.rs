//! Model zoo: the concatenation baselines, QTA and QT variants, MCB-QTA and
//! the multi-task CATL-QTA-M, sharing one batched forward pass on a [`Tape`].

mod checkpoint;
mod spec;
mod train;

use std::sync::Arc;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use spec::{Architecture, GateGranularity, ModelDims, ModelSpec, PretrainedTable, TextVariant};
pub use train::{train, train_with, OptimizerKind, TrainConfig};

use crate::data::Dataset;
use crate::encoders::{lstm_on_tape, tokenize, EmbeddingTable, LstmHandles, LstmParams, Vocab, PAD};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{gate_on_tape, softplus, softplus_inverse_of_one, softplus_on_tape, QtaWeights, QuestionTypeSet};
use crate::numerics::{grad_check, softmax, streams, ParamId, ParamStore, Rng, Tape, Tensor, Var, CE_FLOOR};
use crate::par;
use crate::sketch::{mcb_on_tape, SketchParams};

/// A sample resolved against a model's vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub tokens: Vec<usize>,
    pub question_type: usize,
    pub answer: usize,
    /// Flattened features, one entry per source of the model spec.
    pub visual: Vec<Vec<f64>>,
}

/// How the QTA gate picks its column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Ground-truth question type (training, and inference for models without
    /// a type head).
    GroundTruth,
    /// Argmax of the type head where one exists.
    Predicted,
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub answer_logits: Var,
    pub type_logits: Option<Var>,
    /// The type column each row was gated with.
    pub gate_types: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub answer_probs: Vec<f64>,
    pub type_probs: Option<Vec<f64>>,
    pub gate_type: usize,
}

impl Prediction {
    pub fn answer(&self) -> usize {
        argmax(&self.answer_probs)
    }

    pub fn predicted_type(&self) -> Option<usize> {
        self.type_probs.as_deref().map(argmax)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Handles {
    word_embedding: Option<ParamId>,
    lstm: Option<LstmHandles>,
    qta: Option<ParamId>,
    type_embedding: Option<ParamId>,
    head: [ParamId; 4],
    type_head: Option<[ParamId; 2]>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    vocab: Vocab,
    types: QuestionTypeSet,
    answers: Vec<String>,
    params: ParamStore,
    frozen: Option<EmbeddingTable>,
    sketches: Option<(Arc<SketchParams>, Arc<SketchParams>)>,
    handles: Handles,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn uniform_tensor(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()).unwrap()
}

/// Sketch seeds derived from the model seed.
fn sketch_params(spec: &ModelSpec) -> Result<(Arc<SketchParams>, Arc<SketchParams>)> {
    let root = Rng::new(spec.seed);
    let img_seed = root.split(streams::SKETCH, 0).next_u64();
    let txt_seed = root.split(streams::SKETCH, 1).next_u64();
    Ok((
        Arc::new(SketchParams::new(spec.total_channels(), spec.dims.sketch_width, img_seed)?),
        Arc::new(SketchParams::new(spec.text_dim(), spec.dims.sketch_width, txt_seed)?),
    ))
}

fn frozen_table(spec: &ModelSpec, vocab_size: usize) -> Option<EmbeddingTable> {
    let table = spec.pretrained_table()?;
    let index = match table {
        PretrainedTable::Word2Vec => 0,
        PretrainedTable::Nmt => 1,
    };
    let mut rng = Rng::new(spec.seed).split(streams::FROZEN_TABLE, index);
    let mut weights = EmbeddingTable::random(vocab_size, spec.pretrained_dim(), false, &mut rng)
        .weights()
        .clone();
    // Pretrained vectors ship as f32; keeping them f32-exact makes checkpoints lossless.
    for v in weights.data_mut() {
        *v = *v as f32 as f64;
    }
    Some(EmbeddingTable::new(weights, false).expect("2-d table"))
}

/// Builds a freshly initialized model. Same spec and vocabularies give
/// bit-identical parameters.
pub fn build_model(spec: &ModelSpec, vocab: &Vocab, types: &QuestionTypeSet, answers: &[String]) -> Result<Model> {
    spec.validate()?;
    if answers.is_empty() {
        return Err(Error::Config("answer vocabulary is empty".into()));
    }
    let arch = spec.architecture;
    let d = &spec.dims;
    let root = Rng::new(spec.seed);
    let init = |k: u64| root.split(streams::INIT, k);
    let mut params = ParamStore::new();

    let (word_embedding, lstm) = if arch.uses_lstm() {
        let table = EmbeddingTable::random(vocab.len(), d.word_dim, true, &mut init(0));
        let emb = params.insert("embedding.word", table.weights().clone());
        let lstm = LstmParams::init(d.word_dim, d.lstm_hidden, &mut init(1));
        (Some(emb), Some(lstm.register(&mut params, "lstm")))
    } else {
        (None, None)
    };

    let qta = arch.has_qta().then(|| {
        let start = if spec.nonneg_gate {
            softplus_inverse_of_one()
        } else {
            1.0
        };
        params.insert("qta.w", Tensor::filled(vec![spec.gate_rows(), types.len()], start))
    });

    let type_embedding = arch.has_type_embedding().then(|| {
        let e = d.type_embedding;
        let mut rng = init(2);
        let scale = 1.0 / (e.max(1) as f64).sqrt();
        let data = (0..types.len() * e).map(|_| rng.normal() * scale).collect();
        params.insert("qt.type_embedding", Tensor::new(vec![types.len(), e], data).unwrap())
    });

    let input = spec.head_input_dim();
    let mut rng = init(3);
    let head = [
        params.insert(
            "head.w1",
            uniform_tensor(vec![input, d.mlp_hidden], 1.0 / (input as f64).sqrt(), &mut rng),
        ),
        params.insert("head.b1", Tensor::zeros(vec![d.mlp_hidden])),
        params.insert(
            "head.w2",
            uniform_tensor(vec![d.mlp_hidden, answers.len()], 1.0 / (d.mlp_hidden as f64).sqrt(), &mut rng),
        ),
        params.insert("head.b2", Tensor::zeros(vec![answers.len()])),
    ];

    let type_head = arch.has_type_head().then(|| {
        let mut rng = init(4);
        let h = d.lstm_hidden;
        [
            params.insert(
                "type_head.w",
                uniform_tensor(vec![h, types.len()], 1.0 / (h as f64).sqrt(), &mut rng),
            ),
            params.insert("type_head.b", Tensor::zeros(vec![types.len()])),
        ]
    });

    let sketches = if arch.uses_mcb() {
        Some(sketch_params(spec)?)
    } else {
        None
    };

    Ok(Model {
        spec: spec.clone(),
        vocab: vocab.clone(),
        types: types.clone(),
        answers: answers.to_vec(),
        params,
        frozen: frozen_table(spec, vocab.len()),
        sketches,
        handles: Handles {
            word_embedding,
            lstm,
            qta,
            type_embedding,
            head,
            type_head,
        },
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn types(&self) -> &QuestionTypeSet {
        &self.types
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn frozen_table(&self) -> Option<&EmbeddingTable> {
        self.frozen.as_ref()
    }

    /// Trainable scalar count.
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn has_type_head(&self) -> bool {
        self.handles.type_head.is_some()
    }

    pub fn has_lstm(&self) -> bool {
        self.handles.lstm.is_some()
    }

    pub fn has_qta(&self) -> bool {
        self.handles.qta.is_some()
    }

    /// Sets every trainable parameter to zero.
    pub fn zero_params(&mut self) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_params(&mut self, other: &Model) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            if let Some(v) = other.params.by_name(&name) {
                if v.shape() == self.params.get(id).shape() {
                    *self.params.get_mut(id) = v.clone();
                }
            }
        }
    }

    /// Effective QTA matrix (after softplus for the non-negative gate).
    pub fn qta_weights(&self) -> Option<QtaWeights> {
        let w = self.params.get(self.handles.qta?).clone();
        let w = if self.spec.nonneg_gate { w.map(softplus) } else { w };
        QtaWeights::from_tensor(w).ok()
    }

    /// Per-element gate of the flattened visual feature for type `t`.
    pub fn gate_column(&self, t: usize) -> Option<Vec<f64>> {
        let w = self.qta_weights()?;
        let col = w.column(t);
        let spatial = self.spec.gate_spatial();
        Some((0..self.spec.visual_dim()).map(|i| col[i / spatial]).collect())
    }

    /// `(source name, start, end)` of each block of the flattened visual
    /// feature.
    pub fn visual_blocks(&self) -> Vec<(String, usize, usize)> {
        let mut start = 0;
        self.spec
            .visual_sources()
            .into_iter()
            .map(|i| {
                let s = &self.spec.sources[i];
                let block = (s.name.clone(), start, start + s.dim());
                start += s.dim();
                block
            })
            .collect()
    }

    /// Resolves a dataset split against this model's vocabularies.
    pub fn encode(&self, ds: &Dataset) -> Result<Vec<EncodedSample>> {
        ds.samples
            .iter()
            .map(|s| {
                let tokens = tokenize(&s.question, &self.vocab)?;
                let question_type = self
                    .types
                    .index_of(&s.question_type)
                    .ok_or_else(|| Error::Data(format!("sample {}: unknown question type {:?}", s.id, s.question_type)))?;
                let answer = self
                    .answers
                    .iter()
                    .position(|a| *a == s.answer)
                    .ok_or_else(|| Error::Data(format!("sample {}: unknown answer {:?}", s.id, s.answer)))?;
                let visual = self
                    .spec
                    .sources
                    .iter()
                    .map(|src| {
                        let row = ds.feature(s, &src.name)?;
                        if row.len() != src.dim() {
                            return Err(shape_err(
                                "encode",
                                format!("sample {} source {}: {} values, spec expects {}", s.id, src.name, row.len(), src.dim()),
                            ));
                        }
                        Ok(row.to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncodedSample {
                    tokens,
                    question_type,
                    answer,
                    visual,
                })
            })
            .collect()
    }

    fn check_batch(&self, batch: &[&EncodedSample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for s in batch {
            if s.visual.len() != self.spec.sources.len() {
                return Err(shape_err("forward", format!("{} sources, spec has {}", s.visual.len(), self.spec.sources.len())));
            }
            for (v, src) in s.visual.iter().zip(&self.spec.sources) {
                if v.len() != src.dim() {
                    return Err(shape_err("forward", format!("source {} has {} values, expected {}", src.name, v.len(), src.dim())));
                }
            }
            if s.question_type >= self.types.len() {
                return Err(Error::Index {
                    what: "question type",
                    index: s.question_type,
                    len: self.types.len(),
                });
            }
            if s.answer >= self.answers.len() {
                return Err(Error::Index {
                    what: "answer",
                    index: s.answer,
                    len: self.answers.len(),
                });
            }
        }
        Ok(())
    }

    /// Batched forward pass recorded on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, batch: &[&EncodedSample], mode: GateMode) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let spec = &self.spec;
        let arch = spec.architecture;
        let rows = batch.len();
        let p = &self.params;

        let lstm_out = match (&self.handles.lstm, self.handles.word_embedding) {
            (Some(lstm), Some(emb_id)) => {
                let emb = tape.param(p, emb_id);
                let seqs: Vec<Vec<usize>> = batch.iter().map(|s| s.tokens.clone()).collect();
                Some(lstm_on_tape(tape, p, emb, &seqs, lstm)?)
            }
            _ => None,
        };

        let pretrained = match &self.frozen {
            Some(table) => {
                let groups: Vec<Vec<usize>> = batch
                    .iter()
                    .map(|s| s.tokens.iter().copied().filter(|&t| t != PAD).collect())
                    .collect();
                if let Some(bad) = groups.iter().flatten().find(|&&t| t >= table.vocab_size()) {
                    return Err(Error::Index {
                        what: "pretrained row",
                        index: *bad,
                        len: table.vocab_size(),
                    });
                }
                let c = tape.constant(table.weights().clone());
                Some(tape.sum_rows(c, &groups))
            }
            None => None,
        };

        let type_logits = match (self.handles.type_head, lstm_out) {
            (Some([w, b]), Some(h)) => {
                let w = tape.param(p, w);
                let b = tape.param(p, b);
                Some(tape.affine(h, w, b))
            }
            _ => None,
        };

        let truth: Vec<usize> = batch.iter().map(|s| s.question_type).collect();
        let gate_types = match (mode, type_logits) {
            (GateMode::Predicted, Some(tl)) => {
                let v = tape.value(tl);
                (0..rows).map(|r| argmax(v.row(r))).collect()
            }
            _ => truth.clone(),
        };

        let sources = spec.visual_sources();
        let width = spec.visual_dim();
        let mut vis_data = Vec::with_capacity(rows * width);
        for s in batch {
            for &i in &sources {
                vis_data.extend_from_slice(&s.visual[i]);
            }
        }
        let mut visual = tape.constant(Tensor::new(vec![rows, width], vis_data)?);

        if let Some(qta) = self.handles.qta {
            let raw = tape.param(p, qta);
            let w = if spec.nonneg_gate {
                softplus_on_tape(tape, raw)
            } else {
                raw
            };
            visual = gate_on_tape(tape, visual, w, &gate_types, spec.gate_spatial())?;
        }

        let head_in = if arch.uses_mcb() {
            let (p_img, p_txt) = self.sketches.as_ref().expect("MCB model has sketches");
            let text = lstm_out.expect("MCB-QTA uses the LSTM");
            mcb_on_tape(tape, visual, text, p_img, p_txt, spec.spatial())?
        } else {
            let mut parts = vec![visual];
            parts.extend(lstm_out);
            parts.extend(pretrained);
            if let Some(te) = self.handles.type_embedding {
                let table = tape.param(p, te);
                parts.push(tape.gather(table, &truth));
            }
            tape.concat(&parts)
        };

        let [w1, b1, w2, b2] = self.handles.head.map(|id| tape.param(p, id));
        let hidden = tape.affine(head_in, w1, b1);
        let hidden = tape.relu(hidden);
        let answer_logits = tape.affine(hidden, w2, b2);

        Ok(ForwardOutput {
            answer_logits,
            type_logits,
            gate_types,
        })
    }

    /// Training objective on a batch: answer cross-entropy, mixed with the
    /// type cross-entropy as `(1-λ)·answer + λ·type` for the multi-task model.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &[&EncodedSample], lambda: f64) -> Result<Var> {
        let out = self.forward_on_tape(tape, batch, GateMode::GroundTruth)?;
        let answers: Vec<usize> = batch.iter().map(|s| s.answer).collect();
        let ce_answer = tape.softmax_xent(out.answer_logits, &answers);
        let loss = match out.type_logits {
            Some(tl) => {
                let types: Vec<usize> = batch.iter().map(|s| s.question_type).collect();
                let ce_type = tape.softmax_xent(tl, &types);
                let a = tape.scale(ce_answer, 1.0 - lambda);
                let t = tape.scale(ce_type, lambda);
                tape.add(a, t)
            }
            None => ce_answer,
        };
        tape.check_finite()?;
        Ok(loss)
    }

    /// Loss and flattened parameter gradients on one batch.
    pub fn loss_and_grads(&self, batch: &[&EncodedSample], lambda: f64) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, batch, lambda)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), self.params.flatten_grads(&grads)))
    }

    /// Inference on a batch of samples.
    pub fn forward_batch(&self, batch: &[&EncodedSample], mode: GateMode) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, batch, mode)?;
        tape.check_finite()?;
        let answer_probs = softmax(tape.value(out.answer_logits));
        let type_probs = out.type_logits.map(|t| softmax(tape.value(t)));
        Ok((0..batch.len())
            .map(|r| Prediction {
                answer_probs: answer_probs.row(r).to_vec(),
                type_probs: type_probs.as_ref().map(|t| t.row(r).to_vec()),
                gate_type: out.gate_types[r],
            })
            .collect())
    }

    /// Answer (and type) distribution of one sample, in inference mode.
    pub fn forward(&self, sample: &EncodedSample) -> Result<Prediction> {
        Ok(self.forward_batch(&[sample], GateMode::Predicted)?.remove(0))
    }

    /// Inference over many samples, evaluated in fixed-size chunks (in
    /// parallel when enabled). Rows never interact, so the result does not
    /// depend on chunking.
    pub fn predict(&self, samples: &[EncodedSample], mode: GateMode) -> Result<Vec<Prediction>> {
        const CHUNK: usize = 64;
        let chunks: Vec<&[EncodedSample]> = samples.chunks(CHUNK).collect();
        let results = par::map_slice(&chunks, |chunk| {
            let refs: Vec<&EncodedSample> = chunk.iter().collect();
            self.forward_batch(&refs, mode)
        });
        let mut out = Vec::with_capacity(samples.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Full-model gradient check on one batch.
    pub fn grad_check(&self, batch: &[&EncodedSample], lambda: f64, eps: f64) -> Result<f64> {
        let mut probe = self.clone();
        let start = self.params.flatten();
        grad_check(
            |flat| {
                probe.params.assign_flat(flat)?;
                probe.loss_and_grads(batch, lambda)
            },
            &start,
            eps,
        )
    }
}

/// Question type chosen by the multi-task model's type head: the argmax of
/// its distribution, ties to the lowest index.
pub fn predict_type(model: &Model, sample: &EncodedSample) -> Result<usize> {
    if !model.has_type_head() {
        return Err(Error::Config(format!(
            "{} has no question-type head",
            model.spec.architecture.name()
        )));
    }
    let pred = model.forward(sample)?;
    Ok(pred.predicted_type().expect("type head present"))
}

/// Cross-entropy of probability vectors, `-ln max(p[target], 1e-12)`, mixed
/// as `(1-λ)·answer + λ·type` when a type distribution is given.
pub fn loss(pred: &[f64], target: usize, type_part: Option<(&[f64], usize)>, lambda: f64) -> Result<f64> {
    let ce = |p: &[f64], t: usize| -> Result<f64> {
        let v = *p.get(t).ok_or(Error::Index {
            what: "loss target",
            index: t,
            len: p.len(),
        })?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinite("loss input".into()));
        }
        Ok(-v.max(CE_FLOOR).ln())
    };
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let answer = ce(pred, target)?;
    match type_part {
        None => Ok(answer),
        Some((tp, tt)) => Ok((1.0 - lambda) * answer + lambda * ce(tp, tt)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn loss_examples() {
        let k = 7;
        let uniform = vec![1.0 / k as f64; k];
        assert!((loss(&uniform, 3, None, 0.2).unwrap() - (k as f64).ln()).abs() < 1e-12);
        assert!(loss(&[0.0, 1.0], 1, None, 0.0).unwrap() <= 1e-9);
        let clamped = loss(&[1.0, 0.0], 1, None, 0.0).unwrap();
        assert!((clamped + CE_FLOOR.ln()).abs() < 1e-9);
        let a = loss(&[0.3, 0.7], 0, None, 0.0).unwrap();
        assert_eq!(loss(&[0.3, 0.7], 0, Some((&[0.9, 0.1], 1)), 0.0).unwrap(), a);
        let mixed = loss(&[0.3, 0.7], 0, Some((&[0.9, 0.1], 1)), 0.25).unwrap();
        assert!((mixed - (0.75 * 0.3f64.ln().abs() + 0.25 * 0.1f64.ln().abs())).abs() < 1e-12);
        assert!(loss(&[0.5, 0.5], 2, None, 0.0).is_err());
        assert!(loss(&[0.5, 0.5], 0, None, 1.5).is_err());
    }
}
