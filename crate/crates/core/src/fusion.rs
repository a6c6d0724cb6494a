//! Question-type-guided attention (QTA) and the fusion operators around it.
//!
//! QTA reweights a concatenated visual feature `F ∈ R^M` elementwise by the
//! column of a learned `M×N` matrix selected by the one-hot question type:
//! `F ∘ W·q`. There is no bias term. The QT baseline instead appends a learned
//! type embedding to the features without gating.

use serde::{Deserialize, Serialize};

use crate::encoders::TextFeature;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Function, Tape, Tensor, Var};
use crate::sketch::{mcb_fuse, SketchParams};

/// The twelve TDIUC question categories.
pub const TDIUC_TYPES: [&str; 12] = [
    "Other Attributes",
    "Sentiment Understanding",
    "Sports Recognition",
    "Position Reasoning",
    "Object Utilities/Affordances",
    "Activity Recognition",
    "Scene Classification",
    "Color",
    "Object Recognition",
    "Object Presence",
    "Counting",
    "Absurd",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct QuestionTypeSet {
    names: Vec<String>,
}

impl QuestionTypeSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!("need at least 2 question types, got {}", names.len())));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate question type {n:?}")));
            }
        }
        Ok(QuestionTypeSet { names })
    }

    pub fn tdiuc() -> Self {
        Self::new(TDIUC_TYPES.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for QuestionTypeSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<QuestionTypeSet> for Vec<String> {
    fn from(s: QuestionTypeSet) -> Self {
        s.names
    }
}

/// Gating matrix `W ∈ R^{M×N}`; column `j` is the profile of type `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct QtaWeights {
    w: Tensor,
}

impl QtaWeights {
    /// All-ones start: gating begins as the identity.
    pub fn ones(m: usize, n: usize) -> Self {
        QtaWeights {
            w: Tensor::ones(vec![m, n]),
        }
    }

    pub fn from_tensor(w: Tensor) -> Result<Self> {
        if w.ndim() != 2 {
            return Err(shape_err("QtaWeights", format!("{:?}", w.shape())));
        }
        let w = w.ensure_finite("QtaWeights")?;
        Ok(QtaWeights { w })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.w
    }

    pub fn rows(&self) -> usize {
        self.w.rows()
    }

    pub fn num_types(&self) -> usize {
        self.w.cols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.w.data()[i * self.num_types() + j]).collect()
    }

    fn check_type(&self, q_type: usize) -> Result<()> {
        if q_type >= self.num_types() {
            return Err(Error::Index {
                what: "question type",
                index: q_type,
                len: self.num_types(),
            });
        }
        Ok(())
    }
}

/// Learned question-type embedding `[N×E]` used by the QT baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeEmbedding {
    table: Tensor,
}

impl TypeEmbedding {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.ndim() != 2 {
            return Err(shape_err("TypeEmbedding", format!("{:?}", table.shape())));
        }
        Ok(TypeEmbedding { table })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

/// Concatenated visual feature with the `(start, end)` span of each source.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualConcat {
    pub values: Tensor,
    pub blocks: Vec<(usize, usize)>,
}

/// `F = [F_1, …, F_k]`, each source flattened, in the given order.
pub fn concat_visual(sources: &[Tensor]) -> VisualConcat {
    let mut values = Vec::new();
    let mut blocks = Vec::with_capacity(sources.len());
    for s in sources {
        let start = values.len();
        values.extend_from_slice(s.data());
        blocks.push((start, values.len()));
    }
    VisualConcat {
        values: Tensor::vector(&values),
        blocks,
    }
}

/// `output[i] = F[i] · W[i, q_type]`.
pub fn qta_gate(f: &Tensor, q_type: usize, w: &QtaWeights) -> Result<Tensor> {
    w.check_type(q_type)?;
    if f.len() != w.rows() {
        return Err(shape_err("qta_gate", format!("feature length {} vs {} weight rows", f.len(), w.rows())));
    }
    let col = w.column(q_type);
    let data = f.data().iter().zip(&col).map(|(a, b)| a * b).collect();
    Tensor::new(f.shape().to_vec(), data)?.ensure_finite("qta_gate")
}

/// Channel-wise gating of a `[M_c×H×W]` map: every spatial position of
/// channel `c` is scaled by `W[c, q_type]`.
pub fn qta_gate_spatial(image: &Tensor, q_type: usize, w: &QtaWeights) -> Result<Tensor> {
    w.check_type(q_type)?;
    if image.ndim() != 3 || image.shape()[0] != w.rows() {
        return Err(shape_err(
            "qta_gate_spatial",
            format!("image {:?} vs {} weight rows", image.shape(), w.rows()),
        ));
    }
    let spatial = image.shape()[1] * image.shape()[2];
    let col = w.column(q_type);
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * col[i / spatial.max(1)])
        .collect();
    Tensor::new(image.shape().to_vec(), data)?.ensure_finite("qta_gate_spatial")
}

/// `[F, emb[q_type]]`.
pub fn qt_concat(f: &Tensor, q_type: usize, emb: &TypeEmbedding) -> Result<Tensor> {
    if q_type >= emb.table.rows() {
        return Err(Error::Index {
            what: "question type",
            index: q_type,
            len: emb.table.rows(),
        });
    }
    let mut data = f.data().to_vec();
    data.extend_from_slice(emb.table.row(q_type));
    Ok(Tensor::vector(&data))
}

/// Channel-concatenates two spatial maps, gates them with QTA and pools the
/// result with the text feature through MCB. Output `[b×H×W]`.
pub fn mcb_qta_fuse(
    resnet_like: &Tensor,
    rcnn_like: &Tensor,
    text: &TextFeature,
    q_type: usize,
    w: &QtaWeights,
    p_img: &SketchParams,
    p_txt: &SketchParams,
) -> Result<Tensor> {
    if resnet_like.ndim() != 3 || rcnn_like.ndim() != 3 || resnet_like.shape()[1..] != rcnn_like.shape()[1..] {
        return Err(shape_err(
            "mcb_qta_fuse",
            format!("spatial extents {:?} vs {:?}", resnet_like.shape(), rcnn_like.shape()),
        ));
    }
    let (c1, h, wd) = (resnet_like.shape()[0], resnet_like.shape()[1], resnet_like.shape()[2]);
    let c2 = rcnn_like.shape()[0];
    let mut data = resnet_like.data().to_vec();
    data.extend_from_slice(rcnn_like.data());
    let stacked = Tensor::new(vec![c1 + c2, h, wd], data)?;
    let gated = qta_gate_spatial(&stacked, q_type, w)?;
    mcb_fuse(&gated, &text.to_tensor(), p_img, p_txt)
}

/// Number of trainable scalars QTA adds: `M·N`.
pub fn qta_param_count(m: usize, n_types: usize) -> usize {
    m * n_types
}

/// Number of trainable scalars the QT baseline adds in front of a first layer
/// with `hidden` units: the `N×E` table plus `E·hidden` extra input weights.
pub fn qt_param_count(n_types: usize, e: usize, hidden: usize) -> usize {
    n_types * e + e * hidden
}

/// Type-embedding width that makes the QT baseline's extra parameters match
/// QTA's `M·N` as closely as possible.
pub fn comparable_type_embedding_dim(m: usize, n_types: usize, hidden: usize) -> usize {
    let e = (m * n_types) as f64 / (n_types + hidden) as f64;
    (e.round() as usize).max(1)
}

struct GateFunction {
    types: Vec<usize>,
    spatial: usize,
}

impl Function for GateFunction {
    fn name(&self) -> &'static str {
        "qta_gate"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let cols = x.cols();
        let n = w.cols();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        for (r, &t) in self.types.iter().enumerate() {
            for i in 0..cols {
                let ch = i / self.spatial;
                let g = grad.data()[r * cols + i];
                gx[r * cols + i] = g * w.data()[ch * n + t];
                gw[ch * n + t] += g * x.data()[r * cols + i];
            }
        }
        vec![
            Some(Tensor::new(x.shape().to_vec(), gx).unwrap()),
            Some(Tensor::new(w.shape().to_vec(), gw).unwrap()),
        ]
    }
}

/// Batched QTA on a tape: `x` is `[B × M·S]`, `w` is `[M × N]`, one type per
/// row. `spatial = 1` gives elementwise gating of a flat vector.
pub fn gate_on_tape(tape: &mut Tape, x: Var, w: Var, types: &[usize], spatial: usize) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(w));
    if xv.ndim() != 2 || wv.ndim() != 2 || xv.rows() != types.len() || xv.cols() != wv.rows() * spatial {
        return Err(shape_err(
            "gate_on_tape",
            format!("x {:?}, w {:?}, {} types, spatial {spatial}", xv.shape(), wv.shape(), types.len()),
        ));
    }
    let n = wv.cols();
    if let Some(&bad) = types.iter().find(|&&t| t >= n) {
        return Err(Error::Index {
            what: "question type",
            index: bad,
            len: n,
        });
    }
    let cols = xv.cols();
    let mut out = vec![0.0; xv.len()];
    for (r, &t) in types.iter().enumerate() {
        for i in 0..cols {
            out[r * cols + i] = xv.data()[r * cols + i] * wv.data()[(i / spatial) * n + t];
        }
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    Ok(tape.custom(
        &[x, w],
        value,
        Box::new(GateFunction {
            types: types.to_vec(),
            spatial,
        }),
    ))
}

struct Softplus;

impl Function for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| g / (1.0 + (-v).exp()))
            .collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), d).unwrap())]
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Raw value whose softplus is 1, the identity start of a non-negative gate.
pub(crate) fn softplus_inverse_of_one() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// `ln(1 + e^x)` elementwise on a tape.
pub fn softplus_on_tape(tape: &mut Tape, x: Var) -> Var {
    let value = tape.value(x).map(softplus);
    tape.custom(&[x], value, Box::new(Softplus))
}
