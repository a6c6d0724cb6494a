use serde::{Deserialize, Serialize};

use crate::data::{SourceInfo, SOURCE_A, SOURCE_B};
use crate::error::{Error, Result};
use crate::sketch::DEFAULT_SKETCH_WIDTH;

/// The named architectures of the model zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// One visual source + pretrained text.
    #[serde(rename = "CAT1")]
    Cat1,
    /// One visual source + LSTM text.
    #[serde(rename = "CAT1L")]
    Cat1L,
    /// Both visual sources + LSTM text.
    #[serde(rename = "CATL")]
    CatL,
    /// Both visual sources + pretrained text.
    #[serde(rename = "CAT2")]
    Cat2,
    /// QTA-gated visual features + LSTM text.
    #[serde(rename = "CATL-QTA")]
    CatLQta,
    /// Both visual sources + pretrained text + type embedding.
    #[serde(rename = "CAT-QT")]
    CatQt,
    /// Both visual sources + LSTM text + type embedding.
    #[serde(rename = "CATL-QT")]
    CatLQt,
    /// QTA-gated spatial features pooled with LSTM text by MCB.
    #[serde(rename = "MCB-QTA")]
    McbQta,
    /// CATL-QTA with a question-type head feeding the gate at inference.
    #[serde(rename = "CATL-QTA-M")]
    CatLQtaM,
}

impl Architecture {
    pub const ALL: [Architecture; 9] = [
        Architecture::Cat1,
        Architecture::Cat1L,
        Architecture::CatL,
        Architecture::Cat2,
        Architecture::CatLQta,
        Architecture::CatQt,
        Architecture::CatLQt,
        Architecture::McbQta,
        Architecture::CatLQtaM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Cat1 => "CAT1",
            Architecture::Cat1L => "CAT1L",
            Architecture::CatL => "CATL",
            Architecture::Cat2 => "CAT2",
            Architecture::CatLQta => "CATL-QTA",
            Architecture::CatQt => "CAT-QT",
            Architecture::CatLQt => "CATL-QT",
            Architecture::McbQta => "MCB-QTA",
            Architecture::CatLQtaM => "CATL-QTA-M",
        }
    }

    pub fn uses_lstm(self) -> bool {
        !matches!(self, Architecture::Cat1 | Architecture::Cat2 | Architecture::CatQt)
    }

    pub fn single_source(self) -> bool {
        matches!(self, Architecture::Cat1 | Architecture::Cat1L)
    }

    pub fn has_qta(self) -> bool {
        matches!(self, Architecture::CatLQta | Architecture::McbQta | Architecture::CatLQtaM)
    }

    pub fn has_type_embedding(self) -> bool {
        matches!(self, Architecture::CatQt | Architecture::CatLQt)
    }

    pub fn has_type_head(self) -> bool {
        self == Architecture::CatLQtaM
    }

    pub fn uses_mcb(self) -> bool {
        self == Architecture::McbQta
    }
}

/// Extra text channel appended to the LSTM output (`+N`, `+W` variants). For
/// the pretrained-only architectures it selects which frozen table is used,
/// with `plain` meaning the Word2Vec stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TextVariant {
    #[default]
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "N", alias = "+N")]
    Nmt,
    #[serde(rename = "W", alias = "+W")]
    Word2Vec,
}

/// Which frozen pretrained stand-in table a model reads, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainedTable {
    Word2Vec,
    Nmt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateGranularity {
    /// One weight per element of the flattened concatenated feature.
    #[default]
    Element,
    /// One weight per channel, shared across spatial positions.
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Trainable word embedding feeding the LSTM.
    pub word_dim: usize,
    pub lstm_hidden: usize,
    /// Frozen Word2Vec stand-in width.
    pub w2v_dim: usize,
    /// Frozen NMT-encoder stand-in width.
    pub nmt_dim: usize,
    pub mlp_hidden: usize,
    pub sketch_width: usize,
    pub type_embedding: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            word_dim: 32,
            lstm_hidden: 64,
            w2v_dim: 32,
            nmt_dim: 32,
            mlp_hidden: 128,
            sketch_width: DEFAULT_SKETCH_WIDTH,
            type_embedding: 1024,
        }
    }
}

impl ModelDims {
    /// Full-size settings: 300-d word vectors, 1024-unit LSTM, 1024-d NMT
    /// encoder, 8192 hidden units, sketch width 8000.
    pub fn full_scale() -> Self {
        ModelDims {
            word_dim: 300,
            lstm_hidden: 1024,
            w2v_dim: 300,
            nmt_dim: 1024,
            mlp_hidden: 8192,
            sketch_width: DEFAULT_SKETCH_WIDTH,
            type_embedding: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub text_variant: TextVariant,
    pub dims: ModelDims,
    /// Visual sources in concatenation order.
    pub sources: Vec<SourceInfo>,
    /// Source used by the single-source architectures.
    pub single_source: usize,
    pub gate_granularity: GateGranularity,
    /// Softplus-reparameterized non-negative gate.
    pub nonneg_gate: bool,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            architecture: Architecture::CatLQta,
            text_variant: TextVariant::Plain,
            dims: ModelDims::default(),
            sources: vec![
                SourceInfo {
                    name: SOURCE_A.into(),
                    shape: [32, 1, 1],
                },
                SourceInfo {
                    name: SOURCE_B.into(),
                    shape: [32, 1, 1],
                },
            ],
            single_source: 0,
            gate_granularity: GateGranularity::Element,
            nonneg_gate: false,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        ModelSpec {
            architecture,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture;
        if self.sources.is_empty() {
            return Err(Error::Config("model needs at least one visual source".into()));
        }
        if arch.single_source() && self.single_source >= self.sources.len() {
            return Err(Error::Config(format!("single_source {} out of range", self.single_source)));
        }
        if !arch.single_source() && self.sources.len() < 2 {
            return Err(Error::Config(format!("{} concatenates two or more sources", arch.name())));
        }
        if self.text_variant != TextVariant::Plain && arch == Architecture::McbQta {
            return Err(Error::Config("MCB-QTA has no +N/+W variant".into()));
        }
        let d = &self.dims;
        if arch.uses_lstm() && (d.word_dim == 0 || d.lstm_hidden == 0) {
            return Err(Error::Config("LSTM dims must be positive".into()));
        }
        if d.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        if arch.uses_mcb() && d.sketch_width == 0 {
            return Err(Error::Config("sketch_width must be positive".into()));
        }
        if self.sources.iter().any(|s| s.dim() == 0) {
            return Err(Error::Config("source shapes must be positive".into()));
        }
        let needs_shared_spatial = arch.uses_mcb() || (arch.has_qta() && self.gate_granularity == GateGranularity::Channel);
        if needs_shared_spatial {
            let hw = self.sources[0].shape[1..].to_vec();
            if self.sources.iter().any(|s| s.shape[1..] != hw[..]) {
                return Err(Error::Config("channel-wise gating needs equal spatial extents across sources".into()));
            }
        }
        Ok(())
    }

    pub fn pretrained_table(&self) -> Option<PretrainedTable> {
        match (self.architecture.uses_lstm(), self.text_variant) {
            (false, TextVariant::Plain | TextVariant::Word2Vec) => Some(PretrainedTable::Word2Vec),
            (false, TextVariant::Nmt) => Some(PretrainedTable::Nmt),
            (true, TextVariant::Plain) => None,
            (true, TextVariant::Nmt) => Some(PretrainedTable::Nmt),
            (true, TextVariant::Word2Vec) => Some(PretrainedTable::Word2Vec),
        }
    }

    pub fn pretrained_dim(&self) -> usize {
        match self.pretrained_table() {
            None => 0,
            Some(PretrainedTable::Word2Vec) => self.dims.w2v_dim,
            Some(PretrainedTable::Nmt) => self.dims.nmt_dim,
        }
    }

    /// Spatial positions per channel (shared extent of the sources).
    pub fn spatial(&self) -> usize {
        self.sources[0].shape[1] * self.sources[0].shape[2]
    }

    /// Indices of the sources the visual branch reads.
    pub fn visual_sources(&self) -> Vec<usize> {
        if self.architecture.single_source() {
            vec![self.single_source]
        } else {
            (0..self.sources.len()).collect()
        }
    }

    /// Length of the concatenated, flattened visual feature.
    pub fn visual_dim(&self) -> usize {
        self.visual_sources().iter().map(|&i| self.sources[i].dim()).sum()
    }

    pub fn total_channels(&self) -> usize {
        self.visual_sources().iter().map(|&i| self.sources[i].shape[0]).sum()
    }

    /// Rows of the QTA matrix.
    pub fn gate_rows(&self) -> usize {
        if self.architecture.uses_mcb() || self.gate_granularity == GateGranularity::Channel {
            self.total_channels()
        } else {
            self.visual_dim()
        }
    }

    /// Spatial positions that share one gate weight.
    pub fn gate_spatial(&self) -> usize {
        if self.gate_rows() == self.visual_dim() {
            1
        } else {
            self.spatial()
        }
    }

    pub fn text_dim(&self) -> usize {
        let lstm = if self.architecture.uses_lstm() {
            self.dims.lstm_hidden
        } else {
            0
        };
        lstm + self.pretrained_dim()
    }

    /// Width of the classifier input.
    pub fn head_input_dim(&self) -> usize {
        let arch = self.architecture;
        if arch.uses_mcb() {
            return self.dims.sketch_width * self.spatial();
        }
        let mut d = self.visual_dim() + self.text_dim();
        if arch.has_type_embedding() {
            d += self.dims.type_embedding;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_names_round_trip() {
        for a in Architecture::ALL {
            let s = serde_json::to_string(&a).unwrap();
            assert_eq!(s, format!("\"{}\"", a.name()));
            assert_eq!(serde_json::from_str::<Architecture>(&s).unwrap(), a);
        }
        assert_eq!(serde_json::from_str::<TextVariant>("\"+W\"").unwrap(), TextVariant::Word2Vec);
    }

    #[test]
    fn invalid_combinations() {
        let mut s = ModelSpec::new(Architecture::McbQta);
        s.text_variant = TextVariant::Word2Vec;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(Architecture::CatL);
        s.sources.truncate(1);
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(Architecture::Cat1);
        s.single_source = 2;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(Architecture::McbQta);
        s.sources[1].shape = [4, 2, 2];
        assert!(s.validate().is_err());
        assert!(ModelSpec::new(Architecture::CatLQtaM).validate().is_ok());
    }

    #[test]
    fn head_widths() {
        let s = ModelSpec::new(Architecture::CatL);
        assert_eq!(s.head_input_dim(), 64 + 64);
        let mut s = ModelSpec::new(Architecture::CatL);
        s.text_variant = TextVariant::Word2Vec;
        assert_eq!(s.head_input_dim(), 64 + 64 + 32);
        let s = ModelSpec::new(Architecture::Cat1);
        assert_eq!(s.head_input_dim(), 32 + 32);
        let s = ModelSpec::new(Architecture::CatQt);
        assert_eq!(s.head_input_dim(), 64 + 32 + 1024);
    }
}
