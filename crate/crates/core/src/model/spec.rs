use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::alphabet::Alphabet;
use crate::layers::{Conv2dSpec, LcBgruConfig};
use crate::losses::GramSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrontendKind {
    /// `ln(p + floor)` followed by dataset feature normalization.
    Log,
    /// Trainable per-channel energy normalization.
    Pcen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecurrentKind {
    Forward,
    Bidirectional,
    LatencyControlled(LcBgruConfig),
    /// Full-BGRU weights evaluated with chunked backward context.
    BidirectionalChunked(LcBgruConfig),
}

impl RecurrentKind {
    pub fn output_width(&self, hidden: usize) -> usize {
        match self {
            RecurrentKind::Forward => hidden,
            _ => 2 * hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Baseline,
    Proposed,
    Bidirectional,
}

impl std::str::FromStr for Preset {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "baseline" => Ok(Preset::Baseline),
            "proposed" => Ok(Preset::Proposed),
            "bidirectional" => Ok(Preset::Bidirectional),
            other => Err(ModelError::InvalidSpec(format!("unknown preset {other:?}"))),
        }
    }
}

/// Convolution geometry: full size for 161-bin input, or shrunk for the
/// small synthetic front end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub frontend: FrontendKind,
    pub n_bins: usize,
    pub convs: Vec<Conv2dSpec>,
    pub recurrent: Vec<RecurrentKind>,
    pub hidden: usize,
    pub la_context: Option<usize>,
    pub batch_norm: bool,
    pub alphabet: Alphabet,
    pub grams: Option<GramSet>,
}

pub const PAPER_WIDTH: usize = 2560;
pub const DESK_WIDTH: usize = 96;

impl ModelSpec {
    pub fn preset(preset: Preset, scale: Scale, width: usize, n_bins: usize, alphabet: Alphabet) -> Self {
        let convs = match scale {
            Scale::Paper => vec![
                Conv2dSpec::new(32, (41, 11), 1, (2, 2)),
                Conv2dSpec::new(32, (21, 11), 32, (2, 1)),
            ],
            Scale::Desk => vec![
                Conv2dSpec::new(8, (9, 5), 1, (2, 2)),
                Conv2dSpec::new(8, (5, 5), 8, (2, 1)),
            ],
        };
        let lc = LcBgruConfig { context: 30, step: 10 };
        let (frontend, recurrent, la_context) = match preset {
            Preset::Baseline => (FrontendKind::Log, vec![RecurrentKind::Forward; 3], Some(30)),
            Preset::Proposed => (
                FrontendKind::Pcen,
                vec![RecurrentKind::Forward, RecurrentKind::Forward, RecurrentKind::LatencyControlled(lc)],
                None,
            ),
            Preset::Bidirectional => (FrontendKind::Log, vec![RecurrentKind::Bidirectional; 3], None),
        };
        Self {
            frontend,
            n_bins,
            convs,
            recurrent,
            hidden: width,
            la_context,
            batch_norm: true,
            alphabet,
            grams: None,
        }
    }

    /// Doubles the overall time stride via the second convolution.
    pub fn with_stride4(mut self) -> Self {
        if let Some(c) = self.convs.get_mut(1) {
            c.stride.1 = 2;
        }
        self
    }

    pub fn with_grams(mut self, grams: GramSet) -> Self {
        self.grams = Some(grams);
        self
    }

    pub fn time_stride(&self) -> usize {
        self.convs.iter().map(|c| c.stride.1).product()
    }

    /// `(freq bins, channels)` after each convolution, starting with the input.
    pub fn conv_geometry(&self) -> Result<Vec<(usize, usize)>, ModelError> {
        let mut g = vec![(self.n_bins, 1)];
        for (i, c) in self.convs.iter().enumerate() {
            c.validate()?;
            let (f, ch) = g[i];
            if c.in_channels != ch {
                return Err(ModelError::InvalidSpec(format!(
                    "conv {i} expects {} input channels, previous layer has {ch}",
                    c.in_channels
                )));
            }
            g.push((c.out_freq(f)?, c.filters));
        }
        Ok(g)
    }

    pub fn recurrent_input_width(&self) -> Result<usize, ModelError> {
        let &(f, c) = self.conv_geometry()?.last().expect("geometry has the input entry");
        Ok(f * c)
    }

    pub fn trunk_width(&self) -> usize {
        self.recurrent.last().map_or(0, |r| r.output_width(self.hidden))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 {
            return Err(ModelError::InvalidSpec("hidden size must be at least 1".into()));
        }
        if self.n_bins == 0 {
            return Err(ModelError::InvalidSpec("need at least one frequency bin".into()));
        }
        if self.recurrent.is_empty() {
            return Err(ModelError::InvalidSpec("need at least one recurrent layer".into()));
        }
        self.conv_geometry()?;
        for r in &self.recurrent {
            if let RecurrentKind::LatencyControlled(c) | RecurrentKind::BidirectionalChunked(c) = r {
                c.validate()?;
            }
        }
        if self.la_context == Some(0) {
            return Err(ModelError::InvalidSpec("lookahead context must be at least 1".into()));
        }
        if let Some(g) = &self.grams {
            if g.alphabet() != &self.alphabet {
                return Err(ModelError::InvalidSpec("gram set alphabet differs from the model alphabet".into()));
            }
        }
        Ok(())
    }

    /// Bounded lookahead, i.e. no full-utterance bidirectional layer.
    pub fn is_deployable(&self) -> bool {
        !self.recurrent.contains(&RecurrentKind::Bidirectional)
    }
}

/// Future post-convolution frames an output may depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lookahead {
    Bounded { nominal: usize, worst_case: usize },
    Unbounded,
}

pub fn lookahead_frames(spec: &ModelSpec) -> Lookahead {
    let mut nominal = spec.la_context.unwrap_or(0);
    let mut worst = nominal;
    for r in &spec.recurrent {
        match r {
            RecurrentKind::Forward => {}
            RecurrentKind::Bidirectional => return Lookahead::Unbounded,
            RecurrentKind::LatencyControlled(c) | RecurrentKind::BidirectionalChunked(c) => {
                nominal += c.lookahead();
                worst += c.worst_lookahead();
            }
        }
    }
    Lookahead::Bounded {
        nominal,
        worst_case: worst,
    }
}
