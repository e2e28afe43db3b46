//! Run configuration and its structural checks.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::construct::slot_width;
use crate::error::{config, Result};
use crate::exec::Exec;
use crate::oracle::OracleCapacity;
use crate::tensor::MaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Quadratic,
    QuadraticCausal,
    Average,
    Window,
    Sink,
    Reverse,
    All,
}

impl Mode {
    pub const EACH: [Mode; 6] =
        [Mode::Quadratic, Mode::QuadraticCausal, Mode::Average, Mode::Window, Mode::Sink, Mode::Reverse];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Quadratic => "quadratic",
            Mode::QuadraticCausal => "quadratic-causal",
            Mode::Average => "average",
            Mode::Window => "window",
            Mode::Sink => "sink",
            Mode::Reverse => "reverse",
            Mode::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Sequence length of the simulated model.
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub l: usize,
    /// Longest input the oracle accepts.
    pub m_cap: usize,
    pub h_small: usize,
    pub l_small: usize,
    /// Oracle width; defaults to `h_small * l_small` slots of `2 d / h + 2` columns.
    pub d_small: Option<usize>,
    /// Defaults to `m_cap - 1`.
    pub chunk: Option<usize>,
    pub window_r: usize,
    pub sink_s: usize,
    pub seed: u64,
    pub epsilon_target: f64,
    pub trials: usize,
    pub pure_oracle_recombination: bool,
    pub pack: bool,
    pub exec: Exec,
    /// Absolute per-row error target of the reverse simulation.
    pub reverse_target: f64,
    pub output_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Quadratic,
            n: 16,
            d: 4,
            h: 2,
            l: 2,
            m_cap: 5,
            h_small: 2,
            l_small: 2,
            d_small: None,
            chunk: None,
            window_r: 4,
            sink_s: 3,
            seed: 0,
            epsilon_target: 0.25,
            trials: 50,
            pure_oracle_recombination: false,
            pack: true,
            exec: Exec::default(),
            reverse_target: 1e-6,
            output_path: None,
        }
    }
}

impl RunConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let base = RunConfig { mode, ..RunConfig::default() };
        match mode {
            Mode::Average => RunConfig { n: 512, h: 1, l: 1, m_cap: 129, h_small: 1, l_small: 1, ..base },
            Mode::Window | Mode::Sink => RunConfig { n: 32, m_cap: 9, ..base },
            Mode::Reverse => RunConfig { d: 2, h: 1, l: 1, m_cap: 4, ..base },
            _ => base,
        }
    }

    pub fn chunk(&self) -> usize {
        self.chunk.unwrap_or(self.m_cap.saturating_sub(1))
    }

    pub fn head_width(&self) -> usize {
        self.d / self.h.max(1)
    }

    pub fn d_small(&self) -> usize {
        self.d_small.unwrap_or(self.h_small * self.l_small * slot_width(self.head_width()))
    }

    /// The model's mask in this mode.
    pub fn model_mask(&self) -> MaskKind {
        match self.mode {
            Mode::QuadraticCausal => MaskKind::Causal,
            Mode::Window => MaskKind::Window { r: self.window_r },
            Mode::Sink => MaskKind::Sink { s: self.sink_s, r: self.window_r },
            _ => MaskKind::Dense,
        }
    }

    pub fn oracle_mask(&self) -> MaskKind {
        match self.mode {
            Mode::QuadraticCausal | Mode::Window | Mode::Sink => MaskKind::Causal,
            _ => MaskKind::Dense,
        }
    }

    pub fn capacity(&self) -> Result<OracleCapacity> {
        OracleCapacity::new(self.m_cap, self.l_small, self.h_small, self.d_small(), self.oracle_mask())
    }

    /// Structural checks for one concrete mode, naming the violated constraint.
    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::All {
            return Err(config("mode all expands into one config per mode; validate each"));
        }
        if self.n == 0 || self.d == 0 || self.h == 0 || self.l == 0 {
            return Err(config("n, d, h and l must all be positive"));
        }
        if !self.d.is_multiple_of(self.h) {
            return Err(config(format!("d = {} must be divisible by h = {}", self.d, self.h)));
        }
        self.capacity()?;
        let chunk = self.chunk();
        if self.mode == Mode::Reverse {
            if self.h != 1 || self.l != 1 {
                return Err(config("reverse simulation covers a single head and layer (h = l = 1)"));
            }
            if !self.n.is_multiple_of(self.m_cap) {
                return Err(config(format!("n = {} must be divisible by m-cap = {}", self.n, self.m_cap)));
            }
            if self.reverse_target.is_nan() || self.reverse_target <= 0.0 {
                return Err(config("reverse-target must be positive"));
            }
            return Ok(());
        }
        if chunk == 0 || chunk + 1 > self.m_cap {
            return Err(config(format!(
                "chunk {chunk} must be between 1 and m-cap - 1 = {}",
                self.m_cap.saturating_sub(1)
            )));
        }
        let per_call = if self.pack { self.h_small * self.l_small } else { 1 };
        let need = per_call * slot_width(self.head_width());
        if self.d_small() < need {
            return Err(config(format!(
                "d-small = {} is below {need}: {per_call} slots of {} columns",
                self.d_small(),
                slot_width(self.head_width())
            )));
        }
        match self.mode {
            Mode::Quadratic | Mode::QuadraticCausal | Mode::Average => {
                if !self.n.is_multiple_of(chunk) {
                    return Err(config(format!("n = {} must be divisible by chunk = {chunk}", self.n)));
                }
            }
            Mode::Window | Mode::Sink => {
                let r = self.window_r;
                if r == 0 || r >= chunk {
                    return Err(config(format!("window-r = {r} must be in 1..chunk = {chunk}")));
                }
                if self.n > r && !(self.n - r).is_multiple_of(chunk - r) {
                    return Err(config(format!(
                        "n - window-r = {} must be divisible by chunk - window-r = {}",
                        self.n - r,
                        chunk - r
                    )));
                }
                if self.mode == Mode::Sink && (self.sink_s == 0 || self.sink_s + r > chunk) {
                    return Err(config(format!(
                        "sink-s = {} must be positive with sink-s + window-r <= chunk = {chunk}",
                        self.sink_s
                    )));
                }
            }
            Mode::Reverse | Mode::All => unreachable!("handled above"),
        }
        if self.pure_oracle_recombination {
            if self.mode != Mode::Quadratic {
                return Err(config("pure-oracle-recombination is supported for mode quadratic only"));
            }
            if self.n / chunk > self.m_cap {
                return Err(config(format!(
                    "pure-oracle-recombination sums {} block parts per row, more than m-cap = {}",
                    self.n / chunk,
                    self.m_cap
                )));
            }
        }
        if self.mode == Mode::Average
            && (self.trials == 0 || self.epsilon_target.is_nan() || self.epsilon_target <= 0.0)
        {
            return Err(config("average mode needs trials >= 1 and a positive epsilon-target"));
        }
        Ok(())
    }

    /// The concrete configs this one runs: itself, or each mode's defaults for `all`, keeping
    /// the seed and run settings.
    pub fn expand(&self) -> Vec<RunConfig> {
        if self.mode == Mode::All {
            Mode::EACH
                .iter()
                .map(|&mode| RunConfig {
                    seed: self.seed,
                    exec: self.exec,
                    trials: self.trials,
                    epsilon_target: self.epsilon_target,
                    output_path: self.output_path.clone(),
                    ..RunConfig::for_mode(mode)
                })
                .collect()
        } else {
            vec![self.clone()]
        }
    }
}
