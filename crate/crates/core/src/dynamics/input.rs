use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KklError, Result};

/// Input regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Zero,
    Constant,
    Sinusoid,
    Square,
}

impl InputKind {
    pub const ALL: [InputKind; 4] = [
        InputKind::Zero,
        InputKind::Constant,
        InputKind::Sinusoid,
        InputKind::Square,
    ];
    pub const FORCED: [InputKind; 3] = [InputKind::Constant, InputKind::Sinusoid, InputKind::Square];

    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::Zero => "zero",
            InputKind::Constant => "constant",
            InputKind::Sinusoid => "sinusoid",
            InputKind::Square => "square",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        InputKind::ALL
            .into_iter()
            .find(|k| k.as_str() == name)
            .ok_or_else(|| KklError::Config(format!("unknown input kind `{name}`")))
    }
}

/// Ranges for randomly drawn periodic inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputRanges {
    pub constant: [f64; 2],
    pub amplitude: [f64; 2],
    /// Angular frequency range in rad/s.
    pub frequency: [f64; 2],
}

impl Default for InputRanges {
    fn default() -> Self {
        Self {
            constant: [-1.0, 1.0],
            amplitude: [0.2, 1.0],
            frequency: [0.2, 2.0],
        }
    }
}

/// A scalar exogenous signal, applied to every input channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSignal {
    pub kind: InputKind,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub offset: f64,
}

impl InputSignal {
    pub fn zero() -> Self {
        Self {
            kind: InputKind::Zero,
            amplitude: 0.0,
            frequency: 0.0,
            phase: 0.0,
            offset: 0.0,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self {
            kind: InputKind::Constant,
            offset: value,
            ..Self::zero()
        }
    }

    pub fn sinusoid(amplitude: f64, frequency: f64, phase: f64, offset: f64) -> Self {
        Self {
            kind: InputKind::Sinusoid,
            amplitude,
            frequency,
            phase,
            offset,
        }
    }

    pub fn square(amplitude: f64, frequency: f64, phase: f64, offset: f64) -> Self {
        Self {
            kind: InputKind::Square,
            ..Self::sinusoid(amplitude, frequency, phase, offset)
        }
    }

    /// Value at time `t`. The square wave is `offset ± amplitude` with the
    /// sign of `sin(ωt + φ)`, taking `+` at zero crossings.
    pub fn eval(&self, t: f64) -> f64 {
        match self.kind {
            InputKind::Zero => 0.0,
            InputKind::Constant => self.offset,
            InputKind::Sinusoid => self.offset + self.amplitude * (self.frequency * t + self.phase).sin(),
            InputKind::Square => {
                if (self.frequency * t + self.phase).sin() >= 0.0 {
                    self.offset + self.amplitude
                } else {
                    self.offset - self.amplitude
                }
            }
        }
    }
}

/// Draws a signal of the given kind. Periodic kinds have zero offset.
pub fn sample_input<R: Rng + ?Sized>(kind: InputKind, ranges: &InputRanges, rng: &mut R) -> InputSignal {
    let uniform = |rng: &mut R, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..hi) } else { lo };
    match kind {
        InputKind::Zero => InputSignal::zero(),
        InputKind::Constant => InputSignal::constant(uniform(rng, ranges.constant)),
        InputKind::Sinusoid | InputKind::Square => {
            let amplitude = uniform(rng, ranges.amplitude);
            let frequency = uniform(rng, ranges.frequency);
            let phase = uniform(rng, [0.0, std::f64::consts::TAU]);
            InputSignal {
                kind,
                amplitude,
                frequency,
                phase,
                offset: 0.0,
            }
        }
    }
}
