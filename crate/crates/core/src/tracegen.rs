//! Synthetic labeled frame traces standing in for real video datasets.
//!
//! A trace is consumed in windows of `T` consecutive frames. Every frame in a window shares
//! one label; complexity is drawn once per window and jittered per frame.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decimal places used when rendering complexity; generated values are quantized to match.
pub const COMPLEXITY_DECIMALS: i32 = 6;
/// Standard deviation of the per-frame complexity jitter.
const FRAME_JITTER: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: u64,
    /// Inference difficulty in `[0, 1]`.
    pub complexity: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frames: Vec<Frame>,
    pub num_classes: usize,
    pub window_length: usize,
}

impl FrameTrace {
    pub fn empty(num_classes: usize, window_length: usize) -> Self {
        Self {
            frames: Vec::new(),
            num_classes,
            window_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 {
            return Err(Error::domain("window length must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::domain("class count must be >= 1"));
        }
        for f in &self.frames {
            if !(0.0..=1.0).contains(&f.complexity) {
                return Err(Error::domain(format!(
                    "frame {} complexity {} outside [0, 1]",
                    f.frame_id, f.complexity
                )));
            }
            if f.label >= self.num_classes {
                return Err(Error::domain(format!(
                    "frame {} label {} >= class count {}",
                    f.frame_id, f.label, self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Complete windows only; a trailing partial window is dropped.
    pub fn windows(&self) -> impl ExactSizeIterator<Item = &[Frame]> + '_ {
        self.frames.chunks_exact(self.window_length)
    }

    pub fn num_windows(&self) -> usize {
        self.frames.len() / self.window_length
    }

    pub fn is_empty(&self) -> bool {
        self.num_windows() == 0
    }

    /// The same frames regrouped with another window length.
    pub fn with_window_length(&self, window_length: usize) -> Self {
        Self {
            window_length,
            ..self.clone()
        }
    }

    /// Writes the `k=K,t=T` header and one `frame_id,complexity,label` row per frame.
    pub fn to_text(&self) -> String {
        let mut out = format!("k={},t={}\n", self.num_classes, self.window_length);
        for f in &self.frames {
            let _ = writeln!(
                out,
                "{},{:.*},{}",
                f.frame_id, COMPLEXITY_DECIMALS as usize, f.complexity, f.label
            );
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (num_classes, window_length) = match lines.next() {
            Some((_, header)) => parse_header(header).map_err(|m| err(1, m))?,
            None => return Err(err(1, "missing 'k=K,t=T' header".into())),
        };
        let mut frames = Vec::new();
        for (no, raw) in lines {
            let line_no = no + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(err(line_no, format!("expected 3 fields, found {}", fields.len())));
            }
            let frame_id = fields[0]
                .parse::<u64>()
                .map_err(|e| err(line_no, format!("bad frame_id '{}': {e}", fields[0])))?;
            let complexity = fields[1]
                .parse::<f64>()
                .map_err(|e| err(line_no, format!("bad complexity '{}': {e}", fields[1])))?;
            if !(0.0..=1.0).contains(&complexity) {
                return Err(err(line_no, format!("complexity {complexity} outside [0, 1]")));
            }
            let label = fields[2]
                .parse::<usize>()
                .map_err(|e| err(line_no, format!("bad label '{}': {e}", fields[2])))?;
            if label >= num_classes {
                return Err(err(line_no, format!("label {label} >= class count {num_classes}")));
            }
            frames.push(Frame {
                frame_id,
                complexity,
                label,
            });
        }
        Ok(Self {
            frames,
            num_classes,
            window_length,
        })
    }
}

fn parse_header(header: &str) -> std::result::Result<(usize, usize), String> {
    let mut k = None;
    let mut t = None;
    for part in header.trim().split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("malformed header field '{part}', expected k=K,t=T"))?;
        let v: usize = value
            .trim()
            .parse()
            .map_err(|e| format!("bad header value '{value}': {e}"))?;
        match key.trim() {
            "k" => k = Some(v),
            "t" => t = Some(v),
            other => return Err(format!("unknown header key '{other}'")),
        }
    }
    match (k, t) {
        (Some(k), Some(t)) if k >= 1 && t >= 1 => Ok((k, t)),
        (Some(_), Some(_)) => Err("k and t must be >= 1".into()),
        _ => Err("header must declare both k and t".into()),
    }
}

pub fn save_trace(trace: &FrameTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<FrameTrace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FrameTrace::from_text(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComplexityDistribution {
    Uniform,
    /// Two truncated normal modes; `p_low` is the weight of the low mode.
    Bimodal {
        p_low: f64,
        lo_mean: f64,
        hi_mean: f64,
        #[serde(default = "default_spread")]
        spread: f64,
    },
}

fn default_spread() -> f64 {
    0.1
}

impl ComplexityDistribution {
    pub fn bimodal(p_low: f64, lo_mean: f64, hi_mean: f64) -> Self {
        Self::Bimodal {
            p_low,
            lo_mean,
            hi_mean,
            spread: default_spread(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Self::Bimodal {
            p_low,
            lo_mean,
            hi_mean,
            spread,
        } = *self
        {
            let unit = 0.0..=1.0;
            if !(unit.contains(&p_low) && unit.contains(&lo_mean) && unit.contains(&hi_mean)) {
                return Err(Error::domain("bimodal weights and means must lie in [0, 1]"));
            }
            if !(spread > 0.0 && spread.is_finite()) {
                return Err(Error::domain("bimodal spread must be > 0"));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Self::Uniform => rng.random::<f64>(),
            Self::Bimodal {
                p_low,
                lo_mean,
                hi_mean,
                spread,
            } => {
                let mean = if rng.random::<f64>() < p_low { lo_mean } else { hi_mean };
                truncated_normal(rng, mean, spread)
            }
        }
    }
}

/// Rejection sampling from `N(mean, sd²)` restricted to `[0, 1]`.
fn truncated_normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    let normal = Normal::new(mean, sd).expect("sd validated > 0");
    for _ in 0..10_000 {
        let x = normal.sample(rng);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
    mean.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGenConfig {
    pub num_windows: usize,
    pub num_classes: usize,
    pub window_length: usize,
    pub complexity: ComplexityDistribution,
    pub seed: u64,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            num_windows: 200,
            num_classes: 4,
            window_length: 20,
            complexity: ComplexityDistribution::Uniform,
            seed: 0,
        }
    }
}

fn quantize(x: f64) -> f64 {
    let scale = 10f64.powi(COMPLEXITY_DECIMALS);
    ((x * scale).round() / scale).clamp(0.0, 1.0)
}

/// Deterministic synthetic trace. Zero windows gives an empty (valid) trace.
pub fn generate_trace(config: &TraceGenConfig) -> Result<FrameTrace> {
    if config.num_classes == 0 || config.window_length == 0 {
        return Err(Error::domain("class count and window length must be >= 1"));
    }
    config.complexity.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, FRAME_JITTER).expect("valid jitter");
    let t = config.window_length;
    let mut frames = Vec::with_capacity(config.num_windows * t);
    for w in 0..config.num_windows {
        let label = rng.random_range(0..config.num_classes);
        let base = config.complexity.sample(&mut rng);
        for i in 0..t {
            let c = (base + jitter.sample(&mut rng)).clamp(0.0, 1.0);
            frames.push(Frame {
                frame_id: (w * t + i) as u64,
                complexity: quantize(c),
                label,
            });
        }
    }
    Ok(FrameTrace {
        frames,
        num_classes: config.num_classes,
        window_length: t,
    })
}

/// Mean complexity of a window.
pub fn window_complexity(window: &[Frame]) -> f64 {
    if window.is_empty() {
        return 0.0;
    }
    window.iter().map(|f| f.complexity).sum::<f64>() / window.len() as f64
}
