//! Parametric latency / power / energy model of a CPU+GPU edge device.
//!
//! Per-layer latency is `w_c / f_cpu + w_g / f_gpu` (work in GHz·ms), device power is
//! `P0 + a_c·f_cpu³ + a_g·f_gpu³` clamped at the power cap, and layer energy is whole-device
//! power times layer time. Frequencies live on a discrete grid of `grid_step` above each
//! range minimum.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lowest clock any shipped device is allowed to run at, in GHz.
pub const MIN_CLOCK_GHZ: f64 = 0.1;
pub const DEFAULT_GRID_STEP_GHZ: f64 = 0.1;
pub const DEFAULT_SWITCH_OVERHEAD_MS: f64 = 0.5;
/// Static power as a fraction of the power cap when no anchor pins it down.
pub const DEFAULT_STATIC_FRACTION: f64 = 0.25;

/// Names of the five shipped device profiles.
pub const DEVICE_NAMES: [&str; 5] = [
    "jetson-nano",
    "jetson-tx2",
    "jetson-xavier-nx",
    "jetson-orin-nano",
    "jetson-agx-orin",
];

/// Relative slack used when deciding whether a frequency sits on the grid.
const GRID_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FrequencyPair<S: Scalar> {
    #[serde(rename = "cpu_freq")]
    pub cpu: S,
    #[serde(rename = "gpu_freq")]
    pub gpu: S,
}

impl<S: Scalar> FrequencyPair<S> {
    pub fn new(cpu: S, gpu: S) -> Self {
        Self { cpu, gpu }
    }

    pub fn from_f64(cpu: f64, gpu: f64) -> Self {
        Self::new(S::lit(cpu), S::lit(gpu))
    }

    pub fn sum(&self) -> S {
        self.cpu + self.gpu
    }
}

impl<S: Scalar> fmt::Display for FrequencyPair<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3}) GHz", self.cpu.as_f64(), self.gpu.as_f64())
    }
}

/// Closed frequency interval in GHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FreqRange<S: Scalar> {
    pub min: S,
    pub max: S,
}

impl<S: Scalar> FreqRange<S> {
    pub fn new(min: S, max: S) -> Self {
        Self { min, max }
    }

    /// Number of grid levels `min, min + step, ...` not exceeding `max`.
    pub fn levels(&self, step: S) -> usize {
        let span = ((self.max - self.min) / step).as_f64();
        (span + GRID_TOLERANCE).floor() as usize + 1
    }

    pub fn level(&self, step: S, index: usize) -> S {
        self.min + step * S::lit(index as f64)
    }

    /// Grid index of `f`, or `None` when `f` is off-grid or out of range.
    pub fn index_of(&self, step: S, f: S) -> Option<usize> {
        if !f.is_finite() {
            return None;
        }
        let pos = ((f - self.min) / step).as_f64();
        let idx = pos.round();
        if idx < 0.0 || (pos - idx).abs() > GRID_TOLERANCE || idx as usize >= self.levels(step) {
            return None;
        }
        Some(idx as usize)
    }

    /// Nearest grid level to an arbitrary in-range (or out-of-range) frequency.
    pub fn snap(&self, step: S, f: S) -> S {
        let top = self.levels(step) - 1;
        let pos = ((f - self.min) / step).as_f64().round();
        let idx = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(top)
        };
        self.level(step, idx)
    }
}

/// One edge device: frequency ranges, grid, power coefficients and governor cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DeviceProfile<S: Scalar> {
    pub name: String,
    pub cpu_range: FreqRange<S>,
    pub gpu_range: FreqRange<S>,
    pub grid_step: S,
    /// Watts drawn regardless of clock (P0).
    pub static_power: S,
    /// Watts per GHz³ of CPU clock.
    pub cpu_power_coeff: S,
    /// Watts per GHz³ of GPU clock.
    pub gpu_power_coeff: S,
    /// Governor latency charged per frequency change, ms.
    pub switch_overhead: S,
    pub power_cap: S,
}

impl<S: Scalar> DeviceProfile<S> {
    /// Uncalibrated profile for one of [`DEVICE_NAMES`].
    ///
    /// Static power defaults to a quarter of the cap; the dynamic coefficients are the
    /// minimum-norm split of 35% of the cap at the maximum frequency pair.
    pub fn builtin(name: &str) -> Result<Self> {
        let (cpu_max, gpu_max, cap) = match name {
            "jetson-nano" => (1.4, 0.9, 10.0),
            "jetson-tx2" => (1.4, 1.3, 15.0),
            // Nominally 1.4 GHz, but the reference latency/power measurement this
            // profile is calibrated against runs the CPU at 1.9 GHz.
            "jetson-xavier-nx" => (1.9, 1.1, 20.0),
            "jetson-orin-nano" => (1.5, 0.6, 15.0),
            "jetson-agx-orin" => (2.2, 1.3, 60.0),
            other => {
                return Err(Error::Config(format!(
                    "unknown device '{other}'; valid devices: {}",
                    DEVICE_NAMES.join(", ")
                )))
            }
        };
        let static_power = DEFAULT_STATIC_FRACTION * cap;
        let (a_c, a_g) = min_norm_split(0.35 * cap, cpu_max, gpu_max);
        let profile = Self {
            name: name.to_string(),
            cpu_range: FreqRange::new(S::lit(MIN_CLOCK_GHZ), S::lit(cpu_max)),
            gpu_range: FreqRange::new(S::lit(MIN_CLOCK_GHZ), S::lit(gpu_max)),
            grid_step: S::lit(DEFAULT_GRID_STEP_GHZ),
            static_power: S::lit(static_power),
            cpu_power_coeff: S::lit(a_c),
            gpu_power_coeff: S::lit(a_g),
            switch_overhead: S::lit(DEFAULT_SWITCH_OVERHEAD_MS),
            power_cap: S::lit(cap),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let min_clock = S::lit(MIN_CLOCK_GHZ) * S::lit(1.0 - GRID_TOLERANCE);
        for (label, r) in [("cpu", &self.cpu_range), ("gpu", &self.gpu_range)] {
            if !(r.min >= min_clock && r.max >= r.min && r.max.is_finite()) {
                return Err(Error::domain(format!(
                    "{}: {label} range [{}, {}] must satisfy {MIN_CLOCK_GHZ} <= min <= max",
                    self.name, r.min, r.max
                )));
            }
        }
        if !(self.grid_step > S::zero() && self.grid_step.is_finite()) {
            return Err(Error::domain(format!("{}: grid_step must be > 0", self.name)));
        }
        let coeffs = [
            self.static_power,
            self.cpu_power_coeff,
            self.gpu_power_coeff,
            self.switch_overhead,
            self.power_cap,
        ];
        if coeffs.iter().any(|c| !(*c >= S::zero() && c.is_finite())) {
            return Err(Error::domain(format!(
                "{}: power coefficients, switch overhead and cap must be finite and >= 0",
                self.name
            )));
        }
        let peak = self.raw_power(&self.max_pair());
        if peak > self.power_cap * S::lit(1.0 + 1e-9) {
            return Err(Error::domain(format!(
                "{}: modeled power {peak} W at max frequencies exceeds the {} W cap",
                self.name, self.power_cap
            )));
        }
        Ok(())
    }

    pub fn cpu_levels(&self) -> usize {
        self.cpu_range.levels(self.grid_step)
    }

    pub fn gpu_levels(&self) -> usize {
        self.gpu_range.levels(self.grid_step)
    }

    /// Number of distinct frequency pairs on the grid.
    pub fn grid_size(&self) -> usize {
        self.cpu_levels() * self.gpu_levels()
    }

    pub fn pair_at(&self, cpu_index: usize, gpu_index: usize) -> FrequencyPair<S> {
        FrequencyPair::new(
            self.cpu_range.level(self.grid_step, cpu_index),
            self.gpu_range.level(self.grid_step, gpu_index),
        )
    }

    /// Grid pair by flat index `cpu_index * gpu_levels + gpu_index`.
    pub fn pair_at_flat(&self, flat: usize) -> FrequencyPair<S> {
        let g = self.gpu_levels();
        self.pair_at(flat / g, flat % g)
    }

    pub fn max_pair(&self) -> FrequencyPair<S> {
        self.pair_at(self.cpu_levels() - 1, self.gpu_levels() - 1)
    }

    pub fn min_pair(&self) -> FrequencyPair<S> {
        self.pair_at(0, 0)
    }

    /// Grid midpoint, rounding down on even level counts.
    pub fn mid_pair(&self) -> FrequencyPair<S> {
        self.pair_at((self.cpu_levels() - 1) / 2, (self.gpu_levels() - 1) / 2)
    }

    /// Grid indices of a pair, validating range and grid membership.
    pub fn grid_index(&self, fp: &FrequencyPair<S>) -> Result<(usize, usize)> {
        let c = self.cpu_range.index_of(self.grid_step, fp.cpu);
        let g = self.gpu_range.index_of(self.grid_step, fp.gpu);
        match (c, g) {
            (Some(c), Some(g)) => Ok((c, g)),
            _ => Err(Error::domain(format!(
                "{fp} is off-grid or outside {}'s ranges cpu [{}, {}], gpu [{}, {}] (step {})",
                self.name,
                self.cpu_range.min,
                self.cpu_range.max,
                self.gpu_range.min,
                self.gpu_range.max,
                self.grid_step
            ))),
        }
    }

    pub fn flat_index(&self, fp: &FrequencyPair<S>) -> Result<usize> {
        let (c, g) = self.grid_index(fp)?;
        Ok(c * self.gpu_levels() + g)
    }

    pub fn check(&self, fp: &FrequencyPair<S>) -> Result<()> {
        self.grid_index(fp).map(|_| ())
    }

    /// Snaps arbitrary real frequencies to the nearest valid grid pair.
    pub fn snap(&self, cpu: S, gpu: S) -> FrequencyPair<S> {
        FrequencyPair::new(
            self.cpu_range.snap(self.grid_step, cpu),
            self.gpu_range.snap(self.grid_step, gpu),
        )
    }

    /// Unclamped `P0 + a_c·C³ + a_g·G³`.
    pub fn raw_power(&self, fp: &FrequencyPair<S>) -> S {
        self.static_power
            + self.cpu_power_coeff * fp.cpu.powi(3)
            + self.gpu_power_coeff * fp.gpu.powi(3)
    }
}

/// Minimum-norm nonnegative `(a_c, a_g)` with `a_c·c³ + a_g·g³ = dynamic`.
fn min_norm_split(dynamic: f64, cpu: f64, gpu: f64) -> (f64, f64) {
    let (vc, vg) = (cpu.powi(3), gpu.powi(3));
    let scale = dynamic / (vc * vc + vg * vg);
    (vc * scale, vg * scale)
}

/// Work attributed to one layer block, split between CPU and GPU (GHz·ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LayerCost<S: Scalar> {
    /// 1-based position in the network.
    pub layer_index: usize,
    pub cpu_work: S,
    pub gpu_work: S,
}

impl<S: Scalar> LayerCost<S> {
    pub fn is_zero_work(&self) -> bool {
        self.cpu_work == S::zero() && self.gpu_work == S::zero()
    }
}

/// Per-layer costs of one backbone together with the layer count reached at each exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CostTable<S: Scalar> {
    pub name: String,
    pub layers: Vec<LayerCost<S>>,
    /// `exit_layers[e]` is the number of layers executed when leaving at exit `e + 1`.
    pub exit_layers: Vec<usize>,
}

/// Names accepted by [`CostTable::builtin`].
pub const COST_TABLE_NAMES: [&str; 2] = ["effnet-b0", "mobilenet-v2"];

impl<S: Scalar> CostTable<S> {
    /// Uniform table of `blocks` identical layers.
    pub fn uniform(
        name: &str,
        blocks: usize,
        cpu_work: f64,
        gpu_work: f64,
        exit_layers: Vec<usize>,
    ) -> Result<Self> {
        let layers = (1..=blocks)
            .map(|i| LayerCost {
                layer_index: i,
                cpu_work: S::lit(cpu_work),
                gpu_work: S::lit(gpu_work),
            })
            .collect();
        let table = Self {
            name: name.to_string(),
            layers,
            exit_layers,
        };
        table.validate()?;
        Ok(table)
    }

    /// EfficientNet-B0 stand-in: 16 GPU-heavy blocks, exits after blocks 3, 6, 9, 12, 16.
    pub fn efficientnet_b0() -> Self {
        Self::uniform("effnet-b0", 16, 0.2, 1.0, vec![3, 6, 9, 12, 16]).expect("valid table")
    }

    /// MobileNet-v2 stand-in: 19 blocks, exits after blocks 4, 8, 12, 16, 19.
    pub fn mobilenet_v2() -> Self {
        Self::uniform("mobilenet-v2", 19, 0.2, 1.0, vec![4, 8, 12, 16, 19]).expect("valid table")
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "effnet-b0" => Ok(Self::efficientnet_b0()),
            "mobilenet-v2" => Ok(Self::mobilenet_v2()),
            other => Err(Error::Config(format!(
                "unknown cost table '{other}'; valid tables: {}",
                COST_TABLE_NAMES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (pos, layer) in self.layers.iter().enumerate() {
            if layer.layer_index != pos + 1 {
                return Err(Error::domain(format!(
                    "{}: layer indices must be 1..=n in order, found {} at position {}",
                    self.name,
                    layer.layer_index,
                    pos + 1
                )));
            }
            if !(layer.cpu_work >= S::zero() && layer.gpu_work >= S::zero())
                || !(layer.cpu_work.is_finite() && layer.gpu_work.is_finite())
            {
                return Err(Error::domain(format!(
                    "{}: layer {} has negative or non-finite work",
                    self.name, layer.layer_index
                )));
            }
        }
        let mut prev = 0;
        for &e in &self.exit_layers {
            if e <= prev || e > self.layers.len() {
                return Err(Error::domain(format!(
                    "{}: exit layers {:?} must be strictly increasing within 1..={}",
                    self.name,
                    self.exit_layers,
                    self.layers.len()
                )));
            }
            prev = e;
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_exits(&self) -> usize {
        self.exit_layers.len()
    }

    /// Layers executed when leaving at `exit` (1-based), or the whole network for `None`.
    pub fn layers_for_exit(&self, exit: Option<usize>) -> Result<usize> {
        match exit {
            None => Ok(self.depth()),
            Some(e) if e >= 1 && e <= self.exit_layers.len() => Ok(self.exit_layers[e - 1]),
            Some(e) => Err(Error::domain(format!(
                "exit {e} outside 1..={} for {}",
                self.exit_layers.len(),
                self.name
            ))),
        }
    }

    /// Multiplies every layer's work by `factor`.
    pub fn scaled(&self, factor: S) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            layer.cpu_work *= factor;
            layer.gpu_work *= factor;
        }
        out
    }

    /// Writes `layer_index,cpu_work,gpu_work` rows under an `# exits=` comment line.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let exits: Vec<String> = self.exit_layers.iter().map(|e| e.to_string()).collect();
        let mut out = format!("# name={} exits={}\nlayer_index,cpu_work,gpu_work\n", self.name, exits.join(","));
        for l in &self.layers {
            out.push_str(&format!("{},{},{}\n", l.layer_index, l.cpu_work, l.gpu_work));
        }
        out
    }

    /// Parses the CSV form. Without an `exits=` comment, five exits are spread evenly.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cost-table".into());
        let mut exits: Option<Vec<usize>> = None;
        let mut layers = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line_no = no + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with("layer_index") {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for token in comment.split_whitespace() {
                    if let Some(v) = token.strip_prefix("name=") {
                        name = v.to_string();
                    } else if let Some(v) = token.strip_prefix("exits=") {
                        let parsed: std::result::Result<Vec<usize>, _> =
                            v.split(',').map(str::parse).collect();
                        exits = Some(parsed.map_err(|e| parse_err(line_no, format!("bad exits list: {e}")))?);
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(line_no, format!("expected 3 fields, found {}", fields.len())));
            }
            let layer_index: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(line_no, format!("bad layer_index '{}': {e}", fields[0])))?;
            let mut work = [S::zero(); 2];
            for (slot, field) in work.iter_mut().zip(&fields[1..]) {
                let v: f64 = field
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("bad work value '{field}': {e}")))?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(parse_err(line_no, format!("work must be finite and >= 0, got {v}")));
                }
                *slot = S::lit(v);
            }
            if layer_index != layers.len() + 1 {
                return Err(parse_err(
                    line_no,
                    format!("expected layer_index {}, found {layer_index}", layers.len() + 1),
                ));
            }
            layers.push(LayerCost {
                layer_index,
                cpu_work: work[0],
                gpu_work: work[1],
            });
        }
        let depth = layers.len();
        let exit_layers = exits.unwrap_or_else(|| {
            let n = depth.min(5);
            let mut v: Vec<usize> = (1..=n).map(|e| e * depth / n.max(1)).collect();
            v.dedup();
            v
        });
        let table = Self {
            name,
            layers,
            exit_layers,
        };
        table.validate()?;
        Ok(table)
    }
}

/// Latency of one layer in ms: `w_c / f_cpu + w_g / f_gpu`.
pub fn layer_latency<S: Scalar>(profile: &DeviceProfile<S>, cost: &LayerCost<S>, fp: &FrequencyPair<S>) -> Result<S> {
    profile.check(fp)?;
    Ok(unchecked_latency(cost, fp))
}

/// Whole-device power in W at `fp`, clamped at the power cap.
pub fn device_power<S: Scalar>(profile: &DeviceProfile<S>, fp: &FrequencyPair<S>) -> Result<S> {
    profile.check(fp)?;
    Ok(unchecked_power(profile, fp))
}

/// Energy of one layer in J: device power times layer latency.
pub fn layer_energy<S: Scalar>(profile: &DeviceProfile<S>, cost: &LayerCost<S>, fp: &FrequencyPair<S>) -> Result<S> {
    profile.check(fp)?;
    Ok(unchecked_energy(profile, cost, fp))
}

#[inline]
pub(crate) fn unchecked_latency<S: Scalar>(cost: &LayerCost<S>, fp: &FrequencyPair<S>) -> S {
    cost.cpu_work / fp.cpu + cost.gpu_work / fp.gpu
}

#[inline]
pub(crate) fn unchecked_power<S: Scalar>(profile: &DeviceProfile<S>, fp: &FrequencyPair<S>) -> S {
    profile.raw_power(fp).min(profile.power_cap)
}

#[inline]
pub(crate) fn unchecked_energy<S: Scalar>(profile: &DeviceProfile<S>, cost: &LayerCost<S>, fp: &FrequencyPair<S>) -> S {
    unchecked_power(profile, fp) * unchecked_latency(cost, fp) / S::lit(1000.0)
}

/// Total latency of the first `layers` layers at a single frequency pair.
pub fn network_latency<S: Scalar>(
    profile: &DeviceProfile<S>,
    table: &CostTable<S>,
    layers: usize,
    fp: &FrequencyPair<S>,
) -> Result<S> {
    profile.check(fp)?;
    Ok(table.layers[..layers.min(table.depth())]
        .iter()
        .map(|c| unchecked_latency(c, fp))
        .sum())
}

/// An observed (latency, power) measurement at a known frequency pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CalibrationAnchor<S: Scalar> {
    pub freq: FrequencyPair<S>,
    /// Full-network latency, ms.
    pub observed_latency: S,
    pub observed_power: S,
}

impl<S: Scalar> CalibrationAnchor<S> {
    pub fn new(cpu: f64, gpu: f64, latency_ms: f64, power_w: f64) -> Self {
        Self {
            freq: FrequencyPair::from_f64(cpu, gpu),
            observed_latency: S::lit(latency_ms),
            observed_power: S::lit(power_w),
        }
    }
}

/// Measured anchors shipped for devices that have them.
///
/// Xavier NX: full EfficientNet-B0 at (1.9, 1.1) GHz takes 30 ms at 8.6 W.
/// AGX Orin: the no-DVFS, no-early-exit run of EfficientNet-B0 takes 6.3 ms at 34.6 W.
pub fn reference_anchors<S: Scalar>(device: &str) -> Vec<CalibrationAnchor<S>> {
    match device {
        "jetson-xavier-nx" => vec![CalibrationAnchor::new(1.9, 1.1, 30.0, 8.6)],
        "jetson-agx-orin" => vec![CalibrationAnchor::new(2.2, 1.3, 6.3, 34.6)],
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AnchorResidual<S: Scalar> {
    pub freq: FrequencyPair<S>,
    pub model_latency: S,
    pub model_power: S,
    /// `|model - observed| / observed`.
    pub latency_rel: S,
    pub power_rel: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Calibration<S: Scalar> {
    pub profile: DeviceProfile<S>,
    /// The input table multiplied by `work_scale`.
    pub cost_table: CostTable<S>,
    pub work_scale: S,
    pub residuals: Vec<AnchorResidual<S>>,
}

impl<S: Scalar> Calibration<S> {
    pub fn max_residual(&self) -> S {
        self.residuals
            .iter()
            .flat_map(|r| [r.latency_rel, r.power_rel])
            .fold(S::zero(), S::max)
    }
}

/// Least-squares fit of static power, both cubic coefficients and a global work scale.
///
/// Latency fixes the work scale in closed form. Power is linear in `(P0, a_c, a_g)` and is
/// fitted by exhaustive active-set nonnegative least squares; with fewer than three anchors
/// `P0` is held at a quarter of the cap (capped at half the smallest observed power) and the
/// cubic coefficients take the minimum-norm solution.
pub fn calibrate<S: Scalar>(
    template: &DeviceProfile<S>,
    anchors: &[CalibrationAnchor<S>],
    cost_table: &CostTable<S>,
) -> Result<Calibration<S>> {
    if anchors.is_empty() {
        return Err(Error::Calibration("at least one anchor is required".into()));
    }
    template.validate()?;
    cost_table.validate()?;
    for a in anchors {
        template.check(&a.freq)?;
        if !(a.observed_latency > S::zero() && a.observed_latency.is_finite()) {
            return Err(Error::Calibration(format!("anchor at {} has non-positive latency", a.freq)));
        }
        if a.observed_power.partial_cmp(&S::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Calibration(format!("anchor at {} has non-positive power", a.freq)));
        }
        if a.observed_power > template.power_cap {
            return Err(Error::Calibration(format!(
                "anchor at {} observes {} W, above the {} W cap of {}",
                a.freq, a.observed_power, template.power_cap, template.name
            )));
        }
    }

    // Work scale: minimise Σ (s·b_i - L_i)² with b_i the unscaled full-network latency.
    let base: Vec<S> = anchors
        .iter()
        .map(|a| cost_table.layers.iter().map(|c| unchecked_latency(c, &a.freq)).sum())
        .collect();
    let num: S = anchors.iter().zip(&base).map(|(a, &b)| a.observed_latency * b).sum();
    let den: S = base.iter().map(|&b| b * b).sum();
    if den <= S::zero() {
        return Err(Error::Calibration("cost table has no work to scale".into()));
    }
    let work_scale = num / den;

    let design: Vec<[S; 3]> = anchors
        .iter()
        .map(|a| [S::one(), a.freq.cpu.powi(3), a.freq.gpu.powi(3)])
        .collect();
    let target: Vec<S> = anchors.iter().map(|a| a.observed_power).collect();
    let coeffs = if anchors.len() >= 3 {
        nnls_small(&design, &target, &[0, 1, 2])
    } else {
        let min_obs = target.iter().copied().fold(S::infinity(), S::min);
        let p0 = (S::lit(DEFAULT_STATIC_FRACTION) * template.power_cap).min(S::lit(0.5) * min_obs);
        let reduced: Vec<S> = target.iter().map(|&y| y - p0).collect();
        nnls_small(&design, &reduced, &[1, 2]).map(|mut c| {
            c[0] = p0;
            c
        })
    }
    .ok_or_else(|| Error::Calibration("no nonnegative power coefficients fit the anchors".into()))?;

    let profile = DeviceProfile {
        static_power: coeffs[0],
        cpu_power_coeff: coeffs[1],
        gpu_power_coeff: coeffs[2],
        ..template.clone()
    };
    let peak = profile.raw_power(&profile.max_pair());
    if peak > profile.power_cap * S::lit(1.0 + 1e-9) {
        return Err(Error::Calibration(format!(
            "fitted power {peak} W at max frequencies exceeds the {} W cap",
            profile.power_cap
        )));
    }
    let scaled = cost_table.scaled(work_scale);
    let residuals = anchors
        .iter()
        .map(|a| {
            let model_latency: S = scaled.layers.iter().map(|c| unchecked_latency(c, &a.freq)).sum();
            let model_power = unchecked_power(&profile, &a.freq);
            AnchorResidual {
                freq: a.freq,
                model_latency,
                model_power,
                latency_rel: ((model_latency - a.observed_latency) / a.observed_latency).abs(),
                power_rel: ((model_power - a.observed_power) / a.observed_power).abs(),
            }
        })
        .collect();
    Ok(Calibration {
        profile,
        cost_table: scaled,
        work_scale,
        residuals,
    })
}

/// Nonnegative least squares over the columns listed in `free` (others fixed at zero).
///
/// Every nonempty subset of `free` is solved unconstrained (minimum-norm when
/// underdetermined); the nonnegative solution with the smallest residual wins, preferring
/// larger supports and then smaller norms on ties.
fn nnls_small<S: Scalar>(design: &[[S; 3]], target: &[S], free: &[usize]) -> Option<[S; 3]> {
    let scale = target.iter().map(|y| y.abs()).fold(S::zero(), S::max).max(S::one());
    let tie = S::lit(1e-9) * scale;
    let mut best: Option<([S; 3], S, usize, S)> = None;
    for mask in 1u32..(1 << free.len()) {
        let cols: Vec<usize> = free
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &c)| c)
            .collect();
        let a: Vec<Vec<S>> = design.iter().map(|row| cols.iter().map(|&c| row[c]).collect()).collect();
        let Some(x) = least_squares(&a, target) else {
            continue;
        };
        if x.iter().any(|&v| v < S::zero() || !v.is_finite()) {
            continue;
        }
        let mut full = [S::zero(); 3];
        for (&c, &v) in cols.iter().zip(&x) {
            full[c] = v;
        }
        let resid: S = design
            .iter()
            .zip(target)
            .map(|(row, &y)| {
                let r = row.iter().zip(&full).map(|(&a, &b)| a * b).sum::<S>() - y;
                r * r
            })
            .sum::<S>()
            .sqrt();
        let norm = x.iter().map(|&v| v * v).sum::<S>();
        let better = match &best {
            None => true,
            Some((_, br, bsupp, bnorm)) => {
                if resid < *br - tie {
                    true
                } else if resid > *br + tie {
                    false
                } else {
                    cols.len() > *bsupp || (cols.len() == *bsupp && norm < *bnorm)
                }
            }
        };
        if better {
            best = Some((full, resid, cols.len(), norm));
        }
    }
    best.map(|(x, ..)| x)
}

/// Least squares for a small dense system; minimum-norm when rows < columns.
fn least_squares<S: Scalar>(a: &[Vec<S>], y: &[S]) -> Option<Vec<S>> {
    let rows = a.len();
    let cols = a.first()?.len();
    if rows >= cols {
        // Normal equations AᵀA x = Aᵀy.
        let mut m = vec![vec![S::zero(); cols]; cols];
        let mut rhs = vec![S::zero(); cols];
        for (row, &yi) in a.iter().zip(y) {
            for i in 0..cols {
                rhs[i] += row[i] * yi;
                for j in 0..cols {
                    m[i][j] += row[i] * row[j];
                }
            }
        }
        solve_dense(m, rhs)
    } else {
        // x = Aᵀ (A Aᵀ)⁻¹ y
        let mut m = vec![vec![S::zero(); rows]; rows];
        for i in 0..rows {
            for j in 0..rows {
                m[i][j] = a[i].iter().zip(&a[j]).map(|(&p, &q)| p * q).sum();
            }
        }
        let w = solve_dense(m, y.to_vec())?;
        Some(
            (0..cols)
                .map(|c| (0..rows).map(|r| a[r][c] * w[r]).sum())
                .collect(),
        )
    }
}

/// Gaussian elimination with partial pivoting; `None` for (near-)singular systems.
fn solve_dense<S: Scalar>(mut m: Vec<Vec<S>>, mut rhs: Vec<S>) -> Option<Vec<S>> {
    let n = rhs.len();
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| v.abs())
        .fold(S::zero(), S::max);
    let eps = S::epsilon() * S::lit(1e3) * scale.max(S::min_positive_value());
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[pivot][col].abs() <= eps {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            let pivot_row = m[col].clone();
            for (x, v) in m[r].iter_mut().zip(&pivot_row).skip(col) {
                *x -= f * *v;
            }
            let v = rhs[col];
            rhs[r] -= f * v;
        }
    }
    let mut x = vec![S::zero(); n];
    for r in (0..n).rev() {
        let tail: S = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (rhs[r] - tail) / m[r][r];
    }
    Some(x)
}

/// Reads a profile from its JSON form.
pub fn load_profile<S: Scalar>(path: impl AsRef<Path>) -> Result<DeviceProfile<S>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let profile: DeviceProfile<S> = serde_json::from_str(&text)?;
    profile.validate()?;
    Ok(profile)
}

pub fn save_profile<S: Scalar>(profile: &DeviceProfile<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(profile)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_profile() -> DeviceProfile<f64> {
        DeviceProfile {
            name: "unit".into(),
            cpu_range: FreqRange::new(0.1, 2.0),
            gpu_range: FreqRange::new(0.1, 2.0),
            grid_step: 0.1,
            static_power: 2.0,
            cpu_power_coeff: 1.0,
            gpu_power_coeff: 1.0,
            switch_overhead: 0.5,
            power_cap: 100.0,
        }
    }

    fn cost(w_c: f64, w_g: f64) -> LayerCost<f64> {
        LayerCost {
            layer_index: 1,
            cpu_work: w_c,
            gpu_work: w_g,
        }
    }

    #[test]
    fn zero_work_layer_costs_nothing() {
        let p = unit_profile();
        let fp = FrequencyPair::new(1.0, 1.0);
        assert_eq!(layer_latency(&p, &cost(0.0, 0.0), &fp).unwrap(), 0.0);
        assert_eq!(layer_energy(&p, &cost(0.0, 0.0), &fp).unwrap(), 0.0);
    }

    #[test]
    fn latency_formula() {
        let p = unit_profile();
        let fp = FrequencyPair::new(0.5, 1.0);
        assert!((layer_latency(&p, &cost(1.0, 0.0), &fp).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn power_formula_at_grid_minimum() {
        let p = unit_profile();
        let fp = FrequencyPair::new(0.1, 0.1);
        assert!((device_power(&p, &fp).unwrap() - 2.002).abs() < 1e-12);
    }

    #[test]
    fn energy_formula() {
        let mut p = unit_profile();
        p.static_power = 10.0;
        p.cpu_power_coeff = 0.0;
        p.gpu_power_coeff = 0.0;
        let e = layer_energy(&p, &cost(1.0, 0.0), &FrequencyPair::new(1.0, 1.0)).unwrap();
        assert!((e - 0.010).abs() < 1e-15);
    }

    #[test]
    fn power_clamps_at_cap() {
        let mut p = unit_profile();
        p.power_cap = 5.0;
        p.cpu_power_coeff = 0.3;
        p.gpu_power_coeff = 0.0;
        p.static_power = 1.0;
        // 1 + 0.3·8 = 3.4 at max: valid. Raising the coefficient past the cap is rejected.
        assert!(p.validate().is_ok());
        p.cpu_power_coeff = 1.0;
        assert!(p.validate().is_err());
        assert_eq!(unchecked_power(&p, &FrequencyPair::new(2.0, 0.1)), 5.0);
    }

    #[test]
    fn off_grid_and_out_of_range_are_domain_errors() {
        let p = unit_profile();
        let c = cost(1.0, 1.0);
        for fp in [
            FrequencyPair::new(0.15, 1.0),
            FrequencyPair::new(2.1, 1.0),
            FrequencyPair::new(0.0, 1.0),
            FrequencyPair::new(1.0, f64::NAN),
        ] {
            assert!(matches!(layer_latency(&p, &c, &fp), Err(Error::Domain(_))), "{fp}");
            assert!(device_power(&p, &fp).is_err());
        }
    }

    #[test]
    fn energy_endpoints_have_no_fixed_order() {
        // Static-dominated device: running fast is cheaper.
        let mut p = unit_profile();
        p.static_power = 50.0;
        p.cpu_power_coeff = 0.01;
        p.gpu_power_coeff = 0.01;
        let c = cost(1.0, 1.0);
        let lo = layer_energy(&p, &c, &p.min_pair()).unwrap();
        let hi = layer_energy(&p, &c, &p.max_pair()).unwrap();
        assert!(hi < lo, "hi {hi} lo {lo}");
        // Dynamic-dominated device: running slow is cheaper.
        p.static_power = 0.01;
        p.cpu_power_coeff = 5.0;
        p.gpu_power_coeff = 5.0;
        let lo = layer_energy(&p, &c, &p.min_pair()).unwrap();
        let hi = layer_energy(&p, &c, &p.max_pair()).unwrap();
        assert!(lo < hi, "hi {hi} lo {lo}");
    }

    #[test]
    fn builtin_profiles_match_device_table() {
        let expected = [
            ("jetson-nano", 1.4, 0.9, 10.0),
            ("jetson-tx2", 1.4, 1.3, 15.0),
            ("jetson-xavier-nx", 1.9, 1.1, 20.0),
            ("jetson-orin-nano", 1.5, 0.6, 15.0),
            ("jetson-agx-orin", 2.2, 1.3, 60.0),
        ];
        for (name, cpu, gpu, cap) in expected {
            let p = DeviceProfile::<f64>::builtin(name).unwrap();
            assert_eq!(p.cpu_range.min, 0.1);
            assert_eq!(p.gpu_range.min, 0.1);
            assert_eq!(p.cpu_range.max, cpu);
            assert_eq!(p.gpu_range.max, gpu);
            assert_eq!(p.power_cap, cap);
            assert!(p.raw_power(&p.max_pair()) <= p.power_cap);
            let top = p.max_pair();
            assert!((top.cpu - cpu).abs() < 1e-9 && (top.gpu - gpu).abs() < 1e-9);
        }
        let err = DeviceProfile::<f64>::builtin("jetson-mars").unwrap_err().to_string();
        assert!(err.contains("jetson-agx-orin"), "{err}");
    }

    #[test]
    fn grid_levels_are_inclusive() {
        let p = DeviceProfile::<f64>::builtin("jetson-xavier-nx").unwrap();
        assert_eq!(p.cpu_levels(), 19);
        assert_eq!(p.gpu_levels(), 11);
        assert_eq!(p.grid_size(), 209);
        assert_eq!(p.flat_index(&p.max_pair()).unwrap(), 208);
        assert_eq!(p.pair_at_flat(208), p.max_pair());
        let p32 = DeviceProfile::<f32>::builtin("jetson-agx-orin").unwrap();
        assert_eq!(p32.cpu_levels(), 22);
        assert_eq!(p32.gpu_levels(), 13);
    }

    #[test]
    fn single_anchor_is_fit_exactly() {
        let template = DeviceProfile::<f64>::builtin("jetson-tx2").unwrap();
        let anchors = [CalibrationAnchor::new(1.4, 1.3, 12.0, 9.0)];
        let cal = calibrate(&template, &anchors, &CostTable::efficientnet_b0()).unwrap();
        assert!(cal.max_residual() < 1e-12, "{:?}", cal.residuals);
        assert_eq!(cal.profile.static_power, 3.75);
    }

    #[test]
    fn anchor_above_cap_is_rejected() {
        let template = DeviceProfile::<f64>::builtin("jetson-nano").unwrap();
        let anchors = [CalibrationAnchor::new(1.0, 0.8, 12.0, 11.0)];
        let err = calibrate(&template, &anchors, &CostTable::efficientnet_b0()).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
        assert!(calibrate::<f64>(&template, &[], &CostTable::efficientnet_b0()).is_err());
    }

    #[test]
    fn cost_table_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mb.csv");
        let table = CostTable::<f64>::mobilenet_v2().scaled(1.37);
        table.save_csv(&path).unwrap();
        assert_eq!(CostTable::<f64>::load_csv(&path).unwrap(), table);

        fs::write(&path, "layer_index,cpu_work,gpu_work\n1,0.5,1\n2,-1,1\n").unwrap();
        match CostTable::<f64>::load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "1,0,1\n2,0,1\n3,0,1\n4,0,1\n5,0,1\n6,0,1\n7,0,1\n8,0,1\n9,0,1\n10,0,1\n").unwrap();
        let t = CostTable::<f64>::load_csv(&path).unwrap();
        assert_eq!(t.exit_layers, vec![2, 4, 6, 8, 10]);
    }

    #[test]
    fn exit_layer_lookup() {
        let t = CostTable::<f64>::efficientnet_b0();
        assert_eq!(t.layers_for_exit(Some(1)).unwrap(), 3);
        assert_eq!(t.layers_for_exit(Some(5)).unwrap(), 16);
        assert_eq!(t.layers_for_exit(None).unwrap(), 16);
        assert!(t.layers_for_exit(Some(0)).is_err());
        assert!(t.layers_for_exit(Some(6)).is_err());
    }
}
