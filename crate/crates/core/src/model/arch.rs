use std::fmt;
use std::str::FromStr;

use super::params::{Init, ParamSpec, PRELU_INIT};
use crate::error::{arg_err, Error, Result};

/// Which feature map feeds the confidence and density heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmOutput {
    Fm1Only,
    Fm2Only,
    Both,
}

impl FmOutput {
    pub fn as_str(self) -> &'static str {
        match self {
            FmOutput::Fm1Only => "fm1_only",
            FmOutput::Fm2Only => "fm2_only",
            FmOutput::Both => "both",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            FmOutput::Fm1Only => 0,
            FmOutput::Fm2Only => 1,
            FmOutput::Both => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(FmOutput::Fm1Only),
            1 => Ok(FmOutput::Fm2Only),
            2 => Ok(FmOutput::Both),
            _ => arg_err(format!("unknown fm_output code {c}")),
        }
    }
}

impl fmt::Display for FmOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FmOutput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm1_only" => Ok(FmOutput::Fm1Only),
            "fm2_only" => Ok(FmOutput::Fm2Only),
            "both" => Ok(FmOutput::Both),
            _ => arg_err(format!("fm_output must be fm1_only, fm2_only or both, got {s:?}")),
        }
    }
}

/// Network topology and ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Image channels, 1 or 3.
    pub in_channels: usize,
    /// Output channels of each dilation branch.
    pub base_channels: usize,
    /// One 3x3 branch per entry; `[1, 2, 3, 4]` spans 3x3 to 9x9 fields.
    pub dilation_set: Vec<usize>,
    /// Widths of the three trunk convolutions.
    pub trunk_widths: [usize; 3],
    /// Channels of FM1. Must be even.
    pub fm_channels: usize,
    /// Number of max-pool stages; the output divisor is `2^pool_stages`.
    pub pool_stages: usize,
    /// Number of crowd-count groups.
    pub groups: usize,
    pub use_confidence: bool,
    pub use_cross_layer: bool,
    pub fm_output: FmOutput,
    pub init: WeightInit,
}

/// Std of the output heads under [`WeightInit::He`]; small so the initial
/// density starts near zero instead of overshooting into dead ReLUs.
pub const HEAD_STD: f64 = 0.01;

/// Distribution of freshly initialized convolution and FC weights. Biases
/// start at zero either way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Gaussian { std: f64 },
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`, except
    /// the two output heads, which use [`HEAD_STD`].
    He,
}

impl WeightInit {
    pub(crate) fn std_for(self, shape: &[usize]) -> f64 {
        match self {
            WeightInit::Gaussian { std } => std,
            WeightInit::He => (2.0 / shape[1..].iter().product::<usize>() as f64).sqrt(),
        }
    }

    /// Std of the 1x1 confidence and density heads.
    pub(crate) fn head_std(self) -> f64 {
        match self {
            WeightInit::Gaussian { std } => std,
            WeightInit::He => HEAD_STD,
        }
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            dilation_set: vec![1, 2, 3, 4],
            trunk_widths: [32, 48, 64],
            fm_channels: 32,
            pool_stages: 2,
            groups: 5,
            use_confidence: true,
            use_cross_layer: true,
            fm_output: FmOutput::Both,
            init: WeightInit::He,
        }
    }
}

impl ArchConfig {
    pub fn divisor(&self) -> usize {
        1 << self.pool_stages
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return arg_err(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.dilation_set.is_empty() || self.dilation_set.contains(&0) {
            return arg_err("dilation_set must be nonempty with positive entries");
        }
        if self.base_channels == 0 || self.trunk_widths.contains(&0) {
            return arg_err("channel widths must be positive");
        }
        if self.fm_channels < 2 || !self.fm_channels.is_multiple_of(2) {
            return arg_err(format!("fm_channels must be even and >= 2, got {}", self.fm_channels));
        }
        if self.pool_stages != 2 {
            // the trunk taps T1/T2 sit after the first and second pools
            return arg_err(format!("pool_stages must be 2, got {}", self.pool_stages));
        }
        if self.groups < 1 {
            return arg_err("need at least one count group");
        }
        if let WeightInit::Gaussian { std } = self.init {
            if !(std > 0.0) {
                return arg_err("init std must be positive");
            }
        }
        Ok(())
    }

    /// Channels reaching the confidence and density heads.
    pub fn head_channels(&self) -> usize {
        match self.fm_output {
            FmOutput::Both => 2 * self.fm_channels,
            _ => self.fm_channels,
        }
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        fn head(specs: &mut Vec<ParamSpec>, name: &str, c_in: usize) {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![1, c_in, 1, 1],
                init: Init::Head,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![1],
                init: Init::Zero,
            });
        }
        let mut specs = Vec::new();
        let mut conv = |name: &str, c_out: usize, c_in: usize, k: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![c_out, c_in, k, k],
                init: Init::Gaussian,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![c_out],
                init: Init::Zero,
            });
        };
        let [t0, t1, t2] = self.trunk_widths;
        let c1 = self.fm_channels;
        for i in 0..self.dilation_set.len() {
            conv(&format!("front.branch{i}"), self.base_channels, self.in_channels, 3);
        }
        conv("trunk.conv1", t0, self.base_channels * self.dilation_set.len(), 3);
        conv("trunk.conv2", t1, t0, 3);
        conv("trunk.conv3", t2, t1, 3);
        if self.use_cross_layer {
            conv("fuse.tap1", c1 / 2, t1, 1);
            conv("fuse.tap2", c1 / 2, t2, 1);
            conv("fuse.mix", c1, c1, 1);
        } else {
            conv("fuse.tap2", c1, t2, 1);
        }
        if self.use_confidence {
            head(&mut specs, "confidence", self.head_channels());
        }
        head(&mut specs, "density", self.head_channels());
        specs.push(ParamSpec {
            name: "fusion.weight".into(),
            shape: vec![1, 1, 3, 3],
            init: Init::PassThrough,
        });
        specs.push(ParamSpec {
            name: "fusion.bias".into(),
            shape: vec![1],
            init: Init::Zero,
        });
        specs.push(ParamSpec {
            name: "classifier.weight".into(),
            shape: vec![self.groups, c1],
            init: Init::Gaussian,
        });
        specs.push(ParamSpec {
            name: "classifier.bias".into(),
            shape: vec![self.groups],
            init: Init::Zero,
        });
        specs.push(ParamSpec {
            name: "classifier.prelu".into(),
            shape: vec![1],
            init: Init::Constant(PRELU_INIT),
        });
        specs
    }
}
