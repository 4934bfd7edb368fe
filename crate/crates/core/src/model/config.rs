use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Deepsense,
    Trasend,
    TrasendBd,
    TrasendCa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Deepsense,
        Variant::Trasend,
        Variant::TrasendBd,
        Variant::TrasendCa,
    ];

    /// Command-line spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::Deepsense => "deepsense",
            Variant::Trasend => "trasend",
            Variant::TrasendBd => "trasend-bd",
            Variant::TrasendCa => "trasend-ca",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.cli_name() == s || format!("{v:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// How the attention block's `T × d_model` output reaches the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: String,
    pub dims: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sensors: Vec<SensorSpec>,
    pub timesteps: usize,
    pub freq_bins: usize,
    pub num_classes: usize,
    pub variant: Variant,
    pub conv_filters: usize,
    pub gru_units: usize,
    pub heads: usize,
    pub d_k: usize,
    pub dropout_conv: f64,
    pub dropout_rnn: f64,
    /// Defaults to `2·d_model`.
    pub ffn_hidden: Option<usize>,
    /// Width of the context-attention score projection.
    pub ca_attention_width: usize,
    pub reduction: Reduction,
    pub positional_encoding: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn new(sensors: Vec<SensorSpec>, timesteps: usize, freq_bins: usize, num_classes: usize, variant: Variant) -> Self {
        Self {
            sensors,
            timesteps,
            freq_bins,
            num_classes,
            variant,
            conv_filters: 64,
            gru_units: 120,
            heads: 8,
            d_k: 64,
            dropout_conv: 0.2,
            dropout_rnn: 0.5,
            ffn_hidden: None,
            ca_attention_width: 64,
            reduction: Reduction::Mean,
            positional_encoding: true,
            bn_momentum: 0.9,
            bn_eps: 1e-3,
            ln_eps: 1e-6,
        }
    }

    /// Narrow architecture for CPU-scale experiments.
    pub fn tiny(sensors: Vec<SensorSpec>, timesteps: usize, freq_bins: usize, num_classes: usize, variant: Variant) -> Self {
        Self {
            conv_filters: 8,
            gru_units: 16,
            heads: 2,
            d_k: 8,
            ca_attention_width: 8,
            ..Self::new(sensors, timesteps, freq_bins, num_classes, variant)
        }
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    /// Width of one timestep row of sensor `s`.
    pub fn input_width(&self, s: usize) -> usize {
        2 * self.freq_bins * self.sensors[s].dims
    }

    /// Feature widths after each individual conv layer (identical for every sensor).
    pub fn conv_widths(&self) -> [usize; 3] {
        let w1 = self.freq_bins.saturating_sub(2);
        [w1, w1.saturating_sub(2), w1.saturating_sub(4)]
    }

    /// Number of (sensor, feature) locations per timestep after the merge convs.
    pub fn locations(&self) -> usize {
        self.num_sensors() * self.conv_widths()[2]
    }

    pub fn d_model(&self) -> usize {
        self.locations() * self.conv_filters
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.d_model())
    }

    /// Width of the vector handed to the output layer.
    pub fn head_input(&self) -> usize {
        match self.variant {
            Variant::Trasend => match self.reduction {
                Reduction::Mean => self.d_model(),
                Reduction::Flatten => self.timesteps * self.d_model(),
            },
            Variant::Deepsense | Variant::TrasendCa => self.gru_units,
            Variant::TrasendBd => 2 * self.gru_units,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sensors.is_empty() {
            return fail("at least one sensor is required".into());
        }
        let mut ids: Vec<&str> = self.sensors.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return fail("sensor ids must be unique".into());
        }
        if self.sensors.iter().any(|s| s.dims == 0) {
            return fail("sensor dimensions must be at least 1".into());
        }
        if self.freq_bins < 7 {
            return fail(format!(
                "freq_bins = {} leaves no width for three convolutions (need at least 7)",
                self.freq_bins
            ));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.timesteps == 0 {
            return fail("timesteps must be at least 1".into());
        }
        let sizes = [self.conv_filters, self.gru_units, self.heads, self.d_k, self.ca_attention_width, self.ffn_width()];
        if sizes.contains(&0) {
            return fail("layer sizes must be positive".into());
        }
        for p in [self.dropout_conv, self.dropout_rnn] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("dropout probability {p} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 || self.ln_eps <= 0.0 {
            return fail("normalization momentum must lie in [0, 1) and eps be positive".into());
        }
        if self.variant == Variant::Trasend && self.positional_encoding && self.d_model() % 2 != 0 {
            return fail(format!("positional encoding needs an even d_model, got {}", self.d_model()));
        }
        Ok(())
    }
}
