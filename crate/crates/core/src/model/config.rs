use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};

/// Model shape, ablation switches and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtpConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Hidden size of all three GRUs.
    pub hidden: usize,
    /// Position embedding width (also the decoder input width).
    pub pos_embed: usize,
    /// Width of the embedded destination attributes d'_i.
    pub dest_embed: usize,
    /// Width of the modulated representations e_i.
    pub mod_dim: usize,
    /// Metres are multiplied by this before entering the network.
    pub position_scale: f64,

    pub use_modulation: bool,
    pub use_goal_loss: bool,
    pub flexible_attention: bool,
    pub agent_centric: bool,
    /// `false` selects the plain GRU encoder-decoder; the other switches
    /// are then irrelevant.
    pub use_goal_features: bool,

    pub lr: f64,
    /// Learning rate multiplier for the final joint stage.
    pub stage3_lr_scale: f64,
    pub batch_size: usize,
    pub stage_epochs: [usize; 3],
    pub clip_norm: f64,
    /// Fraction of training samples held out for early stopping.
    pub val_fraction: f64,
    /// Epochs without validation improvement before a stage stops early.
    pub patience: usize,
    pub seed: u64,
}

impl Default for GtpConfig {
    fn default() -> Self {
        GtpConfig {
            t_obs: 8,
            t_pred: 12,
            hidden: 64,
            pos_embed: 32,
            dest_embed: 32,
            mod_dim: 64,
            position_scale: 0.2,
            use_modulation: true,
            use_goal_loss: true,
            flexible_attention: true,
            agent_centric: true,
            use_goal_features: true,
            lr: 1e-3,
            stage3_lr_scale: 0.5,
            batch_size: 64,
            stage_epochs: [30, 30, 20],
            clip_norm: 5.0,
            val_fraction: 0.1,
            patience: 10,
            seed: 0,
        }
    }
}

/// The ablation variants, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoModulation,
    NoGoalLoss,
    NoFlexibleAttention,
    NoAgentCentric,
    NoGoalFeatures,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoModulation,
        Variant::NoGoalLoss,
        Variant::NoFlexibleAttention,
        Variant::NoAgentCentric,
        Variant::NoGoalFeatures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoModulation => "no_modulation",
            Variant::NoGoalLoss => "no_goal_loss",
            Variant::NoFlexibleAttention => "no_flexible_attention",
            Variant::NoAgentCentric => "no_agent_centric",
            Variant::NoGoalFeatures => "no_goal_features",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Full GTP model",
            Variant::NoModulation => "W/o destination modulation",
            Variant::NoGoalLoss => "W/o goal loss",
            Variant::NoFlexibleAttention => "W/o flexible attention weights",
            Variant::NoAgentCentric => "W/o agent-centric representation",
            Variant::NoGoalFeatures => "W/o any goal-driven features",
        }
    }

    /// `base` with this variant's switch turned off (all others on).
    pub fn apply(self, base: &GtpConfig) -> GtpConfig {
        let mut c = GtpConfig {
            use_modulation: true,
            use_goal_loss: true,
            flexible_attention: true,
            agent_centric: true,
            use_goal_features: true,
            ..base.clone()
        };
        match self {
            Variant::Full => {}
            Variant::NoModulation => c.use_modulation = false,
            Variant::NoGoalLoss => c.use_goal_loss = false,
            Variant::NoFlexibleAttention => c.flexible_attention = false,
            Variant::NoAgentCentric => c.agent_centric = false,
            Variant::NoGoalFeatures => c.use_goal_features = false,
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = GtpError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GtpError::Data(format!("unknown variant {s:?}")))
    }
}

impl GtpConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GtpError::contract(m));
        if self.t_obs < 2 {
            return fail(format!("t_obs must be at least 2, got {}", self.t_obs));
        }
        if self.t_pred < 1 {
            return fail("t_pred must be at least 1".into());
        }
        if [self.hidden, self.pos_embed, self.dest_embed, self.mod_dim].contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return fail(format!("position_scale {}", self.position_scale));
        }
        if !(self.lr > 0.0 && self.stage3_lr_scale > 0.0 && self.clip_norm > 0.0) {
            return fail("lr, stage3_lr_scale and clip_norm must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// Whether the goal loss stage runs.
    pub fn goal_stage_enabled(&self) -> bool {
        self.use_goal_features && self.use_goal_loss
    }

    /// Width of the rows of E seen by ranking, attention and fusion.
    pub fn dest_repr_dim(&self) -> usize {
        if self.use_modulation {
            self.mod_dim
        } else {
            self.dest_embed
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: GtpConfig = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| GtpError::Data(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = GtpConfig {
            t_pred: 28,
            flexible_attention: false,
            ..Default::default()
        };
        let back: GtpConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: GtpConfig = serde_json::from_str(r#"{"hidden": 16}"#).unwrap();
        assert_eq!(partial.hidden, 16);
        assert_eq!(partial.t_obs, 8);
        assert!(serde_json::from_str::<GtpConfig>(r#"{"hiden": 16}"#).is_err());
    }

    #[test]
    fn validation() {
        assert!(GtpConfig::default().validate().is_ok());
        assert!(GtpConfig { t_obs: 1, ..Default::default() }.validate().is_err());
        assert!(GtpConfig { t_pred: 0, ..Default::default() }.validate().is_err());
        assert!(GtpConfig { val_fraction: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn variants_flip_one_switch() {
        let base = GtpConfig::default();
        for v in Variant::ALL {
            let c = v.apply(&base);
            let off = [
                c.use_modulation,
                c.use_goal_loss,
                c.flexible_attention,
                c.agent_centric,
                c.use_goal_features,
            ]
            .iter()
            .filter(|f| !**f)
            .count();
            assert_eq!(off, usize::from(v != Variant::Full));
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
