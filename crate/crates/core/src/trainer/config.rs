use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::DEFAULT_SIGMA_VOX;
use crate::losses::LossWeights;
use crate::networks::{DiscriminatorConfig, PhnnConfig};
use crate::phantom::DEFAULT_WINDOW_HU;
use crate::volume::Shape3;

/// The compared training recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Heatmap and segmentation networks trained on the source domain only.
    SupervisedDual,
    /// Segmentation conditioned on the true extreme points, source only.
    Dextr,
    /// Mask-only adversarial adaptation without any point supervision.
    AdaMaskNoPs,
    /// Mask-only adversarial adaptation plus point supervision on the target.
    AdaMaskWithPs,
    /// Adversarial adaptation over joint mask and extreme-point predictions.
    Ugda,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SupervisedDual,
        Variant::Dextr,
        Variant::AdaMaskNoPs,
        Variant::AdaMaskWithPs,
        Variant::Ugda,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SupervisedDual => "supervised_dual",
            Variant::Dextr => "dextr",
            Variant::AdaMaskNoPs => "ada_mask_no_ps",
            Variant::AdaMaskWithPs => "ada_mask_with_ps",
            Variant::Ugda => "ugda",
        }
    }

    /// Whether the recipe has an adversarial phase.
    pub fn adapts(self) -> bool {
        matches!(self, Variant::AdaMaskNoPs | Variant::AdaMaskWithPs | Variant::Ugda)
    }

    /// Whether target point labels enter the training losses.
    pub fn uses_target_ps(self) -> bool {
        matches!(self, Variant::AdaMaskWithPs | Variant::Ugda)
    }

    /// Whether the discriminator sees the summed heatmap next to the mask.
    pub fn joint_discriminator(self) -> bool {
        self == Variant::Ugda
    }

    /// Whether a heatmap network is trained at all.
    pub fn has_heatmap_net(self) -> bool {
        self != Variant::Dextr
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// What the discriminator sees for source items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscSourceInput {
    /// Network predictions on source volumes.
    #[default]
    Pred,
    /// Ground-truth masks and rendered heatmaps.
    Gt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub ps_fraction: f64,
    pub seed: u64,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
    pub pretrain_max_epochs: u32,
    pub adapt_epochs: u32,
    pub batch_source: usize,
    pub batch_target: usize,
    pub losses: LossWeights,
    /// Grid the networks run on; volumes are resampled to and from it.
    pub model_shape: Shape3,
    pub sigma_vox: f64,
    pub window_hu: (f32, f32),
    pub threshold: f32,
    pub heatmap_net: PhnnConfig,
    pub seg_net: PhnnConfig,
    pub discriminator: DiscriminatorConfig,
    pub disc_source_input: DiscSourceInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ugda,
            ps_fraction: 1.0,
            seed: 0,
            lr_main: 3e-3,
            lr_disc: 3e-4,
            plateau_factor: 0.1,
            plateau_patience: 15,
            pretrain_max_epochs: 60,
            adapt_epochs: 20,
            batch_source: 2,
            batch_target: 2,
            losses: LossWeights::default(),
            model_shape: [32, 32, 16],
            sigma_vox: DEFAULT_SIGMA_VOX,
            window_hu: DEFAULT_WINDOW_HU,
            threshold: 0.5,
            heatmap_net: PhnnConfig::heatmap(),
            seg_net: PhnnConfig::segmentation(),
            discriminator: DiscriminatorConfig::joint(),
            disc_source_input: DiscSourceInput::Pred,
        }
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
        .with_variant(variant)
    }

    /// Switch variant, keeping the discriminator's input width consistent.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.discriminator.in_channels = if variant.joint_discriminator() { 2 } else { 1 };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::invalid("plateau patience must be >= 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid("plateau factor must lie in (0, 1)"));
        }
        if !(self.ps_fraction > 0.0 && self.ps_fraction <= 1.0) {
            return Err(Error::invalid(format!("ps_fraction must lie in (0, 1], got {}", self.ps_fraction)));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.sigma_vox > 0.0) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold must lie in (0, 1)"));
        }
        self.losses.validate()?;
        self.heatmap_net.validate()?;
        self.seg_net.validate()?;
        self.discriminator.validate()?;
        let m = self.seg_net.stride_product().max(self.heatmap_net.stride_product());
        if self.model_shape.iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::invalid(format!(
                "model grid {:?} must be divisible by the stride product {m}",
                self.model_shape
            )));
        }
        let want = if self.variant.joint_discriminator() { 2 } else { 1 };
        if self.variant.adapts() && self.discriminator.in_channels != want {
            return Err(Error::invalid(format!(
                "{} needs a discriminator with {want} input channels",
                self.variant
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_main, 0.003);
        assert_eq!(c.lr_disc, 0.0003);
        assert_eq!(c.plateau_factor, 0.1);
        assert_eq!(c.plateau_patience, 15);
        assert_eq!(c.losses.lambda_adv, 0.0001);
        assert_eq!(c.sigma_vox, 5.0);
        c.validate().unwrap();
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("gan".parse::<Variant>().is_err());
    }

    #[test]
    fn discriminator_width_follows_variant() {
        assert_eq!(TrainConfig::for_variant(Variant::Ugda).discriminator.in_channels, 2);
        assert_eq!(TrainConfig::for_variant(Variant::AdaMaskWithPs).discriminator.in_channels, 1);
        let mut bad = TrainConfig::for_variant(Variant::AdaMaskNoPs);
        bad.discriminator.in_channels = 2;
        assert!(bad.validate().is_err());
    }
}
