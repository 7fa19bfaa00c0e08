//! Model geometry profiles.
//!
//! `Desk` is the trainable configuration: 32×32 images, three small expert
//! encoders that all land on 16 post-reduction tokens, a 64-wide decoder.
//! `FullScale` reproduces the full-scale token arithmetic of the
//! reference architecture (1024→256 unshuffled, 196 kept, 900→576 resized)
//! so the reduction math can be checked at real dimensions; it is not meant
//! to be trained at desk scale.

use crate::error::{Error, Result};
use crate::vision::{EncoderSpec, PrefitConfig, Reduction};

pub const EXPERT_GENERAL: usize = 0;
pub const EXPERT_FORMULA: usize = 1;
pub const EXPERT_CHART: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileId {
    Desk,
    FullScale,
}

impl ProfileId {
    pub fn as_u8(self) -> u8 {
        match self {
            ProfileId::Desk => 0,
            ProfileId::FullScale => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<ProfileId> {
        match v {
            0 => Ok(ProfileId::Desk),
            1 => Ok(ProfileId::FullScale),
            _ => Err(Error::Config(format!("unknown profile tag {v}"))),
        }
    }

    pub fn parse(s: &str) -> Result<ProfileId> {
        match s {
            "desk" => Ok(ProfileId::Desk),
            "full-scale" => Ok(ProfileId::FullScale),
            _ => Err(Error::Config(format!(
                "unknown profile {s:?} (expected desk or full-scale)"
            ))),
        }
    }
}

impl std::fmt::Display for ProfileId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProfileId::Desk => "desk",
            ProfileId::FullScale => "full-scale",
        })
    }
}

/// Architecture-level hyperparameters shared by init, training and eval.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub id: ProfileId,
    /// One spec per expert, indexed by expert id (0 general, 1 formula,
    /// 2 chart).
    pub encoders: Vec<EncoderSpec>,
    pub channels: usize,
    pub d_llm: usize,
    pub heads: usize,
    pub decoder_blocks: usize,
    pub context: usize,
    pub prefit: PrefitConfig,
}

impl Profile {
    pub fn new(id: ProfileId) -> Profile {
        match id {
            ProfileId::Desk => Profile {
                id,
                encoders: vec![
                    EncoderSpec {
                        name: "general".into(),
                        resolution: 32,
                        patch: 4, // 8×8 grid
                        width: 32,
                        reduction: Reduction::PixelUnshuffle(2), // → 16 tokens ×128
                    },
                    EncoderSpec {
                        name: "formula".into(),
                        resolution: 32,
                        patch: 8, // 4×4 grid, one patch per glyph cell
                        width: 48,
                        reduction: Reduction::None, // → 16 tokens ×48
                    },
                    EncoderSpec {
                        name: "chart".into(),
                        resolution: 30,
                        patch: 5, // 6×6 grid
                        width: 40,
                        reduction: Reduction::Bilinear { h: 4, w: 4 }, // → 16 ×40
                    },
                ],
                channels: 3,
                d_llm: 64,
                heads: 1,
                decoder_blocks: 2,
                context: 64,
                prefit: PrefitConfig::desk(),
            },
            ProfileId::FullScale => Profile {
                id,
                encoders: vec![
                    EncoderSpec {
                        name: "general".into(),
                        resolution: 448,
                        patch: 14, // 32×32 grid = 1024 raw tokens
                        width: 1024,
                        reduction: Reduction::PixelUnshuffle(2), // → 256 ×4096
                    },
                    EncoderSpec {
                        name: "formula".into(),
                        resolution: 420,
                        patch: 30, // 14×14 grid = 196 tokens, kept as-is
                        width: 768,
                        reduction: Reduction::None,
                    },
                    EncoderSpec {
                        name: "chart".into(),
                        resolution: 960,
                        patch: 32, // 30×30 grid = 900 raw tokens
                        width: 1024,
                        reduction: Reduction::Bilinear { h: 24, w: 24 }, // → 576
                    },
                ],
                channels: 3,
                d_llm: 64,
                heads: 1,
                decoder_blocks: 2,
                context: 640,
                prefit: PrefitConfig::desk(),
            },
        }
    }

    pub fn experts(&self) -> usize {
        self.encoders.len()
    }

    /// Router input width: the general encoder's (pre-reduction) feature
    /// width, since routing pools the general features.
    pub fn router_width(&self) -> usize {
        self.encoders[EXPERT_GENERAL].width
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::Config("profile: no encoders".into()));
        }
        for spec in &self.encoders {
            spec.validate()?;
        }
        for spec in &self.encoders {
            let visual = spec.post_tokens();
            // visual + BOS + a short caption + EOS must fit the context
            if visual + 8 > self.context {
                return Err(Error::Config(format!(
                    "profile: {} visual tokens leave no room in context {}",
                    visual, self.context
                )));
            }
        }
        if self.d_llm == 0 || self.d_llm % self.heads != 0 {
            return Err(Error::Config(format!(
                "profile: width {} not divisible by {} heads",
                self.d_llm, self.heads
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_profiles_validate() {
        Profile::new(ProfileId::Desk).validate().unwrap();
        Profile::new(ProfileId::FullScale).validate().unwrap();
    }

    #[test]
    fn desk_experts_share_the_post_reduction_token_count() {
        let p = Profile::new(ProfileId::Desk);
        for spec in &p.encoders {
            assert_eq!(spec.post_tokens(), 16, "{}", spec.name);
        }
        // Per-expert post-reduction widths feeding the adapters.
        assert_eq!(p.encoders[0].post_width(), 128);
        assert_eq!(p.encoders[1].post_width(), 48);
        assert_eq!(p.encoders[2].post_width(), 40);
    }

    #[test]
    fn full_scale_token_counts_match_the_reference_arithmetic() {
        let p = Profile::new(ProfileId::FullScale);
        assert_eq!(p.encoders[0].raw_tokens(), 1024);
        assert_eq!(p.encoders[0].post_tokens(), 256);
        assert_eq!(p.encoders[0].post_width(), 4096);
        assert_eq!(p.encoders[1].post_tokens(), 196);
        assert_eq!(p.encoders[2].raw_tokens(), 900);
        assert_eq!(p.encoders[2].post_tokens(), 576);
    }

    #[test]
    fn profile_ids_round_trip() {
        for id in [ProfileId::Desk, ProfileId::FullScale] {
            assert_eq!(ProfileId::from_u8(id.as_u8()).unwrap(), id);
            assert_eq!(ProfileId::parse(&id.to_string()).unwrap(), id);
        }
        assert!(ProfileId::parse("big").is_err());
        assert!(ProfileId::from_u8(9).is_err());
    }
}
