//! Synthetic scenes and oracle network outputs.
//!
//! Scenes are built on a grid of `block x block` pixel tiles so that masks
//! survive the round trip through quarter-resolution prototypes exactly. A
//! "human" is a vertical stack of rectangular or elliptical parts.
//!
//! Randomness comes from SplitMix64 (`rand_xoshiro::SplitMix64`): integer
//! draws use `lo + next_u64() % (hi - lo + 1)` and unit floats use the top 53
//! bits, `(next_u64() >> 11) * 2^-53`. Batch seeds come from [`split_seed`].

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::assign::{build_targets, GridTargets, LevelId, LevelSpec};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, DenseMap};
use crate::scalar::Real;
use crate::scene::{GroundTruthInstance, GroundTruthScene, InstanceKind};
use crate::umpp::{CategoryGrid, CoefficientGrid, PrototypeBank, DEFAULT_PROTOTYPES};

const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PartShape {
    Rectangle,
    Ellipse,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of the number of humans.
    pub humans: (usize, usize),
    /// Inclusive range of parts per human.
    pub parts_per_human: (usize, usize),
    /// Inclusive range of part width/height in pixels.
    pub part_size: (usize, usize),
    pub shape: PartShape,
    /// Probability that a human is pushed onto its left neighbour.
    pub occlusion: f64,
    /// Number of part classes.
    pub categories: u32,
    /// Tile size; every mask edge falls on a multiple of it.
    pub block: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            humans: (2, 6),
            parts_per_human: (2, 5),
            part_size: (16, 28),
            shape: PartShape::Mixed,
            occlusion: 0.0,
            categories: 6,
            block: 4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || !self.height.is_multiple_of(self.block) || !self.width.is_multiple_of(self.block) || self.height == 0 || self.width == 0 {
            return Err(Error::param(
                "image_size",
                format!("{}x{} is not a nonzero multiple of {}", self.height, self.width, self.block),
            ));
        }
        if self.categories == 0 {
            return Err(Error::param("categories", "must be at least 1"));
        }
        for (name, (lo, hi)) in [("humans", self.humans), ("parts_per_human", self.parts_per_human), ("part_size", self.part_size)] {
            if lo > hi {
                return Err(Error::param(name, format!("empty range {lo}..={hi}")));
            }
        }
        if self.parts_per_human.0 == 0 {
            return Err(Error::param("parts_per_human", "must be at least 1"));
        }
        if self.part_size.0 < self.block {
            return Err(Error::param("part_size", format!("smaller than one {}px block", self.block)));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(Error::param("occlusion", format!("{} is not a probability", self.occlusion)));
        }
        Ok(())
    }
}

/// Seed of the `index`-th scene of a batch started from `base`: the first
/// SplitMix64 output after seeding with `base ^ (index * 0x9E3779B97F4A7C15)`.
pub fn split_seed(base: u64, index: u64) -> u64 {
    SplitMix64::seed_from_u64(base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

pub(crate) struct Draw(SplitMix64);

impl Draw {
    pub(crate) fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    /// Uniform in `lo..=hi`.
    pub(crate) fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as usize
    }

    /// Uniform in `[0, 1)`.
    pub(crate) fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

struct PartPlan {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    ellipse: bool,
    category: u32,
}

/// Generates a scene. Humans are laid out left to right in equal slots, each
/// a vertical stack of pairwise disjoint parts. Without occlusion the humans
/// are disjoint; with it, an occluded human loses the pixels of the humans
/// placed before it.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GroundTruthScene> {
    cfg.validate()?;
    let b = cfg.block;
    let (hb, wb) = (cfg.height / b, cfg.width / b);
    let (smin, smax) = (cfg.part_size.0.div_ceil(b), (cfg.part_size.1 / b).max(cfg.part_size.0.div_ceil(b)));
    let mut rng = Draw::new(cfg.seed);

    for _ in 0..MAX_ATTEMPTS {
        let n = rng.range(cfg.humans.0, cfg.humans.1);
        if n == 0 {
            return Ok(GroundTruthScene::empty(cfg.height, cfg.width));
        }
        let slot = wb / n;
        if slot < smax + 2 {
            continue;
        }
        let mut humans: Vec<Vec<PartPlan>> = Vec::with_capacity(n);
        let mut feasible = true;
        for h in 0..n {
            let count = rng.range(cfg.parts_per_human.0, cfg.parts_per_human.1);
            let heights: Vec<usize> = (0..count).map(|_| rng.range(smin, smax)).collect();
            let total: usize = heights.iter().sum();
            if total + 2 > hb {
                feasible = false;
                break;
            }
            let mut column = h * slot + (slot - smax) / 2;
            if h > 0 && rng.unit() < cfg.occlusion {
                column -= slot / 2;
            }
            let mut y = rng.range(1, hb - 1 - total);
            let mut plan = Vec::with_capacity(count);
            for ph in heights {
                let w = rng.range(smin, smax);
                let ellipse = match cfg.shape {
                    PartShape::Rectangle => false,
                    PartShape::Ellipse => true,
                    PartShape::Mixed => rng.unit() < 0.5,
                };
                let category = rng.range(0, cfg.categories as usize - 1) as u32;
                plan.push(PartPlan {
                    x0: column + (smax - w) / 2,
                    y0: y,
                    w,
                    h: ph,
                    ellipse,
                    category,
                });
                y += ph;
            }
            humans.push(plan);
        }
        if !feasible {
            continue;
        }
        return rasterize(cfg, &humans);
    }
    Err(Error::PlacementFailed { attempts: MAX_ATTEMPTS })
}

fn rasterize(cfg: &SceneConfig, humans: &[Vec<PartPlan>]) -> Result<GroundTruthScene> {
    let b = cfg.block;
    let (hb, wb) = (cfg.height / b, cfg.width / b);
    let mut scene = GroundTruthScene::empty(cfg.height, cfg.width);
    let mut occupied = BinaryMask::zeros(cfg.height, cfg.width)?;
    for plan in humans {
        let mut parts = Vec::new();
        for p in plan {
            let (cx, cy) = (p.x0 as f64 + p.w as f64 / 2.0, p.y0 as f64 + p.h as f64 / 2.0);
            let (rx, ry) = (p.w as f64 / 2.0, p.h as f64 / 2.0);
            let blocks = BinaryMask::from_fn(hb, wb, |x, y| {
                if x < p.x0 || x >= p.x0 + p.w || y < p.y0 || y >= p.y0 + p.h {
                    return false;
                }
                if !p.ellipse {
                    return true;
                }
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            })?;
            let visible = blocks.upsample(b)?.and_not(&occupied)?;
            if !visible.is_empty() {
                parts.push((p.category, visible));
            }
        }
        if parts.is_empty() {
            continue;
        }
        let mut human = BinaryMask::zeros(cfg.height, cfg.width)?;
        for (_, m) in &parts {
            human = human.or(m)?;
        }
        occupied = occupied.or(&human)?;
        let parent = scene.instances.len();
        scene.instances.push(GroundTruthInstance {
            kind: InstanceKind::Human,
            category: 0,
            parent: None,
            mask: human,
        });
        for (category, mask) in parts {
            scene.instances.push(GroundTruthInstance {
                kind: InstanceKind::Part,
                category,
                parent: Some(parent),
                mask,
            });
        }
    }
    scene.validate(true)?;
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    /// Number of prototypes `K`.
    pub prototypes: usize,
    /// Image pixels per prototype pixel along each axis.
    pub stride: usize,
    /// Prototype logit magnitude.
    pub logit: f64,
    /// Part classes; defaults to one more than the largest part class present.
    pub part_classes: Option<u32>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            prototypes: DEFAULT_PROTOTYPES,
            stride: 4,
            logit: 10.0,
            part_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutputs<T> {
    pub level: LevelId,
    pub kind: InstanceKind,
    pub coefficients: CoefficientGrid<T>,
    pub categories: CategoryGrid<T>,
}

/// Network outputs fabricated from a ground-truth scene.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutputs<T> {
    pub prototypes: PrototypeBank<T>,
    pub levels: Vec<LevelOutputs<T>>,
    /// Image pixels per prototype pixel.
    pub stride: usize,
}

/// Fabricates outputs that reproduce `scene`: prototype `k` is `±logit` on
/// instance `k`'s mask, coefficients are one-hot on each activated cell's
/// owner and the owner's class scores 1 there.
pub fn oracle_outputs<T: Real>(
    scene: &GroundTruthScene,
    specs: &[LevelSpec],
    eps: f64,
    cfg: &OracleConfig,
) -> Result<OracleOutputs<T>> {
    let targets = build_targets(scene, specs, eps)?;
    oracle_from_targets(scene, &targets, cfg)
}

pub fn oracle_from_targets<T: Real>(
    scene: &GroundTruthScene,
    targets: &[GridTargets],
    cfg: &OracleConfig,
) -> Result<OracleOutputs<T>> {
    let k = cfg.prototypes;
    if scene.instances.len() > k {
        return Err(Error::TooManyInstances {
            instances: scene.instances.len(),
            capacity: k,
        });
    }
    let s = cfg.stride;
    if s == 0 || !scene.height.is_multiple_of(s) || !scene.width.is_multiple_of(s) {
        return Err(Error::param("stride", format!("{s} does not divide {}x{}", scene.height, scene.width)));
    }
    let (h, w) = (scene.height / s, scene.width / s);
    let part_classes = cfg.part_classes.unwrap_or_else(|| {
        scene
            .instances
            .iter()
            .filter(|i| i.kind == InstanceKind::Part)
            .map(|i| i.category + 1)
            .max()
            .unwrap_or(1)
    }) as usize;

    let (hi, lo) = (T::lit(cfg.logit), T::lit(-cfg.logit));
    let mut protos = vec![T::zero(); k * h * w];
    for (idx, inst) in scene.instances.iter().enumerate() {
        let small = inst.mask.downsample(s)?;
        for (dst, &v) in protos[idx * h * w..(idx + 1) * h * w].iter_mut().zip(small.data()) {
            *dst = if v != 0 { hi } else { lo };
        }
    }

    let mut levels = Vec::with_capacity(targets.len());
    for t in targets {
        let cells = t.grid * t.grid;
        let classes = match t.kind {
            InstanceKind::Human => 1,
            InstanceKind::Part => part_classes,
        };
        let mut coef = vec![T::zero(); k * cells];
        let mut cat = vec![T::zero(); classes * cells];
        for (&cell, target) in &t.mask_targets {
            coef[target.instance * cells + cell] = T::one();
            let class = t.category_target[cell] as usize - 1;
            if class >= classes {
                return Err(Error::param("part_classes", format!("class {class} exceeds {classes}")));
            }
            cat[class * cells + cell] = T::one();
        }
        levels.push(LevelOutputs {
            level: t.level,
            kind: t.kind,
            coefficients: CoefficientGrid::new(DenseMap::new(vec![k, t.grid, t.grid], coef)?)?,
            categories: CategoryGrid::new(DenseMap::new(vec![classes, t.grid, t.grid], cat)?)?,
        });
    }
    Ok(OracleOutputs {
        prototypes: PrototypeBank::new(DenseMap::new(vec![k, h, w], protos)?)?,
        levels,
        stride: s,
    })
}

/// Adds uniform noise in `[-noise, noise]` to every coefficient and category
/// score (scores are clamped back into `[0, 1]`). Prototypes are untouched.
pub fn perturb<T: Real>(outputs: &OracleOutputs<T>, noise: f64, seed: u64) -> Result<OracleOutputs<T>> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::param("noise", format!("{noise} is not a finite non-negative number")));
    }
    let mut out = outputs.clone();
    if noise == 0.0 {
        return Ok(out);
    }
    let mut rng = Draw::new(seed);
    let mut jitter = || T::lit((rng.unit() * 2.0 - 1.0) * noise);
    for level in &mut out.levels {
        for v in level.coefficients.map_mut().data_mut() {
            *v = *v + jitter();
        }
        let mut cat = level.categories.map().clone();
        for v in cat.data_mut() {
            *v = (*v + jitter()).max(T::zero()).min(T::one());
        }
        level.categories = CategoryGrid::new(cat)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::default_levels;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig { seed: 42, ..Default::default() };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        let other = SceneConfig { seed: 43, ..Default::default() };
        assert_ne!(generate_scene(&cfg).unwrap(), generate_scene(&other).unwrap());
    }

    #[test]
    fn single_part_humans_equal_their_part() {
        let cfg = SceneConfig { seed: 3, parts_per_human: (1, 1), ..Default::default() };
        let scene = generate_scene(&cfg).unwrap();
        for (h, human) in scene.humans() {
            let parts: Vec<_> = scene.parts_of(h).collect();
            assert_eq!(parts.len(), 1);
            assert_eq!(parts[0].1.mask, human.mask);
        }
    }

    #[test]
    fn parts_are_disjoint_and_contained() {
        for seed in 0..20 {
            let cfg = SceneConfig { seed, shape: PartShape::Mixed, occlusion: 0.5, ..Default::default() };
            let scene = generate_scene(&cfg).unwrap();
            scene.validate(true).unwrap();
            for (h, human) in scene.humans() {
                let parts: Vec<_> = scene.parts_of(h).map(|(_, p)| &p.mask).collect();
                let total: usize = parts.iter().map(|m| m.area()).sum();
                assert_eq!(total, human.mask.area());
            }
        }
    }

    #[test]
    fn infeasible_layout_fails() {
        let cfg = SceneConfig { width: 32, humans: (4, 4), ..Default::default() };
        assert!(matches!(generate_scene(&cfg), Err(Error::PlacementFailed { .. })));
        assert!(SceneConfig { height: 30, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn split_seed_is_stable() {
        assert_ne!(split_seed(7, 0), split_seed(7, 1));
        assert_eq!(split_seed(7, 5), split_seed(7, 5));
    }

    #[test]
    fn empty_scene_oracle_is_all_zero() {
        let scene = GroundTruthScene::empty(64, 64);
        let out = oracle_outputs::<f64>(&scene, &default_levels(), 0.2, &OracleConfig::default()).unwrap();
        assert!(out.levels.iter().all(|l| l.categories.map().data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn oracle_rejects_too_many_instances() {
        let scene = generate_scene(&SceneConfig { seed: 1, ..Default::default() }).unwrap();
        let cfg = OracleConfig { prototypes: 1, ..Default::default() };
        assert!(matches!(
            oracle_outputs::<f64>(&scene, &default_levels(), 0.2, &cfg),
            Err(Error::TooManyInstances { .. })
        ));
    }

    #[test]
    fn perturb_zero_and_determinism() {
        let scene = generate_scene(&SceneConfig { seed: 2, ..Default::default() }).unwrap();
        let cfg = OracleConfig { prototypes: scene.instances.len(), ..Default::default() };
        let out = oracle_outputs::<f32>(&scene, &default_levels(), 0.2, &cfg).unwrap();
        assert_eq!(perturb(&out, 0.0, 9).unwrap(), out);
        let a = perturb(&out, 0.05, 9).unwrap();
        assert_eq!(a, perturb(&out, 0.05, 9).unwrap());
        assert_ne!(a, out);
        assert_ne!(a, perturb(&out, 0.05, 10).unwrap());
    }
}
