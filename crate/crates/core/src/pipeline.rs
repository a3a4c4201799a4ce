//! End-to-end inference: prototypes and per-level grids to parsed people.

use crate::assign::LevelSpec;
use crate::error::Result;
use crate::grouping::{run_pipeline, GroupingConfig, ParsingResult, ScoredInstance};
use crate::scalar::Real;
use crate::scene::{GroundTruthScene, InstanceKind};
use crate::synth::{oracle_outputs, OracleConfig, OracleOutputs};
use crate::umpp::{combine_masks, extract_candidates, DEFAULT_MASK_THRESHOLD};

/// Part and human candidates at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates<T> {
    pub parts: Vec<ScoredInstance<T>>,
    pub humans: Vec<ScoredInstance<T>>,
}

/// Decodes every level into scored candidates.
///
/// Candidates at or below the branch score floor (`s_part` or `s_human`) are
/// dropped before masks are upsampled by the output stride; grouping would
/// discard them anyway.
pub fn synthesize_candidates<T: Real>(outputs: &OracleOutputs<T>, cfg: &GroupingConfig) -> Result<Candidates<T>> {
    let mut out = Candidates {
        parts: Vec::new(),
        humans: Vec::new(),
    };
    let t_bin = T::lit(DEFAULT_MASK_THRESHOLD);
    for level in &outputs.levels {
        let masks = combine_masks(&outputs.prototypes, &level.coefficients)?;
        let found = extract_candidates(&level.categories, &masks, t_bin)?;
        drop(masks);
        let (floor, sink) = match level.kind {
            InstanceKind::Part => (T::lit(cfg.s_part), &mut out.parts),
            InstanceKind::Human => (T::lit(cfg.s_human), &mut out.humans),
        };
        for c in found.into_iter().filter(|c| c.score > floor) {
            let mask = c.mask.upsample(outputs.stride)?;
            sink.push(ScoredInstance::new(mask, c.category, c.score)?);
        }
    }
    Ok(out)
}

/// Candidates followed by grouping.
pub fn parse_outputs<T: Real>(outputs: &OracleOutputs<T>, cfg: &GroupingConfig) -> Result<Vec<ParsingResult<T>>> {
    let c = synthesize_candidates(outputs, cfg)?;
    run_pipeline(&c.parts, &c.humans, cfg)
}

/// Oracle outputs of `scene`, parsed back into people.
pub fn round_trip<T: Real>(
    scene: &GroundTruthScene,
    specs: &[LevelSpec],
    eps: f64,
    oracle: &OracleConfig,
    grouping: &GroupingConfig,
) -> Result<Vec<ParsingResult<T>>> {
    parse_outputs(&oracle_outputs::<T>(scene, specs, eps, oracle)?, grouping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{default_levels, DEFAULT_EPSILON};
    use crate::mask::BinaryMask;
    use crate::scene::GroundTruthInstance;

    #[test]
    fn single_human_single_part_is_exact() {
        let mask = BinaryMask::from_fn(64, 64, |x, y| (20..40).contains(&x) && (12..36).contains(&y)).unwrap();
        let scene = GroundTruthScene {
            height: 64,
            width: 64,
            instances: vec![
                GroundTruthInstance { kind: InstanceKind::Human, category: 0, parent: None, mask: mask.clone() },
                GroundTruthInstance { kind: InstanceKind::Part, category: 3, parent: Some(0), mask: mask.clone() },
            ],
        };
        let oracle = OracleConfig { prototypes: 2, ..Default::default() };
        let out = round_trip::<f64>(&scene, &default_levels(), DEFAULT_EPSILON, &oracle, &GroupingConfig::default()).unwrap();
        // duplicate cells of the same human survive gaussian decay at lower scores
        assert!(!out.is_empty());
        assert!(out[0].parsing_score > 0.99);
        assert!(out[1..].iter().all(|r| r.parsing_score < out[0].parsing_score));
        for r in &out {
            assert_eq!(r.human_mask, mask);
            assert_eq!(r.category_map.labels(), vec![4]);
        }
    }

    #[test]
    fn empty_scene_has_no_candidates() {
        let scene = GroundTruthScene::empty(64, 64);
        let oracle = OracleConfig { prototypes: 1, ..Default::default() };
        let outputs = oracle_outputs::<f32>(&scene, &default_levels(), DEFAULT_EPSILON, &oracle).unwrap();
        let c = synthesize_candidates(&outputs, &GroupingConfig::default()).unwrap();
        assert!(c.parts.is_empty() && c.humans.is_empty());
    }
}
