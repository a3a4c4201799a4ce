//! Grid label assignment: which grid cells of which pyramid level are
//! responsible for each ground-truth instance.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mass_center_extent, BinaryMask};
use crate::scalar::Real;
use crate::scene::{GroundTruthScene, InstanceKind};

/// Default centre-region scale factor.
pub const DEFAULT_EPSILON: f64 = 0.2;

/// At most this many cells are activated per instance and level.
pub const MAX_ACTIVATED_CELLS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LevelId {
    F1,
    F2,
    F3,
    F4,
    F5,
}

impl std::fmt::Display for LevelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

/// One pyramid level: its grid size, the instance kind it serves and the
/// half-open scale range `[min_scale, max_scale)` it accepts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: LevelId,
    pub grid: usize,
    pub kind: InstanceKind,
    #[serde(default)]
    pub min_scale: Option<f64>,
    #[serde(default)]
    pub max_scale: Option<f64>,
}

impl LevelSpec {
    pub fn accepts(&self, scale: f64) -> bool {
        self.min_scale.is_none_or(|lo| scale >= lo) && self.max_scale.is_none_or(|hi| scale < hi)
    }
}

/// Four part levels with overlapping scale bands and one human level.
pub fn default_levels() -> Vec<LevelSpec> {
    let part = |level, grid, min_scale, max_scale| LevelSpec {
        level,
        grid,
        kind: InstanceKind::Part,
        min_scale,
        max_scale,
    };
    vec![
        part(LevelId::F1, 40, None, Some(96.0)),
        part(LevelId::F2, 36, Some(48.0), Some(192.0)),
        part(LevelId::F3, 24, Some(96.0), Some(384.0)),
        part(LevelId::F4, 16, Some(192.0), None),
        LevelSpec {
            level: LevelId::F5,
            grid: 20,
            kind: InstanceKind::Human,
            min_scale: None,
            max_scale: None,
        },
    ]
}

pub fn validate_levels(specs: &[LevelSpec]) -> Result<()> {
    for (i, s) in specs.iter().enumerate() {
        if s.grid == 0 {
            return Err(Error::param("grid", format!("level {} has zero grid cells", s.level)));
        }
        if let (Some(lo), Some(hi)) = (s.min_scale, s.max_scale) {
            if lo >= hi {
                return Err(Error::param("scale_range", format!("level {} has empty range", s.level)));
            }
        }
        if specs[..i].iter().any(|o| o.level == s.level) {
            return Err(Error::param("level", format!("{} listed twice", s.level)));
        }
    }
    Ok(())
}

/// Instance scale: square root of the bounding-box area.
pub fn instance_scale<T: Real>(m: &BinaryMask) -> Result<T> {
    let c = mass_center_extent::<T>(m)?;
    Ok(T::from_count(c.width * c.height).sqrt())
}

/// Levels responsible for an instance of the given kind and scale.
pub fn route_levels(scale: f64, kind: InstanceKind, specs: &[LevelSpec]) -> Result<Vec<LevelId>> {
    if !(scale > 0.0) {
        return Err(Error::param("scale", format!("{scale} is not positive")));
    }
    let levels: Vec<LevelId> = specs
        .iter()
        .filter(|s| s.kind == kind && s.accepts(scale))
        .map(|s| s.level)
        .collect();
    if levels.is_empty() {
        return Err(Error::NoLevelForScale(scale));
    }
    Ok(levels)
}

/// Cells `(i, j)` (row, column) of an `grid x grid` partition of an
/// `image = (height, width)` plane whose rectangle meets the centre region
/// of size `eps*w x eps*h` around `center = (cx, cy)`.
///
/// Cell `(i, j)` covers `[j*cw, (j+1)*cw) x [i*ch, (i+1)*ch)`; the region is
/// closed. More than nine hits are cut down to the nine whose cell centres are
/// nearest the centre, ties in row-major order. The result is row-major.
pub fn activated_cells<T: Real>(
    center: (T, T),
    extent: (T, T),
    grid: usize,
    eps: T,
    image: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    let mut cells = candidate_cells(center, extent, grid, eps, image)?;
    if cells.len() > MAX_ACTIVATED_CELLS {
        let (ch, cw) = cell_size::<T>(grid, image);
        let half = T::lit(0.5);
        let dist = |&(i, j): &(usize, usize)| {
            let dx = (T::from_count(j) + half) * cw - center.0;
            let dy = (T::from_count(i) + half) * ch - center.1;
            dx * dx + dy * dy
        };
        cells.sort_by(|a, b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(b)));
        cells.truncate(MAX_ACTIVATED_CELLS);
        cells.sort_unstable();
    }
    Ok(cells)
}

/// Every cell meeting the centre region, before the nine-cell cap.
pub fn candidate_cells<T: Real>(
    center: (T, T),
    extent: (T, T),
    grid: usize,
    eps: T,
    image: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    if !(eps > T::zero() && eps <= T::one()) {
        return Err(Error::param("epsilon", format!("{eps} is outside (0, 1]")));
    }
    if grid == 0 {
        return Err(Error::param("grid", "must be at least 1"));
    }
    let (ch, cw) = cell_size::<T>(grid, image);
    let half = T::lit(0.5);
    let (hw, hh) = (eps * extent.0 * half, eps * extent.1 * half);
    let cols = overlapping(center.0 - hw, center.0 + hw, cw, grid);
    let rows = overlapping(center.1 - hh, center.1 + hh, ch, grid);
    Ok(rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
        .collect())
}

fn cell_size<T: Real>(grid: usize, image: (usize, usize)) -> (T, T) {
    let g = T::from_count(grid);
    (T::from_count(image.0) / g, T::from_count(image.1) / g)
}

fn overlapping<T: Real>(lo: T, hi: T, cell: T, grid: usize) -> Vec<usize> {
    (0..grid)
        .filter(|&k| {
            let start = T::from_count(k) * cell;
            lo < start + cell && hi >= start
        })
        .collect()
}

/// Cells activated by a mask. Pixel `p` is treated as the unit square
/// `[p, p+1)`, so the mass centre sits half a pixel past the mean index.
pub fn activated_grids<T: Real>(
    m: &BinaryMask,
    grid: usize,
    eps: T,
    image: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    let c = mass_center_extent::<T>(m)?;
    let half = T::lit(0.5);
    activated_cells(
        (c.cx + half, c.cy + half),
        (T::from_count(c.width), T::from_count(c.height)),
        grid,
        eps,
        image,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTarget {
    /// Index of the ground-truth instance within its scene.
    pub instance: usize,
    pub mask: Arc<BinaryMask>,
}

/// Training targets of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTargets {
    pub level: LevelId,
    pub kind: InstanceKind,
    pub grid: usize,
    /// `grid x grid`, row-major; 0 is background, otherwise class + 1.
    pub category_target: Vec<u32>,
    /// Keyed by flattened cell index `i*grid + j`.
    pub mask_targets: BTreeMap<usize, MaskTarget>,
}

impl GridTargets {
    pub fn positives(&self) -> usize {
        self.mask_targets.len()
    }
}

/// Builds targets for every level in `specs`.
///
/// When two instances claim the same cell the smaller-scale one wins, ties
/// going to the earlier instance. The nine-cell cap is applied per instance
/// before collisions are resolved.
pub fn build_targets(scene: &GroundTruthScene, specs: &[LevelSpec], eps: f64) -> Result<Vec<GridTargets>> {
    validate_levels(specs)?;
    scene.validate(false)?;
    let image = (scene.height, scene.width);

    struct Routed {
        scale: f64,
        levels: Vec<LevelId>,
        mask: Arc<BinaryMask>,
    }
    let routed = scene
        .instances
        .iter()
        .map(|inst| {
            let scale = instance_scale::<f64>(&inst.mask)?;
            Ok(Routed {
                scale,
                levels: route_levels(scale, inst.kind, specs)?,
                mask: Arc::new(inst.mask.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    specs
        .par_iter()
        .map(|spec| {
            let cells = spec.grid * spec.grid;
            let mut category_target = vec![0u32; cells];
            let mut claims: BTreeMap<usize, (f64, MaskTarget)> = BTreeMap::new();
            for (idx, r) in routed.iter().enumerate() {
                if !r.levels.contains(&spec.level) {
                    continue;
                }
                for (i, j) in activated_grids(&r.mask, spec.grid, eps, image)? {
                    let cell = i * spec.grid + j;
                    let wins = claims.get(&cell).is_none_or(|(s, _)| r.scale < *s);
                    if wins {
                        category_target[cell] = scene.instances[idx].category + 1;
                        claims.insert(
                            cell,
                            (
                                r.scale,
                                MaskTarget {
                                    instance: idx,
                                    mask: Arc::clone(&r.mask),
                                },
                            ),
                        );
                    }
                }
            }
            Ok(GridTargets {
                level: spec.level,
                kind: spec.kind,
                grid: spec.grid,
                category_target,
                mask_targets: claims.into_iter().map(|(k, (_, t))| (k, t)).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GroundTruthInstance;

    fn rect(h: usize, w: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y)).unwrap()
    }

    #[test]
    fn scale_is_root_of_box_area() {
        assert_eq!(instance_scale::<f64>(&rect(20, 20, 0, 9, 0, 9)).unwrap(), 10.0);
        assert_eq!(instance_scale::<f64>(&rect(20, 20, 3, 6, 1, 9)).unwrap(), 6.0);
        assert!(instance_scale::<f64>(&BinaryMask::zeros(3, 3).unwrap()).is_err());
    }

    #[test]
    fn irregular_scale_matches_bbox_enumeration() {
        let m = BinaryMask::from_fn(30, 30, |x, y| (x * 7 + y * 3) % 11 == 0 && x > 4 && y < 21).unwrap();
        let xs: Vec<usize> = (0..30).flat_map(|y| (0..30).map(move |x| (x, y))).filter(|&(x, y)| m.get(x, y)).map(|p| p.0).collect();
        let ys: Vec<usize> = (0..30).flat_map(|y| (0..30).map(move |x| (x, y))).filter(|&(x, y)| m.get(x, y)).map(|p| p.1).collect();
        let area = (xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1) * (ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1);
        assert_eq!(instance_scale::<f64>(&m).unwrap(), (area as f64).sqrt());
    }

    #[test]
    fn routing_follows_level_table() {
        let specs = default_levels();
        assert_eq!(route_levels(50.0, InstanceKind::Part, &specs).unwrap(), vec![LevelId::F1, LevelId::F2]);
        assert_eq!(route_levels(300.0, InstanceKind::Part, &specs).unwrap(), vec![LevelId::F3, LevelId::F4]);
        assert_eq!(route_levels(10.0, InstanceKind::Part, &specs).unwrap(), vec![LevelId::F1]);
        assert_eq!(route_levels(1000.0, InstanceKind::Part, &specs).unwrap(), vec![LevelId::F4]);
        for s in [1.0, 77.0, 5000.0] {
            assert_eq!(route_levels(s, InstanceKind::Human, &specs).unwrap(), vec![LevelId::F5]);
        }
        assert!(route_levels(0.0, InstanceKind::Part, &specs).is_err());
        let gappy = vec![LevelSpec {
            level: LevelId::F1,
            grid: 4,
            kind: InstanceKind::Part,
            min_scale: Some(10.0),
            max_scale: Some(20.0),
        }];
        assert!(matches!(route_levels(25.0, InstanceKind::Part, &gappy), Err(Error::NoLevelForScale(_))));
    }

    #[test]
    fn tiny_instance_activates_its_own_cell() {
        let mut m = BinaryMask::zeros(100, 100).unwrap();
        m.set(33, 71, true);
        assert_eq!(activated_grids(&m, 10, 0.2f64, (100, 100)).unwrap(), vec![(7, 3)]);
        let mut edge = BinaryMask::zeros(100, 100).unwrap();
        edge.set(10, 0, true);
        assert_eq!(activated_grids(&edge, 10, 0.2f64, (100, 100)).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn centre_region_overlap_example() {
        // region [46,54] x [48,52] on a 10x10 grid of 10px cells
        let cells = activated_cells((50.0f64, 50.0), (40.0, 20.0), 10, 0.2, (100, 100)).unwrap();
        assert_eq!(cells, vec![(4, 4), (4, 5), (5, 4), (5, 5)]);
    }

    #[test]
    fn large_region_is_capped_at_nine_nearest() {
        // region [1,31]^2 touches a 4x4 block
        let cands = candidate_cells((16.0f64, 16.0), (150.0, 150.0), 10, 0.2, (100, 100)).unwrap();
        assert_eq!(cands.len(), 16);
        let cells = activated_cells((16.0f64, 16.0), (150.0, 150.0), 10, 0.2, (100, 100)).unwrap();
        assert_eq!(cells.len(), 9);
        assert_eq!(cells, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)]);
    }

    #[test]
    fn empty_scene_has_no_targets() {
        let scene = GroundTruthScene::empty(64, 64);
        let t = build_targets(&scene, &default_levels(), DEFAULT_EPSILON).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.iter().all(|g| g.category_target.iter().all(|&c| c == 0) && g.mask_targets.is_empty()));
    }

    #[test]
    fn smaller_instance_wins_contested_cell() {
        let big = rect(64, 64, 20, 43, 20, 43);
        let small = rect(64, 64, 28, 35, 28, 35);
        let scene = GroundTruthScene {
            height: 64,
            width: 64,
            instances: vec![
                GroundTruthInstance { kind: InstanceKind::Human, category: 0, parent: None, mask: big.clone() },
                GroundTruthInstance { kind: InstanceKind::Part, category: 2, parent: Some(0), mask: small.clone() },
                GroundTruthInstance { kind: InstanceKind::Part, category: 4, parent: Some(0), mask: big },
            ],
        };
        let t = build_targets(&scene, &default_levels(), DEFAULT_EPSILON).unwrap();
        let f1 = &t[0];
        let contested = activated_grids::<f64>(&small, f1.grid, DEFAULT_EPSILON, (64, 64)).unwrap();
        assert!(!contested.is_empty());
        for (i, j) in contested {
            let cell = i * f1.grid + j;
            assert_eq!(f1.mask_targets[&cell].instance, 1);
            assert_eq!(f1.category_target[cell], 3);
        }
        assert!(f1.mask_targets.values().any(|m| m.instance == 2));
        let f5 = &t[4];
        assert!(f5.mask_targets.values().all(|m| m.instance == 0));
        assert!(f5.mask_targets.keys().all(|&c| f5.category_target[c] == 1));
    }
}
