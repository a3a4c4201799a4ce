//! Ground-truth scene description: humans and the parts that make them up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Human,
    Part,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthInstance {
    pub kind: InstanceKind,
    /// Zero-based class; humans use class 0.
    pub category: u32,
    /// Index of the owning human within the scene (parts only).
    pub parent: Option<usize>,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthScene {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<GroundTruthInstance>,
}

/// One annotated person as seen by the evaluation code.
#[derive(Clone, Debug, PartialEq)]
pub struct GtHuman {
    pub human_mask: BinaryMask,
    /// `(category, mask)` pairs sorted by category, each mask the union of
    /// that person's parts of the category.
    pub parts: Vec<(u32, BinaryMask)>,
}

impl GtHuman {
    pub fn new(human_mask: BinaryMask, mut parts: Vec<(u32, BinaryMask)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidValue("ground-truth human has no part categories".into()));
        }
        parts.sort_by_key(|(c, _)| *c);
        for w in parts.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidValue(format!("category {} listed twice", w[0].0)));
            }
        }
        for (_, m) in &parts {
            if m.dims() != human_mask.dims() {
                return Err(Error::dims(&human_mask.dims(), &m.dims()));
            }
        }
        Ok(Self { human_mask, parts })
    }

    pub fn part_mask(&self, category: u32) -> Option<&BinaryMask> {
        self.parts.iter().find(|(c, _)| *c == category).map(|(_, m)| m)
    }
}

impl GroundTruthScene {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            instances: Vec::new(),
        }
    }

    /// Checks mask extents and parent links. With `strict`, also requires
    /// every part to lie inside its parent human.
    pub fn validate(&self, strict: bool) -> Result<()> {
        for (idx, inst) in self.instances.iter().enumerate() {
            if inst.mask.dims() != [self.height, self.width] {
                return Err(Error::dims(&[self.height, self.width], &inst.mask.dims()));
            }
            if inst.mask.is_empty() {
                return Err(Error::InvalidValue(format!("instance {idx} has an empty mask")));
            }
            match (inst.kind, inst.parent) {
                (InstanceKind::Human, None) => {}
                (InstanceKind::Human, Some(_)) => {
                    return Err(Error::InvalidValue(format!("human {idx} has a parent")));
                }
                (InstanceKind::Part, None) => {
                    return Err(Error::InvalidValue(format!("part {idx} has no parent")));
                }
                (InstanceKind::Part, Some(p)) => {
                    let parent = self.instances.get(p).filter(|h| h.kind == InstanceKind::Human).ok_or_else(|| {
                        Error::InvalidValue(format!("part {idx} points at {p}, which is not a human"))
                    })?;
                    if strict && inst.mask.intersection_area(&parent.mask)? != inst.mask.area() {
                        return Err(Error::InvalidValue(format!("part {idx} leaks outside human {p}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn humans(&self) -> impl Iterator<Item = (usize, &GroundTruthInstance)> {
        self.instances.iter().enumerate().filter(|(_, i)| i.kind == InstanceKind::Human)
    }

    pub fn parts_of(&self, human: usize) -> impl Iterator<Item = (usize, &GroundTruthInstance)> {
        self.instances
            .iter()
            .enumerate()
            .filter(move |(_, i)| i.kind == InstanceKind::Part && i.parent == Some(human))
    }

    /// Evaluation view: one [`GtHuman`] per human that owns at least one part.
    pub fn gt_humans(&self) -> Result<Vec<GtHuman>> {
        let mut out = Vec::new();
        for (h, human) in self.humans() {
            let mut parts: Vec<(u32, BinaryMask)> = Vec::new();
            for (_, part) in self.parts_of(h) {
                match parts.iter_mut().find(|(c, _)| *c == part.category) {
                    Some((_, m)) => *m = m.or(&part.mask)?,
                    None => parts.push((part.category, part.mask.clone())),
                }
            }
            if !parts.is_empty() {
                out.push(GtHuman::new(human.mask.clone(), parts)?);
            }
        }
        Ok(out)
    }
}
