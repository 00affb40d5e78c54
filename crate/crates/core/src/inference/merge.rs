//! Score-ordered stitching of instance masks onto a semantic map.

use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::numerics::{resize_bilinear, FeatureMap};
use crate::panoptic::{PanopticMap, Segment, VOID};

use super::InstanceResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub score_min: f64,
    /// An instance losing more than this fraction of its area to earlier ones is dropped.
    pub overlap_discard: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            score_min: 0.45,
            overlap_discard: 0.40,
        }
    }
}

/// Per-pixel category ids at input resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMap {
    pub width: usize,
    pub height: usize,
    pub categories: Vec<u32>,
}

/// Argmax over the semantic logits after resizing them to `height` x `width`.
/// Channel `k` is category `k + 1`.
pub fn semantic_category_map(
    logits: &FeatureMap,
    height: usize,
    width: usize,
) -> Result<CategoryMap, ModelError> {
    let full = resize_bilinear(logits, height, width)?;
    let plane = height * width;
    let categories = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..full.channels() {
                if full.data()[c * plane + p] > full.data()[best * plane + p] {
                    best = c;
                }
            }
            best as u32 + 1
        })
        .collect();
    Ok(CategoryMap {
        width,
        height,
        categories,
    })
}

/// Stitches instances in descending score order, then fills the rest from
/// the stuff categories of `semantic`. Thing categories left over become void.
pub fn panoptic_merge(
    instances: &[InstanceResult],
    semantic: &CategoryMap,
    num_thing_classes: usize,
    cfg: &MergeConfig,
) -> PanopticMap {
    let (w, h) = (semantic.width, semantic.height);
    let mut ids = vec![VOID; w * h];
    let mut segments = Vec::new();

    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .score
            .total_cmp(&instances[a].score)
            .then(a.cmp(&b))
    });
    for i in order {
        let inst = &instances[i];
        if inst.score < cfg.score_min {
            continue;
        }
        let total = inst.mask.count();
        let free: Vec<usize> = inst
            .mask
            .data()
            .iter()
            .enumerate()
            .filter(|&(p, &m)| m && ids[p] == VOID)
            .map(|(p, _)| p)
            .collect();
        if total == 0 || (free.len() as f64) < (1.0 - cfg.overlap_discard) * total as f64 {
            continue;
        }
        let id = segments.len() as u16 + 1;
        for p in free {
            ids[p] = id;
        }
        segments.push(Segment {
            id,
            category: inst.class_id,
            is_thing: true,
            instance: Some(i),
            area: 0,
            score: Some(inst.score),
        });
    }

    let mut stuff_ids = std::collections::BTreeMap::new();
    for (p, &cat) in semantic.categories.iter().enumerate() {
        if ids[p] != VOID || cat as usize <= num_thing_classes {
            continue;
        }
        let next = (segments.len() + stuff_ids.len()) as u16 + 1;
        ids[p] = *stuff_ids.entry(cat).or_insert(next);
    }
    let mut stuff: Vec<(u32, u16)> = stuff_ids.into_iter().collect();
    stuff.sort_by_key(|&(_, id)| id);
    segments.extend(stuff.into_iter().map(|(category, id)| Segment {
        id,
        category,
        is_thing: false,
        instance: None,
        area: 0,
        score: None,
    }));
    PanopticMap::new(w, h, ids, segments).expect("merge produces consistent segment ids")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;
    use crate::model::Level;
    use proptest::prelude::*;

    const C: usize = 3;

    fn inst(class_id: u32, score: f64, mask: BinaryMask) -> InstanceResult {
        let area = mask.count();
        InstanceResult {
            class_id,
            score,
            level: Level::P3,
            x: 0,
            y: 0,
            soft: FeatureMap::zeros(1, mask.height(), mask.width(), 1),
            bbox: mask.tight_box(),
            empty: area == 0,
            area,
            mask,
        }
    }

    fn stuff_map(w: usize, h: usize) -> CategoryMap {
        // left half stuff 4, right half stuff 5
        CategoryMap {
            width: w,
            height: h,
            categories: (0..w * h)
                .map(|p| if p % w < w / 2 { 4 } else { 5 })
                .collect(),
        }
    }

    fn categories(m: &PanopticMap) -> Vec<u32> {
        (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
            .map(|(x, y)| m.category_at(x, y))
            .collect()
    }

    #[test]
    fn low_score_instance_is_discarded() {
        let sem = stuff_map(8, 8);
        let out = panoptic_merge(
            &[inst(
                1,
                0.4,
                BinaryMask::from_fn(8, 8, |x, y| x < 3 && y < 3),
            )],
            &sem,
            C,
            &MergeConfig::default(),
        );
        assert_eq!(categories(&out), sem.categories);
        assert!(out.segments().iter().all(|s| !s.is_thing));
    }

    #[test]
    fn no_instances_gives_the_stuff_map() {
        let sem = stuff_map(6, 4);
        let out = panoptic_merge(&[], &sem, C, &MergeConfig::default());
        assert_eq!(categories(&out), sem.categories);
        assert_eq!(out.segments().len(), 2);
        assert!(out.check_bookkeeping());
    }

    #[test]
    fn half_covered_lower_score_instance_is_dropped() {
        // A covers columns 0..4, B covers 2..6 on rows 0..2: half of B lies under A
        let a = BinaryMask::from_fn(8, 8, |x, y| x < 4 && y < 2);
        let b = BinaryMask::from_fn(8, 8, |x, y| (2..6).contains(&x) && y < 2);
        let sem = stuff_map(8, 8);
        let out = panoptic_merge(
            &[inst(2, 0.7, b), inst(1, 0.9, a.clone())],
            &sem,
            C,
            &MergeConfig::default(),
        );
        let things: Vec<&Segment> = out.segments().iter().filter(|s| s.is_thing).collect();
        assert_eq!(things.len(), 1);
        assert_eq!(things[0].instance, Some(1));
        assert_eq!(things[0].area, 8);
        let mut expected = sem.categories.clone();
        for (p, &m) in a.data().iter().enumerate() {
            if m {
                expected[p] = 1;
            }
        }
        assert_eq!(categories(&out), expected);
    }

    #[test]
    fn small_overlap_goes_to_higher_score() {
        // B loses 2 of 8 pixels (25%) and survives with the rest
        let a = BinaryMask::from_fn(8, 8, |x, y| x < 4 && y < 2);
        let b = BinaryMask::from_fn(8, 8, |x, y| (3..7).contains(&x) && y < 2);
        let out = panoptic_merge(
            &[inst(1, 0.9, a), inst(2, 0.5, b)],
            &stuff_map(8, 8),
            C,
            &MergeConfig::default(),
        );
        assert_eq!(out.segment(1).unwrap().area, 8);
        assert_eq!(out.segment(2).unwrap().area, 6);
        assert_eq!(out.category_at(3, 0), 1);
        assert_eq!(out.category_at(4, 1), 2);
    }

    #[test]
    fn thing_pixels_without_an_instance_become_void() {
        let mut sem = stuff_map(4, 4);
        sem.categories[5] = 2;
        let out = panoptic_merge(&[], &sem, C, &MergeConfig::default());
        assert_eq!(out.void_count(), 1);
        assert_eq!(out.id_at(1, 1), VOID);
    }

    #[test]
    fn semantic_argmax() {
        let mut logits = FeatureMap::zeros(5, 2, 2, 4);
        for y in 0..2 {
            for x in 0..2 {
                logits.set(3, y, x, 1.0);
            }
        }
        let map = semantic_category_map(&logits, 8, 8).unwrap();
        assert!(map.categories.iter().all(|&c| c == 4));
    }

    proptest! {
        #[test]
        fn merge_keeps_one_owner_per_pixel(
            rects in proptest::collection::vec((0usize..10, 0usize..10, 1usize..8, 1usize..8, 0.0f64..1.0, 1u32..4), 0..8),
            sem in proptest::collection::vec(1u32..6, 100),
        ) {
            let instances: Vec<InstanceResult> = rects
                .iter()
                .map(|&(x0, y0, w, h, s, c)| inst(c, s, BinaryMask::from_fn(10, 10, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)))
                .collect();
            let out = panoptic_merge(&instances, &CategoryMap { width: 10, height: 10, categories: sem }, C, &MergeConfig::default());
            prop_assert!(out.check_bookkeeping());
            for s in out.segments().iter().filter(|s| s.is_thing) {
                let i = &instances[s.instance.unwrap()];
                prop_assert!(i.score >= 0.45);
                prop_assert!(s.area as f64 >= 0.6 * i.area as f64);
                prop_assert!(out.segment_mask(s.id).and_not(&i.mask).is_empty());
            }
        }
    }
}
