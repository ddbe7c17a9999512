//! Part-level grounding: area and containment filtering of raw segmenter
//! masks, density clustering of the survivors, centroid labelling and the
//! numbered-mark prompt handed to the reasoner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BinaryMask, Vec2};

/// A mask that contains this many other masks is treated as a container
/// (table, tray, background blob) and dropped.
pub const MAX_CONTAINED: usize = 3;

pub const GROUNDING_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask {index} has no foreground pixels")]
    EmptyMask { index: usize },
    #[error("mask {index} is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("cannot infer image size from an empty mask list")]
    NoMasks,
    #[error("no masks survive filtering; the scene cannot be grounded")]
    EmptyAfterFilter,
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
}

/// Ordered masks over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    width: usize,
    height: usize,
    masks: Vec<BinaryMask>,
}

impl MaskSet {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self, MaskError> {
        let first = masks.first().ok_or(MaskError::NoMasks)?;
        Self::with_size(first.width(), first.height(), masks)
    }

    pub fn with_size(width: usize, height: usize, masks: Vec<BinaryMask>) -> Result<Self, MaskError> {
        for (index, m) in masks.iter().enumerate() {
            if m.width() != width || m.height() != height {
                return Err(MaskError::ShapeMismatch {
                    index,
                    expected: (width, height),
                    got: (m.width(), m.height()),
                });
            }
        }
        Ok(Self {
            width,
            height,
            masks,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn image_area(&self) -> usize {
        self.width * self.height
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&BinaryMask> {
        self.masks.get(i)
    }

    /// Sub-set keeping `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> MaskSet {
        MaskSet {
            width: self.width,
            height: self.height,
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Minimum mask area as a fraction of the image.
    pub alpha: f64,
    /// Maximum mask area as a fraction of the image.
    pub beta: f64,
    /// Fraction of `m_k` that must lie inside `m_j` for `m_k` to count as contained.
    pub containment_overlap: f64,
    /// DBSCAN radius over mask centroids, pixels.
    pub cluster_eps: f64,
    pub cluster_min_pts: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0005,
            beta: 0.30,
            containment_overlap: 0.95,
            cluster_eps: 20.0,
            cluster_min_pts: 1,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.alpha > 0.0 && self.alpha < self.beta && self.beta <= 1.0) {
            return Err(MaskError::InvalidConfig(format!(
                "need 0 < alpha < beta <= 1, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if !(self.containment_overlap > 0.0 && self.containment_overlap <= 1.0) {
            return Err(MaskError::InvalidConfig(format!(
                "containment_overlap {} outside (0, 1]",
                self.containment_overlap
            )));
        }
        if !(self.cluster_eps >= 0.0) || self.cluster_min_pts == 0 {
            return Err(MaskError::InvalidConfig(
                "cluster_eps must be >= 0 and cluster_min_pts >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Indices of masks whose area lies in `[alpha * A, beta * A]`.
pub fn area_survivors(set: &MaskSet, cfg: &FilterConfig) -> Vec<usize> {
    let a_img = set.image_area() as f64;
    let (lo, hi) = (cfg.alpha * a_img, cfg.beta * a_img);
    set.masks
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let a = m.area() as f64;
            lo <= a && a <= hi
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn filter_by_area(set: &MaskSet, cfg: &FilterConfig) -> MaskSet {
    set.select(&area_survivors(set, cfg))
}

/// Number of other masks of the full set that lie (to `containment_overlap`) inside mask `j`.
pub fn count_contained(set: &MaskSet, j: usize, cfg: &FilterConfig) -> usize {
    let outer = &set.masks[j];
    let outer_box = outer.bounding_box();
    set.masks
        .iter()
        .enumerate()
        .filter(|&(k, inner)| {
            if k == j {
                return false;
            }
            let area = inner.area();
            if area == 0 || outer_box.is_none() {
                return false;
            }
            inner.intersection_area(outer) as f64 >= cfg.containment_overlap * area as f64
        })
        .count()
}

/// Indices of masks containing fewer than [`MAX_CONTAINED`] others.
pub fn containment_survivors(set: &MaskSet, cfg: &FilterConfig) -> Vec<usize> {
    let counts: Vec<usize> = (0..set.len())
        .into_par_iter()
        .map(|j| count_contained(set, j, cfg))
        .collect();
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < MAX_CONTAINED)
        .map(|(i, _)| i)
        .collect()
}

pub fn filter_by_containment(set: &MaskSet, cfg: &FilterConfig) -> MaskSet {
    set.select(&containment_survivors(set, cfg))
}

/// Intersection of the area and containment survivors, in input order.
/// Containment is always counted against the full input set.
pub fn dual_filter(set: &MaskSet, cfg: &FilterConfig) -> Vec<usize> {
    let area = area_survivors(set, cfg);
    let contain = containment_survivors(set, cfg);
    area.into_iter().filter(|i| contain.binary_search(i).is_ok()).collect()
}

/// DBSCAN over 2D points. Returns one cluster id per point, `None` for noise.
/// Clusters are numbered in the order their first core point appears.
pub fn dbscan(points: &[Vec2], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (points[i] - points[j]).norm() <= eps)
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for seed in 0..n {
        if labels[seed].is_some() || !is_core[seed] {
            continue;
        }
        let id = next;
        next += 1;
        labels[seed] = Some(id);
        let mut frontier = vec![seed];
        while let Some(p) = frontier.pop() {
            if !is_core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(id);
                    frontier.push(q);
                }
            }
        }
    }
    labels
}

/// Result of clustering: merged masks plus, for each, the input indices it absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub masks: MaskSet,
    pub members: Vec<Vec<usize>>,
}

/// Clusters masks by centroid with DBSCAN and merges each cluster by pixel
/// union. Noise points survive as singletons. Output groups are ordered by
/// their lowest member index.
pub fn cluster_masks(set: &MaskSet, cfg: &FilterConfig) -> Result<Clustering, MaskError> {
    let centroids = set
        .masks
        .iter()
        .enumerate()
        .map(|(index, m)| m.centroid().ok_or(MaskError::EmptyMask { index }))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = dbscan(&centroids, cfg.cluster_eps, cfg.cluster_min_pts);

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_cluster: Vec<Option<usize>> = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        match label {
            None => groups.push(vec![i]),
            Some(c) => {
                if group_of_cluster.len() <= *c {
                    group_of_cluster.resize(c + 1, None);
                }
                match group_of_cluster[*c] {
                    Some(g) => groups[g].push(i),
                    None => {
                        group_of_cluster[*c] = Some(groups.len());
                        groups.push(vec![i]);
                    }
                }
            }
        }
    }

    let masks = groups
        .iter()
        .map(|g| {
            let mut merged = set.masks[g[0]].clone();
            for &i in &g[1..] {
                merged.union_with(&set.masks[i]);
            }
            merged
        })
        .collect();
    Ok(Clustering {
        masks: MaskSet {
            width: set.width,
            height: set.height,
            masks,
        },
        members: groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCentroid {
    pub label: u32,
    pub centroid: [f64; 2],
    pub mask_index: usize,
}

impl LabeledCentroid {
    pub fn point(&self) -> Vec2 {
        Vec2::new(self.centroid[0], self.centroid[1])
    }
}

/// Centroid of each mask, labelled `0..q` in mask order.
pub fn centroids_and_labels(set: &MaskSet) -> Result<Vec<LabeledCentroid>, MaskError> {
    set.masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let c = m.centroid().ok_or(MaskError::EmptyMask { index: i })?;
            Ok(LabeledCentroid {
                label: i as u32,
                centroid: [c.x, c.y],
                mask_index: i,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMark {
    pub label: u32,
    pub x: f64,
    pub y: f64,
    /// Mask area in pixels.
    pub area: usize,
}

/// Structured equivalent of the numbered-mark visual prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub image_width: usize,
    pub image_height: usize,
    pub marks: Vec<PromptMark>,
}

impl PromptPayload {
    pub fn contains(&self, label: u32) -> bool {
        self.marks.iter().any(|m| m.label == label)
    }
}

pub fn render_prompt(
    image_size: (usize, usize),
    centroids: &[LabeledCentroid],
    areas: &[usize],
) -> PromptPayload {
    PromptPayload {
        image_width: image_size.0,
        image_height: image_size.1,
        marks: centroids
            .iter()
            .map(|c| PromptMark {
                label: c.label,
                x: c.centroid[0],
                y: c.centroid[1],
                area: areas.get(c.mask_index).copied().unwrap_or(0),
            })
            .collect(),
    }
}

/// Grayscale overlay for inspection: masks in alternating mid-grays,
/// centroids as white crosses.
pub fn render_overlay(set: &MaskSet, centroids: &[LabeledCentroid]) -> Vec<u8> {
    let (w, h) = (set.width, set.height);
    let mut img = vec![0u8; w * h];
    for (i, m) in set.masks.iter().enumerate() {
        let shade = 80 + ((i * 47) % 120) as u8;
        for (x, y) in m.foreground() {
            img[y * w + x] = shade;
        }
    }
    for c in centroids {
        let (cx, cy) = (c.centroid[0].round() as i64, c.centroid[1].round() as i64);
        for d in -3i64..=3 {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    img[y as usize * w + x as usize] = 255;
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub schema_version: u32,
    pub input_count: usize,
    pub area_survivors: Vec<usize>,
    pub containment_survivors: Vec<usize>,
    /// Input indices kept by dual filtering.
    pub filtered: Vec<usize>,
    /// For each clustered mask, the input indices merged into it.
    pub clusters: Vec<Vec<usize>>,
    pub centroids: Vec<LabeledCentroid>,
    pub prompt: PromptPayload,
}

/// Output of the part-level stage.
#[derive(Debug, Clone)]
pub struct PartGrounding {
    pub clustered: MaskSet,
    pub report: GroundingReport,
}

/// Runs filter, cluster, centroid and prompt construction on one mask set.
pub fn ground_parts(set: &MaskSet, cfg: &FilterConfig) -> Result<PartGrounding, MaskError> {
    cfg.validate()?;
    let area = area_survivors(set, cfg);
    let contain = containment_survivors(set, cfg);
    let filtered: Vec<usize> = area
        .iter()
        .copied()
        .filter(|i| contain.binary_search(i).is_ok())
        .collect();
    if filtered.is_empty() {
        return Err(MaskError::EmptyAfterFilter);
    }
    let clustering = cluster_masks(&set.select(&filtered), cfg)?;
    let centroids = centroids_and_labels(&clustering.masks)?;
    let areas: Vec<usize> = clustering.masks.masks.iter().map(BinaryMask::area).collect();
    let prompt = render_prompt((set.width, set.height), &centroids, &areas);
    let clusters = clustering
        .members
        .iter()
        .map(|g| g.iter().map(|&i| filtered[i]).collect())
        .collect();
    Ok(PartGrounding {
        clustered: clustering.masks,
        report: GroundingReport {
            schema_version: GROUNDING_SCHEMA_VERSION,
            input_count: set.len(),
            area_survivors: area,
            containment_survivors: contain,
            filtered,
            clusters,
            centroids,
            prompt,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    fn n_pixels(n: usize) -> BinaryMask {
        BinaryMask::from_fn(100, 100, |x, y| y * 100 + x < n)
    }

    #[test]
    fn area_bounds_are_inclusive() {
        let cfg = FilterConfig {
            alpha: 0.001,
            beta: 0.25,
            ..Default::default()
        };
        let set = MaskSet::new(vec![n_pixels(9), n_pixels(10), n_pixels(2500), n_pixels(2501)]).unwrap();
        assert_eq!(area_survivors(&set, &cfg), vec![1, 2]);
    }

    #[test]
    fn full_image_mask_is_removed() {
        let cfg = FilterConfig {
            alpha: 0.001,
            beta: 0.25,
            ..Default::default()
        };
        let set = MaskSet::new(vec![n_pixels(10_000)]).unwrap();
        assert!(filter_by_area(&set, &cfg).is_empty());
    }

    #[test]
    fn containment_counts() {
        let cfg = FilterConfig::default();
        let disjoint = MaskSet::new(vec![rect(50, 50, 0, 0, 5, 5), rect(50, 50, 10, 10, 15, 15)]).unwrap();
        assert_eq!(count_contained(&disjoint, 0, &cfg), 0);
        assert_eq!(count_contained(&disjoint, 1, &cfg), 0);

        let nested = MaskSet::new(vec![
            rect(50, 50, 0, 0, 40, 40),
            rect(50, 50, 2, 2, 8, 8),
            rect(50, 50, 20, 20, 30, 30),
        ])
        .unwrap();
        assert_eq!(count_contained(&nested, 0, &cfg), 2);
        assert_eq!(count_contained(&nested, 1, &cfg), 0);
    }

    #[test]
    fn three_contained_masks_exclude_the_container() {
        let cfg = FilterConfig::default();
        let mut masks = vec![rect(60, 60, 0, 0, 50, 50)];
        for i in 0..3 {
            masks.push(rect(60, 60, 2 + 15 * i, 2, 10 + 15 * i, 10));
        }
        let set = MaskSet::new(masks.clone()).unwrap();
        assert_eq!(count_contained(&set, 0, &cfg), 3);
        assert_eq!(containment_survivors(&set, &cfg), vec![1, 2, 3]);

        let two = MaskSet::new(masks[..3].to_vec()).unwrap();
        assert_eq!(containment_survivors(&two, &cfg), vec![0, 1, 2]);
    }

    #[test]
    fn partial_overlap_respects_threshold() {
        // 10x10 inner with 96 px inside the outer -> contained at 0.95, not at 0.97.
        let outer = BinaryMask::from_fn(30, 30, |x, y| x < 20 && y < 20 && !(x == 19 && y >= 16));
        let inner = rect(30, 30, 10, 10, 20, 20);
        let set = MaskSet::new(vec![outer, inner]).unwrap();
        assert_eq!(set.masks()[1].intersection_area(&set.masks()[0]), 96);
        assert_eq!(count_contained(&set, 0, &FilterConfig::default()), 1);
        let strict = FilterConfig {
            containment_overlap: 0.97,
            ..Default::default()
        };
        assert_eq!(count_contained(&set, 0, &strict), 0);
    }

    #[test]
    fn identical_centroids_merge() {
        let cfg = FilterConfig {
            cluster_eps: 5.0,
            ..Default::default()
        };
        let a = rect(40, 40, 10, 10, 20, 20);
        let b = BinaryMask::from_fn(40, 40, |x, y| (10..20).contains(&x) && (10..20).contains(&y) && (x + y) % 2 == 0);
        let set = MaskSet::new(vec![a.clone(), b]).unwrap();
        let c = cluster_masks(&set, &cfg).unwrap();
        assert_eq!(c.members, vec![vec![0, 1]]);
        assert_eq!(c.masks.masks()[0], a);
    }

    #[test]
    fn distant_masks_stay_apart() {
        let cfg = FilterConfig {
            cluster_eps: 5.0,
            ..Default::default()
        };
        let set = MaskSet::new(vec![rect(600, 20, 0, 0, 4, 4), rect(600, 20, 500, 0, 504, 4)]).unwrap();
        let c = cluster_masks(&set, &cfg).unwrap();
        assert_eq!(c.members, vec![vec![0], vec![1]]);
    }

    #[test]
    fn dbscan_noise_and_border() {
        let pts = [
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(2.0, 0.0),
            Vec2::new(10.0, 0.0),
        ];
        let labels = dbscan(&pts, 1.0, 3);
        // Only the middle point is core; both ends are borders; 10 is noise.
        assert_eq!(labels, vec![Some(0), Some(0), Some(0), None]);
    }

    #[test]
    fn centroid_examples() {
        let block = BinaryMask::from_pixels(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let l = BinaryMask::from_pixels(4, 4, &[(0, 0), (0, 1), (0, 2), (1, 0), (2, 0)]);
        let set = MaskSet::new(vec![block, l, BinaryMask::from_pixels(4, 4, &[(3, 3)])]).unwrap();
        let cs = centroids_and_labels(&set).unwrap();
        assert_eq!(cs.iter().map(|c| c.label).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(cs[0].centroid, [0.5, 0.5]);
        assert_relative_eq!(cs[1].centroid[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(cs[1].centroid[1], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn empty_mask_centroid_errors() {
        let set = MaskSet::new(vec![BinaryMask::empty(3, 3)]).unwrap();
        assert_eq!(
            centroids_and_labels(&set),
            Err(MaskError::EmptyMask { index: 0 })
        );
    }

    #[test]
    fn prompt_payload_examples() {
        assert!(render_prompt((10, 10), &[], &[]).marks.is_empty());
        let c = LabeledCentroid {
            label: 0,
            centroid: [10.0, 20.0],
            mask_index: 0,
        };
        let p = render_prompt((64, 48), &[c], &[7]);
        assert_eq!(
            p.marks,
            vec![PromptMark {
                label: 0,
                x: 10.0,
                y: 20.0,
                area: 7
            }]
        );
    }

    #[test]
    fn ground_parts_reports_empty_filter() {
        let set = MaskSet::new(vec![n_pixels(1)]).unwrap();
        assert_eq!(
            ground_parts(&set, &FilterConfig::default()).unwrap_err(),
            MaskError::EmptyAfterFilter
        );
    }

    #[test]
    fn config_validation() {
        let bad = FilterConfig {
            alpha: 0.5,
            beta: 0.4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(FilterConfig::default().validate().is_ok());
    }

    fn arb_rect_set() -> impl Strategy<Value = MaskSet> {
        prop::collection::vec((0usize..40, 0usize..40, 1usize..30, 1usize..30), 1..10).prop_map(|rs| {
            MaskSet::new(
                rs.into_iter()
                    .map(|(x, y, w, h)| rect(48, 48, x, y, (x + w).min(48), (y + h).min(48)))
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn dual_filter_order_independent(set in arb_rect_set()) {
            let cfg = FilterConfig { alpha: 0.01, beta: 0.2, ..Default::default() };
            let direct = dual_filter(&set, &cfg);
            // area then containment (containment counted on the full set)
            let contain = containment_survivors(&set, &cfg);
            let a_then_c: Vec<usize> = area_survivors(&set, &cfg).into_iter().filter(|i| contain.contains(i)).collect();
            let area = area_survivors(&set, &cfg);
            let c_then_a: Vec<usize> = contain.into_iter().filter(|i| area.contains(i)).collect();
            prop_assert_eq!(&direct, &a_then_c);
            prop_assert_eq!(&direct, &c_then_a);
        }

        #[test]
        fn union_area_bounds(set in arb_rect_set(), eps in 0.0..30.0f64) {
            let cfg = FilterConfig { cluster_eps: eps, ..Default::default() };
            let c = cluster_masks(&set, &cfg).unwrap();
            for (merged, members) in c.masks.masks().iter().zip(&c.members) {
                let areas: Vec<usize> = members.iter().map(|&i| set.masks()[i].area()).collect();
                prop_assert!(merged.area() <= areas.iter().sum::<usize>());
                prop_assert!(merged.area() >= *areas.iter().max().unwrap());
            }
        }

        #[test]
        fn centroid_inside_bounding_box(set in arb_rect_set()) {
            for c in centroids_and_labels(&set).unwrap() {
                let (l, t, r, b) = set.masks()[c.mask_index].bounding_box().unwrap();
                prop_assert!(c.centroid[0] >= l as f64 && c.centroid[0] <= r as f64);
                prop_assert!(c.centroid[1] >= t as f64 && c.centroid[1] <= b as f64);
            }
        }

        #[test]
        fn ground_parts_is_deterministic(set in arb_rect_set()) {
            let cfg = FilterConfig { alpha: 0.001, beta: 0.5, ..Default::default() };
            let a = ground_parts(&set, &cfg).map(|g| serde_json::to_string(&g.report).unwrap());
            let b = ground_parts(&set, &cfg).map(|g| serde_json::to_string(&g.report).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
