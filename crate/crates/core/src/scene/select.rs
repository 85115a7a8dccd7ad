//! Destination selection from segmentation rasters: grid partition, border
//! blocks, feature pooling, similarity clustering and walkable filtering.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::raster::{Raster, SemanticRaster, SCORE_CHANNELS};
use super::{DestinationRegion, SceneSpec};
use crate::error::{GtpError, Result};
use crate::geometry::{BBox, Homography, Point};
use crate::tensor::softmax;

/// ADE20K category ids (0-based) for floor, road, grass, sidewalk, earth and path.
pub const DEFAULT_WALKABLE: [usize; 6] = [3, 6, 9, 11, 13, 52];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub grid_n: usize,
    /// Cosine similarity needed to join neighbouring border blocks.
    pub similarity: f64,
    pub walkable_ids: Vec<usize>,
    pub walkable_threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            grid_n: 16,
            similarity: 0.9,
            walkable_ids: DEFAULT_WALKABLE.to_vec(),
            walkable_threshold: 0.5,
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn union(&self, other: &PixelRect) -> PixelRect {
        PixelRect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub rect: PixelRect,
    pub is_border: bool,
    pub feature: Vec<f64>,
}

fn split_sizes(total: usize, n: usize) -> Vec<usize> {
    let base = total / n;
    let mut sizes = vec![base; n];
    sizes[n - 1] += total - base * n;
    sizes
}

/// Divides a `width × height` raster into `n × n` blocks in row-major order;
/// remainder pixels go to the last row and column.
pub fn grid_partition(width: usize, height: usize, n: usize) -> Result<Vec<Block>> {
    if n < 3 {
        return Err(GtpError::contract(format!("grid size {n} must be at least 3")));
    }
    if width < n || height < n {
        return Err(GtpError::contract(format!(
            "grid size {n} too large for a {width}x{height} raster"
        )));
    }
    let (ws, hs) = (split_sizes(width, n), split_sizes(height, n));
    let mut blocks = Vec::with_capacity(n * n);
    let mut y0 = 0;
    for (row, h) in hs.iter().enumerate() {
        let mut x0 = 0;
        for (col, w) in ws.iter().enumerate() {
            blocks.push(Block {
                row,
                col,
                rect: PixelRect {
                    x0,
                    y0,
                    x1: x0 + w,
                    y1: y0 + h,
                },
                is_border: is_border_cell(row, col, n),
                feature: Vec::new(),
            });
            x0 += w;
        }
        y0 += h;
    }
    Ok(blocks)
}

fn is_border_cell(row: usize, col: usize, n: usize) -> bool {
    let ring = |i: usize| i <= 1 || i + 2 >= n;
    ring(row) || ring(col)
}

/// The outer ring of blocks plus the ring just inside it.
pub fn border_blocks(blocks: &[Block], n: usize) -> Vec<Block> {
    blocks
        .iter()
        .filter(|b| is_border_cell(b.row, b.col, n))
        .cloned()
        .collect()
}

/// Channel-wise mean of `raster` over `rect`.
pub fn pool_rect(raster: &Raster, rect: &PixelRect) -> Result<Vec<f64>> {
    if rect.area() == 0 {
        return Err(GtpError::contract("pooling over an empty block"));
    }
    if rect.x1 > raster.width || rect.y1 > raster.height {
        return Err(GtpError::contract(format!(
            "block {rect:?} outside {}x{} raster",
            raster.width, raster.height
        )));
    }
    let mut acc = vec![0.0f64; raster.channels];
    for (x, y) in rect.pixels() {
        for (a, v) in acc.iter_mut().zip(raster.pixel(x, y)) {
            *a += *v as f64;
        }
    }
    let count = rect.area() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    Ok(acc)
}

pub fn pool_block_features(raster: &SemanticRaster, block: &Block) -> Result<Vec<f64>> {
    pool_rect(&raster.features, &block.rect)
}

/// Cosine similarity; two zero vectors count as identical, one zero vector as orthogonal.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na * nb),
    }
}

/// Connected components of border blocks under 4-adjacency, keeping only
/// edges whose feature similarity reaches `threshold`. Groups are indexed in
/// row-major order of their first block; each group lists block indices into
/// `blocks` in row-major order.
pub fn cluster_border_blocks(blocks: &[Block], threshold: f64) -> Vec<Vec<usize>> {
    let border: Vec<usize> = {
        let mut v: Vec<usize> = (0..blocks.len()).filter(|&i| blocks[i].is_border).collect();
        v.sort_by_key(|&i| (blocks[i].row, blocks[i].col));
        v
    };
    let at = |row: usize, col: usize| -> Option<usize> {
        border
            .iter()
            .copied()
            .find(|&i| blocks[i].row == row && blocks[i].col == col)
    };
    let mut assigned = vec![false; blocks.len()];
    let mut groups = Vec::new();
    for &start in &border {
        if assigned[start] {
            continue;
        }
        assigned[start] = true;
        let mut group = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(cur) = queue.pop_front() {
            let (r, c) = (blocks[cur].row, blocks[cur].col);
            let mut neighbours = vec![at(r + 1, c), at(r, c + 1)];
            if r > 0 {
                neighbours.push(at(r - 1, c));
            }
            if c > 0 {
                neighbours.push(at(r, c - 1));
            }
            for nb in neighbours.into_iter().flatten() {
                if !assigned[nb] && cosine_similarity(&blocks[cur].feature, &blocks[nb].feature) >= threshold {
                    assigned[nb] = true;
                    group.push(nb);
                    queue.push_back(nb);
                }
            }
        }
        group.sort_by_key(|&i| (blocks[i].row, blocks[i].col));
        groups.push(group);
    }
    groups
}

/// Mean over the group's pixels of the per-pixel softmax of category scores,
/// maximised over the walkable categories.
pub fn walkable_score(raster: &SemanticRaster, rects: &[PixelRect], walkable_ids: &[usize]) -> Result<f64> {
    if let Some(bad) = walkable_ids.iter().find(|&&id| id >= SCORE_CHANNELS) {
        return Err(GtpError::contract(format!(
            "walkable category {bad} outside [0, {SCORE_CHANNELS})"
        )));
    }
    let mut acc = vec![0.0f64; SCORE_CHANNELS];
    let mut count = 0usize;
    let mut logits = vec![0.0f64; SCORE_CHANNELS];
    for rect in rects {
        for (x, y) in rect.pixels() {
            for (l, v) in logits.iter_mut().zip(raster.scores.pixel(x, y)) {
                *l = *v as f64;
            }
            for (a, p) in acc.iter_mut().zip(softmax(&logits)) {
                *a += p;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(GtpError::contract("walkable score of an empty group"));
    }
    Ok(walkable_ids
        .iter()
        .map(|&id| acc[id] / count as f64)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Keeps groups whose walkable score reaches `threshold` and numbers them 1..n.
pub fn filter_walkable(
    groups: &[Vec<usize>],
    blocks: &[Block],
    raster: &SemanticRaster,
    homography: &Homography,
    walkable_ids: &[usize],
    threshold: f64,
) -> Result<Vec<DestinationRegion>> {
    let mut regions = Vec::new();
    for group in groups {
        let rects: Vec<PixelRect> = group.iter().map(|&i| blocks[i].rect).collect();
        let score = walkable_score(raster, &rects, walkable_ids)?;
        if score < threshold {
            continue;
        }
        let pixel_box = rects.iter().skip(1).fold(rects[0], |acc, r| acc.union(r));
        let corners = [
            Point::new(pixel_box.x0 as f64, pixel_box.y0 as f64),
            Point::new(pixel_box.x1 as f64, pixel_box.y0 as f64),
            Point::new(pixel_box.x0 as f64, pixel_box.y1 as f64),
            Point::new(pixel_box.x1 as f64, pixel_box.y1 as f64),
        ];
        let world: Result<Vec<Point>> = corners.iter().map(|c| homography.image_to_world(*c)).collect();
        let world_box = BBox::from_points(&world?)?;
        // pixel-weighted mean of member block features
        let total: usize = rects.iter().map(PixelRect::area).sum();
        let dim = blocks[group[0]].feature.len();
        let mut feature = vec![0.0; dim];
        for &i in group {
            let w = blocks[i].rect.area() as f64 / total as f64;
            for (f, v) in feature.iter_mut().zip(&blocks[i].feature) {
                *f += w * v;
            }
        }
        regions.push(DestinationRegion {
            index: regions.len() + 1,
            blocks: group.iter().map(|&i| (blocks[i].row, blocks[i].col)).collect(),
            pixel_box: Some([
                pixel_box.x0 as f64,
                pixel_box.y0 as f64,
                pixel_box.x1 as f64,
                pixel_box.y1 as f64,
            ]),
            world_box,
            outline: None,
            walkable_score: score,
            feature,
        });
    }
    if regions.is_empty() {
        return Err(GtpError::SceneUnusable(
            "no border region passed the walkable filter".into(),
        ));
    }
    Ok(regions)
}

/// Full pipeline from rasters to a scene description.
pub fn select_destinations(
    scene_id: &str,
    raster: &SemanticRaster,
    homography: Homography,
    config: &SelectionConfig,
) -> Result<SceneSpec> {
    let n = config.grid_n;
    let mut blocks = grid_partition(raster.width(), raster.height(), n)?;
    for b in blocks.iter_mut().filter(|b| b.is_border) {
        b.feature = pool_rect(&raster.features, &b.rect)?;
    }
    let groups = cluster_border_blocks(&blocks, config.similarity);
    let destinations = filter_walkable(
        &groups,
        &blocks,
        raster,
        &homography,
        &config.walkable_ids,
        config.walkable_threshold,
    )?;
    SceneSpec::new(
        scene_id,
        Some((raster.width(), raster.height())),
        homography,
        Some(n),
        destinations,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::raster::FEATURE_CHANNELS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_grid() {
        let blocks = grid_partition(400, 400, 4).unwrap();
        assert_eq!(blocks.len(), 16);
        assert!(blocks.iter().all(|b| b.rect.area() == 100 * 100));
    }

    #[test]
    fn remainder_goes_to_last_block() {
        let blocks = grid_partition(10, 10, 3).unwrap();
        let widths: Vec<usize> = blocks[..3].iter().map(|b| b.rect.x1 - b.rect.x0).collect();
        assert_eq!(widths, vec![3, 3, 4]);
    }

    #[test]
    fn grid_preconditions() {
        assert!(grid_partition(400, 400, 1).is_err());
        assert!(grid_partition(5, 400, 6).is_err());
    }

    #[test]
    fn every_pixel_in_exactly_one_block() {
        let (w, h) = (37, 23);
        let blocks = grid_partition(w, h, 5).unwrap();
        let mut hits = vec![0; w * h];
        for b in &blocks {
            for (x, y) in b.rect.pixels() {
                hits[y * w + x] += 1;
            }
        }
        assert!(hits.iter().all(|&c| c == 1));
    }

    #[test]
    fn border_counts() {
        for (n, expected) in [(4, 16), (6, 32), (10, 64), (3, 9), (5, 24)] {
            let blocks = grid_partition(100, 100, n).unwrap();
            assert_eq!(border_blocks(&blocks, n).len(), expected, "n = {n}");
        }
    }

    #[test]
    fn pooling_cases() {
        let mut r = Raster::zeros(4, 4, 2);
        for y in 0..4 {
            for x in 0..4 {
                r.pixel_mut(x, y).copy_from_slice(&[1.5, -2.0]);
            }
        }
        let full = PixelRect { x0: 0, y0: 0, x1: 4, y1: 4 };
        assert_eq!(pool_rect(&r, &full).unwrap(), vec![1.5, -2.0]);

        let mut half = Raster::zeros(2, 2, 1);
        half.pixel_mut(0, 1)[0] = 1.0;
        half.pixel_mut(1, 1)[0] = 1.0;
        assert_eq!(pool_rect(&half, &PixelRect { x0: 0, y0: 0, x1: 2, y1: 2 }).unwrap(), vec![0.5]);

        let empty = PixelRect { x0: 1, y0: 1, x1: 1, y1: 3 };
        assert!(pool_rect(&r, &empty).is_err());
    }

    #[test]
    fn pooling_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = Raster::zeros(5, 5, 3);
        for y in 0..5 {
            for x in 0..5 {
                for c in r.pixel_mut(x, y) {
                    *c = rng.random_range(-1.0..1.0);
                }
            }
        }
        let rect = PixelRect { x0: 2, y0: 1, x1: 4, y1: 3 };
        let pooled = pool_rect(&r, &rect).unwrap();
        for c in 0..3 {
            let sum = r.pixel(2, 1)[c] as f64 + r.pixel(3, 1)[c] as f64 + r.pixel(2, 2)[c] as f64 + r.pixel(3, 2)[c] as f64;
            assert!((pooled[c] - sum / 4.0).abs() < 1e-12);
        }
    }

    fn with_features(n: usize, feature: impl Fn(usize, usize) -> Vec<f64>) -> Vec<Block> {
        let mut blocks = grid_partition(n * 4, n * 4, n).unwrap();
        for b in &mut blocks {
            b.feature = feature(b.row, b.col);
        }
        blocks
    }

    #[test]
    fn identical_features_give_ring_components() {
        // n = 6: the two rings form one connected annulus
        let blocks = with_features(6, |_, _| vec![1.0, 2.0]);
        let groups = cluster_border_blocks(&blocks, 0.9);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 32);
    }

    #[test]
    fn alternating_orthogonal_features_give_singletons() {
        let blocks = with_features(6, |r, c| if (r + c) % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
        let groups = cluster_border_blocks(&blocks, 0.9);
        assert_eq!(groups.len(), 32);
        assert!(groups.iter().all(|g| g.len() == 1));
        // scan order: first group starts at (0, 0), second at (0, 1)
        assert_eq!((blocks[groups[1][0]].row, blocks[groups[1][0]].col), (0, 1));
    }

    #[test]
    fn clustering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let blocks = with_features(10, |r, c| feats[r * 10 + c].clone());
        let a = cluster_border_blocks(&blocks, 0.95);
        let b = cluster_border_blocks(&blocks, 0.95);
        assert_eq!(a, b);
        let total: usize = a.iter().map(Vec::len).sum();
        assert_eq!(total, 64);
    }

    /// One-hot-ish score raster where every pixel has `category` dominant.
    fn labelled(width: usize, height: usize, label: impl Fn(usize, usize) -> usize) -> SemanticRaster {
        let mut scores = Raster::zeros(width, height, SCORE_CHANNELS);
        let features = Raster::zeros(width, height, FEATURE_CHANNELS);
        for y in 0..height {
            for x in 0..width {
                scores.pixel_mut(x, y)[label(x, y)] = 50.0;
            }
        }
        SemanticRaster::new(scores, features).unwrap()
    }

    #[test]
    fn walkable_filter_boundaries() {
        let raster = labelled(8, 8, |x, _| if x < 4 { 6 } else { 1 });
        let road = [PixelRect { x0: 0, y0: 0, x1: 4, y1: 8 }];
        let building = [PixelRect { x0: 4, y0: 0, x1: 8, y1: 8 }];
        let mixed = [PixelRect { x0: 2, y0: 0, x1: 6, y1: 8 }];
        let ids = DEFAULT_WALKABLE;
        let s_road = walkable_score(&raster, &road, &ids).unwrap();
        let s_building = walkable_score(&raster, &building, &ids).unwrap();
        let s_mixed = walkable_score(&raster, &mixed, &ids).unwrap();
        assert!(s_road > 0.999);
        assert!(s_building < 1e-6);
        // half road, half building
        assert!((s_mixed - 0.5 * s_road).abs() < 1e-9);
        assert!(walkable_score(&raster, &road, &[150]).is_err());

        let mut blocks = grid_partition(8, 8, 4).unwrap();
        for b in &mut blocks {
            b.feature = vec![1.0];
        }
        let groups: Vec<Vec<usize>> = vec![vec![0, 4], vec![2, 3], vec![1, 2]];
        let threshold = walkable_score(&raster, &[blocks[1].rect, blocks[2].rect], &ids).unwrap();
        let regions = filter_walkable(&groups, &blocks, &raster, &Homography::identity(), &ids, threshold).unwrap();
        // group 0: road (kept), group 1: building (dropped), group 2: exactly half road (kept at equality)
        assert_eq!(regions.len(), 2);
        assert_eq!(regions.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(regions[0].blocks, vec![(0, 0), (1, 0)]);

        let err = filter_walkable(&[vec![2, 3]], &blocks, &raster, &Homography::identity(), &ids, 0.5);
        assert!(matches!(err, Err(GtpError::SceneUnusable(_))));
    }
}
