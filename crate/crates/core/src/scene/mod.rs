//! Scene descriptions and destination selection.

pub mod raster;
pub mod select;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::geometry::{convex_contains, convex_distance, BBox, Homography, Point};

pub use raster::{Raster, SemanticRaster, FEATURE_CHANNELS, SCORE_CHANNELS};
pub use select::{
    border_blocks, cluster_border_blocks, filter_walkable, grid_partition, pool_block_features,
    select_destinations, Block, PixelRect, SelectionConfig, DEFAULT_WALKABLE,
};

/// A candidate goal region of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestinationRegion {
    /// 1-based.
    pub index: usize,
    /// Grid cells `(row, col)` of the member border blocks; empty for hand-drawn regions.
    #[serde(default)]
    pub blocks: Vec<(usize, usize)>,
    /// `[x0, y0, x1, y1]` in pixels.
    #[serde(default)]
    pub pixel_box: Option<[f64; 4]>,
    pub world_box: BBox,
    /// Region outline in world coordinates when it is not the axis-aligned
    /// `world_box` itself (e.g. after rigidly moving a scene).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outline: Option<[Point; 4]>,
    #[serde(default = "one")]
    pub walkable_score: f64,
    #[serde(default)]
    pub feature: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

impl DestinationRegion {
    /// Corners of the region in cyclic order.
    pub fn corners(&self) -> [Point; 4] {
        self.outline.unwrap_or_else(|| self.world_box.corners())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    /// Background image `(width, height)` in pixels, when known.
    #[serde(default)]
    pub background: Option<(usize, usize)>,
    pub homography: Homography,
    #[serde(default)]
    pub grid_n: Option<usize>,
    pub n_dest: usize,
    pub destinations: Vec<DestinationRegion>,
}

impl SceneSpec {
    pub fn new(
        scene_id: impl Into<String>,
        background: Option<(usize, usize)>,
        homography: Homography,
        grid_n: Option<usize>,
        destinations: Vec<DestinationRegion>,
    ) -> Result<Self> {
        let spec = SceneSpec {
            scene_id: scene_id.into(),
            background,
            homography,
            grid_n,
            n_dest: destinations.len(),
            destinations,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Scene whose destinations are given directly as world boxes.
    pub fn from_world_boxes(scene_id: impl Into<String>, boxes: &[BBox]) -> Result<Self> {
        let destinations = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| DestinationRegion {
                index: i + 1,
                blocks: Vec::new(),
                pixel_box: None,
                world_box: *b,
                outline: None,
                walkable_score: 1.0,
                feature: Vec::new(),
            })
            .collect();
        Self::new(scene_id, None, Homography::identity(), None, destinations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.destinations.is_empty() {
            return Err(GtpError::SceneUnusable(format!(
                "scene {} has no destinations",
                self.scene_id
            )));
        }
        if self.n_dest != self.destinations.len() {
            return Err(GtpError::Data(format!(
                "scene {}: n_dest = {} but {} destinations listed",
                self.scene_id,
                self.n_dest,
                self.destinations.len()
            )));
        }
        for (i, d) in self.destinations.iter().enumerate() {
            if d.index != i + 1 {
                return Err(GtpError::Data(format!(
                    "scene {}: destination at position {} has index {}",
                    self.scene_id,
                    i + 1,
                    d.index
                )));
            }
        }
        Ok(())
    }

    pub fn world_boxes(&self) -> Vec<BBox> {
        self.destinations.iter().map(|d| d.world_box).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Rigidly moves every destination: rotation by `angle` about the origin,
    /// then translation. Outlines move exactly; `world_box` becomes their
    /// axis-aligned hull.
    pub fn transformed(&self, angle: f64, shift: Point) -> Result<SceneSpec> {
        let (s, c) = angle.sin_cos();
        let mv = |p: Point| Point::new(c * p.x - s * p.y + shift.x, s * p.x + c * p.y + shift.y);
        let mut out = self.clone();
        for d in &mut out.destinations {
            let corners = d.corners().map(mv);
            d.world_box = BBox::from_points(&corners)?;
            d.outline = Some(corners);
        }
        Ok(out)
    }
}

/// Hand-drawn destinations, used in place of raster processing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManualDestinations {
    pub scene_id: String,
    #[serde(default)]
    pub homography: Option<Homography>,
    pub destinations: Vec<ManualBox>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManualBox {
    /// `[x_min, y_min, x_max, y_max]` in metres.
    #[serde(default)]
    pub world_box: Option<[f64; 4]>,
    /// `[x0, y0, x1, y1]` in pixels; mapped through the homography.
    #[serde(default)]
    pub pixel_box: Option<[f64; 4]>,
}

impl ManualDestinations {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn into_scene(self, homography: Option<Homography>) -> Result<SceneSpec> {
        let h = self.homography.or(homography).unwrap_or_else(Homography::identity);
        let mut destinations = Vec::new();
        for (i, m) in self.destinations.iter().enumerate() {
            let world_box = match (m.world_box, m.pixel_box) {
                (Some([a, b, c, d]), _) => BBox::new(a, b, c, d)?,
                (None, Some([x0, y0, x1, y1])) => {
                    let corners: Result<Vec<Point>> = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                        .iter()
                        .map(|&(x, y)| h.image_to_world(Point::new(x, y)))
                        .collect();
                    BBox::from_points(&corners?)?
                }
                (None, None) => {
                    return Err(GtpError::Data(format!(
                        "manual destination {} has neither world_box nor pixel_box",
                        i + 1
                    )))
                }
            };
            destinations.push(DestinationRegion {
                index: i + 1,
                blocks: Vec::new(),
                pixel_box: m.pixel_box,
                world_box,
                outline: None,
                walkable_score: 1.0,
                feature: Vec::new(),
            });
        }
        SceneSpec::new(self.scene_id, None, h, None, destinations)
    }
}

/// Destination index (1-based) for a trajectory's last point: the first box
/// containing it, otherwise the nearest box, ties to the lower index.
pub fn assign_ground_truth_goal(trajectory: &[Point], scene: &SceneSpec) -> Result<usize> {
    let Some(&end) = trajectory.last() else {
        return Err(GtpError::contract("goal of an empty trajectory"));
    };
    Ok(nearest_destination(end, scene))
}

pub fn nearest_destination(p: Point, scene: &SceneSpec) -> usize {
    if let Some(d) = scene.destinations.iter().find(|d| convex_contains(&d.corners(), p)) {
        return d.index;
    }
    let mut best = (f64::INFINITY, 1);
    for d in &scene.destinations {
        let dist = convex_distance(&d.corners(), p);
        if dist < best.0 {
            best = (dist, d.index);
        }
    }
    best.1
}
