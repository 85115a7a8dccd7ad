//! Annotation files (`frame_id ped_id x y` per row) and per-scene sidecars.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{GtpError, Result};
use crate::geometry::{Homography, Point};
use crate::scene::{select_destinations, ManualDestinations, SceneSpec, SelectionConfig, SemanticRaster};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateSpace {
    #[default]
    World,
    Pixel,
}

fn parse_id(field: &str, what: &str, path: &Path, line: usize) -> Result<i64> {
    let v: f64 = field.parse().map_err(|e| GtpError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("{what} {field:?}: {e}"),
    })?;
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(GtpError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{what} {field:?} is not an integer"),
        });
    }
    Ok(v as i64)
}

/// Parses annotation text into raw per-pedestrian tracks (no resampling).
///
/// Blank lines and lines starting with `#` are skipped. Rows of one
/// pedestrian must appear with strictly increasing frame ids.
pub fn parse_annotations(
    text: &str,
    origin: &Path,
    space: CoordinateSpace,
    homography: Option<&Homography>,
) -> Result<Vec<Trajectory>> {
    if space == CoordinateSpace::Pixel && homography.is_none() {
        return Err(GtpError::Data(format!(
            "{}: pixel coordinates need a homography",
            origin.display()
        )));
    }
    let mut tracks: BTreeMap<i64, (Vec<i64>, Vec<Point>)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(GtpError::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let frame = parse_id(fields[0], "frame id", origin, line_no)?;
        let ped = parse_id(fields[1], "pedestrian id", origin, line_no)?;
        let coord = |f: &str| -> Result<f64> {
            let v: f64 = f.parse().map_err(|e| GtpError::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                msg: format!("coordinate {f:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(GtpError::Parse {
                    path: origin.to_path_buf(),
                    line: line_no,
                    msg: format!("non-finite coordinate {f:?}"),
                });
            }
            Ok(v)
        };
        let mut p = Point::new(coord(fields[2])?, coord(fields[3])?);
        if let (CoordinateSpace::Pixel, Some(h)) = (space, homography) {
            p = h.image_to_world(p)?;
        }
        let entry = tracks.entry(ped).or_default();
        if let Some(&last) = entry.0.last() {
            if frame <= last {
                return Err(GtpError::Data(format!(
                    "{}:{line_no}: pedestrian {ped} frame {frame} does not follow {last}",
                    origin.display()
                )));
            }
        }
        entry.0.push(frame);
        entry.1.push(p);
    }
    Ok(tracks
        .into_iter()
        .filter(|(_, (f, _))| f.len() >= 2)
        .map(|(ped, (frames, points))| Trajectory {
            ped_id: ped,
            frames,
            points,
        })
        .collect())
}

/// Resamples a track onto the grid `frames[0] + k·stride`. Grid points
/// between observations at most three strides apart (≤ 2 missing steps) are
/// linearly interpolated; wider gaps split the track.
pub fn resample(track: &Trajectory, stride: i64) -> Result<Vec<Trajectory>> {
    if stride <= 0 {
        return Err(GtpError::contract(format!("frame stride {stride}")));
    }
    let (f, p) = (&track.frames, &track.points);
    let n = f.len();
    let mut out = Vec::new();
    let mut cur: (Vec<i64>, Vec<Point>) = (Vec::new(), Vec::new());
    let mut flush = |cur: &mut (Vec<i64>, Vec<Point>)| {
        let (frames, points) = std::mem::take(cur);
        if frames.len() >= 2 {
            out.push(Trajectory {
                ped_id: track.ped_id,
                frames,
                points,
            });
        }
    };
    let mut g = f[0];
    let mut j = 0;
    while g <= f[n - 1] {
        while j + 1 < n && f[j + 1] <= g {
            j += 1;
        }
        if f[j] == g {
            cur.0.push(g);
            cur.1.push(p[j]);
        } else {
            let gap = f[j + 1] - f[j];
            if gap > 3 * stride {
                flush(&mut cur);
                g = f[j + 1];
                continue;
            }
            let t = (g - f[j]) as f64 / gap as f64;
            cur.0.push(g);
            cur.1.push(Point::new(
                p[j].x + t * (p[j + 1].x - p[j].x),
                p[j].y + t * (p[j + 1].y - p[j].y),
            ));
        }
        g += stride;
    }
    flush(&mut cur);
    Ok(out)
}

/// Reads an annotation file and resamples every track to `stride`.
pub fn load_annotations(
    path: &Path,
    space: CoordinateSpace,
    homography: Option<&Homography>,
    stride: i64,
) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for t in parse_annotations(&text, path, space, homography)? {
        out.extend(resample(&t, stride)?);
    }
    Ok(out)
}

/// Writes tracks as `frame ped x y` rows ordered by frame, then pedestrian.
pub fn write_annotations<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut rows: Vec<(i64, i64, Point)> = trajectories
        .iter()
        .flat_map(|t| t.frames.iter().zip(&t.points).map(move |(f, p)| (*f, t.ped_id, *p)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    for (f, ped, p) in rows {
        writeln!(out, "{f}\t{ped}\t{:?}\t{:?}", p.x, p.y)?;
    }
    Ok(())
}

/// Per-scene description next to the annotation file. Relative paths are
/// resolved against the sidecar's directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SceneSidecar {
    #[serde(default)]
    pub scene_id: Option<String>,
    pub annotations: PathBuf,
    #[serde(default)]
    pub coordinate_space: CoordinateSpace,
    #[serde(default)]
    pub homography_path: Option<PathBuf>,
    /// Prepared scene description (output of destination selection).
    #[serde(default)]
    pub scene_spec_path: Option<PathBuf>,
    /// Hand-drawn destinations, used instead of rasters.
    #[serde(default)]
    pub destinations_path: Option<PathBuf>,
    #[serde(default)]
    pub scores_path: Option<PathBuf>,
    #[serde(default)]
    pub features_path: Option<PathBuf>,
    #[serde(default)]
    pub selection: Option<SelectionConfig>,
    #[serde(default = "default_stride")]
    pub frame_stride: i64,
}

fn default_stride() -> i64 {
    1
}

#[derive(Clone, Debug)]
pub struct SceneData {
    pub spec: SceneSpec,
    pub trajectories: Vec<Trajectory>,
}

impl SceneSidecar {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Scene description, from (in order of preference) a prepared spec, a
    /// manual destination file, or the segmentation rasters.
    pub fn scene_spec(&self, base: &Path, scene_id: &str) -> Result<SceneSpec> {
        let homography = match &self.homography_path {
            Some(p) => Some(Homography::load(&Self::resolve(base, p))?),
            None => None,
        };
        if let Some(p) = &self.scene_spec_path {
            return SceneSpec::load(&Self::resolve(base, p));
        }
        if let Some(p) = &self.destinations_path {
            let mut manual = ManualDestinations::load(&Self::resolve(base, p))?;
            manual.scene_id = scene_id.to_string();
            return manual.into_scene(homography);
        }
        match (&self.scores_path, &self.features_path) {
            (Some(s), Some(f)) => {
                let raster = SemanticRaster::load(&Self::resolve(base, s), &Self::resolve(base, f))?;
                let h = homography.ok_or_else(|| {
                    GtpError::Data(format!("scene {scene_id}: rasters need a homography"))
                })?;
                select_destinations(scene_id, &raster, h, &self.selection.clone().unwrap_or_default())
            }
            _ => Err(GtpError::Data(format!(
                "scene {scene_id}: sidecar names no scene spec, destinations or rasters"
            ))),
        }
    }
}

/// Loads a scene's destinations and resampled trajectories from its sidecar.
pub fn load_scene(sidecar_path: &Path) -> Result<SceneData> {
    let sidecar = SceneSidecar::load(sidecar_path)?;
    let base = sidecar_path.parent().unwrap_or(Path::new("."));
    let scene_id = sidecar.scene_id.clone().unwrap_or_else(|| {
        sidecar_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into())
    });
    let spec = sidecar.scene_spec(base, &scene_id)?;
    let homography = match &sidecar.homography_path {
        Some(p) => Some(Homography::load(&SceneSidecar::resolve(base, p))?),
        None => None,
    };
    let trajectories = load_annotations(
        &SceneSidecar::resolve(base, &sidecar.annotations),
        sidecar.coordinate_space,
        homography.as_ref(),
        sidecar.frame_stride,
    )?;
    Ok(SceneData { spec, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<Trajectory>> {
        parse_annotations(text, Path::new("mem.txt"), CoordinateSpace::World, None)
    }

    #[test]
    fn one_pedestrian() {
        let text: String = (0..10).map(|i| format!("{}\t1\t{}.0\t2.0\n", i * 10, i)).collect();
        let t = parse(&text).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 10);
    }

    #[test]
    fn interleaved_pedestrians() {
        let text = "0 1 0 0\n0 2 5 5\n10 2 6 5\n10 1 1 0\n20 1 2 0\n";
        let t = parse(text).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].frames, vec![0, 10, 20]);
        assert_eq!(t[1].points, vec![Point::new(5.0, 5.0), Point::new(6.0, 5.0)]);
    }

    #[test]
    fn pixel_space_uses_homography() {
        let h = Homography::new([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let t = parse_annotations("0 1 3 4\n1 1 1 1\n", Path::new("m"), CoordinateSpace::Pixel, Some(&h)).unwrap();
        assert_eq!(t[0].points[0], Point::new(6.0, 8.0));
        assert!(parse_annotations("0 1 3 4\n", Path::new("m"), CoordinateSpace::Pixel, None).is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        match parse("0 1 0 0\n\n1 1 x 0\n") {
            Err(GtpError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("0 1 0\n"), Err(GtpError::Parse { line: 1, .. })));
    }

    #[test]
    fn non_monotone_frames_are_data_errors() {
        let err = parse("10 1 0 0\n0 1 1 1\n").unwrap_err();
        assert!(err.is_data_error());
        assert!(matches!(err, GtpError::Data(_)));
    }

    #[test]
    fn short_gaps_interpolate_long_gaps_split() {
        let pts = |xs: &[f64]| xs.iter().map(|&x| Point::new(x, 0.0)).collect::<Vec<_>>();
        // frames 0,10,40: two missing steps -> interpolated
        let t = Trajectory::new(1, vec![0, 10, 40], pts(&[0.0, 1.0, 4.0])).unwrap();
        let r = resample(&t, 10).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].frames, vec![0, 10, 20, 30, 40]);
        assert_eq!(r[0].points[2], Point::new(2.0, 0.0));
        // frames 0,10,20,60,70: three missing -> split into two tracks
        let t = Trajectory::new(1, vec![0, 10, 20, 60, 70], pts(&[0.0, 1.0, 2.0, 6.0, 7.0])).unwrap();
        let r = resample(&t, 10).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].frames, vec![0, 10, 20]);
        assert_eq!(r[1].frames, vec![60, 70]);
        // finer raw sampling is brought onto the stride grid
        let t = Trajectory::new(1, vec![0, 5, 10, 15, 20], pts(&[0.0, 0.5, 1.0, 1.5, 2.0])).unwrap();
        assert_eq!(resample(&t, 10).unwrap()[0].frames, vec![0, 10, 20]);
    }

    #[test]
    fn write_then_parse_round_trips() {
        let t = vec![
            Trajectory::new(2, vec![0, 1, 2], vec![Point::new(0.1, 0.2), Point::new(1.0 / 3.0, -4.0), Point::new(5.0, 6.0)]).unwrap(),
            Trajectory::new(7, vec![1, 2], vec![Point::new(9.0, 9.0), Point::new(8.5, 1e-7)]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_annotations(&mut buf, &t).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
