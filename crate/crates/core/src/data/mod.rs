//! Trajectories, windowed samples, leave-one-out splits and the synthetic
//! goal-directed generator.

mod annotations;
mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::geometry::{AgentFrame, DestinationFeatureVec, Point};
use crate::scene::{assign_ground_truth_goal, SceneSpec};

pub use annotations::{
    load_annotations, load_scene, parse_annotations, resample, write_annotations, CoordinateSpace,
    SceneData, SceneSidecar,
};
pub use synth::{synth_generate, SynthConfig, SynthDataset};

/// One pedestrian track at a constant frame stride.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub ped_id: i64,
    pub frames: Vec<i64>,
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(ped_id: i64, frames: Vec<i64>, points: Vec<Point>) -> Result<Self> {
        if frames.len() != points.len() {
            return Err(GtpError::contract("frame and point counts differ"));
        }
        if points.len() < 2 {
            return Err(GtpError::Data(format!("pedestrian {ped_id}: fewer than 2 points")));
        }
        if let Some(w) = frames.windows(2).find(|w| w[1] <= w[0]) {
            return Err(GtpError::Data(format!(
                "pedestrian {ped_id}: frame {} follows {}",
                w[1], w[0]
            )));
        }
        Ok(Trajectory {
            ped_id,
            frames,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An observed/future window of one trajectory, expressed in `frame`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub scene_id: String,
    pub ped_id: i64,
    pub start_frame: i64,
    pub observed: Vec<Point>,
    pub future: Vec<Point>,
    pub frame: AgentFrame,
    pub destinations: Vec<DestinationFeatureVec>,
    /// 1-based destination index.
    pub goal: usize,
}

impl TrajectorySample {
    /// Builds a sample from world-frame points. With `agent_centric` the
    /// frame comes from `observed`, otherwise it is the identity.
    pub fn from_world(
        scene: &SceneSpec,
        ped_id: i64,
        start_frame: i64,
        observed: &[Point],
        future: &[Point],
        goal: usize,
        agent_centric: bool,
    ) -> Result<Self> {
        let frame = if agent_centric {
            AgentFrame::from_observed(observed)?
        } else {
            AgentFrame::identity()
        };
        let destinations = scene
            .destinations
            .iter()
            .map(|d| DestinationFeatureVec::compute(&frame, &d.corners()))
            .collect();
        Ok(TrajectorySample {
            scene_id: scene.scene_id.clone(),
            ped_id,
            start_frame,
            observed: frame.to_frame_all(observed),
            future: frame.to_frame_all(future),
            frame,
            destinations,
            goal,
        })
    }

    /// A sample with no known future, for prediction. The goal label is the
    /// destination nearest the last observed point and only fills the slot.
    pub fn observed_only(scene: &SceneSpec, ped_id: i64, start_frame: i64, observed: &[Point], agent_centric: bool) -> Result<Self> {
        let goal = assign_ground_truth_goal(observed, scene)?;
        Self::from_world(scene, ped_id, start_frame, observed, &[], goal, agent_centric)
    }

    pub fn n_dest(&self) -> usize {
        self.destinations.len()
    }

    pub fn observed_world(&self) -> Vec<Point> {
        self.frame.from_frame_all(&self.observed)
    }

    pub fn future_world(&self) -> Vec<Point> {
        self.frame.from_frame_all(&self.future)
    }
}

/// Number of stride-1 windows in a trajectory of length `len`.
pub fn window_count(len: usize, t_obs: usize, t_pred: usize) -> usize {
    (len + 1).saturating_sub(t_obs + t_pred)
}

/// Builds one sample per stride-1 window over trajectories long enough to
/// hold `t_obs + t_pred` points. The goal label comes from the last point of
/// the whole source trajectory.
pub fn window_samples(
    trajectories: &[Trajectory],
    scene: &SceneSpec,
    t_obs: usize,
    t_pred: usize,
    agent_centric: bool,
) -> Result<Vec<TrajectorySample>> {
    if t_obs + t_pred < 2 || t_obs == 0 {
        return Err(GtpError::contract(format!("window t_obs={t_obs}, t_pred={t_pred}")));
    }
    let span = t_obs + t_pred;
    let mut out = Vec::new();
    for traj in trajectories {
        let count = window_count(traj.len(), t_obs, t_pred);
        if count == 0 {
            continue;
        }
        let goal = assign_ground_truth_goal(&traj.points, scene)?;
        for start in 0..count {
            let window = &traj.points[start..start + span];
            let (obs, fut) = window.split_at(t_obs);
            out.push(TrajectorySample::from_world(
                scene,
                traj.ped_id,
                traj.frames[start],
                obs,
                fut,
                goal,
                agent_centric,
            )?);
        }
    }
    Ok(out)
}

/// Leave-one-out plan: train on every scene but `test_scene`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_scene: String,
    pub train_scenes: Vec<String>,
    pub t_pred: usize,
}

/// One plan per (held-out scene, horizon), scenes outermost.
pub fn make_splits(scene_ids: &[String], horizons: &[usize]) -> Result<Vec<SplitPlan>> {
    if scene_ids.len() < 2 {
        return Err(GtpError::contract(format!(
            "leave-one-out needs at least 2 scenes, got {}",
            scene_ids.len()
        )));
    }
    let unique: BTreeSet<&String> = scene_ids.iter().collect();
    if unique.len() != scene_ids.len() {
        return Err(GtpError::contract("duplicate scene id in split list"));
    }
    let mut plans = Vec::with_capacity(scene_ids.len() * horizons.len());
    for test in scene_ids {
        let train: Vec<String> = scene_ids.iter().filter(|s| *s != test).cloned().collect();
        for &t_pred in horizons {
            plans.push(SplitPlan {
                test_scene: test.clone(),
                train_scenes: train.clone(),
                t_pred,
            });
        }
    }
    Ok(plans)
}
