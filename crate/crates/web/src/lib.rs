//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The logic lives in [`DemoState`], which is plain Rust so it can be tested
//! natively; [`Demo`] only converts errors to `JsValue`.

use gtp_core::data::{synth_generate, window_samples, SynthConfig, TrajectorySample};
use gtp_core::geometry::Point;
use gtp_core::harness::{goal_accuracy, sample_errors, train, TrainPlan};
use gtp_core::model::{GtpConfig, GtpModel};
use gtp_core::scene::SceneSpec;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct SceneView {
    world_size: f64,
    destinations: Vec<[f64; 4]>,
    trajectories: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize)]
struct TrainReport {
    train_windows: usize,
    test_windows: usize,
    ade: f64,
    fde: f64,
    goal_accuracy: f64,
}

#[derive(Serialize)]
struct PredictionView {
    observed: Vec<[f64; 2]>,
    future: Vec<[f64; 2]>,
    predicted: Vec<[f64; 2]>,
    rank: Vec<f64>,
    goal: usize,
    /// One row per predicted step, one column per destination.
    attention: Vec<Vec<f64>>,
}

fn xy(points: &[Point]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [p.x, p.y]).collect()
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// A synthetic scene, its train/test windows and (after training) a model.
pub struct DemoState {
    world_size: f64,
    scene: SceneSpec,
    trajectories: Vec<Vec<Point>>,
    train: Vec<TrajectorySample>,
    test: Vec<TrajectorySample>,
    config: GtpConfig,
    model: Option<GtpModel>,
}

impl DemoState {
    pub fn new(seed: u64, n_dest: usize, n_trajectories: usize, sigma: f64) -> Result<Self, String> {
        let synth = SynthConfig {
            seed,
            n_dest,
            n_trajectories,
            sigma,
            ..Default::default()
        };
        let ds = synth_generate(&synth).map_err(|e| e.to_string())?;
        let config = GtpConfig {
            hidden: 16,
            pos_embed: 8,
            dest_embed: 8,
            mod_dim: 16,
            seed,
            ..Default::default()
        };
        let n_test = (ds.trajectories.len() / 5).max(1);
        let (test_t, train_t) = ds.trajectories.split_at(n_test.min(ds.trajectories.len()));
        let window = |t| window_samples(t, &ds.scene, config.t_obs, config.t_pred, true).map_err(|e| e.to_string());
        Ok(DemoState {
            world_size: synth.world_size,
            train: window(train_t)?,
            test: window(test_t)?,
            trajectories: ds.trajectories.iter().map(|t| t.points.clone()).collect(),
            scene: ds.scene,
            config,
            model: None,
        })
    }

    pub fn scene_json(&self) -> Result<String, String> {
        to_json(&SceneView {
            world_size: self.world_size,
            destinations: self.scene.world_boxes().iter().map(|b| b.to_array()).collect(),
            trajectories: self.trajectories.iter().map(|t| xy(t)).collect(),
        })
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }

    /// Trains with `epochs` per stage on at most `max_windows` windows.
    pub fn train(&mut self, epochs: usize, max_windows: usize) -> Result<String, String> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err("scene too small: no windows to train or test on".into());
        }
        let cfg = GtpConfig {
            stage_epochs: [epochs, epochs, epochs],
            ..self.config.clone()
        };
        let step = self.train.len().div_ceil(max_windows.max(1));
        let subset: Vec<TrajectorySample> = self.train.iter().step_by(step).cloned().collect();
        let model = GtpModel::new(cfg.clone()).map_err(|e| e.to_string())?;
        let out = train(&TrainPlan::from_config(&cfg), model, &subset).map_err(|e| e.to_string())?;
        let refs: Vec<&TrajectorySample> = self.test.iter().collect();
        let errors = sample_errors(&out.model, &refs).map_err(|e| e.to_string())?;
        let n = errors.len() as f64;
        let report = TrainReport {
            train_windows: subset.len(),
            test_windows: refs.len(),
            ade: errors.iter().map(|e| e.0).sum::<f64>() / n,
            fde: errors.iter().map(|e| e.1).sum::<f64>() / n,
            goal_accuracy: goal_accuracy(&out.model, &refs).map_err(|e| e.to_string())?,
        };
        self.model = Some(out.model);
        to_json(&report)
    }

    /// Prediction for test window `index` (wrapped), with its attention trace.
    pub fn predict(&self, index: usize) -> Result<String, String> {
        let model = self.model.as_ref().ok_or("train the model first")?;
        let sample = self.test.get(index % self.test.len().max(1)).ok_or("no test windows")?;
        let p = model.predict(sample).map_err(|e| e.to_string())?;
        to_json(&PredictionView {
            observed: xy(&sample.observed_world()),
            future: xy(&sample.future_world()),
            predicted: xy(&p.predicted),
            rank: p.rank,
            goal: sample.goal,
            attention: p.attention,
        })
    }
}

#[wasm_bindgen]
pub struct Demo(DemoState);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_dest: u32, n_trajectories: u32, sigma: f64) -> Result<Demo, JsValue> {
        DemoState::new(seed.into(), n_dest as usize, n_trajectories as usize, sigma)
            .map(Demo)
            .map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = sceneJson)]
    pub fn scene_json(&self) -> Result<String, JsValue> {
        self.0.scene_json().map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = testLen)]
    pub fn test_len(&self) -> u32 {
        self.0.test_len() as u32
    }

    pub fn train(&mut self, epochs: u32, max_windows: u32) -> Result<String, JsValue> {
        self.0.train(epochs as usize, max_windows as usize).map_err(|e| JsValue::from_str(&e))
    }

    pub fn predict(&self, index: u32) -> Result<String, JsValue> {
        self.0.predict(index as usize).map_err(|e| JsValue::from_str(&e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_view_lists_every_destination() {
        let s = DemoState::new(1, 5, 40, 0.1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.scene_json().unwrap()).unwrap();
        assert_eq!(v["destinations"].as_array().unwrap().len(), 5);
        assert_eq!(v["trajectories"].as_array().unwrap().len(), 40);
    }

    #[test]
    fn predict_needs_training() {
        let s = DemoState::new(2, 4, 60, 0.1).unwrap();
        assert!(s.predict(0).is_err());
    }

    #[test]
    fn train_then_predict() {
        let mut s = DemoState::new(3, 4, 80, 0.1).unwrap();
        let report: serde_json::Value = serde_json::from_str(&s.train(1, 200).unwrap()).unwrap();
        assert!(report["ade"].as_f64().unwrap() >= 0.0);
        let p: serde_json::Value = serde_json::from_str(&s.predict(7).unwrap()).unwrap();
        let attention = p["attention"].as_array().unwrap();
        assert_eq!(attention.len(), 12);
        for row in attention {
            let sum: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert_eq!(p["predicted"].as_array().unwrap().len(), 12);
    }
}
