//! Leave-one-out jobs over (variant, split) pairs and a small work queue.

use std::sync::Mutex;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{MetricsCell, MetricsReport};
use super::train::{sample_errors, train, EpochRecord, StageSummary, TrainPlan};
use crate::data::{window_samples, SplitPlan, Trajectory, TrajectorySample};
use crate::error::{GtpError, Result};
use crate::model::{GtpConfig, GtpModel, Variant};
use crate::scene::SceneSpec;

/// One scene's destinations plus its world-frame trajectories.
#[derive(Clone, Debug)]
pub struct SceneCorpus {
    pub scene: SceneSpec,
    pub trajectories: Vec<Trajectory>,
}

impl SceneCorpus {
    pub fn id(&self) -> &str {
        &self.scene.scene_id
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Worker threads for independent jobs; 0 means one per available core.
    pub workers: usize,
    /// Random subset of training windows, for quick runs.
    pub max_train_samples: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobResult {
    pub variant: Variant,
    pub split: SplitPlan,
    pub cell: MetricsCell,
    pub stages: Vec<StageSummary>,
    pub curves: Vec<EpochRecord>,
    pub train_count: usize,
}

/// Every job of an ablation run plus the merged metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResults {
    pub report: MetricsReport,
    pub jobs: Vec<JobResult>,
}

impl AblationResults {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Pools world-frame errors of `model` over `samples` into one cell.
pub fn evaluate(model: &GtpModel, samples: &[TrajectorySample], variant: &str, scene: &str, horizon: usize) -> Result<MetricsCell> {
    let refs: Vec<&TrajectorySample> = samples.iter().collect();
    let errors = sample_errors(model, &refs)?;
    MetricsCell::from_samples(variant, scene, horizon, &errors)
}

fn corpus<'a>(corpora: &'a [SceneCorpus], id: &str) -> Result<&'a SceneCorpus> {
    corpora
        .iter()
        .find(|c| c.id() == id)
        .ok_or_else(|| GtpError::Data(format!("split names unknown scene {id:?}")))
}

/// Windows every trajectory of the named scenes for `cfg`.
pub fn windows(corpora: &[SceneCorpus], ids: &[String], cfg: &GtpConfig) -> Result<Vec<TrajectorySample>> {
    let mut out = Vec::new();
    for id in ids {
        let c = corpus(corpora, id)?;
        out.extend(window_samples(&c.trajectories, &c.scene, cfg.t_obs, cfg.t_pred, cfg.agent_centric)?);
    }
    Ok(out)
}

/// Trains `variant` on the split's training scenes and evaluates on its test scene.
pub fn run_job(base: &GtpConfig, variant: Variant, split: &SplitPlan, corpora: &[SceneCorpus], opts: &RunOptions) -> Result<JobResult> {
    if split.train_scenes.contains(&split.test_scene) {
        return Err(GtpError::contract(format!("test scene {} is also a training scene", split.test_scene)));
    }
    let cfg = GtpConfig {
        t_pred: split.t_pred,
        ..variant.apply(base)
    };
    cfg.validate()?;
    let mut train_set = windows(corpora, &split.train_scenes, &cfg)?;
    if let Some(max) = opts.max_train_samples.filter(|&m| m < train_set.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_a3b1_e000);
        let mut keep = sample(&mut rng, train_set.len(), max).into_vec();
        keep.sort_unstable();
        train_set = keep.into_iter().map(|i| train_set[i].clone()).collect();
    }
    if train_set.is_empty() {
        return Err(GtpError::Data(format!(
            "no training windows of length {} in {:?}",
            cfg.t_obs + cfg.t_pred,
            split.train_scenes
        )));
    }
    let test_set = windows(corpora, std::slice::from_ref(&split.test_scene), &cfg)?;
    let outcome = train(&TrainPlan::from_config(&cfg), GtpModel::new(cfg)?, &train_set)?;
    let cell = evaluate(&outcome.model, &test_set, variant.name(), &split.test_scene, split.t_pred)?;
    log::info!(
        "{} / {} / t_pred {}: ADE {:.3} FDE {:.3} over {} samples",
        variant.name(),
        split.test_scene,
        split.t_pred,
        cell.ade,
        cell.fde,
        cell.count
    );
    Ok(JobResult {
        variant,
        split: split.clone(),
        cell,
        stages: outcome.stages,
        curves: outcome.curves,
        train_count: train_set.len(),
    })
}

/// Runs `jobs` on a fixed pool of workers pulling from a shared queue.
/// Results keep input order; the first error (in job order) wins.
pub fn run_queue<J, T, F>(jobs: Vec<J>, workers: usize, f: F) -> Result<Vec<T>>
where
    J: Send,
    T: Send,
    F: Fn(J) -> Result<T> + Sync,
{
    let n = jobs.len();
    let workers = match workers {
        0 => std::thread::available_parallelism().map_or(1, |p| p.get()),
        w => w,
    }
    .min(n.max(1));
    let queue = Mutex::new(jobs.into_iter().enumerate());
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let next = queue.lock().unwrap_or_else(|e| e.into_inner()).next();
                let Some((i, job)) = next else { break };
                let r = f(job);
                results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(GtpError::contract("worker exited without a result"))))
        .collect()
}

/// Every (variant, split) pair, variants outermost.
pub fn run_ablation(
    base: &GtpConfig,
    variants: &[Variant],
    splits: &[SplitPlan],
    corpora: &[SceneCorpus],
    opts: &RunOptions,
) -> Result<AblationResults> {
    let jobs: Vec<(Variant, &SplitPlan)> = variants.iter().flat_map(|&v| splits.iter().map(move |s| (v, s))).collect();
    let jobs = run_queue(jobs, opts.workers, |(v, s)| run_job(base, v, s, corpora, opts))?;
    let mut report = MetricsReport::default();
    for j in &jobs {
        report.push(j.cell.clone());
    }
    Ok(AblationResults { report, jobs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn queue_preserves_order_and_reports_errors() {
        let out = run_queue((0..20).collect(), 3, |x: i32| Ok(x * 2)).unwrap();
        assert_eq!(out, (0..20).map(|x| x * 2).collect::<Vec<_>>());
        let err = run_queue(vec![1, 2, 3], 2, |x: i32| {
            if x == 2 {
                Err(GtpError::Data("two".into()))
            } else {
                Ok(x)
            }
        });
        assert!(err.is_err());
        assert!(run_queue(Vec::<i32>::new(), 4, Ok).unwrap().is_empty());
    }

    fn corpora() -> Vec<SceneCorpus> {
        (0..2)
            .map(|i| {
                let ds = synth_generate(&SynthConfig {
                    seed: 10 + i,
                    n_trajectories: 15,
                    ..Default::default()
                })
                .unwrap();
                let mut scene = ds.scene;
                scene.scene_id = format!("s{i}");
                SceneCorpus {
                    scene,
                    trajectories: ds.trajectories,
                }
            })
            .collect()
    }

    fn tiny() -> GtpConfig {
        GtpConfig {
            t_pred: 4,
            hidden: 6,
            pos_embed: 4,
            dest_embed: 4,
            mod_dim: 6,
            stage_epochs: [1, 1, 1],
            batch_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn ablation_table_shape_and_determinism() {
        let c = corpora();
        let ids: Vec<String> = c.iter().map(|c| c.id().to_string()).collect();
        let splits = crate::data::make_splits(&ids, &[3, 4]).unwrap();
        let opts = RunOptions {
            workers: 2,
            max_train_samples: Some(60),
        };
        let results = run_ablation(&tiny(), &Variant::ALL, &splits, &c, &opts).unwrap();
        assert_eq!(results.jobs.len(), 6 * 4);
        let aggs = results.report.aggregates();
        assert_eq!(aggs.len(), 6 * 2);
        assert!(aggs.iter().all(|a| a.count > 0 && a.scene_mean_ade >= 0.0));
        let again = run_ablation(&tiny(), &Variant::ALL, &splits, &c, &RunOptions { workers: 1, ..opts }).unwrap();
        assert_eq!(results.report, again.report);
    }

    #[test]
    fn no_leak_and_unknown_scene() {
        let c = corpora();
        let bad = SplitPlan {
            test_scene: "s0".into(),
            train_scenes: vec!["s0".into()],
            t_pred: 4,
        };
        assert!(run_job(&tiny(), Variant::Full, &bad, &c, &RunOptions::default()).is_err());
        let missing = SplitPlan {
            test_scene: "nope".into(),
            train_scenes: vec!["s0".into()],
            t_pred: 4,
        };
        assert!(run_job(&tiny(), Variant::Full, &missing, &c, &RunOptions::default()).unwrap_err().is_data_error());
    }

    #[test]
    fn single_sample_cell_equals_its_errors() {
        let c = corpora();
        let cfg = tiny();
        let samples = windows(&c, &["s0".into()], &cfg).unwrap();
        let model = GtpModel::new(cfg).unwrap();
        let cell = evaluate(&model, &samples[..1], "full", "s0", 4).unwrap();
        let p = model.predict(&samples[0]).unwrap();
        let truth = samples[0].future_world();
        assert_eq!(cell.ade, super::super::ade(&p.predicted, &truth).unwrap());
        assert!(evaluate(&model, &[], "full", "s0", 4).is_err());
    }
}
