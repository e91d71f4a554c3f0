//! Run configuration and the generate / train / evaluate / analyze flows.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, AdamConfig, AdamState, Checkpoint, Tape, Tensor};
use crate::error::{Error, Result};
use crate::interaction::{
    export_scene_plot, scene_records, write_dependency_csv, DependencyRecord, ModeChoice,
};
use crate::metrics::{constant_velocity_baseline, future_mask, scene_metrics, MetricsReport, SceneView};
use crate::model::{scene_loss, LossConfig, MapFormer, ModelConfig, SaiEnc};
use crate::scenedata::{
    horizon_steps, load_labels, load_tracks, synth_roundabout, window_scenes, write_labels, write_tracks,
    InteractionIndex, InteractionLabel, SceneSample, SynthConfig, Track, HISTORY_STEPS,
};
use crate::scenegraph::{
    attach_agents, build_road_graph, ring_road_graph, write_road_graph, RoadGraph, SceneGraph,
};

pub const TRACKS_FILE: &str = "tracks.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MAP_FILE: &str = "map.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
/// Node spacing of the synthetic map, meters.
pub const MAP_SPACING: f64 = 2.5;
const MAP_ARM_LEN: f64 = 32.0;
pub const DEFAULT_STRIDE: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directories; when unset, synthesized from `[synth]`.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Window stride in frames.
    pub stride: usize,
    /// Evenly spaced subset of this many windows, when set.
    pub max_train_scenes: Option<usize>,
    pub max_val_scenes: Option<usize>,
    /// Episodes of the synthesized validation set.
    pub val_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            val: None,
            stride: DEFAULT_STRIDE,
            max_train_scenes: None,
            max_val_scenes: None,
            val_episodes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub wta: bool,
    pub mode_ce_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 3e-4,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            wta: true,
            mode_ce_weight: 0.1,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    /// Evaluation horizons in seconds.
    pub horizons: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig {
                t_f: horizon_steps(5.0),
                ..ModelConfig::default()
            },
            training: TrainingConfig::default(),
            horizons: vec![3.0, 5.0],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.val].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let t = &self.training;
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return bad(format!("training.lr must be > 0, got {}", t.lr));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("training.epochs and training.batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(t.mode_ce_weight >= 0.0) {
            return bad("training.mode_ce_weight must be ≥ 0".into());
        }
        if self.data.stride == 0 {
            return bad("data.stride must be ≥ 1".into());
        }
        if self.horizons.is_empty() {
            return bad("at least one horizon is required".into());
        }
        for &h in &self.horizons {
            if h != 3.0 && h != 5.0 {
                return bad(format!("horizon {h} s unsupported; use 3 or 5"));
            }
        }
        let longest = self.horizons.iter().cloned().fold(0.0, f64::max);
        if self.model.t_f != horizon_steps(longest) {
            return bad(format!(
                "model.t_f = {} but the longest horizon {longest} s needs {}",
                self.model.t_f,
                horizon_steps(longest)
            ));
        }
        self.model.validate()?;
        self.synth.validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            wta: self.training.wta,
            mode_ce_weight: self.training.mode_ce_weight,
        }
    }

    fn val_synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.synth.seed ^ 0x5eed_0f_7a11_da7a,
            episodes: self.data.val_episodes.max(1),
            ..self.synth.clone()
        }
    }
}

/// Tracks, optional interaction labels and the road graph of one directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub tracks: Vec<Track>,
    pub labels: Option<Vec<InteractionLabel>>,
    pub road: RoadGraph,
    pub map_ref: String,
}

/// Road graph matching the synthetic roundabout geometry.
pub fn synth_map(cfg: &SynthConfig) -> RoadGraph {
    ring_road_graph(cfg.ring_radius, MAP_SPACING, cfg.entry_arms, MAP_ARM_LEN)
}

impl Dataset {
    pub fn synthesize(cfg: &SynthConfig) -> Result<Self> {
        let out = synth_roundabout(cfg)?;
        Ok(Dataset {
            tracks: out.tracks,
            labels: Some(out.labels),
            road: synth_map(cfg),
            map_ref: MAP_FILE.into(),
        })
    }

    /// `tracks.csv` is required; `labels.csv` and `map.toml` are optional
    /// (no map means an empty road graph).
    pub fn load(dir: &Path) -> Result<Self> {
        let tracks = load_tracks(&dir.join(TRACKS_FILE))?;
        let lp = dir.join(LABELS_FILE);
        let labels = if lp.exists() {
            Some(load_labels(&lp)?)
        } else {
            None
        };
        let mp = dir.join(MAP_FILE);
        let road = if mp.exists() {
            build_road_graph(&mp)?
        } else {
            RoadGraph {
                node_ids: vec![],
                node_pos: vec![],
                node_kind: vec![],
                edges: vec![],
            }
        };
        Ok(Dataset {
            tracks,
            labels,
            road,
            map_ref: mp.display().to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tracks(&self.tracks, &dir.join(TRACKS_FILE))?;
        if let Some(l) = &self.labels {
            write_labels(l, &dir.join(LABELS_FILE))?;
        }
        write_road_graph(&self.road, &dir.join(MAP_FILE))
    }

    /// Windows with their scene graphs, optionally thinned to `max`
    /// evenly spaced windows.
    pub fn scenes(&self, t_f: usize, stride: usize, max: Option<usize>) -> Result<Vec<Scene>> {
        let mut samples = window_scenes(&self.tracks, HISTORY_STEPS, t_f, stride)?;
        if let Some(m) = max {
            if m < samples.len() {
                let n = samples.len();
                samples = (0..m).map(|i| samples[i * n / m].clone()).collect();
            }
        }
        Ok(samples
            .into_iter()
            .map(|mut s| {
                s.map_ref = self.map_ref.clone();
                let graph = attach_agents(&self.road, &s);
                Scene { sample: s, graph }
            })
            .collect())
    }

    pub fn interaction_index(&self) -> Option<InteractionIndex> {
        self.labels.as_deref().map(InteractionIndex::new)
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: SceneSample,
    pub graph: SceneGraph,
}

/// Writes synthetic `train/` and `val/` datasets.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    Dataset::synthesize(&cfg.synth)?.save(&out.join("train"))?;
    Dataset::synthesize(&cfg.val_synth())?.save(&out.join("val"))
}

fn train_val(cfg: &RunConfig, out: &Path) -> Result<(Dataset, Dataset)> {
    let load_or = |p: &Option<PathBuf>, synth: SynthConfig, name: &str| -> Result<Dataset> {
        match p {
            Some(dir) => Dataset::load(dir),
            None => {
                let d = Dataset::synthesize(&synth)?;
                d.save(&out.join("data").join(name))?;
                Ok(d)
            }
        }
    };
    Ok((
        load_or(&cfg.data.train, cfg.synth.clone(), "train")?,
        load_or(&cfg.data.val, cfg.val_synth(), "val")?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Winner-mode MGNLL per jointly valid pair-step.
    pub mean_mgnll: f64,
    /// Mean total loss per scene.
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_train_scenes: usize,
    pub n_val_scenes: usize,
    pub n_params: usize,
    pub first_mgnll: f64,
    pub final_mgnll: f64,
    pub val_mgnll: Option<f64>,
}

pub struct TrainOutcome {
    pub model: MapFormer,
    pub log: Vec<EpochLog>,
    pub summary: TrainSummary,
}

struct SceneStep {
    grads: Vec<Tensor>,
    total: f64,
    mgnll_sum: f64,
    n_terms: usize,
}

fn scene_step(model: &MapFormer, scene: &Scene, loss: &LossConfig) -> Result<SceneStep> {
    let tape = Tape::new();
    let cx = model.ctx(&tape);
    let pred = model.forward(&cx, &scene.sample, Some(&scene.graph))?;
    let l = scene_loss(&pred, &scene.sample, loss)?;
    let total = l.total.item();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total}")));
    }
    let grads = tape.backward(l.total)?.params(&model.params);
    Ok(SceneStep {
        grads,
        total,
        mgnll_sum: l.per_mode[l.winner],
        n_terms: l.n_terms,
    })
}

/// Mean winner-mode MGNLL per pair-step over `scenes`.
pub fn mean_mgnll(model: &MapFormer, scenes: &[Scene], loss: &LossConfig) -> Result<f64> {
    let parts: Vec<(f64, usize)> = scenes
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let pred = model.forward(&model.ctx(&tape), &s.sample, Some(&s.graph))?;
            let l = scene_loss(&pred, &s.sample, loss)?;
            Ok((l.per_mode[l.winner], l.n_terms))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), p| (s + p.0, n + p.1));
    Ok(if n > 0 { sum / n as f64 } else { f64::NAN })
}

/// Adam over shuffled scene batches. Per-scene gradients are computed in
/// parallel and summed in batch order, so results do not depend on the
/// thread count. A non-finite loss or gradient aborts with `Error::Numeric`
/// after `on_abort` has seen the last good model.
pub fn train_scenes(
    cfg: &RunConfig,
    train: &[Scene],
    val: &[Scene],
    mut on_abort: impl FnMut(&MapFormer),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Validation("no training scenes".into()));
    }
    let t = &cfg.training;
    let mut model = MapFormer::new(&cfg.model, t.seed)?;
    let adam = AdamConfig {
        lr: t.lr,
        beta1: t.beta1,
        beta2: t.beta2,
        eps: 1e-8,
    };
    let mut state = AdamState::new(model.params.values());
    let loss = cfg.loss();
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(t.epochs);

    for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        let (mut mg, mut terms, mut total) = (0.0, 0usize, 0.0);
        for batch in order.chunks(t.batch_size) {
            let steps: Result<Vec<SceneStep>> = batch
                .par_iter()
                .map(|&i| scene_step(&model, &train[i], &loss))
                .collect();
            let steps = match steps {
                Ok(s) => s,
                Err(e) => {
                    on_abort(&model);
                    return Err(e);
                }
            };
            let mut grads = steps[0].grads.clone();
            for s in &steps[1..] {
                for (g, h) in grads.iter_mut().zip(&s.grads) {
                    for (a, b) in g.data_mut().iter_mut().zip(h.data()) {
                        *a += b;
                    }
                }
            }
            let inv = 1.0 / steps.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            if let Err(e) = adam_step(model.params.values_mut(), &grads, &mut state, &adam) {
                on_abort(&model);
                return Err(e);
            }
            for s in &steps {
                mg += s.mgnll_sum;
                terms += s.n_terms;
                total += s.total;
            }
        }
        log.push(EpochLog {
            epoch,
            mean_mgnll: if terms > 0 { mg / terms as f64 } else { f64::NAN },
            mean_loss: total / train.len() as f64,
        });
    }
    let val_mgnll = if val.is_empty() {
        None
    } else {
        Some(mean_mgnll(&model, val, &loss)?)
    };
    let summary = TrainSummary {
        n_train_scenes: train.len(),
        n_val_scenes: val.len(),
        n_params: model.params.n_scalars(),
        first_mgnll: log[0].mean_mgnll,
        final_mgnll: log[log.len() - 1].mean_mgnll,
        val_mgnll,
    };
    Ok(TrainOutcome { model, log, summary })
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,mean_mgnll,mean_loss\n");
    for e in log {
        s.push_str(&format!("{},{:.9},{:.9}\n", e.epoch, e.mean_mgnll, e.mean_loss));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Full training run: data, model, `model.ckpt`, `train_log.csv`,
/// `summary.json` under `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train_ds, val_ds) = train_val(cfg, out)?;
    let d = &cfg.data;
    let tr = train_ds.scenes(cfg.model.t_f, d.stride, d.max_train_scenes)?;
    let va = val_ds.scenes(cfg.model.t_f, d.stride, d.max_val_scenes)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let outcome = train_scenes(cfg, &tr, &va, |m: &MapFormer| {
        // Best effort: the numeric error is what the caller needs to see.
        let _ = m.to_checkpoint().save(&ck_path);
    })?;
    outcome.model.to_checkpoint().save(&ck_path)?;
    write_log(&out.join(LOG_FILE), &outcome.log)?;
    let json = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    fs::write(out.join(SUMMARY_FILE), json + "\n").map_err(|e| Error::io(out, e))?;
    Ok(outcome)
}

pub fn load_model(checkpoint: &Path) -> Result<MapFormer> {
    MapFormer::from_checkpoint(&Checkpoint::load(checkpoint)?)
}

/// Model prediction cut to the scene's horizon.
pub fn predict_scene(model: &MapFormer, scene: &Scene) -> Result<crate::model::PredictionOutput> {
    let graph = (model.cfg.saienc != SaiEnc::None).then_some(&scene.graph);
    let mut out = model.infer(&scene.sample, graph)?;
    let t_f = scene.sample.t_f();
    if out.t_f() != t_f {
        out = truncate(&out, t_f);
    }
    Ok(out)
}

fn truncate(out: &crate::model::PredictionOutput, t: usize) -> crate::model::PredictionOutput {
    let cut = |x: &Tensor| {
        let s = x.shape();
        let (outer, inner) = (s[0] * s[1], s[3]);
        let mut data = Vec::with_capacity(outer * t * inner);
        for o in 0..outer {
            let base = o * s[2] * inner;
            data.extend_from_slice(&x.data()[base..base + t * inner]);
        }
        Tensor::new(vec![s[0], s[1], t, inner], data).expect("truncate")
    };
    crate::model::PredictionOutput {
        traj: cut(&out.traj),
        cov_params: cut(&out.cov_params),
        mode_logits: out.mode_logits.clone(),
        ego_index: out.ego_index,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub model: MetricsReport,
    pub baseline: MetricsReport,
}

/// Model and constant-velocity reports at one horizon.
pub fn evaluate_scenes(model: &MapFormer, scenes: &[Scene], horizon_s: f64) -> Result<Evaluation> {
    let per: Vec<_> = scenes
        .par_iter()
        .map(|s| {
            let out = predict_scene(model, s)?;
            let mask = future_mask(&s.sample);
            let m = scene_metrics(&SceneView::new(&out.traj, &s.sample.future_gt, Some(&mask))?);
            let cv = constant_velocity_baseline(&s.sample);
            let b = scene_metrics(&SceneView::new(&cv, &s.sample.future_gt, Some(&mask))?);
            Ok((m, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let (m, b): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    Ok(Evaluation {
        model: MetricsReport::from_scenes(horizon_s, &m)?,
        baseline: MetricsReport::from_scenes(horizon_s, &b)?,
    })
}

pub fn evaluate(checkpoint: &Path, data: &Path, horizon_s: f64, stride: usize) -> Result<Evaluation> {
    if horizon_s != 3.0 && horizon_s != 5.0 {
        return Err(Error::Validation(format!(
            "horizon {horizon_s} s unsupported; use 3 or 5"
        )));
    }
    let model = load_model(checkpoint)?;
    let steps = horizon_steps(horizon_s);
    if steps > model.cfg.t_f {
        return Err(Error::Validation(format!(
            "checkpoint predicts {} steps, horizon {horizon_s} s needs {steps}",
            model.cfg.t_f
        )));
    }
    let scenes = Dataset::load(data)?.scenes(steps, stride, None)?;
    if scenes.is_empty() {
        return Err(Error::Validation("dataset yields no scenes".into()));
    }
    evaluate_scenes(&model, &scenes, horizon_s)
}

/// Records per scene, in scene order.
pub fn analyze_scenes(
    model: &MapFormer,
    scenes: &[Scene],
    choice: ModeChoice,
) -> Result<Vec<(crate::model::PredictionOutput, Vec<DependencyRecord>)>> {
    scenes
        .par_iter()
        .map(|s| {
            let out = predict_scene(model, s)?;
            let rec = scene_records(&s.sample, &out, choice)?;
            Ok((out, rec))
        })
        .collect()
}

/// Ranking AUC of dependency scores against interaction labels: the chance
/// that a labelled pair outscores an unlabelled one, ties counting half.
/// `None` when either class is empty.
pub fn interaction_auc(
    scenes: &[Scene],
    records: &[Vec<DependencyRecord>],
    labels: &InteractionIndex,
) -> Option<f64> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (s, recs) in scenes.iter().zip(records) {
        for r in recs {
            if labels.interacts(r.ego_id, r.other_id, s.sample.future_frames()) {
                pos.push(r.score);
            } else {
                neg.push(r.score);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug)]
pub struct AnalysisSummary {
    pub n_scenes: usize,
    pub n_records: usize,
    pub auc: Option<f64>,
}

/// `dependencies.csv` plus `plots/scene_NNNN.svg` under `out`.
pub fn analyze(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    stride: usize,
    choice: ModeChoice,
) -> Result<AnalysisSummary> {
    let model = load_model(checkpoint)?;
    let ds = Dataset::load(data)?;
    let scenes = ds.scenes(model.cfg.t_f, stride, None)?;
    let results = analyze_scenes(&model, &scenes, choice)?;
    let plots = out.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut rows = Vec::new();
    for (i, (s, (pred, recs))) in scenes.iter().zip(&results).enumerate() {
        export_scene_plot(
            &plots.join(format!("scene_{i:04}.svg")),
            &s.sample,
            Some(&ds.road),
            pred,
            recs,
        )?;
        rows.extend(recs.iter().map(|r| (i, r.clone())));
    }
    write_dependency_csv(&out.join("dependencies.csv"), &rows)?;
    let records: Vec<Vec<DependencyRecord>> = results.into_iter().map(|r| r.1).collect();
    let auc = ds
        .interaction_index()
        .and_then(|ix| interaction_auc(&scenes, &records, &ix));
    if let Some(a) = auc {
        let p = out.join("interaction_auc.txt");
        fs::File::create(&p)
            .and_then(|mut f| writeln!(f, "{a:.6}"))
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok(AnalysisSummary {
        n_scenes: scenes.len(),
        n_records: rows.len(),
        auc,
    })
}
