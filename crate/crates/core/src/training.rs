//! Dataset augmentation, the Adam training loop with validation-AUC model
//! selection, checkpoints and the finite-difference gradient check.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ModelConfig, NetWidths, TrainConfig};
use crate::container;
use crate::data_model::{ActionInstance, FeatureBundle, VideoRecord};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::inference::{generate_proposals, ProposalSet};
use crate::model::AbnModel;
use crate::nn::ParamSet;
use crate::supervision::{build_targets, SupervisionTargets};

/// Drops videos whose mean action covers more than `tau_upper` of the video
/// and lists videos below `tau_lower` twice. Unannotated videos pass once.
pub fn augment_dataset(videos: &[VideoRecord], tau_upper: f64, tau_lower: f64) -> Vec<VideoRecord> {
    debug_assert!(tau_lower < tau_upper);
    let mut out = Vec::with_capacity(videos.len());
    for v in videos {
        match v.mean_action_ratio() {
            Some(r) if r > tau_upper => {}
            Some(r) if r < tau_lower => {
                out.push(v.clone());
                out.push(v.clone());
            }
            _ => out.push(v.clone()),
        }
    }
    out
}

/// A video ready for optimisation.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub record: VideoRecord,
    pub bundle: FeatureBundle,
    pub targets: SupervisionTargets,
}

/// Pairs records with bundles by video id, applies augmentation and builds
/// targets. Records without a bundle or without actions are skipped.
pub fn prepare_training_set(records: &[VideoRecord], bundles: &[FeatureBundle], cfg: &Config) -> Result<Vec<TrainingExample>> {
    let augmented = augment_dataset(records, cfg.train.tau_upper, cfg.train.tau_lower);
    let mut out = Vec::with_capacity(augmented.len());
    for record in augmented {
        if record.actions.is_empty() {
            log::warn!("{}: no ground-truth actions, skipped", record.video_id);
            continue;
        }
        let Some(bundle) = bundles.iter().find(|b| b.video_id == record.video_id) else {
            log::warn!("{}: no feature bundle, skipped", record.video_id);
            continue;
        };
        let bundle = bundle.rescale(cfg.model.temporal_scale);
        let targets = build_targets(&record, &cfg.model)?;
        out.push(TrainingExample { record, bundle, targets });
    }
    Ok(out)
}

/// Pairs records with bundles for evaluation, in record order.
pub fn pair_videos(records: &[VideoRecord], bundles: &[FeatureBundle]) -> Vec<(VideoRecord, FeatureBundle)> {
    records
        .iter()
        .filter_map(|r| {
            let b = bundles.iter().find(|b| b.video_id == r.video_id)?;
            Some((r.clone(), b.clone()))
        })
        .collect()
}

/// Adam with bias correction. Parameters and moments are rounded to `f32`
/// after every step so checkpoints capture the state exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let entries = params.entries_mut().iter_mut().zip(grads.entries());
        let moments = self.m.entries_mut().iter_mut().zip(self.v.entries_mut());
        for ((p, g), (m, v)) in entries.zip(moments) {
            ndarray::Zip::from(&mut p.value)
                .and(&g.value)
                .and(&mut m.value)
                .and(&mut v.value)
                .for_each(|p, &g, m, v| {
                    let g = g + cfg.weight_decay * *p;
                    *m = (cfg.beta1 * *m + (1.0 - cfg.beta1) * g) as f32 as f64;
                    *v = (cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g) as f32 as f64;
                    let step = cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
                    *p = (*p - step) as f32 as f64;
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub auc: f64,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: Config,
    pub seed: u64,
    pub model: AbnModel,
    pub adam: Adam,
    pub epoch: usize,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let model = AbnModel::new(&config.model, seed)?;
        let adam = Adam::new(&model.params);
        Ok(TrainState {
            config: config.clone(),
            seed,
            model,
            adam,
            epoch: 0,
            best: None,
            history: Vec::new(),
        })
    }

    /// The model used for inference: the best validation snapshot when one
    /// exists and selection is enabled, otherwise the latest parameters.
    pub fn selected_model(&self) -> AbnModel {
        let mut model = self.model.clone();
        if let (true, Some(best)) = (self.config.train.select_best, &self.best) {
            model.params = best.params.clone();
        }
        model
    }
}

/// Proposals of `model` for every video, keyed by id.
pub fn predict(model: &AbnModel, videos: &[(VideoRecord, FeatureBundle)], cfg: &Config) -> Result<ProposalSet> {
    let per_video: Vec<Result<(String, Vec<ActionInstance>)>> = videos
        .par_iter()
        .map(|(rec, bundle)| {
            let out = model.forward(bundle)?;
            let props = generate_proposals(&out, rec, &cfg.infer);
            Ok((rec.video_id.clone(), props.iter().map(|p| p.to_action()).collect()))
        })
        .collect();
    per_video.into_iter().collect()
}

/// Validation AUC of `model`; `None` when no validation video has actions.
pub fn validation_auc(model: &AbnModel, videos: &[(VideoRecord, FeatureBundle)], cfg: &Config) -> Result<Option<f64>> {
    let annotated: Vec<_> = videos.iter().filter(|(r, _)| !r.actions.is_empty()).cloned().collect();
    if annotated.is_empty() {
        return Ok(None);
    }
    let props = predict(model, &annotated, cfg)?;
    let gts = annotated.iter().map(|(r, _)| (r.video_id.clone(), r.actions.clone())).collect();
    let thresholds = cfg.eval.preset.recall_thresholds();
    auc(&gts, &props, &thresholds, cfg.eval.budget).map(Some)
}

fn batch_gradient(model: &AbnModel, batch: &[&TrainingExample]) -> Result<(f64, ParamSet)> {
    let parts: Vec<Result<(f64, ParamSet)>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = model.params.zeros_like();
            let report = model.loss_and_grad(&ex.bundle, &ex.targets, &mut g)?;
            Ok((report.l_total, g))
        })
        .collect();
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        if !l.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {l}")));
        }
        loss += l;
        total.axpy(1.0, &g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    if !total.all_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok((loss / n, total))
}

/// Runs `cfg.train.epochs` epochs from a fresh initialisation.
pub fn train(examples: &[TrainingExample], validation: &[(VideoRecord, FeatureBundle)], cfg: &Config) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    continue_training(&mut state, examples, validation, cfg.train.epochs, |_| {})?;
    Ok(state)
}

/// Trains `epochs` more epochs, calling `on_epoch` after each one.
pub fn continue_training(
    state: &mut TrainState,
    examples: &[TrainingExample],
    validation: &[(VideoRecord, FeatureBundle)],
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if examples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let cfg = state.config.clone();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(1 + state.epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_gradient(&state.model, &batch)?;
            state.adam.update(&mut state.model.params, &grads, &cfg.train);
            loss_sum += loss * batch.len() as f64;
        }
        if !state.model.params.all_finite() {
            return Err(Error::Numerical(format!("parameters diverged in epoch {}", state.epoch + 1)));
        }
        state.epoch += 1;
        let val_auc = if cfg.train.select_best {
            validation_auc(&state.model, validation, &cfg)?
        } else {
            None
        };
        if let Some(a) = val_auc {
            if state.best.as_ref().map_or(true, |b| a > b.auc) {
                state.best = Some(BestSnapshot {
                    epoch: state.epoch,
                    auc: a,
                    params: state.model.params.clone(),
                });
            }
        }
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss: loss_sum / examples.len() as f64,
            val_auc,
        };
        log::info!("epoch {} loss {:.6} val_auc {:?}", record.epoch, record.train_loss, record.val_auc);
        on_epoch(&record);
        state.history.push(record);
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ABNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BestMeta {
    epoch: usize,
    auc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: Config,
    seed: u64,
    epoch: usize,
    adam_step: u64,
    best: Option<BestMeta>,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorMeta>,
}

fn tensor_groups(state: &TrainState) -> Vec<(&'static str, &ParamSet)> {
    let mut groups = vec![
        ("param", &state.model.params),
        ("adam_m", &state.adam.m),
        ("adam_v", &state.adam.v),
    ];
    if let Some(b) = &state.best {
        groups.push(("best", &b.params));
    }
    groups
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let groups = tensor_groups(state);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (prefix, set) in &groups {
        for e in set.entries() {
            let len = e.value.len();
            tensors.push(TensorMeta {
                name: format!("{prefix}/{}", e.name),
                shape: e.shape.clone(),
                offset,
                len,
            });
            offset += len;
        }
    }
    let header = CheckpointHeader {
        config: state.config.clone(),
        seed: state.seed,
        epoch: state.epoch,
        adam_step: state.adam.step,
        best: state.best.as_ref().map(|b| BestMeta { epoch: b.epoch, auc: b.auc }),
        history: state.history.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("plain data");
    let payload = groups
        .iter()
        .flat_map(|(_, set)| set.entries().iter())
        .flat_map(|e| e.value.iter().map(|&v| v as f32));
    container::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, payload)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    container::write_file(path, &checkpoint_bytes(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = container::read_file(path)?;
    parse_checkpoint(path, &bytes)
}

pub fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<TrainState> {
    let (header, payload) = container::decode(path, bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header: CheckpointHeader = serde_json::from_slice(header).map_err(|e| Error::json(path, e))?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let values = container::floats(path, payload, total)?;
    let manifest = |reason: String| Error::Manifest {
        path: path.into(),
        reason,
    };

    let mut config = header.config;
    config.train.seed = header.seed;
    let mut state = TrainState::new(&config)?;
    state.epoch = header.epoch;
    state.adam.step = header.adam_step;
    state.history = header.history;
    if let Some(b) = &header.best {
        state.best = Some(BestSnapshot {
            epoch: b.epoch,
            auc: b.auc,
            params: state.model.params.clone(),
        });
    }
    let expected: usize = tensor_groups(&state).iter().map(|(_, s)| s.len()).sum();
    if expected != header.tensors.len() {
        return Err(manifest(format!("expected {expected} tensors, found {}", header.tensors.len())));
    }
    for t in &header.tensors {
        if t.offset + t.len > values.len() {
            return Err(manifest(format!("tensor {} exceeds the payload", t.name)));
        }
        let (prefix, name) = t
            .name
            .split_once('/')
            .ok_or_else(|| manifest(format!("malformed tensor name {}", t.name)))?;
        let set = match prefix {
            "param" => &mut state.model.params,
            "adam_m" => &mut state.adam.m,
            "adam_v" => &mut state.adam.v,
            "best" => match &mut state.best {
                Some(b) => &mut b.params,
                None => return Err(manifest("best tensors without a best snapshot".into())),
            },
            _ => return Err(manifest(format!("unknown tensor group {prefix}"))),
        };
        let id = set.find(name).ok_or_else(|| manifest(format!("unknown tensor {}", t.name)))?;
        let entry = &mut set.entries_mut()[id.index()];
        if entry.shape != t.shape || entry.value.len() != t.len {
            return Err(manifest(format!("tensor {} has shape {:?}, model expects {:?}", t.name, t.shape, entry.shape)));
        }
        for (dst, &src) in entry.value.iter_mut().zip(&values[t.offset..t.offset + t.len]) {
            *dst = f64::from(src);
        }
    }
    Ok(state)
}

/// Agreement of analytic and finite-difference gradients for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the checked entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

/// Default tiny network for the gradient check: `C = 8`, `T = 12`, `D = 6`.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        temporal_scale: 12,
        max_duration: 6,
        feature_dim: 8,
        num_samples: 4,
        heads: 2,
        widths: NetWidths {
            base1: 6,
            base2: 5,
            base3: 6,
            pam3d: 7,
            pam2d: 4,
        },
        ..ModelConfig::default()
    }
}

fn grad_check_data(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(FeatureBundle, SupervisionTargets)> {
    let t = cfg.temporal_scale;
    let c = cfg.feature_dim;
    let global = ndarray::Array2::from_shape_fn((t, c), |_| rng.gen_range(-1.0f32..1.0));
    let agents = (0..t)
        .map(|i| ndarray::Array2::from_shape_fn((i % 3, c), |_| rng.gen_range(-1.0f32..1.0)))
        .collect();
    let bundle = FeatureBundle::new("gradcheck", global, agents)?;
    let len = t as f64;
    let actions = vec![
        ActionInstance::new(0.15 * len, 0.4 * len)?,
        ActionInstance::new(0.55 * len, 0.9 * len)?,
    ];
    let record = VideoRecord::new("gradcheck", len, 1.0, t as u64, actions)?;
    let targets = build_targets(&record, cfg)?;
    Ok((bundle, targets))
}

/// Compares analytic gradients of the total loss with central differences of
/// step `h` on up to `samples` entries of every parameter group.
pub fn grad_check(cfg: &ModelConfig, seed: u64, h: f64, samples: usize) -> Result<GradCheckReport> {
    let mut model = AbnModel::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    // Perturb the zero-initialised no-agent embedding so its gradient path is non-trivial.
    if let Some(id) = model.params.find("fusion.no_agent") {
        model.params.entries_mut()[id.index()]
            .value
            .mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    let (bundle, targets) = grad_check_data(cfg, &mut rng)?;
    let mut grads = model.params.zeros_like();
    model.loss_and_grad(&bundle, &targets, &mut grads)?;

    let mut groups = Vec::new();
    for gi in 0..model.params.len() {
        let n = model.params.entries()[gi].value.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(samples);
        idx.sort_unstable();
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for &k in &idx {
            let orig = model.params.entries()[gi].value.as_slice().expect("contiguous")[k];
            let mut eval = |v: f64| -> Result<f64> {
                model.params.entries_mut()[gi].value.as_slice_mut().expect("contiguous")[k] = v;
                Ok(model.loss(&bundle, &targets)?.l_total)
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            eval(orig)?;
            let analytic = grads.entries()[gi].value.as_slice().expect("contiguous")[k];
            diff += (analytic - numeric).powi(2);
            an += analytic * analytic;
            nn += numeric * numeric;
        }
        let scale = an.sqrt().max(nn.sqrt());
        let rel_error = if scale < 1e-12 { 0.0 } else { diff.sqrt() / scale };
        groups.push(GroupCheck {
            name: model.params.entries()[gi].name.clone(),
            checked: idx.len(),
            rel_error,
            analytic_norm: an.sqrt(),
        });
    }
    let max_rel_error = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step: h,
        groups,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FeatureMode;

    fn record(id: &str, action: f64) -> VideoRecord {
        VideoRecord::new(id, 100.0, 10.0, 1000, vec![ActionInstance::new(0.0, action).unwrap()]).unwrap()
    }

    #[test]
    fn augmentation_rules() {
        let vids = vec![record("long", 99.0), record("short", 20.0), record("mid", 50.0)];
        let out = augment_dataset(&vids, 0.98, 0.3);
        let ids: Vec<&str> = out.iter().map(|r| r.video_id.as_str()).collect();
        assert_eq!(ids, vec!["short", "short", "mid"]);
        assert_eq!(out[0], vids[1]);
        let bare = VideoRecord::new("bare", 10.0, 10.0, 100, vec![]).unwrap();
        assert_eq!(augment_dataset(&[bare.clone()], 0.98, 0.3), vec![bare]);
    }

    fn tiny() -> Config {
        let mut cfg = Config::default();
        cfg.model = grad_check_config();
        cfg.train.batch_size = 2;
        cfg.train.lr = 1e-3;
        cfg
    }

    fn examples(cfg: &Config) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..3)
            .map(|i| {
                let (bundle, targets) = grad_check_data(&cfg.model, &mut rng).unwrap();
                let record = VideoRecord::new(
                    format!("v{i}"),
                    12.0,
                    1.0,
                    12,
                    vec![ActionInstance::new(2.0, 5.0).unwrap()],
                )
                .unwrap();
                TrainingExample { record, bundle, targets }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_parameters() {
        let mut cfg = tiny();
        let ex = examples(&cfg);
        cfg.train.epochs = 0;
        let init = TrainState::new(&cfg).unwrap();
        let s = train(&ex, &[], &cfg).unwrap();
        assert!(checkpoint_bytes(&s) == checkpoint_bytes(&init));
        cfg.train.epochs = 2;
        cfg.train.lr = 0.0;
        let s = train(&ex, &[], &cfg).unwrap();
        assert!(s.model.params.entries().iter().zip(init.model.params.entries()).all(|(a, b)| a.value == b.value));
        assert_eq!(s.adam.step, 4);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let mut cfg = tiny();
        cfg.train.epochs = 2;
        let ex = examples(&cfg);
        let val: Vec<_> = ex.iter().map(|e| (e.record.clone(), e.bundle.clone())).collect();
        let a = train(&ex, &val, &cfg).unwrap();
        let b = train(&ex, &val, &cfg).unwrap();
        let bytes = checkpoint_bytes(&a);
        assert!(bytes == checkpoint_bytes(&b));
        assert!(a.best.is_some());
        let loaded = parse_checkpoint(Path::new("mem"), &bytes).unwrap();
        assert!(checkpoint_bytes(&loaded) == bytes);
        assert_eq!(loaded.history, a.history);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let cfg = tiny();
        let bytes = checkpoint_bytes(&TrainState::new(&cfg).unwrap());
        let p = Path::new("mem");
        assert!(matches!(parse_checkpoint(p, &bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(parse_checkpoint(p, &extra), Err(Error::Manifest { .. })));
        let mut ver = bytes.clone();
        ver[8] = 9;
        assert!(matches!(parse_checkpoint(p, &ver), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn gradient_check_on_tiny_networks() {
        for mode in [FeatureMode::AgentEnv, FeatureMode::EnvOnly, FeatureMode::AgentOnly] {
            let cfg = ModelConfig {
                feature_mode: mode,
                ..grad_check_config()
            };
            let r = grad_check(&cfg, 1, 1e-4, 6).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{mode:?}: {:?}", r.groups);
        }
    }
}
