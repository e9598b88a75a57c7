//! Stage-wise training: detector on boxes, then a segmentation head on the
//! mask-annotated subset with every detector tensor frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, RngState, Stage};
use crate::autodiff::Graph;
use crate::data::augment::{augment, random_box_subset, random_subset_indices, AugmentConfig};
use crate::data::SynthSample;
use crate::decoder::semantic_pyramid_loss;
use crate::detector::PREFIX as DETECTOR_PREFIX;
use crate::error::{Error, Result};
use crate::instance::{instance_pyramid_loss, sample_instance_boxes, PsConfig};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Fractions of `steps` after which the rate is divided by 10.
    pub drop_fractions: [f64; 2],
    pub steps: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Instance stage only.
    pub ps: PsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            lr: 0.01,
            momentum: 0.9,
            drop_fractions: [0.6, 0.9],
            steps: 1000,
            seed: 0,
            augment: AugmentConfig::default(),
            ps: PsConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the stage's base learning rate.
    pub fn for_stage(stage: Stage) -> Self {
        let lr = match stage {
            Stage::Detector => 0.01,
            Stage::Semantic => 0.01,
            Stage::Instance => 0.02,
        };
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        let [a, b] = self.drop_fractions;
        if !(0.0 < a && a < b && b <= 1.0) {
            return bad(format!(
                "drop fractions must satisfy 0 < a < b <= 1, got {a}, {b}"
            ));
        }
        self.ps.validate()
    }

    /// Learning rate used at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f32 {
        let drops = self
            .drop_fractions
            .iter()
            .filter(|&&f| step as f64 >= f * self.steps as f64)
            .count();
        self.lr * 0.1f32.powi(drops as i32)
    }
}

/// Per-step mean loss and the index of every sample drawn, in draw order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f32>,
    pub accessed: Vec<usize>,
}

/// Endless seeded-shuffle order over `pool`.
struct Sampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    next: usize,
}

impl Sampler {
    fn new(pool: Vec<usize>) -> Self {
        Self {
            pool,
            order: Vec::new(),
            next: 0,
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.next == self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

fn finish(
    store: ParamStore,
    stage: Stage,
    step: usize,
    rng: &ChaCha8Rng,
    model: &ModelConfig,
) -> Checkpoint {
    let mut params = store;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in names {
        params.get_mut(&n).expect("listed").set_requires_grad(false);
    }
    Checkpoint {
        meta: CheckpointMeta {
            stage,
            step,
            rng: RngState::capture(rng),
            model: model.clone(),
        },
        params: params.without_momentum(),
    }
}

/// Trains the detection module on every sample's boxes.
pub fn train_detector(
    samples: &[SynthSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let model = Model::new(model_cfg.clone())?;
    let det = &model.detector;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    model.init_detector(&mut store, &mut rng);
    let mut sampler = Sampler::new((0..samples.len()).collect());
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut total = 0.0f64;
        for _ in 0..cfg.batch {
            let i = sampler.draw(&mut rng);
            report.accessed.push(i);
            let s = augment(&samples[i], &cfg.augment, &mut rng);
            let mut g = Graph::new();
            let x = g.input(s.to_tensor());
            let levels = det.backbone_vars(&mut g, &store, x)?;
            let heads = det.head_vars(&mut g, &store, &levels)?;
            let grids: Vec<(usize, usize)> = levels
                .iter()
                .map(|&v| g.value(v).dims4().map(|[_, _, h, w]| (h, w)))
                .collect::<Result<_>>()?;
            let defaults = det.build_default_boxes(&grids);
            let loss = det.detection_loss_vars(&mut g, &heads, &defaults, &s.boxes())?;
            total += g.value(loss).data()[0] as f64;
            let scaled = g.scale(loss, 1.0 / cfg.batch as f32);
            g.backward(scaled)?.accumulate_into(&mut store)?;
        }
        store.sgd_momentum_step(cfg.lr_at(step), cfg.momentum)?;
        report.losses.push((total / cfg.batch as f64) as f32);
    }
    Ok((
        finish(store, Stage::Detector, cfg.steps, &rng, model_cfg),
        report,
    ))
}

fn frozen_detector_store(detector: &Checkpoint) -> Result<ParamStore> {
    if detector.meta.stage != Stage::Detector {
        return Err(Error::InvalidArgument(format!(
            "expected a detector checkpoint, got stage {}",
            detector.meta.stage
        )));
    }
    let mut store = ParamStore::new();
    store.merge_prefix(&detector.params, DETECTOR_PREFIX);
    if store.is_empty() {
        return Err(Error::InvalidArgument(
            "checkpoint holds no detector tensors".into(),
        ));
    }
    store.set_trainable(DETECTOR_PREFIX, false);
    Ok(store)
}

fn mask_pool(samples: &[SynthSample]) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].has_mask_annotation)
        .collect();
    if pool.is_empty() {
        return Err(Error::Dataset("no mask-annotated samples".into()));
    }
    Ok(pool)
}

/// Trains decoder and semantic head with the detector frozen. Each drawn
/// sample contributes one term per present class, attended with a random
/// nonempty subset of that class's boxes; a step averages the batch's terms.
pub fn train_semantic(
    samples: &[SynthSample],
    detector: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let pool = mask_pool(samples)?;
    let model_cfg = detector.meta.model.clone();
    let model = Model::new(model_cfg.clone())?;
    let mut store = frozen_detector_store(detector)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.init_semantic(&mut store, &mut rng);
    let mut sampler = Sampler::new(pool);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = sampler.draw(&mut rng);
            report.accessed.push(i);
            batch.push(augment(&samples[i], &cfg.augment, &mut rng));
        }
        let terms: usize = batch.iter().map(|s| s.classes().len()).sum();
        let mut total = 0.0f64;
        for s in &batch {
            let pyramid = model.detector.backbone_forward(&store, &s.to_tensor())?;
            for class in s.classes() {
                let boxes = random_box_subset(&s.boxes_of(class), &mut rng);
                let (loss, grads) = semantic_pyramid_loss(
                    &model.decoder,
                    &store,
                    &pyramid,
                    &s.class_mask(class),
                    &boxes,
                    1.0 / terms as f32,
                )?;
                total += loss as f64;
                grads.accumulate_into(&mut store)?;
            }
        }
        store.sgd_momentum_step(cfg.lr_at(step), cfg.momentum)?;
        report.losses.push((total / terms as f64) as f32);
    }
    Ok((
        finish(store, Stage::Semantic, cfg.steps, &rng, &model_cfg),
        report,
    ))
}

/// Trains decoder and position-sensitive head with the detector frozen.
/// Per drawn sample and present class, a random nonempty subset of the
/// class's boxes drives attention and supplies the ground truth for the
/// sampler.
pub fn train_instance(
    samples: &[SynthSample],
    detector: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let pool = mask_pool(samples)?;
    let mut model_cfg = detector.meta.model.clone();
    model_cfg.k = cfg.ps.k;
    let model = Model::new(model_cfg.clone())?;
    let mut store = frozen_detector_store(detector)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.init_instance(&mut store, &mut rng);
    let mut sampler = Sampler::new(pool);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut work = Vec::new();
        for _ in 0..cfg.batch {
            let i = sampler.draw(&mut rng);
            report.accessed.push(i);
            let s = augment(&samples[i], &cfg.augment, &mut rng);
            let mut terms = Vec::new();
            for class in s.classes() {
                let idx: Vec<usize> = (0..s.instances.len())
                    .filter(|&j| s.instances[j].class == class)
                    .collect();
                let chosen: Vec<usize> = random_subset_indices(idx.len(), &mut rng)
                    .into_iter()
                    .map(|t| idx[t])
                    .collect();
                let boxes: Vec<_> = chosen.iter().map(|&j| s.instances[j].bbox).collect();
                let masks: Vec<Vec<bool>> = chosen
                    .iter()
                    .map(|&j| s.instances[j].mask.clone())
                    .collect();
                let drawn = sample_instance_boxes(&boxes, &cfg.ps, &mut rng);
                if !drawn.is_empty() {
                    terms.push((boxes, masks, drawn));
                }
            }
            work.push((s, terms));
        }
        let count: usize = work.iter().map(|(_, t)| t.len()).sum();
        if count == 0 {
            return Err(Error::Dataset(
                "sampler produced no boxes for a whole batch".into(),
            ));
        }
        let mut total = 0.0f64;
        for (s, terms) in &work {
            if terms.is_empty() {
                continue;
            }
            let pyramid = model.detector.backbone_forward(&store, &s.to_tensor())?;
            for (boxes, masks, drawn) in terms {
                let (loss, grads) = instance_pyramid_loss(
                    &model.decoder,
                    &store,
                    &pyramid,
                    boxes,
                    cfg.ps.k,
                    drawn,
                    masks,
                    1.0 / count as f32,
                )?;
                total += loss as f64;
                grads.accumulate_into(&mut store)?;
            }
        }
        store.sgd_momentum_step(cfg.lr_at(step), cfg.momentum)?;
        report.losses.push((total / count as f64) as f32);
    }
    Ok((
        finish(store, Stage::Instance, cfg.steps, &rng, &model_cfg),
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::data::DatasetConfig;

    #[test]
    fn schedule_drops_twice() {
        let cfg = TrainConfig {
            lr: 0.01,
            steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(59), 0.01);
        assert!((cfg.lr_at(60) - 0.001).abs() < 1e-9);
        assert!((cfg.lr_at(89) - 0.001).abs() < 1e-9);
        assert!((cfg.lr_at(90) - 0.0001).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = TrainConfig::default();
        for cfg in [
            TrainConfig {
                lr: 0.0,
                ..base.clone()
            },
            TrainConfig {
                batch: 0,
                ..base.clone()
            },
            TrainConfig {
                drop_fractions: [0.9, 0.6],
                ..base.clone()
            },
            TrainConfig {
                momentum: 1.0,
                ..base.clone()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert_eq!(TrainConfig::for_stage(Stage::Instance).lr, 0.02);
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch: 2,
            steps: 2,
            ..Default::default()
        }
    }

    #[test]
    fn detector_then_semantic_freezes_detector() {
        let mut corpus = generate_corpus(1, 6, &DatasetConfig::default()).unwrap();
        for s in corpus.iter_mut().skip(2) {
            s.has_mask_annotation = false;
        }
        let (det, rep) = train_detector(&corpus, &ModelConfig::default(), &tiny()).unwrap();
        assert_eq!(rep.losses.len(), 2);
        assert!(rep.losses.iter().all(|l| l.is_finite()));
        let (sem, rep) = train_semantic(&corpus, &det, &tiny()).unwrap();
        assert!(rep.accessed.iter().all(|&i| i < 2));
        for (name, t) in det.params.iter() {
            assert_eq!(sem.params.get(name).unwrap().data(), t.data(), "{name}");
        }
        assert!(sem.params.names().any(|n| n.starts_with("semantic.")));
    }

    #[test]
    fn no_masks_is_an_error() {
        let mut corpus = generate_corpus(2, 3, &DatasetConfig::default()).unwrap();
        let (det, _) = train_detector(&corpus, &ModelConfig::default(), &tiny()).unwrap();
        corpus
            .iter_mut()
            .for_each(|s| s.has_mask_annotation = false);
        assert!(train_semantic(&corpus, &det, &tiny()).is_err());
        assert!(train_instance(&corpus, &det, &tiny()).is_err());
    }
}
