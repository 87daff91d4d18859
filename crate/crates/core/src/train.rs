//! Two-stage pipeline: optional relative pre-training of the backbone, then
//! end-to-end metric fine-tuning of backbone, heads, and router with plain
//! SGD. Everything is deterministic given (config, seeds).

use crate::array::NdArray;
use crate::assembly::{metric_head_forward, BoundMetricHead, MetricHead};
use crate::backbone::{backbone_forward, BackboneConfig, BackboneParams};
use crate::config::{CropChoice, RouterKind, RunConfig};
use crate::datagen::{make_dataset, Sample};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::formats::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::losses::silog;
use crate::metrics::{average_records, compute_metrics, flip_average, CropKind, EvalProtocol, MetricRecord};
use crate::nn::{apply_sgd, Binder, ParamSet, SgdOpts};
use crate::rng::Rng;
use crate::router::{route_auto, route_trained, BoundRouter, DomainLabel, RouteDecision, RouterParams};
use crate::tape::{NodeId, Tape};

/// Hidden width of the router classifier MLP.
pub const ROUTER_HIDDEN: usize = 16;
/// Weight of the router cross-entropy inside the fine-tuning objective.
pub const ROUTER_CE_WEIGHT: f64 = 1.0;

/// Complete trainable state: shared backbone, per-domain metric heads, and
/// the routing classifier.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub backbone: BackboneParams<f32>,
    pub heads: Vec<MetricHead<f32>>,
    pub router: RouterParams<f32>,
}

impl Model {
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let bb_cfg = BackboneConfig {
            in_channels: crate::datagen::IN_CHANNELS,
            bottleneck_channels: config.channels,
        };
        let backbone =
            BackboneParams::init(bb_cfg.clone(), &mut Rng::split(config.train_seed, 1));
        let mut heads = Vec::with_capacity(config.heads);
        for i in 0..config.heads {
            heads.push(MetricHead::init(
                config.head_domain(i),
                config.head_depth_range(i),
                config.head_kind,
                config.prob_head,
                config.n_total,
                config.attractor.clone(),
                bb_cfg.bottleneck_channels,
                &bb_cfg.decoder_channels(),
                &mut Rng::split(config.train_seed, 2 + i as u64),
            )?);
        }
        let router = RouterParams::init(
            bb_cfg.bottleneck_channels,
            ROUTER_HIDDEN,
            config.heads.max(2),
            &mut Rng::split(config.train_seed, 10),
        );
        Ok(Model { config, backbone, heads, router })
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: crate::datagen::IN_CHANNELS,
            bottleneck_channels: self.config.channels,
        }
    }

    /// Head parameters relative to the backbone, per head. The design keeps
    /// every head under 5% of the backbone at this scale.
    pub fn head_param_ratios(&self) -> Vec<f64> {
        let bb = self.backbone.param_count() as f64;
        self.heads.iter().map(|h| h.param_count() as f64 / bb).collect()
    }

    pub fn to_named_arrays(&self) -> Vec<(String, NdArray<f32>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, arr| out.push((name.to_string(), arr.clone())));
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.to_named_arrays(), &self.config.to_config_string())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse_str(&ck.config_text)?;
        let mut model = Model::init(config)?;
        let mut missing = Vec::new();
        model.visit_mut(&mut |name, arr| match ck.arrays.iter().find(|(n, _)| n == name) {
            Some((_, stored)) if stored.shape() == arr.shape() => *arr = stored.clone(),
            _ => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint does not match model: bad or missing arrays: {}",
                missing.join(", ")
            )));
        }
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Model::from_checkpoint(&load_checkpoint(path)?)
    }
}

impl ParamSet<f32> for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &NdArray<f32>)) {
        self.backbone.visit(f);
        for h in &self.heads {
            h.visit(f);
        }
        self.router.fc1.weight.visit_as("router.fc1.w", f);
        self.router.fc1.bias.visit_as("router.fc1.b", f);
        self.router.fc2.weight.visit_as("router.fc2.w", f);
        self.router.fc2.bias.visit_as("router.fc2.b", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut NdArray<f32>)) {
        self.backbone.visit_mut(f);
        for h in &mut self.heads {
            h.visit_mut(f);
        }
        f("router.fc1.w", &mut self.router.fc1.weight);
        f("router.fc1.b", &mut self.router.fc1.bias);
        f("router.fc2.w", &mut self.router.fc2.weight);
        f("router.fc2.b", &mut self.router.fc2.bias);
    }
}

trait VisitAs {
    fn visit_as(&self, name: &str, f: &mut dyn FnMut(&str, &NdArray<f32>));
}

impl VisitAs for NdArray<f32> {
    fn visit_as(&self, name: &str, f: &mut dyn FnMut(&str, &NdArray<f32>)) {
        f(name, self);
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub pretrain_trace: Vec<f64>,
    pub finetune_trace: Vec<f64>,
}

struct BoundModel {
    backbone: crate::backbone::BoundBackbone,
    heads: Vec<BoundMetricHead>,
    router: BoundRouter,
}

fn bind_model<'t>(model: &Model, binder: &mut Binder<'t, f32>) -> BoundModel {
    BoundModel {
        backbone: model.backbone.bind(binder),
        heads: model.heads.iter().map(|h| h.bind(binder)).collect(),
        router: model.router.bind(binder),
    }
}

/// Forward through backbone and the routed head during training. Returns the
/// depth node plus an optional router CE node.
fn train_forward(
    tape: &Tape<f32>,
    model: &Model,
    bound: &BoundModel,
    sample: &Sample,
) -> Result<(NodeId, Option<NodeId>)> {
    let img = tape.leaf(sample.image.clone());
    let (rel, pyramid) = backbone_forward(tape, &bound.backbone, img, &model.backbone_config())?;
    if model.heads.len() == 1 {
        let depth = metric_head_forward(tape, &pyramid, rel, &model.heads[0], &bound.heads[0])?;
        return Ok((depth, None));
    }
    let label = sample.domain.index();
    match model.config.router {
        RouterKind::Labeled => {
            let depth = metric_head_forward(
                tape,
                &pyramid,
                rel,
                &model.heads[label],
                &bound.heads[label],
            )?;
            Ok((depth, None))
        }
        RouterKind::Trained => {
            // Supervised head assignment; the classifier trains jointly on CE.
            let (_, ce) = route_trained(tape, bound.router, pyramid.bottleneck, Some(label))?;
            let depth = metric_head_forward(
                tape,
                &pyramid,
                rel,
                &model.heads[label],
                &bound.heads[label],
            )?;
            Ok((depth, ce))
        }
        RouterKind::Auto => {
            // No labels anywhere: blend the heads by router weight so the
            // router receives gradient through the depth loss.
            let (_, weights) = route_auto(tape, bound.router, pyramid.bottleneck)?;
            let mut blended: Option<NodeId> = None;
            for (i, (head, bound_head)) in model.heads.iter().zip(&bound.heads).enumerate() {
                let d = metric_head_forward(tape, &pyramid, rel, head, bound_head)?;
                let w = tape.pick(weights, i)?;
                let term = tape.scalar_mul(d, w)?;
                blended = Some(match blended {
                    None => term,
                    Some(b) => tape.add(b, term)?,
                });
            }
            Ok((blended.expect("at least one head"), None))
        }
    }
}

/// Stage-2 fine-tuning over the given samples; mutates the model in place and
/// returns the per-step loss trace.
///
/// Batches are stratified across domains when the model has multiple heads:
/// slot b draws from domain b mod 2, so every step feeds both heads. Random
/// batches of a two-head model occasionally starve one head while the shared
/// backbone keeps moving, which destabilizes small fixed-step runs.
pub fn finetune(model: &mut Model, samples: &[Sample], opts: &SgdOpts) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Contract("finetune: dataset is empty".into()));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
    for (i, s) in samples.iter().enumerate() {
        pools[s.domain.index()].push(i);
    }
    let stratify = model.heads.len() > 1 && pools.iter().all(|p| !p.is_empty());
    let mut rng = Rng::new(opts.seed);
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape: Tape<f32> = Tape::new();
        let mut binder = Binder::new(&tape);
        let bound = bind_model(model, &mut binder);
        let mut loss_terms = Vec::new();
        for slot in 0..opts.batch.max(1) {
            let sample = if stratify {
                let pool = &pools[slot % 2];
                &samples[pool[rng.below(pool.len())]]
            } else {
                &samples[rng.below(samples.len())]
            };
            let (depth, ce) = train_forward(&tape, model, &bound, sample)?;
            let pixel_loss = silog(
                &tape,
                depth,
                &sample.depth.values,
                &sample.depth.valid,
                &model.config.loss,
            )?;
            let term = match ce {
                Some(ce) => tape.add(
                    pixel_loss,
                    tape.mul_scalar(ce, ROUTER_CE_WEIGHT as f32),
                )?,
                None => pixel_loss,
            };
            loss_terms.push(term);
        }
        let mut total = loss_terms[0];
        for t in &loss_terms[1..] {
            total = tape.add(total, *t)?;
        }
        let loss = tape.mul_scalar(total, 1.0 / loss_terms.len() as f32);
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("fine-tuning diverged at step {step}: loss {value}")));
        }
        trace.push(value);
        tape.backward(loss)?;
        apply_sgd(model, &binder.gradients(), opts.step_size);
    }
    Ok(trace)
}

/// Runs the configured stages on a freshly initialized model.
pub fn train(config: RunConfig) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let mut model = Model::init(config.clone())?;
    let samples = make_dataset(
        config.samples,
        config.indoor_fraction,
        config.data_seed,
        config.height,
        config.width,
    )?;
    let mut report = TrainReport::default();
    if config.pretrain {
        let opts = SgdOpts {
            steps: config.pretrain_steps,
            step_size: config.pretrain_step_size,
            batch: config.batch,
            seed: Rng::split(config.train_seed, 100).next_u64(),
        };
        report.pretrain_trace =
            crate::backbone::pretrain_relative(&mut model.backbone, &samples, &opts, &config.loss)?;
    }
    if config.finetune {
        let opts = SgdOpts {
            steps: config.steps,
            step_size: config.step_size,
            batch: config.batch,
            seed: Rng::split(config.train_seed, 200).next_u64(),
        };
        report.finetune_trace = finetune(&mut model, &samples, &opts)?;
    }
    Ok((model, report))
}

/// One frozen-parameter prediction, routed per the model's router kind.
/// Returns the depth map and the routing decision (when heads > 1).
pub fn predict(model: &Model, sample: &Sample) -> Result<(DepthMap, Option<RouteDecision>)> {
    let tape: Tape<f32> = Tape::new();
    let mut binder = Binder::new(&tape);
    let bound = bind_model(model, &mut binder);
    let img = tape.leaf(sample.image.clone());
    let (rel, pyramid) = backbone_forward(&tape, &bound.backbone, img, &model.backbone_config())?;
    let (head_idx, decision) = if model.heads.len() == 1 {
        (0usize, None)
    } else {
        match model.config.router {
            RouterKind::Labeled => {
                let d = crate::router::route_labeled(sample.domain, model.heads.len())?;
                (d.hard_choice, Some(d))
            }
            RouterKind::Trained => {
                let (d, _) = route_trained(&tape, bound.router, pyramid.bottleneck, None)?;
                (d.hard_choice, Some(d))
            }
            RouterKind::Auto => {
                let (d, _) = route_auto(&tape, bound.router, pyramid.bottleneck)?;
                (d.hard_choice, Some(d))
            }
        }
    };
    let depth = metric_head_forward(
        &tape,
        &pyramid,
        rel,
        &model.heads[head_idx],
        &bound.heads[head_idx],
    )?;
    let values = tape.value_clone(depth);
    Ok((DepthMap::dense(values)?, decision))
}

/// Prediction with optional flip averaging: the mirrored input runs through
/// the full pipeline (routing included) and the mirrored output is averaged
/// back in.
pub fn predict_eval(model: &Model, sample: &Sample) -> Result<(DepthMap, Option<RouteDecision>)> {
    let (depth, decision) = predict(model, sample)?;
    if !model.config.flip_average {
        return Ok((depth, decision));
    }
    let mirrored = Sample {
        image: sample.image.flip_horizontal(),
        depth: sample.depth.flip_horizontal(),
        domain: sample.domain,
        seed: sample.seed,
    };
    let (depth_m, _) = predict(model, &mirrored)?;
    Ok((flip_average(&depth, &depth_m)?, decision))
}

fn protocol_for(config: &RunConfig, domain: DomainLabel) -> Result<EvalProtocol> {
    let cap = match domain {
        DomainLabel::Indoor => config.cap_indoor,
        DomainLabel::Outdoor => config.cap_outdoor,
    };
    let crop = match config.eval_crop {
        CropChoice::Fixed(k) => k,
        CropChoice::Auto => match domain {
            DomainLabel::Indoor => CropKind::Eigen,
            DomainLabel::Outdoor => CropKind::Garg,
        },
    };
    EvalProtocol::new(cap, config.depth_floor, crop, config.flip_average)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// One averaged record per domain present in the evaluation set.
    pub rows: Vec<(String, MetricRecord)>,
    /// Fraction of samples routed to the head matching their label
    /// (present when the model has multiple heads).
    pub routing_accuracy: Option<f64>,
}

/// Evaluates the frozen model on a freshly generated evaluation split.
pub fn evaluate(model: &Model) -> Result<EvalOutcome> {
    let config = &model.config;
    let samples = make_dataset(
        config.eval_samples,
        config.eval_indoor_fraction,
        config.eval_seed,
        config.height,
        config.width,
    )?;
    evaluate_on(model, &samples)
}

/// Evaluates the frozen model on the given samples.
pub fn evaluate_on(model: &Model, samples: &[Sample]) -> Result<EvalOutcome> {
    let mut per_domain: Vec<(DomainLabel, Vec<MetricRecord>)> = Vec::new();
    let mut routed_right = 0usize;
    let mut routed_total = 0usize;
    for sample in samples {
        let (depth, decision) = predict_eval(model, sample)?;
        if let Some(d) = decision {
            routed_total += 1;
            if d.hard_choice == sample.domain.index() {
                routed_right += 1;
            }
        }
        let protocol = protocol_for(&model.config, sample.domain)?;
        let record = compute_metrics(&depth, &sample.depth, &protocol)?;
        match per_domain.iter_mut().find(|(d, _)| *d == sample.domain) {
            Some((_, recs)) => recs.push(record),
            None => per_domain.push((sample.domain, vec![record])),
        }
    }
    per_domain.sort_by_key(|(d, _)| d.index());
    let rows = per_domain
        .into_iter()
        .map(|(d, recs)| Ok((d.name().to_string(), average_records(&recs)?)))
        .collect::<Result<Vec<_>>>()?;
    let routing_accuracy =
        (routed_total > 0).then(|| routed_right as f64 / routed_total as f64);
    Ok(EvalOutcome { rows, routing_accuracy })
}
