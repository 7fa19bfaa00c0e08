//! Three-stage training orchestration and the end-to-end forward pass.
//!
//! Stage 1 trains the router as a classifier over pooled general-encoder
//! features. Stage 2 aligns the per-expert adapters (and, by default, the
//! decoder's input embeddings) to the frozen decoder under the captioning
//! objective with routing active. Stage 3 fine-tunes decoder + adapters
//! jointly. Encoders are pre-fitted once at init and frozen forever; the
//! router is frozen after stage 1 (a flag can re-enable it in stage 2).
//!
//! Because encoders and router are frozen during the language-model stages,
//! every sample's routed, reduced feature map is computed once up front and
//! cached; the training loop then touches only adapters and decoder.

pub mod ablate;
pub mod checkpoint;
pub mod metrics;

use std::collections::HashMap;
use std::time::Instant;

use crate::adapters::{build_adapters, Adapter};
use crate::decoder::{assemble, lm_loss_train, Decoder, MultimodalSequence, Vocab, BOS};
use crate::error::{Error, Result};
use crate::nn::cross_entropy;
use crate::optim::{adamw_step, OptimizerConfig};
use crate::profile::{Profile, ProfileId, EXPERT_GENERAL};
use crate::rng::Rng;
use crate::router::{
    logit_loss_grad, mean_pool, route_logits, routing_accuracy, select_expert, ExpertId, Router,
};
use crate::synthdata::{Dataset, Sample};
use crate::tensor::Tensor;
use crate::vision::{encode_resized, prefit, reduce, Encoder, FeatureMap, ImageTensor};

use metrics::MetricsWriter;

// ─── Provenance ──────────────────────────────────────────────────────────

pub const PROV_INIT: u8 = 1;
pub const PROV_ROUTER: u8 = 2;
pub const PROV_PRETRAIN: u8 = 4;
pub const PROV_FINETUNE: u8 = 8;

pub fn provenance_names(p: u8) -> String {
    let mut parts = Vec::new();
    for (bit, name) in [
        (PROV_INIT, "init"),
        (PROV_ROUTER, "router"),
        (PROV_PRETRAIN, "pretrain"),
        (PROV_FINETUNE, "finetune"),
    ] {
        if p & bit != 0 {
            parts.push(name);
        }
    }
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join("+")
    }
}

// ─── Checkpoint (in-memory form) ─────────────────────────────────────────

/// The full model state: everything needed to resume or evaluate.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub profile: ProfileId,
    pub seed: u64,
    /// Bitwise OR of the PROV_* flags for the stages that produced this.
    pub provenance: u8,
    /// Expert encoders, indexed by expert id.
    pub encoders: Vec<Encoder>,
    pub router: Router,
    pub adapters: Vec<Adapter>,
    pub decoder: Decoder,
    pub rng: Rng,
}

/// Images per domain used for encoder pre-fitting.
const PREFIT_IMAGES: usize = 64;
/// Held-out samples per class used for periodic eval during stages 2/3.
const EVAL_PER_CLASS: usize = 40;

/// Build and pre-fit the full model. Each encoder is fitted to its home
/// domain by masked-patch reconstruction, then frozen for good.
pub fn init_checkpoint(
    profile: &Profile,
    seed: u64,
    train: &[Sample],
    router_bias: bool,
) -> Result<Checkpoint> {
    profile.validate()?;
    let root = Rng::new(seed);
    let mut encoders = Vec::with_capacity(profile.experts());
    for (i, spec) in profile.encoders.iter().enumerate() {
        let mut enc_rng = root.derive(10 + i as u64);
        let mut enc = Encoder::new(spec.clone(), profile.channels, &mut enc_rng)?;
        let home: Vec<ImageTensor> = train
            .iter()
            .filter(|s| s.label.0 == i)
            .take(PREFIT_IMAGES)
            .map(|s| s.image.clone())
            .collect();
        if home.is_empty() {
            return Err(Error::Config(format!(
                "init: no training samples for domain {i} to pre-fit encoder {}",
                spec.name
            )));
        }
        prefit(&mut enc, &home, &profile.prefit, &mut enc_rng)?;
        encoders.push(enc);
    }
    let router = Router::new(profile.router_width(), profile.experts(), router_bias);
    let widths: Vec<(ExpertId, usize)> = profile
        .encoders
        .iter()
        .enumerate()
        .map(|(i, s)| (ExpertId(i), s.post_width()))
        .collect();
    let adapters = build_adapters(&widths, profile.d_llm, &mut root.derive(20))?;
    let decoder = Decoder::new(
        Vocab::desk(),
        profile.d_llm,
        profile.decoder_blocks,
        profile.heads,
        profile.context,
        &mut root.derive(30),
    );
    Ok(Checkpoint {
        profile: profile.id,
        seed,
        provenance: PROV_INIT,
        encoders,
        router,
        adapters,
        decoder,
        rng: root.derive(40),
    })
}

// ─── Forward pass ────────────────────────────────────────────────────────

/// What the router decided for one image.
#[derive(Debug, Clone)]
pub struct RouteInfo {
    pub expert: ExpertId,
    /// K=1 gate weights: one-hot at the selected expert.
    pub gate: Vec<f64>,
    pub pooled_norm: f64,
    pub forced: bool,
}

/// Route one image: one general-encoder pass, mean-pool, one gate product.
/// Returns the decision plus the (raw) general feature map for reuse.
pub fn route_image(ckpt: &Checkpoint, image: &ImageTensor) -> Result<(RouteInfo, FeatureMap)> {
    let gfeat = encode_resized(&ckpt.encoders[EXPERT_GENERAL], image)?;
    let pooled = mean_pool(&gfeat);
    let logits = route_logits(&ckpt.router, &pooled)?;
    let expert = select_expert(&logits)?;
    let mut gate = vec![0.0; ckpt.router.experts()];
    gate[expert.0] = 1.0;
    let pooled_norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((
        RouteInfo {
            expert,
            gate,
            pooled_norm,
            forced: false,
        },
        gfeat,
    ))
}

/// Route (or obey the override), run the selected expert, reduce, adapt.
/// When the general expert wins, its routing features are reused — that
/// path costs a single encoder forward.
pub fn routed_features(
    ckpt: &Checkpoint,
    image: &ImageTensor,
    override_expert: Option<ExpertId>,
) -> Result<(RouteInfo, FeatureMap)> {
    let (mut info, gfeat) = route_image(ckpt, image)?;
    if let Some(e) = override_expert {
        if e.0 >= ckpt.encoders.len() {
            return Err(Error::IndexOutOfRange {
                what: "expert id",
                index: e.0,
                bound: ckpt.encoders.len(),
            });
        }
        info.expert = e;
        info.gate = vec![0.0; ckpt.router.experts()];
        info.gate[e.0] = 1.0;
        info.forced = true;
    }
    let e = info.expert.0;
    let raw = if e == EXPERT_GENERAL {
        gfeat
    } else {
        encode_resized(&ckpt.encoders[e], image)?
    };
    let reduced = reduce(&raw, &ckpt.encoders[e].spec)?;
    let adapted = ckpt.adapters[e].adapt(&reduced)?;
    Ok((info, adapted))
}

#[derive(Debug)]
pub struct ForwardResult {
    pub route: RouteInfo,
    /// Per-position vocabulary logits for `[visual][BOS][prompt]`.
    pub logits: Tensor,
}

/// The full inference path: route → encode → reduce → adapt → decode.
pub fn forward(
    ckpt: &Checkpoint,
    image: &ImageTensor,
    prompt_ids: &[usize],
    override_expert: Option<ExpertId>,
) -> Result<ForwardResult> {
    let (route, adapted) = routed_features(ckpt, image, override_expert)?;
    let mut text_ids = Vec::with_capacity(1 + prompt_ids.len());
    text_ids.push(BOS);
    text_ids.extend_from_slice(prompt_ids);
    let seq = MultimodalSequence {
        loss_mask: vec![false; adapted.token_count() + text_ids.len()],
        visual: adapted.tokens.clone(),
        text_ids,
    };
    let logits = ckpt.decoder.forward_logits(&seq)?;
    Ok(ForwardResult { route, logits })
}

// ─── Stage configuration ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Router,
    Pretrain,
    Finetune,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Router => "router",
            StageKind::Pretrain => "pretrain",
            StageKind::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<StageKind> {
        match s {
            "router" => Ok(StageKind::Router),
            "pretrain" => Ok(StageKind::Pretrain),
            "finetune" => Ok(StageKind::Finetune),
            _ => Err(Error::Config(format!(
                "unknown stage {s:?} (expected router, pretrain or finetune)"
            ))),
        }
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: StageKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Every this many steps, evaluate on held-out data and attach an
    /// accuracy field to the metrics record. 0 disables periodic eval.
    pub eval_cadence: usize,
    /// Stage 2 only: also train the decoder's input embeddings.
    pub train_embedding: bool,
    /// Stage 2 only: keep training the router (auxiliary classification
    /// loss) instead of freezing it.
    pub router_trainable: bool,
}

impl StageConfig {
    /// The desk schedule: learning rates straight from the reference
    /// regime, steps and batches scaled down to desk runtimes.
    pub fn desk_default(stage: StageKind, seed: u64) -> StageConfig {
        let (learning_rate, batch_size, steps, eval_cadence) = match stage {
            StageKind::Router => (1e-2, 12, 2000, 200),
            StageKind::Pretrain => (2e-3, 32, 1800, 300),
            StageKind::Finetune => (1e-5, 24, 1900, 300),
        };
        StageConfig {
            stage,
            learning_rate,
            batch_size,
            steps,
            seed,
            eval_cadence,
            train_embedding: stage == StageKind::Pretrain,
            router_trainable: false,
        }
    }

    /// Human-readable description of what this stage updates.
    pub fn trainable_set(&self) -> String {
        match self.stage {
            StageKind::Router => "router".into(),
            StageKind::Pretrain => {
                let mut s = String::from("adapters");
                if self.train_embedding {
                    s.push_str("+embedding");
                }
                if self.router_trainable {
                    s.push_str("+router");
                }
                s
            }
            StageKind::Finetune => "decoder+adapters".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "stage {}: learning rate {} must be positive",
                self.stage.name(),
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!(
                "stage {}: batch size must be at least 1",
                self.stage.name()
            )));
        }
        if self.stage != StageKind::Pretrain && self.router_trainable {
            return Err(Error::Config(format!(
                "stage {}: the router is only trainable in stage 2",
                self.stage.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: StageKind,
    pub steps: usize,
    /// Training loss at the final step (None when steps == 0).
    pub final_loss: Option<f64>,
    /// Held-out mean lm loss (stages 2/3) after the run.
    pub heldout_loss: Option<f64>,
    /// Held-out routing accuracy (stage 1) or caption token accuracy
    /// (stages 2/3) after the run.
    pub heldout_accuracy: Option<f64>,
    /// Optimizer updates applied per adapter (stages 2/3).
    pub adapter_updates: Vec<usize>,
    pub wall_ms: u64,
}

impl StageSummary {
    fn empty(stage: StageKind) -> StageSummary {
        StageSummary {
            stage,
            steps: 0,
            final_loss: None,
            heldout_loss: None,
            heldout_accuracy: None,
            adapter_updates: Vec::new(),
            wall_ms: 0,
        }
    }
}

fn require_provenance(ckpt: &Checkpoint, bit: u8, needed: &str) -> Result<()> {
    if ckpt.provenance & bit == 0 {
        return Err(Error::Checkpoint {
            section: "provenance".into(),
            detail: format!(
                "{needed} required (checkpoint provenance is only {})",
                provenance_names(ckpt.provenance)
            ),
        });
    }
    Ok(())
}

// ─── Feature preparation (frozen-encoder cache) ──────────────────────────

/// Pooled features, caption ids and reduced per-expert feature maps for a
/// sample set. Encoders never train, so this is computed once per stage.
struct Prepared {
    labels: Vec<ExpertId>,
    targets: Vec<Vec<usize>>,
    pooled: Vec<Vec<f64>>,
    /// Per sample: expert id → reduced (pre-adapter) features. Warmed with
    /// the routed expert; other experts fill in lazily on demand.
    reduced: Vec<HashMap<usize, FeatureMap>>,
}

fn reduced_for<'a>(
    map: &'a mut HashMap<usize, FeatureMap>,
    encoders: &[Encoder],
    image: &ImageTensor,
    e: usize,
) -> Result<&'a FeatureMap> {
    if !map.contains_key(&e) {
        let raw = encode_resized(&encoders[e], image)?;
        map.insert(e, reduce(&raw, &encoders[e].spec)?);
    }
    Ok(&map[&e])
}

impl Prepared {
    fn new(ckpt: &Checkpoint, samples: &[Sample]) -> Result<Prepared> {
        let vocab = &ckpt.decoder.vocab;
        let mut labels = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        let mut pooled = Vec::with_capacity(samples.len());
        let mut reduced = Vec::with_capacity(samples.len());
        for s in samples {
            labels.push(s.label);
            targets.push(vocab.encode(&s.caption)?);
            let raw = encode_resized(&ckpt.encoders[EXPERT_GENERAL], &s.image)?;
            let p = mean_pool(&raw);
            let routed = select_expert(&route_logits(&ckpt.router, &p)?)?;
            let mut map = HashMap::new();
            if routed.0 == EXPERT_GENERAL {
                map.insert(
                    EXPERT_GENERAL,
                    reduce(&raw, &ckpt.encoders[EXPERT_GENERAL].spec)?,
                );
            } else {
                let eraw = encode_resized(&ckpt.encoders[routed.0], &s.image)?;
                map.insert(routed.0, reduce(&eraw, &ckpt.encoders[routed.0].spec)?);
            }
            pooled.push(p);
            reduced.push(map);
        }
        Ok(Prepared {
            labels,
            targets,
            pooled,
            reduced,
        })
    }

    /// Pooled general features only (stage 1 needs nothing else).
    fn pooled_only(ckpt: &Checkpoint, samples: &[Sample]) -> Result<(Vec<Vec<f64>>, Vec<ExpertId>)> {
        let mut pooled = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            let raw = encode_resized(&ckpt.encoders[EXPERT_GENERAL], &s.image)?;
            pooled.push(mean_pool(&raw));
            labels.push(s.label);
        }
        Ok((pooled, labels))
    }
}

// ─── Stage 1: router training ────────────────────────────────────────────

pub fn run_stage1(
    mut ckpt: Checkpoint,
    data: &Dataset,
    cfg: &StageConfig,
    metrics: &mut MetricsWriter,
) -> Result<(Checkpoint, StageSummary)> {
    cfg.validate()?;
    require_provenance(&ckpt, PROV_INIT, "an initialized checkpoint")?;
    if cfg.steps == 0 {
        return Ok((ckpt, StageSummary::empty(StageKind::Router)));
    }
    let t0 = Instant::now();
    let (train_pooled, train_labels) = Prepared::pooled_only(&ckpt, &data.train)?;
    let (held_pooled, held_labels) = Prepared::pooled_only(&ckpt, &data.heldout)?;

    for p in ckpt.router.params_mut() {
        p.reset_moments();
        p.zero_grad();
    }
    let opt = OptimizerConfig::with_lr(cfg.learning_rate);
    let mut rng = Rng::new(cfg.seed).derive(1);
    let mut step = 0usize;
    let mut final_loss = f64::NAN;
    let mut accuracy = f64::NAN;
    while step < cfg.steps {
        let chunk = if cfg.eval_cadence > 0 {
            cfg.eval_cadence.min(cfg.steps - step)
        } else {
            cfg.steps - step
        };
        let trace = crate::router::train_router(
            &mut ckpt.router,
            &train_pooled,
            &train_labels,
            chunk,
            cfg.batch_size,
            &opt,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::Diverged { stage, step: s } => Error::Diverged {
                stage,
                step: step + s,
            },
            other => other,
        })?;
        accuracy = routing_accuracy(&ckpt.router, &held_pooled, &held_labels)?;
        for (k, &loss) in trace.iter().enumerate() {
            let at_eval = k + 1 == trace.len();
            metrics.write(
                "router",
                step + k + 1,
                loss,
                cfg.learning_rate,
                at_eval.then_some(accuracy),
            )?;
        }
        final_loss = *trace.last().unwrap();
        step += chunk;
    }
    metrics.flush()?;
    ckpt.provenance |= PROV_ROUTER;
    ckpt.rng = rng;
    let summary = StageSummary {
        stage: StageKind::Router,
        steps: cfg.steps,
        final_loss: Some(final_loss),
        heldout_loss: None,
        heldout_accuracy: Some(accuracy),
        adapter_updates: Vec::new(),
        wall_ms: t0.elapsed().as_millis() as u64,
    };
    Ok((ckpt, summary))
}

// ─── Stages 2/3: captioning objective ────────────────────────────────────

/// Mean held-out lm loss and teacher-forced token accuracy over `idxs`.
fn lm_eval(
    ckpt: &Checkpoint,
    prep: &mut Prepared,
    samples: &[Sample],
    idxs: &[usize],
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    for &i in idxs {
        let expert = select_expert(&route_logits(&ckpt.router, &prep.pooled[i])?)?;
        let fmap = reduced_for(
            &mut prep.reduced[i],
            &ckpt.encoders,
            &samples[i].image,
            expert.0,
        )?;
        let (tokens, _) = ckpt.adapters[expert.0].forward(&fmap.tokens)?;
        let (gh, gw) = (fmap.grid_h, fmap.grid_w);
        let seq = assemble(&FeatureMap::new(gh, gw, tokens), &[], &prep.targets[i])?;
        let logits = ckpt.decoder.forward_logits(&seq)?;
        let t = seq.visual.rows();
        let mut sample_loss = 0.0;
        let mut n = 0usize;
        for (p, &m) in seq.loss_mask.iter().enumerate() {
            if !m {
                continue;
            }
            let target = seq.text_ids[p - t];
            let row = logits.row(p - 1);
            sample_loss += cross_entropy(row, target)?.0;
            n += 1;
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            if argmax == target {
                hits += 1;
            }
            total += 1;
        }
        loss_sum += sample_loss / n as f64;
    }
    Ok((
        loss_sum / idxs.len().max(1) as f64,
        hits as f64 / total.max(1) as f64,
    ))
}

/// Shared driver for stages 2 and 3; the stage kind decides the trainable
/// set and which provenance gate applies.
fn run_lm_stage(
    mut ckpt: Checkpoint,
    data: &Dataset,
    cfg: &StageConfig,
    metrics: &mut MetricsWriter,
) -> Result<(Checkpoint, StageSummary)> {
    cfg.validate()?;
    let stage = cfg.stage;
    match stage {
        StageKind::Pretrain => require_provenance(&ckpt, PROV_ROUTER, "stage-1 checkpoint")?,
        StageKind::Finetune => require_provenance(&ckpt, PROV_PRETRAIN, "stage-2 checkpoint")?,
        StageKind::Router => unreachable!("run_lm_stage only handles stages 2/3"),
    }
    if cfg.steps == 0 {
        return Ok((ckpt, StageSummary::empty(stage)));
    }
    let t0 = Instant::now();
    let full_decoder = stage == StageKind::Finetune;
    let train_embedding = stage == StageKind::Pretrain && cfg.train_embedding;
    let router_trainable = stage == StageKind::Pretrain && cfg.router_trainable;

    let mut train_prep = Prepared::new(&ckpt, &data.train)?;
    let eval_n = (EVAL_PER_CLASS * ckpt.encoders.len()).min(data.heldout.len());
    let mut held_prep = Prepared::new(&ckpt, &data.heldout[..eval_n])?;
    let eval_idxs: Vec<usize> = (0..eval_n).collect();

    // Fresh optimizer state for everything this stage may update.
    for a in &mut ckpt.adapters {
        for p in a.params_mut() {
            p.reset_moments();
            p.zero_grad();
        }
    }
    for p in ckpt.decoder.params_mut() {
        p.reset_moments();
        p.zero_grad();
    }
    if router_trainable {
        for p in ckpt.router.params_mut() {
            p.reset_moments();
            p.zero_grad();
        }
    }

    let opt = OptimizerConfig::with_lr(cfg.learning_rate);
    let mut rng = Rng::new(cfg.seed).derive(2 + full_decoder as u64);
    let n = data.train.len();
    let experts = ckpt.encoders.len();
    let mut adapter_updates = vec![0usize; experts];
    let mut final_loss = f64::NAN;
    let mut last_eval: Option<(f64, f64)> = None;

    for step in 0..cfg.steps {
        let mut batch_loss = 0.0;
        let mut participated = vec![0usize; experts];
        for _ in 0..cfg.batch_size {
            let i = rng.below(n);
            let expert = select_expert(&route_logits(&ckpt.router, &train_prep.pooled[i])?)?;
            let e = expert.0;
            let fmap = reduced_for(
                &mut train_prep.reduced[i],
                &ckpt.encoders,
                &data.train[i].image,
                e,
            )?;
            let (gh, gw) = (fmap.grid_h, fmap.grid_w);
            let (tokens, acache) = ckpt.adapters[e].forward(&fmap.tokens)?;
            let seq = assemble(&FeatureMap::new(gh, gw, tokens), &[], &train_prep.targets[i])?;
            let (loss, d_visual) = lm_loss_train(&mut ckpt.decoder, &seq)?;
            ckpt.adapters[e].backward(&acache, &d_visual)?;
            participated[e] += 1;
            batch_loss += loss;
            if router_trainable {
                let (rloss, dw, db, _) =
                    logit_loss_grad(&ckpt.router, &train_prep.pooled[i], train_prep.labels[i])?;
                batch_loss += rloss;
                ckpt.router.w.grad.add_assign(&dw)?;
                if let Some(b) = &mut ckpt.router.bias {
                    for (g, d) in b.grad.row_mut(0).iter_mut().zip(&db) {
                        *g += d;
                    }
                }
            }
        }
        let loss = batch_loss / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: stage.name().to_string(),
                step,
            });
        }
        final_loss = loss;
        let inv = 1.0 / cfg.batch_size as f64;

        // Step the trainable set; zero every accumulated gradient either way.
        for (e, a) in ckpt.adapters.iter_mut().enumerate() {
            if participated[e] > 0 {
                for p in a.params_mut() {
                    p.grad.scale(inv);
                    adamw_step(p, &opt)?;
                    p.zero_grad();
                }
                adapter_updates[e] += 1;
            } else {
                for p in a.params_mut() {
                    p.zero_grad();
                }
            }
        }
        if full_decoder {
            for p in ckpt.decoder.params_mut() {
                p.grad.scale(inv);
                adamw_step(p, &opt)?;
                p.zero_grad();
            }
        } else {
            if train_embedding {
                for p in ckpt.decoder.embedding_params_mut() {
                    p.grad.scale(inv);
                    adamw_step(p, &opt)?;
                    p.zero_grad();
                }
            }
            for p in ckpt.decoder.params_mut() {
                p.zero_grad();
            }
        }
        if router_trainable {
            for p in ckpt.router.params_mut() {
                p.grad.scale(inv);
                adamw_step(p, &opt)?;
                p.zero_grad();
            }
        }

        let at_eval = cfg.eval_cadence > 0
            && ((step + 1) % cfg.eval_cadence == 0 || step + 1 == cfg.steps);
        let mut accuracy = None;
        if at_eval {
            let (el, ea) = lm_eval(&ckpt, &mut held_prep, &data.heldout[..eval_n], &eval_idxs)?;
            last_eval = Some((el, ea));
            accuracy = Some(ea);
        }
        metrics.write(stage.name(), step + 1, loss, cfg.learning_rate, accuracy)?;
    }
    metrics.flush()?;
    if last_eval.is_none() {
        let (el, ea) = lm_eval(&ckpt, &mut held_prep, &data.heldout[..eval_n], &eval_idxs)?;
        last_eval = Some((el, ea));
    }
    ckpt.provenance |= if full_decoder { PROV_FINETUNE } else { PROV_PRETRAIN };
    ckpt.rng = rng;
    let summary = StageSummary {
        stage,
        steps: cfg.steps,
        final_loss: Some(final_loss),
        heldout_loss: last_eval.map(|(l, _)| l),
        heldout_accuracy: last_eval.map(|(_, a)| a),
        adapter_updates,
        wall_ms: t0.elapsed().as_millis() as u64,
    };
    Ok((ckpt, summary))
}

pub fn run_stage2(
    ckpt: Checkpoint,
    data: &Dataset,
    cfg: &StageConfig,
    metrics: &mut MetricsWriter,
) -> Result<(Checkpoint, StageSummary)> {
    run_lm_stage(ckpt, data, cfg, metrics)
}

pub fn run_stage3(
    ckpt: Checkpoint,
    data: &Dataset,
    cfg: &StageConfig,
    metrics: &mut MetricsWriter,
) -> Result<(Checkpoint, StageSummary)> {
    run_lm_stage(ckpt, data, cfg, metrics)
}

/// Dispatch on the configured stage.
pub fn run_stage(
    ckpt: Checkpoint,
    data: &Dataset,
    cfg: &StageConfig,
    metrics: &mut MetricsWriter,
) -> Result<(Checkpoint, StageSummary)> {
    match cfg.stage {
        StageKind::Router => run_stage1(ckpt, data, cfg, metrics),
        StageKind::Pretrain => run_stage2(ckpt, data, cfg, metrics),
        StageKind::Finetune => run_stage3(ckpt, data, cfg, metrics),
    }
}
