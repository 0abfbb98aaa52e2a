//! Joint objective and the two-stage optimization loop.

use std::fmt;

use crate::amse::{AmseModel, AmseVars, EmbedKind, MarginConfig, MarginMode};
use crate::autos2v::{build_adjacency, discretize, Arch, ArchParams, CellSpec, S2vModel, S2vShape, S2vVars};
use crate::dataio::{ClassId, GzslDataset, Sample};
use crate::error::{Error, Result};
use crate::gate::{calibrate_tau, entropy, evaluate, evaluate_ungated, DEFAULT_PERCENTILE};
use crate::metrics::MetricsReport;
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::params::Parameters;

const STREAM_AMSE: u64 = 10;
const STREAM_S2V: u64 = 11;
const STREAM_ALPHA: u64 = 12;
const STREAM_SHUFFLE: u64 = 13;

/// Architecture widths shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_kind: EmbedKind,
    /// Reduction width `D` of the discriminative branch.
    pub reduced: usize,
    /// Joint-space width `E`.
    pub embed_dim: usize,
    pub n_nodes: usize,
    pub top_k: usize,
    pub use_normalization: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_kind: EmbedKind::CrossAttentive,
            reduced: 8,
            embed_dim: 32,
            n_nodes: 3,
            top_k: 3,
            use_normalization: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    /// Weight of the anti-collapse term.
    pub gamma: f64,
    pub temperature: f64,
    pub margin: MarginConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Published optimizer settings: lr 0.001, momentum 0.9, σ 0.5.
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            epochs_stage1: 10,
            epochs_stage2: 10,
            batch_size: 16,
            gamma: 1.0,
            temperature: 0.1,
            margin: MarginConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Settings that converge within seconds on the synthetic benchmark.
    pub fn desk() -> Self {
        TrainConfig { lr: 0.05, epochs_stage1: 20, epochs_stage2: 60, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        pos("temperature", self.temperature)?;
        self.margin.validate()
    }
}

/// SGD with momentum: `v = μv + g`, `p -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!("{} parameters for {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::dim(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Both branches of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Dvbe {
    pub amse: AmseModel,
    pub s2v: S2vModel,
}

impl Dvbe {
    /// Fresh models. With `cell = None` the semantic embedding starts as a
    /// continuous search space.
    pub fn init(ds: &GzslDataset, model: &ModelConfig, cell: Option<CellSpec>, seed: u64) -> Result<Self> {
        let mut amse_rng = Rng::stream(seed, STREAM_AMSE);
        let amse = AmseModel::init(
            model.embed_kind,
            ds.channels(),
            model.reduced,
            ds.seen_ids(),
            model.use_normalization,
            &mut amse_rng,
        )?;
        let arch = match cell {
            Some(c) => Arch::Discrete(c),
            None => Arch::Continuous(ArchParams::random(model.n_nodes, 1e-3, &mut Rng::stream(seed, STREAM_ALPHA))),
        };
        let adjacency = build_adjacency(&ds.attribute_matrix(), model.top_k.min(ds.semantics.len() - 1))?;
        let shape = S2vShape { channels: ds.channels(), attr_dim: ds.attr_dim(), embed_dim: model.embed_dim };
        let s2v = S2vModel::init(&shape, ds.class_ids(), adjacency, arch, &mut Rng::stream(seed, STREAM_S2V))?;
        Ok(Dvbe { amse, s2v })
    }

    /// Replaces the continuous scores by their discretized cell.
    pub fn fix_architecture(&mut self) -> Result<CellSpec> {
        let cell = match &self.s2v.arch {
            Arch::Continuous(a) => discretize(a)?,
            Arch::Discrete(c) => c.clone(),
        };
        self.s2v.arch = Arch::Discrete(cell.clone());
        Ok(cell)
    }

    pub fn all_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.amse.params();
        out.extend(self.s2v.params());
        out.extend(self.s2v.alpha_params());
        out
    }
}

/// Loss terms of one batch as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub s2v: Var,
    pub ams: Var,
    pub cet: Var,
    pub all: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub s2v: f64,
    pub ams: f64,
    pub cet: f64,
    pub all: f64,
}

fn named<T>(component: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::numeric(format!("{component}: {m}")),
        other => other,
    })
}

/// Classifier rows double as positions in `seen_rows`, which lists the
/// semantic rows of the classifier's classes in order.
struct BatchIndex {
    amse_targets: Vec<usize>,
    rows: Vec<usize>,
    seen_rows: Vec<usize>,
}

fn batch_index(models: &Dvbe, labels: &[ClassId]) -> Result<BatchIndex> {
    let amse_targets = labels.iter().map(|&l| models.amse.class_index(l)).collect::<Result<Vec<_>>>()?;
    let rows = labels.iter().map(|&l| models.s2v.class_row(l)).collect::<Result<Vec<_>>>()?;
    let seen_rows = models.amse.classes.iter().map(|&c| models.s2v.class_row(c)).collect::<Result<Vec<_>>>()?;
    Ok(BatchIndex { amse_targets, rows, seen_rows })
}

/// S2V alignment and anti-collapse terms.
fn s2v_terms(
    tape: &Tape,
    models: &Dvbe,
    sv: &S2vVars,
    xs: &[&Tensor],
    attributes: &Tensor,
    idx: &BatchIndex,
    config: &TrainConfig,
) -> Result<(Var, Var)> {
    let s2v = &models.s2v;
    let visual = named("L_s2v", s2v.embed_visual_on(tape, sv, xs))?;
    let attrs = tape.leaf(attributes.clone());
    let semantic = named("L_s2v", s2v.embed_semantic_on(tape, sv, attrs))?;
    let l_s2v = named("L_s2v", s2v.s2v_loss_on(tape, visual, semantic, &idx.rows))?;
    let l_cet = named(
        "L_cet",
        s2v.cet_loss_on(tape, visual, semantic, &idx.seen_rows, &idx.amse_targets, config.temperature),
    )?;
    Ok((l_s2v, l_cet))
}

/// `L_all = L_s2v + L_ams + γ·L_cet` on the tape. The margins `λ` are
/// constants: `frozen` if given, otherwise taken from the current logits.
#[allow(clippy::too_many_arguments)]
pub fn overall_loss_on(
    tape: &Tape,
    models: &Dvbe,
    av: &AmseVars,
    sv: &S2vVars,
    xs: &[&Tensor],
    labels: &[ClassId],
    attributes: &Tensor,
    config: &TrainConfig,
    frozen: Option<&[f64]>,
) -> Result<LossVars> {
    let idx = batch_index(models, labels)?;
    let amse = &models.amse;
    let features = named("L_ams", amse.embed_batch_on(tape, av, xs))?;
    let lambdas = match frozen {
        Some(l) => l.to_vec(),
        None => {
            let logits = tape.value(amse.logits_on(tape, av, features)?);
            amse.margins(&logits, &idx.amse_targets, &config.margin)?
        }
    };
    let ams = named("L_ams", amse.margin_loss_on(tape, av, features, &idx.amse_targets, &lambdas))?;
    let (s2v, cet) = s2v_terms(tape, models, sv, xs, attributes, &idx, config)?;
    let all = named("L_all", tape.add(tape.add(s2v, ams)?, tape.scale(cet, config.gamma)?))?;
    Ok(LossVars { s2v, ams, cet, all })
}

/// Loss values and gradients for one batch: AMSE parameters, S2V weights,
/// architecture scores (empty for a fixed cell).
pub struct BatchGrads {
    pub loss: LossValues,
    pub amse: Vec<Tensor>,
    pub s2v: Vec<Tensor>,
    pub alpha: Vec<Tensor>,
}

pub fn overall_loss(
    models: &Dvbe,
    batch: &[&Sample],
    attributes: &Tensor,
    config: &TrainConfig,
) -> Result<BatchGrads> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let tape = Tape::new();
    let av = models.amse.bind(&tape);
    let sv = models.s2v.bind(&tape);
    let xs: Vec<&Tensor> = batch.iter().map(|s| &s.feature).collect();
    let labels: Vec<ClassId> = batch.iter().map(|s| s.label).collect();
    let l = overall_loss_on(&tape, models, &av, &sv, &xs, &labels, attributes, config, None)?;
    let loss = LossValues {
        s2v: tape.scalar(l.s2v),
        ams: tape.scalar(l.ams),
        cet: tape.scalar(l.cet),
        all: tape.scalar(l.all),
    };
    let grads = tape.backward(l.all)?;
    Ok(BatchGrads {
        loss,
        amse: av.all().into_iter().map(|v| grads.wrt(v)).collect(),
        s2v: sv.weights().into_iter().map(|v| grads.wrt(v)).collect(),
        alpha: sv.alphas().into_iter().map(|v| grads.wrt(v)).collect(),
    })
}

/// Gradient of `L_all` with respect to the architecture scores only. The
/// classifier term does not depend on them and is skipped.
fn alpha_grads(models: &Dvbe, batch: &[&Sample], attributes: &Tensor, config: &TrainConfig) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let sv = models.s2v.bind(&tape);
    let xs: Vec<&Tensor> = batch.iter().map(|s| &s.feature).collect();
    let labels: Vec<ClassId> = batch.iter().map(|s| s.label).collect();
    let idx = batch_index(models, &labels)?;
    let (s2v, cet) = s2v_terms(&tape, models, &sv, &xs, attributes, &idx, config)?;
    let total = tape.add(s2v, tape.scale(cet, config.gamma)?)?;
    let grads = tape.backward(total)?;
    Ok(sv.alphas().into_iter().map(|v| grads.wrt(v)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossValues,
    /// Seen-validation top-1 accuracy of the classifier, percent.
    pub val_acc: f64,
    pub val_entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,l_s2v,l_ams,l_cet,l_all,val_acc,val_entropy";

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{TRAIN_LOG_HEADER}")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{:.8},{:.8},{:.8},{:.8},{:.4},{:.8}",
                r.epoch, r.loss.s2v, r.loss.ams, r.loss.cet, r.loss.all, r.val_acc, r.val_entropy
            )?;
        }
        Ok(())
    }
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        self.to_string()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss.all)
    }
}

fn batches<'a>(samples: &'a [Sample], size: usize, rng: &mut Rng) -> Vec<Vec<&'a Sample>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    order.chunks(size).map(|c| c.iter().map(|&i| &samples[i]).collect()).collect()
}

fn validation(models: &Dvbe, ds: &GzslDataset) -> Result<(f64, f64)> {
    if ds.val_seen.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hits = 0;
    let mut h = 0.0;
    for s in &ds.val_seen {
        let p = models.amse.predict_probs(&s.feature)?;
        if models.amse.classes[p.argmax()] == s.label {
            hits += 1;
        }
        h += entropy(&p)?;
    }
    let n = ds.val_seen.len() as f64;
    Ok((100.0 * hits as f64 / n, h / n))
}

struct Optimizers {
    amse: Sgd,
    s2v: Sgd,
    alpha: Sgd,
}

impl Optimizers {
    fn new(config: &TrainConfig) -> Self {
        Optimizers {
            amse: Sgd::new(config.lr, config.momentum),
            s2v: Sgd::new(config.lr, config.momentum),
            alpha: Sgd::new(config.lr, config.momentum),
        }
    }
}

fn weight_pass(
    models: &mut Dvbe,
    ds: &GzslDataset,
    attributes: &Tensor,
    config: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut Rng,
) -> Result<LossValues> {
    let mut sum = LossValues::default();
    let mut n = 0usize;
    for batch in batches(&ds.train_seen, config.batch_size, rng) {
        let g = overall_loss(models, &batch, attributes, config)?;
        opt.amse.step(models.amse.params_mut().into_iter().map(|(_, t)| t).collect(), &g.amse)?;
        opt.s2v.step(models.s2v.params_mut().into_iter().map(|(_, t)| t).collect(), &g.s2v)?;
        let b = batch.len();
        sum.s2v += g.loss.s2v * b as f64;
        sum.ams += g.loss.ams * b as f64;
        sum.cet += g.loss.cet * b as f64;
        sum.all += g.loss.all * b as f64;
        n += b;
    }
    let n = n as f64;
    Ok(LossValues { s2v: sum.s2v / n, ams: sum.ams / n, cet: sum.cet / n, all: sum.all / n })
}

fn alpha_pass(
    models: &mut Dvbe,
    ds: &GzslDataset,
    attributes: &Tensor,
    config: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut Rng,
) -> Result<()> {
    for batch in batches(&ds.val_seen, config.batch_size, rng) {
        let g = alpha_grads(models, &batch, attributes, config)?;
        opt.alpha.step(models.s2v.alpha_params_mut().into_iter().map(|(_, t)| t).collect(), &g)?;
    }
    Ok(())
}

/// Search: per epoch, a weight pass on `train_seen` then an architecture
/// pass on `val_seen`.
pub fn train_stage1(ds: &GzslDataset, models: &mut Dvbe, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if !matches!(models.s2v.arch, Arch::Continuous(_)) {
        return Err(Error::contract("architecture search needs continuous scores"));
    }
    if ds.train_seen.is_empty() || ds.val_seen.is_empty() {
        return Err(Error::invalid("search needs non-empty train and validation splits"));
    }
    let attributes = ds.attribute_matrix();
    let mut opt = Optimizers::new(config);
    let mut rng = Rng::stream(config.seed, STREAM_SHUFFLE);
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs_stage1 {
        let loss = weight_pass(models, ds, &attributes, config, &mut opt, &mut rng)?;
        alpha_pass(models, ds, &attributes, config, &mut opt, &mut rng)?;
        let (val_acc, val_entropy) = validation(models, ds)?;
        log.records.push(EpochRecord { epoch, loss, val_acc, val_entropy });
    }
    Ok(log)
}

/// Fine-tuning of all weights with a fixed cell.
pub fn train_stage2(ds: &GzslDataset, models: &mut Dvbe, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if !matches!(models.s2v.arch, Arch::Discrete(_)) {
        return Err(Error::contract("fine-tuning needs a discretized architecture"));
    }
    if ds.train_seen.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let attributes = ds.attribute_matrix();
    let mut opt = Optimizers::new(config);
    let mut rng = Rng::stream(config.seed, STREAM_SHUFFLE + 1);
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs_stage2 {
        let loss = weight_pass(models, ds, &attributes, config, &mut opt, &mut rng)?;
        let (val_acc, val_entropy) = validation(models, ds)?;
        log.records.push(EpochRecord { epoch, loss, val_acc, val_entropy });
    }
    Ok(log)
}

/// Result of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub models: Dvbe,
    pub cell: CellSpec,
    pub search_log: TrainLog,
    pub train_log: TrainLog,
    pub tau: f64,
}

/// Search, discretize, fine-tune from fresh weights, calibrate τ.
pub fn run_pipeline(ds: &GzslDataset, model: &ModelConfig, config: &TrainConfig, percentile: f64) -> Result<PipelineRun> {
    let mut search = Dvbe::init(ds, model, None, config.seed)?;
    let search_log = train_stage1(ds, &mut search, config)?;
    let cell = search.fix_architecture()?;
    let (models, train_log, tau) = train_cell(ds, model, config, cell.clone(), percentile)?;
    Ok(PipelineRun { models, cell, search_log, train_log, tau })
}

/// Fresh models on a fixed cell, stage-2 training, τ calibration.
pub fn train_cell(
    ds: &GzslDataset,
    model: &ModelConfig,
    config: &TrainConfig,
    cell: CellSpec,
    percentile: f64,
) -> Result<(Dvbe, TrainLog, f64)> {
    let mut models = Dvbe::init(ds, model, Some(cell), config.seed)?;
    let log = train_stage2(ds, &mut models, config)?;
    let tau = calibrate_tau(&crate::gate::val_entropies(ds, &models.amse)?, percentile)?;
    Ok((models, log, tau))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub tau: f64,
    pub report: MetricsReport,
    pub final_loss: f64,
}

pub const ABLATION_HEADER: &str = "row,tau,mca_s,mca_u,h,r_s,r_u,h_r,final_loss";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{},{:.8}\n", r.name, r.tau, r.report, r.final_loss));
    }
    out
}

/// Component and margin ablations.
///
/// Rows `base_s2v`, `first_order`, `cross_attentive` and `adaptive_margin`
/// add one component at a time on the hand-designed two-layer semantic
/// embedding. Rows `margin_standard`, `margin_fixed` and `margin_adaptive`
/// compare margin modes on the searched cell.
pub fn run_ablation(ds: &GzslDataset, model: &ModelConfig, config: &TrainConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let hand = CellSpec::two_layer_fc();
    let with = |kind: EmbedKind, mode: MarginMode| {
        let m = ModelConfig { embed_kind: kind, ..model.clone() };
        let c = TrainConfig { margin: MarginConfig { mode, ..config.margin }, ..config.clone() };
        (m, c)
    };

    let (m, c) = with(EmbedKind::FirstOrder, MarginMode::Standard);
    let (fo, fo_log, fo_tau) = train_cell(ds, &m, &c, hand.clone(), DEFAULT_PERCENTILE)?;
    rows.push(AblationRow {
        name: "base_s2v".into(),
        tau: f64::NAN,
        report: evaluate_ungated(ds, &fo.s2v)?,
        final_loss: fo_log.final_loss().unwrap_or(f64::NAN),
    });
    rows.push(AblationRow {
        name: "first_order".into(),
        tau: fo_tau,
        report: evaluate(ds, &fo.amse, &fo.s2v, fo_tau)?,
        final_loss: fo_log.final_loss().unwrap_or(f64::NAN),
    });
    for (name, mode) in [("cross_attentive", MarginMode::Standard), ("adaptive_margin", MarginMode::Adaptive)] {
        let (m, c) = with(EmbedKind::CrossAttentive, mode);
        let (models, log, tau) = train_cell(ds, &m, &c, hand.clone(), DEFAULT_PERCENTILE)?;
        rows.push(AblationRow {
            name: name.into(),
            tau,
            report: evaluate(ds, &models.amse, &models.s2v, tau)?,
            final_loss: log.final_loss().unwrap_or(f64::NAN),
        });
    }

    let (m, c) = with(EmbedKind::CrossAttentive, MarginMode::Adaptive);
    let mut search = Dvbe::init(ds, &m, None, c.seed)?;
    train_stage1(ds, &mut search, &c)?;
    let cell = search.fix_architecture()?;
    for (name, mode) in [
        ("margin_standard", MarginMode::Standard),
        ("margin_fixed", MarginMode::Fixed),
        ("margin_adaptive", MarginMode::Adaptive),
    ] {
        let (m, c) = with(EmbedKind::CrossAttentive, mode);
        let (models, log, tau) = train_cell(ds, &m, &c, cell.clone(), DEFAULT_PERCENTILE)?;
        rows.push(AblationRow {
            name: name.into(),
            tau,
            report: evaluate(ds, &models.amse, &models.s2v, tau)?,
            final_loss: log.final_loss().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_gzsl, SynthConfig};
    use crate::params::param_hash;

    fn small() -> GzslDataset {
        synth_gzsl(&SynthConfig { samples_per_class: 10, feat_dims: (2, 2, 16), ..Default::default() }).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs_stage1: 2, epochs_stage2: 2, ..TrainConfig::desk() }
    }

    #[test]
    fn zero_lr_step_is_bit_identical() {
        let mut p = Tensor::vector(vec![0.1, -3.0, 7.5]).unwrap();
        let before = p.clone();
        let mut sgd = Sgd::new(0.0, 0.9);
        for _ in 0..3 {
            sgd.step(vec![&mut p], &[Tensor::vector(vec![1.0, 2.0, -4.0]).unwrap()]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let mut sgd = Sgd::new(0.1, 0.5);
        let g = [Tensor::vector(vec![2.0]).unwrap()];
        sgd.step(vec![&mut p], &g).unwrap(); // v = 2, p = 0.8
        sgd.step(vec![&mut p], &g).unwrap(); // v = 3, p = 0.5
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gamma_zero_drops_cet() {
        let ds = small();
        let models = Dvbe::init(&ds, &ModelConfig::default(), None, 3).unwrap();
        let batch: Vec<&Sample> = ds.train_seen.iter().take(4).collect();
        let attrs = ds.attribute_matrix();
        let cfg = TrainConfig { gamma: 0.0, ..TrainConfig::desk() };
        let l = overall_loss(&models, &batch, &attrs, &cfg).unwrap().loss;
        assert_eq!(l.all, l.s2v + l.ams);
        let cfg = TrainConfig { gamma: 2.0, ..cfg };
        let l = overall_loss(&models, &batch, &attrs, &cfg).unwrap().loss;
        assert!((l.all - (l.s2v + l.ams + 2.0 * l.cet)).abs() < 1e-12);
    }

    #[test]
    fn one_sample_batch_matches_components() {
        let ds = small();
        let models = Dvbe::init(&ds, &ModelConfig::default(), None, 4).unwrap();
        let s = &ds.train_seen[0];
        let attrs = ds.attribute_matrix();
        let cfg = TrainConfig::desk();
        let l = overall_loss(&models, &[s], &attrs, &cfg).unwrap().loss;
        let ams = models.amse.ams_loss(&[models.amse.embed(&s.feature).unwrap()], &[s.label], &cfg.margin).unwrap();
        let s2v = models.s2v.s2v_loss(&[&s.feature], &[s.label], &attrs).unwrap();
        // L_cet from cosines by hand.
        let u = models.s2v.embed_visual(&s.feature).unwrap();
        let g = models.s2v.embed_semantic(&attrs).unwrap();
        let logits: Vec<f64> = ds
            .seen_ids()
            .iter()
            .map(|&c| {
                let row = g.row(models.s2v.class_row(c).unwrap());
                row.iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>() / cfg.temperature
            })
            .collect();
        let y = models.amse.class_index(s.label).unwrap();
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        let cet = lse - logits[y];
        assert!((l.ams - ams).abs() < 1e-12);
        assert!((l.s2v - s2v).abs() < 1e-12);
        assert!((l.cet - cet).abs() < 1e-9);
        assert!((l.all - (ams + s2v + cet)).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_leave_models_unchanged() {
        let ds = small();
        let mut models = Dvbe::init(&ds, &ModelConfig::default(), None, 5).unwrap();
        let before = models.clone();
        let cfg = TrainConfig { epochs_stage1: 0, epochs_stage2: 0, ..TrainConfig::desk() };
        assert!(train_stage1(&ds, &mut models, &cfg).unwrap().records.is_empty());
        assert_eq!(models, before);
        models.fix_architecture().unwrap();
        let fixed = models.clone();
        train_stage2(&ds, &mut models, &cfg).unwrap();
        assert_eq!(models, fixed);
    }

    #[test]
    fn stage_contracts() {
        let ds = small();
        let mut cont = Dvbe::init(&ds, &ModelConfig::default(), None, 5).unwrap();
        assert!(matches!(train_stage2(&ds, &mut cont, &quick()), Err(Error::Contract(_))));
        let mut disc = Dvbe::init(&ds, &ModelConfig::default(), Some(CellSpec::two_layer_fc()), 5).unwrap();
        assert!(matches!(train_stage1(&ds, &mut disc, &quick()), Err(Error::Contract(_))));
        let mut empty = ds.clone();
        empty.val_seen.clear();
        assert!(train_stage1(&empty, &mut cont, &quick()).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small();
        let run = || {
            let mut m = Dvbe::init(&ds, &ModelConfig::default(), None, 9).unwrap();
            let log = train_stage1(&ds, &mut m, &quick()).unwrap();
            (param_hash(m.all_params()), log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn alternating_passes_touch_disjoint_parameters() {
        let ds = small();
        let mut m = Dvbe::init(&ds, &ModelConfig::default(), None, 2).unwrap();
        let cfg = quick();
        let attrs = ds.attribute_matrix();
        let mut opt = Optimizers::new(&cfg);
        let mut rng = Rng::new(0);
        let weights = |m: &Dvbe| {
            let mut p = m.amse.params();
            p.extend(m.s2v.params());
            param_hash(p)
        };
        let alphas = |m: &Dvbe| param_hash(m.s2v.alpha_params());

        let (w0, a0) = (weights(&m), alphas(&m));
        weight_pass(&mut m, &ds, &attrs, &cfg, &mut opt, &mut rng).unwrap();
        assert_ne!(weights(&m), w0);
        assert_eq!(alphas(&m), a0);

        let w1 = weights(&m);
        alpha_pass(&mut m, &ds, &attrs, &cfg, &mut opt, &mut rng).unwrap();
        assert_eq!(weights(&m), w1);
        assert_ne!(alphas(&m), a0);
    }

    #[test]
    fn log_csv_has_one_row_per_epoch() {
        let ds = small();
        let mut m = Dvbe::init(&ds, &ModelConfig::default(), Some(CellSpec::two_layer_fc()), 1).unwrap();
        let log = train_stage2(&ds, &mut m, &quick()).unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRAIN_LOG_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }
}
