//! SGD training for linear probes, ERM adapters and contrastive adapters,
//! with early stopping on validation worst-group accuracy, plus the
//! learning-rate × weight-decay sweep.

use serde::{Deserialize, Serialize};

use crate::adapter::{ce_loss, embed_eval, supcon_loss_packed, AdapterGrads, AdapterParams, LossConfig, LossOutput, Mode};
use crate::baselines::LinearHead;
use crate::checkpoint::Checkpoint;
use crate::dataio::{EmbeddingBundle, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_groups, lipschitz_upper_bound, GroupReport};
use crate::numerics::{gemm_tn, log_sum_exp, Matrix, Rng};
use crate::sampling::{build_contrastive_batches, build_resampled_train, SamplingConfig};
use crate::zeroshot::{pseudolabels, zeroshot_labels, PseudoSource, ZeroShotHead};

/// Runs are aborted once a step loss exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LinearProbe,
    AdapterErm,
    #[default]
    AdapterContrastive,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::LinearProbe => "linear-probe",
            Method::AdapterErm => "adapter-erm",
            Method::AdapterContrastive => "adapter-contrastive",
        }
    }
}

/// Which losses a contrastive run applies at each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Components {
    #[default]
    Both,
    ContrastiveOnly,
    CeOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub max_epochs: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub ce_temperature: f32,
    pub contrastive_temperature: f32,
    pub batchnorm: bool,
    pub sampling: SamplingConfig,
    pub pseudo_source: PseudoSource,
    pub seed: u64,
    /// Contrastive steps per epoch; `None` is one full pass over the batches.
    pub updates_per_epoch: Option<usize>,
    pub components: Components,
    /// l2-normalize inputs to linear probes.
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::AdapterContrastive,
            max_epochs: 100,
            learning_rate: 1e-3,
            weight_decay: 5e-5,
            momentum: 0.9,
            batch_size: 128,
            hidden_dim: 128,
            ce_temperature: 0.01,
            contrastive_temperature: 0.1,
            batchnorm: true,
            sampling: SamplingConfig::default(),
            pseudo_source: PseudoSource::Zeroshot,
            seed: 0,
            updates_per_epoch: None,
            components: Components::Both,
            normalize_inputs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)");
        }
        if self.batch_size < 2 || self.hidden_dim == 0 {
            return bad("batch_size must be >= 2 and hidden_dim >= 1");
        }
        if self.updates_per_epoch == Some(0) {
            return bad("updates_per_epoch must be >= 1");
        }
        self.loss_config().validate()?;
        self.sampling.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            ce_temperature: self.ce_temperature,
            contrastive_temperature: self.contrastive_temperature,
        }
    }
}

/// `v ← m·v + (g + wd·w)`, `w ← w − lr·v`, elementwise.
pub fn sgd_step(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) {
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi + (gi + weight_decay * *wi);
        *wi -= lr * *vi;
    }
}

struct Optimizer {
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates `params[k]` with `grads[k]`; `decay[k]` selects weight decay.
    fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>, decay: &[bool]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (((p, g), v), &d) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()).zip(decay) {
            let wd = if d { self.weight_decay } else { 0.0 };
            sgd_step(p, g, v, self.lr, self.momentum, wd);
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("parameters after SGD step"));
            }
        }
        Ok(())
    }

    fn step_adapter(&mut self, p: &mut AdapterParams, g: &AdapterGrads) -> Result<()> {
        self.step(
            vec![
                p.w1.data_mut(),
                &mut p.b1,
                &mut p.bn_gamma,
                &mut p.bn_beta,
                p.w2.data_mut(),
                &mut p.b2,
            ],
            vec![g.w1.data(), &g.b1, &g.bn_gamma, &g.bn_beta, g.w2.data(), &g.b2],
            &[true, false, true, true, true, false],
        )
    }

    fn step_linear(&mut self, h: &mut LinearHead, gw: &[f32], gb: &[f32]) -> Result<()> {
        self.step(vec![h.weights.data_mut(), &mut h.bias], vec![gw, gb], &[true, false])
    }
}

/// A trained classifier.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Linear(LinearHead),
    /// Adapted embeddings classified by the frozen zero-shot head.
    Adapter(AdapterParams),
}

impl Model {
    pub fn predict(&self, head: &ZeroShotHead, samples: &Matrix) -> Result<Vec<usize>> {
        match self {
            Model::Linear(h) => h.predict_all(samples),
            Model::Adapter(p) => zeroshot_labels(head, &embed_eval(p, samples)?),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Model::Linear(h) => h.to_checkpoint(),
            Model::Adapter(p) => p.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        match c.kind.as_str() {
            "linear" => Ok(Model::Linear(LinearHead::from_checkpoint(c)?)),
            "adapter" => Ok(Model::Adapter(AdapterParams::from_checkpoint(c)?)),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind `{other}`"))),
        }
    }
}

/// Group report of `model` on the rows `indices`.
pub fn evaluate_model(
    bundle: &EmbeddingBundle,
    head: &ZeroShotHead,
    model: &Model,
    indices: &[usize],
) -> Result<GroupReport> {
    let preds = model.predict(head, &bundle.samples.select_rows(indices))?;
    let labels: Vec<usize> = indices.iter().map(|&i| bundle.class_labels[i]).collect();
    let groups: Vec<usize> = indices.iter().map(|&i| bundle.group_labels[i]).collect();
    evaluate_groups(&preds, &labels, &groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's steps, if any were taken.
    pub ce_loss: Option<f64>,
    pub contrastive_loss: Option<f64>,
    pub val: GroupReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation worst-group accuracy,
    /// earliest on ties. Test metrics come from this epoch's parameters.
    pub best_epoch: usize,
    pub best_val_worst_group_accuracy: f64,
    pub test: GroupReport,
    pub n_train_rows: usize,
    pub n_anchors: Option<usize>,
    /// Norm-product upper bound for adapters (not a tight estimate).
    pub lipschitz_upper_bound: Option<f32>,
    /// Set when the run switched methods, e.g. no contrastive anchors.
    pub fallback: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub report: TrainReport,
    pub model: Model,
}

struct Splits {
    val: Vec<usize>,
    test: Vec<usize>,
}

fn eval_splits(bundle: &EmbeddingBundle) -> Result<Splits> {
    let val = bundle.split_view(Split::Val);
    let test = bundle.split_view(Split::Test);
    if val.is_empty() {
        return Err(Error::TooFewSamples("validation split is empty; early stopping needs it".into()));
    }
    if test.is_empty() {
        return Err(Error::TooFewSamples("test split is empty".into()));
    }
    Ok(Splits { val, test })
}

/// Tracks the best validation epoch and its model.
struct Tracker {
    epochs: Vec<EpochRecord>,
    best: Option<(usize, f64, Model)>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            epochs: Vec::new(),
            best: None,
        }
    }

    fn record(&mut self, epoch: usize, ce: &[f64], con: &[f64], val: GroupReport, model: &Model) {
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let wg = val.worst_group_accuracy;
        log::info!(
            "epoch {epoch}: ce {:?} contrastive {:?} val WG {:.4} avg {:.4}",
            mean(ce),
            mean(con),
            wg,
            val.average_accuracy
        );
        if self.best.as_ref().map_or(true, |b| wg > b.1) {
            self.best = Some((epoch, wg, model.clone()));
        }
        self.epochs.push(EpochRecord {
            epoch,
            ce_loss: mean(ce),
            contrastive_loss: mean(con),
            val,
        });
    }

    fn finish(
        self,
        bundle: &EmbeddingBundle,
        head: &ZeroShotHead,
        cfg: &TrainConfig,
        test: &[usize],
        n_train_rows: usize,
    ) -> Result<TrainRun> {
        let (best_epoch, best_wg, model) = self.best.expect("at least one epoch");
        let report = TrainReport {
            method: cfg.method,
            config: cfg.clone(),
            epochs: self.epochs,
            best_epoch,
            best_val_worst_group_accuracy: best_wg,
            test: evaluate_model(bundle, head, &model, test)?,
            n_train_rows,
            n_anchors: None,
            lipschitz_upper_bound: match &model {
                Model::Adapter(p) => Some(lipschitz_upper_bound(p)),
                Model::Linear(_) => None,
            },
            fallback: None,
            checkpoint: None,
        };
        Ok(TrainRun { report, model })
    }
}

fn check_loss(loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
        return Err(Error::Diverged { epoch, loss });
    }
    Ok(())
}

/// Softmax cross-entropy on `W u + b` and its gradients.
fn linear_ce(h: &LinearHead, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f32>, Vec<f32>)> {
    let logits = h.logits(x)?;
    let (b, c) = (x.rows(), h.n_classes());
    let mut dz = vec![0.0f32; b * c];
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.iter_rows().zip(labels).enumerate() {
        let l: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let lse = log_sum_exp(&l);
        loss += lse - l[y];
        for k in 0..c {
            let p = (l[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
            dz[i * c + k] = (p / b as f64) as f32;
        }
    }
    let inputs = if h.normalize_inputs { x.normalize_rows()? } else { x.clone() };
    let gw = gemm_tn(&dz, b, c, inputs.data(), x.cols());
    let mut gb = vec![0.0f32; c];
    for row in dz.chunks_exact(c) {
        for (g, v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((loss / b as f64, gw, gb))
}

/// ERM linear probe on the multiset `rows` of bundle indices.
pub fn train_linear_probe_on(bundle: &EmbeddingBundle, rows: &[usize], cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::TooFewSamples("train split is empty".into()));
    }
    let splits = eval_splits(bundle)?;
    let head = ZeroShotHead::from_bundle(bundle, crate::zeroshot::DEFAULT_TEMPERATURE)?;
    let mut rng = Rng::derive(cfg.seed, 1);
    let mut probe = LinearHead::init(bundle.n_classes(), bundle.dim(), cfg.normalize_inputs, &mut rng);
    let mut opt = Optimizer::new(cfg);
    let mut order = rows.to_vec();
    let mut tracker = Tracker::new();
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let x = bundle.samples.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| bundle.class_labels[i]).collect();
            let (loss, gw, gb) = linear_ce(&probe, &x, &labels)?;
            check_loss(loss, epoch)?;
            opt.step_linear(&mut probe, &gw, &gb)?;
            losses.push(loss);
        }
        let model = Model::Linear(probe.clone());
        let val = evaluate_model(bundle, &head, &model, &splits.val)?;
        tracker.record(epoch, &losses, &[], val, &model);
    }
    tracker.finish(bundle, &head, cfg, &splits.test, rows.len())
}

fn ce_step(
    p: &mut AdapterParams,
    opt: &mut Optimizer,
    bundle: &EmbeddingBundle,
    head: &ZeroShotHead,
    cfg: &TrainConfig,
    rows: &[usize],
    epoch: usize,
) -> Result<f64> {
    let x = bundle.samples.select_rows(rows);
    let labels: Vec<usize> = rows.iter().map(|&i| bundle.class_labels[i]).collect();
    let out = ce_loss(p, &x, &labels, head, &cfg.loss_config(), Mode::Train)?;
    apply(p, opt, out, epoch)
}

fn apply(p: &mut AdapterParams, opt: &mut Optimizer, out: LossOutput, epoch: usize) -> Result<f64> {
    check_loss(out.loss, epoch)?;
    p.update_running_stats(&out.cache);
    opt.step_adapter(p, &out.grads)?;
    Ok(out.loss)
}

/// ERM adapter with the cross-entropy-over-class-embeddings loss on the
/// multiset `rows`.
pub fn train_adapter_erm_on(
    bundle: &EmbeddingBundle,
    head: &ZeroShotHead,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if rows.len() < 2 {
        return Err(Error::TooFewSamples("adapter training needs at least 2 train rows".into()));
    }
    let splits = eval_splits(bundle)?;
    let mut rng = Rng::derive(cfg.seed, 1);
    let mut p = AdapterParams::init(bundle.dim(), cfg.hidden_dim, cfg.batchnorm, &mut rng);
    let mut opt = Optimizer::new(cfg);
    let mut order = rows.to_vec();
    let mut tracker = Tracker::new();
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            losses.push(ce_step(&mut p, &mut opt, bundle, head, cfg, chunk, epoch)?);
        }
        let model = Model::Adapter(p.clone());
        let val = evaluate_model(bundle, head, &model, &splits.val)?;
        tracker.record(epoch, &losses, &[], val, &model);
    }
    tracker.finish(bundle, head, cfg, &splits.test, rows.len())
}

/// Linear probe or ERM adapter over the train split.
pub fn train_erm(bundle: &EmbeddingBundle, head: &ZeroShotHead, cfg: &TrainConfig) -> Result<TrainRun> {
    let train = bundle.split_view(Split::Train);
    match cfg.method {
        Method::LinearProbe => train_linear_probe_on(bundle, &train, cfg),
        Method::AdapterErm => train_adapter_erm_on(bundle, head, &train, cfg),
        Method::AdapterContrastive => Err(Error::Config("train_erm does not run the contrastive method".into())),
    }
}

/// Endless reshuffled passes over a multiset.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Cycler {
    fn new(items: Vec<usize>, rng: Rng) -> Self {
        let pos = items.len();
        Self { items, pos, rng }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.items.len() {
                self.rng.shuffle(&mut self.items);
                self.pos = 0;
            }
            let k = (n - out.len()).min(self.items.len() - self.pos);
            out.extend_from_slice(&self.items[self.pos..self.pos + k]);
            self.pos += k;
        }
        out
    }
}

/// Interleaved contrastive and cross-entropy adapter training.
///
/// Pseudo-labels, contrastive batches and the resampled set `U*` are built
/// once. Each epoch walks the batches in a fresh random order; every step
/// applies one supervised contrastive update on a batch, then one
/// cross-entropy update on the next `batch_size` rows of `U*`. Falls back
/// to the ERM adapter when there are no anchors.
pub fn train_contrastive_adapter(bundle: &EmbeddingBundle, head: &ZeroShotHead, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let train = bundle.split_view(Split::Train);
    if train.len() < 2 {
        return Err(Error::TooFewSamples("adapter training needs at least 2 train rows".into()));
    }
    let splits = eval_splits(bundle)?;
    let pseudo = pseudolabels(bundle, head, &train, cfg.pseudo_source, cfg.seed)?;
    let sampling = SamplingConfig {
        seed: Rng::derive(cfg.seed, cfg.sampling.seed).next_u64(),
        ..cfg.sampling.clone()
    };
    let batches = build_contrastive_batches(bundle, &train, &pseudo, &sampling)?;
    if batches.is_empty() {
        log::warn!("{}; training an ERM adapter instead", Error::NoAnchors);
        let mut run = train_adapter_erm_on(bundle, head, &train, cfg)?;
        run.report.n_anchors = Some(0);
        run.report.fallback = Some("adapter-erm: no contrastive anchors".into());
        return Ok(run);
    }
    let ustar = build_resampled_train(bundle, &train, &pseudo, &mut Rng::derive(cfg.seed, 2))?;
    log::info!("{} contrastive batches, |U*| = {}", batches.len(), ustar.len());

    let mut rng = Rng::derive(cfg.seed, 1);
    let mut p = AdapterParams::init(bundle.dim(), cfg.hidden_dim, cfg.batchnorm, &mut rng);
    let mut opt = Optimizer::new(cfg);
    let mut ce_rows = Cycler::new(ustar.clone(), Rng::derive(cfg.seed, 3));
    let ce_batch = cfg.batch_size.min(ustar.len());
    let steps = cfg.updates_per_epoch.unwrap_or(batches.len());
    let loss_cfg = cfg.loss_config();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut tracker = Tracker::new();
    for epoch in 1..=cfg.max_epochs {
        let (mut ce, mut con) = (Vec::new(), Vec::new());
        for s in 0..steps {
            if s % batches.len() == 0 {
                rng.shuffle(&mut order);
            }
            if cfg.components != Components::CeOnly {
                let b = &batches[order[s % batches.len()]];
                let mut idx = Vec::with_capacity(1 + b.positives.len() + b.negatives.len());
                idx.push(b.anchor);
                idx.extend_from_slice(&b.positives);
                idx.extend_from_slice(&b.negatives);
                let x = bundle.samples.select_rows(&idx);
                let out = supcon_loss_packed(&p, &x, b.positives.len(), b.negatives.len(), &loss_cfg, Mode::Train)?;
                con.push(apply(&mut p, &mut opt, out, epoch)?);
            }
            if cfg.components != Components::ContrastiveOnly && ce_batch >= 2 {
                let rows = ce_rows.take(ce_batch);
                ce.push(ce_step(&mut p, &mut opt, bundle, head, cfg, &rows, epoch)?);
            }
        }
        let model = Model::Adapter(p.clone());
        let val = evaluate_model(bundle, head, &model, &splits.val)?;
        tracker.record(epoch, &ce, &con, val, &model);
    }
    let mut run = tracker.finish(bundle, head, cfg, &splits.test, train.len())?;
    run.report.n_anchors = Some(batches.len());
    Ok(run)
}

/// Dispatches on `cfg.method`.
pub fn train(bundle: &EmbeddingBundle, head: &ZeroShotHead, cfg: &TrainConfig) -> Result<TrainRun> {
    match cfg.method {
        Method::AdapterContrastive => train_contrastive_adapter(bundle, head, cfg),
        _ => train_erm(bundle, head, cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub learning_rates: Vec<f32>,
    pub weight_decays: Vec<f32>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            weight_decays: vec![5e-5, 1e-5, 5e-4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr_index: usize,
    pub wd_index: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    /// `None` when the cell failed.
    pub val_worst_group_accuracy: Option<f64>,
    pub test_worst_group_accuracy: Option<f64>,
    pub test_average_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    /// Position in `cells` of the selected configuration.
    pub best_cell: usize,
    pub best: TrainRun,
}

/// Trains every (learning rate, weight decay) pair with the same seed and
/// selects the highest validation worst-group accuracy, ties to the lower
/// learning-rate index, then the lower weight-decay index. Failed cells are
/// recorded and skipped. Cells run on up to `jobs` threads; results do not
/// depend on `jobs`.
pub fn hyperparameter_sweep(
    bundle: &EmbeddingBundle,
    head: &ZeroShotHead,
    base: &TrainConfig,
    grid: &SweepGrid,
    jobs: usize,
) -> Result<SweepOutcome> {
    if grid.learning_rates.is_empty() || grid.weight_decays.is_empty() {
        return Err(Error::Config("sweep grid must list at least one learning rate and weight decay".into()));
    }
    let configs: Vec<(usize, usize, TrainConfig)> = grid
        .learning_rates
        .iter()
        .enumerate()
        .flat_map(|(i, &lr)| {
            grid.weight_decays.iter().enumerate().map(move |(j, &wd)| {
                let cfg = TrainConfig {
                    learning_rate: lr,
                    weight_decay: wd,
                    ..base.clone()
                };
                (i, j, cfg)
            })
        })
        .collect();
    let jobs = jobs.clamp(1, configs.len());
    let mut results: Vec<Option<Result<TrainRun>>> = (0..configs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let configs = &configs;
                scope.spawn(move || {
                    (w..configs.len())
                        .step_by(jobs)
                        .map(|k| (k, train(bundle, head, &configs[k].2)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("sweep worker panicked") {
                results[k] = Some(r);
            }
        }
    });

    let mut cells = Vec::with_capacity(configs.len());
    let mut best: Option<(usize, f64)> = None;
    let mut runs: Vec<Option<TrainRun>> = Vec::with_capacity(configs.len());
    for (k, ((i, j, cfg), r)) in configs.iter().zip(results).enumerate() {
        let mut cell = SweepCell {
            lr_index: *i,
            wd_index: *j,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            val_worst_group_accuracy: None,
            test_worst_group_accuracy: None,
            test_average_accuracy: None,
            best_epoch: None,
            error: None,
        };
        match r.expect("every cell ran") {
            Ok(run) => {
                let v = run.report.best_val_worst_group_accuracy;
                cell.val_worst_group_accuracy = Some(v);
                cell.test_worst_group_accuracy = Some(run.report.test.worst_group_accuracy);
                cell.test_average_accuracy = Some(run.report.test.average_accuracy);
                cell.best_epoch = Some(run.report.best_epoch);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((k, v));
                }
                runs.push(Some(run));
            }
            Err(e) => {
                log::warn!("sweep cell lr={} wd={} failed: {e}", cfg.learning_rate, cfg.weight_decay);
                cell.error = Some(format!("{}: {e}", e.class()));
                runs.push(None);
            }
        }
        cells.push(cell);
    }
    let (best_cell, _) = best.ok_or_else(|| Error::Config("every sweep cell failed".into()))?;
    let best = runs[best_cell].take().expect("best cell succeeded");
    Ok(SweepOutcome { cells, best_cell, best })
}

/// Fixed-width text rendering of a sweep grid.
pub fn render_sweep_table(cells: &[SweepCell]) -> String {
    let mut out = format!("{:>8}  {:>8}  {:>7}  {:>7}  {:>7}  status\n", "lr", "wd", "val WG", "test WG", "test Avg");
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
    for c in cells {
        out.push_str(&format!(
            "{:>8.0e}  {:>8.0e}  {:>7}  {:>7}  {:>7}  {}\n",
            c.learning_rate,
            c.weight_decay,
            pct(c.val_worst_group_accuracy),
            pct(c.test_worst_group_accuracy),
            pct(c.test_average_accuracy),
            c.error.as_deref().unwrap_or("ok")
        ));
    }
    out
}
