//! The alternating training procedure, comparison schedules, learning-rate
//! schedule, metrics log and checkpoints.

mod checkpoint;
mod config;
mod replay;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use checkpoint::{checkpoint_load, checkpoint_save};
pub use config::{ArchConfig, TrainingConfig, TrainingMode};
pub use replay::ReplayBuffer;

use crate::data::{augment_sample, Dataset, LabelMap, LabeledSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_trainer, Aggregation, ModelTag};
use crate::losses::{
    discriminator_loss_grad, generator_adv_loss_grad, kd_loss_grad, l1_grad, supervised_loss_grad,
    GanVariant, LossReport,
};
use crate::models::{build_network, translate, Fingerprint, NetworkHandle, ProbabilityMap};
use crate::nn::Tensor;
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::scalar::Scalar;

/// The six networks, in update order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetId {
    GenA2T = 0,
    DiscT = 1,
    GenT2A = 2,
    DiscA = 3,
    SegSyn = 4,
    SegReal = 5,
}

impl NetId {
    pub const ALL: [NetId; 6] = [
        NetId::GenA2T,
        NetId::DiscT,
        NetId::GenT2A,
        NetId::DiscA,
        NetId::SegSyn,
        NetId::SegReal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NetId::GenA2T => "g_a2t",
            NetId::DiscT => "d_t",
            NetId::GenT2A => "g_t2a",
            NetId::DiscA => "d_a",
            NetId::SegSyn => "s_syn",
            NetId::SegReal => "s_real",
        }
    }

    pub fn is_segmentor(self) -> bool {
        matches!(self, NetId::SegSyn | NetId::SegReal)
    }
}

/// The seven sub-steps of one iteration, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubStep {
    /// Update `G_a2t` on its adversarial, cycle and synthetic supervised
    /// terms, with `S_syn` held fixed.
    GenA2T,
    /// Update `D_t`.
    DiscT,
    /// Update `G_t2a`.
    GenT2A,
    /// Update `D_a`.
    DiscA,
    /// Compute both segmentor objectives and their gradients; no update.
    SegLosses,
    /// Update `S_syn`.
    UpdateSegSyn,
    /// Update `S_real`.
    UpdateSegReal,
}

impl SubStep {
    pub const ALL: [SubStep; 7] = [
        SubStep::GenA2T,
        SubStep::DiscT,
        SubStep::GenT2A,
        SubStep::DiscA,
        SubStep::SegLosses,
        SubStep::UpdateSegSyn,
        SubStep::UpdateSegReal,
    ];

    /// The network this sub-step updates, if any.
    pub fn target(self) -> Option<NetId> {
        match self {
            SubStep::GenA2T => Some(NetId::GenA2T),
            SubStep::DiscT => Some(NetId::DiscT),
            SubStep::GenT2A => Some(NetId::GenT2A),
            SubStep::DiscA => Some(NetId::DiscA),
            SubStep::SegLosses => None,
            SubStep::UpdateSegSyn => Some(NetId::SegSyn),
            SubStep::UpdateSegReal => Some(NetId::SegReal),
        }
    }
}

/// Images and labels of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<LabelMap>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            images.push(Tensor::from_image(s.height(), s.width(), &s.image)?);
            labels.push(s.label.clone());
        }
        if images.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One metrics-log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub report: LossReport,
}

impl MetricsRecord {
    /// `iteration=.. epoch=.. <field>=<value> ...` with round-trip exact
    /// floats.
    pub fn to_line(&self) -> String {
        let mut s = format!("iteration={} epoch={}", self.iteration, self.epoch);
        for (k, v) in LossReport::FIELDS.iter().zip(self.report.values()) {
            s.push_str(&format!(" {k}={v:e}"));
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut rec = MetricsRecord {
            iteration: 0,
            epoch: 0,
            report: LossReport::default(),
        };
        let mut vals = LossReport::default().values();
        let mut seen = 0usize;
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("malformed metrics token `{tok}`")))?;
            let bad = || Error::Input(format!("malformed metrics value `{tok}`"));
            match k {
                "iteration" => rec.iteration = v.parse().map_err(|_| bad())?,
                "epoch" => rec.epoch = v.parse().map_err(|_| bad())?,
                _ => {
                    let i = LossReport::FIELDS
                        .iter()
                        .position(|f| *f == k)
                        .ok_or_else(|| Error::Input(format!("unknown metrics field `{k}`")))?;
                    vals[i] = v.parse().map_err(|_| bad())?;
                    seen += 1;
                }
            }
        }
        if seen != LossReport::FIELDS.len() {
            return Err(Error::Input(format!("metrics line has {seen} loss fields: `{line}`")));
        }
        let r = &mut rec.report;
        [
            r.adv_t, r.adv_a, r.cyc, r.idt, r.gan_a2t, r.gan_t2a, r.d_t, r.d_a, r.sup_syn, r.sup_real, r.kd_s2r,
            r.kd_r2s, r.seg_syn, r.seg_real, r.total,
        ] = vals;
        Ok(rec)
    }
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::parse_line)
        .collect()
}

/// Intermediate results carried between the sub-steps of one iteration.
#[derive(Debug, Clone)]
pub struct IterationState<T> {
    next: usize,
    report: LossReport,
    fake_t: Vec<Tensor<T>>,
    fake_a: Vec<Tensor<T>>,
    x_a2t: Vec<Tensor<T>>,
    grad_syn: Option<Vec<Vec<T>>>,
    grad_real: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> IterationState<T> {
    fn new() -> Self {
        Self {
            next: 0,
            report: LossReport::default(),
            fake_t: Vec::new(),
            fake_a: Vec::new(),
            x_a2t: Vec::new(),
            grad_syn: None,
            grad_real: None,
        }
    }

    /// Loss terms accumulated so far.
    pub fn report(&self) -> &LossReport {
        &self.report
    }

    /// Gradient computed for a segmentor by [`SubStep::SegLosses`].
    pub fn segmentor_gradient(&self, id: NetId) -> Option<&[Vec<T>]> {
        match id {
            NetId::SegSyn => self.grad_syn.as_deref(),
            NetId::SegReal => self.grad_real.as_deref(),
            _ => None,
        }
    }
}

/// Optional behavior of [`Trainer::run`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Validation set for early stopping.
    pub validation: Option<&'a Dataset>,
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint every this many epochs (0 disables).
    pub checkpoint_every: u64,
    /// Append-only metrics log file.
    pub metrics_log: Option<PathBuf>,
    /// Stop once this many iterations have run in total.
    pub max_iterations: Option<u64>,
}

/// Full training state: six networks, their optimizers, replay buffers,
/// counters and the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    cfg: TrainingConfig,
    num_classes: usize,
    image_size: usize,
    nets: Vec<NetworkHandle<T>>,
    opts: Vec<OptimizerState<T>>,
    pool_t: ReplayBuffer<T>,
    pool_a: ReplayBuffer<T>,
    epoch: u64,
    iter_in_epoch: u64,
    iteration: u64,
    assistant_cursor: u64,
    best_score: f64,
    epochs_since_best: u64,
    stopped: bool,
    metrics: Vec<MetricsRecord>,
}

fn accumulate<T: Scalar>(dst: &mut Option<Vec<Vec<T>>>, src: Vec<Vec<T>>, scale: T) {
    match dst {
        None => {
            *dst = Some(
                src.into_iter()
                    .map(|g| g.into_iter().map(|v| v * scale).collect())
                    .collect(),
            )
        }
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y * scale;
                }
            }
        }
    }
}

fn probs<T: Scalar>(t: &Tensor<T>) -> ProbabilityMap<T> {
    ProbabilityMap::new_unchecked(t.clone())
}

impl<T: Scalar> Trainer<T> {
    /// Fresh networks and optimizers for square `image_size` inputs.
    pub fn new(cfg: TrainingConfig, num_classes: usize, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let a = cfg.arch;
        let downsample = 1usize << a.gen_depth.max(a.seg_depth);
        if image_size == 0 || image_size % downsample != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} must be a positive multiple of {downsample}"
            )));
        }
        let specs = [
            a.generator(),
            a.discriminator(),
            a.generator(),
            a.discriminator(),
            a.segmentor(num_classes),
            a.segmentor(num_classes),
        ];
        let mut nets = Vec::with_capacity(6);
        let mut opts = Vec::with_capacity(6);
        for (id, spec) in NetId::ALL.into_iter().zip(specs) {
            let net = build_network::<T>(spec, derive_seed(cfg.seed, Stream::Init, id as u64))?;
            opts.push(OptimizerState::new(&net, Self::adam(&cfg, id)));
            nets.push(net);
        }
        Ok(Self {
            num_classes,
            image_size,
            nets,
            opts,
            pool_t: ReplayBuffer::new(cfg.replay_buffer_size),
            pool_a: ReplayBuffer::new(cfg.replay_buffer_size),
            epoch: 0,
            iter_in_epoch: 0,
            iteration: 0,
            assistant_cursor: 0,
            best_score: f64::NEG_INFINITY,
            epochs_since_best: 0,
            stopped: false,
            metrics: Vec::new(),
            cfg,
        })
    }

    fn adam(cfg: &TrainingConfig, id: NetId) -> AdamConfig {
        let beta1 = if id.is_segmentor() { cfg.seg_beta1 } else { cfg.gan_beta1 };
        AdamConfig {
            lr: cfg.lr,
            beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        }
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn network(&self, id: NetId) -> &NetworkHandle<T> {
        &self.nets[id as usize]
    }

    pub fn optimizer(&self, id: NetId) -> &OptimizerState<T> {
        &self.opts[id as usize]
    }

    pub fn fingerprints(&self) -> [Fingerprint; 6] {
        NetId::ALL.map(|id| self.network(id).fingerprint())
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    /// True once early stopping has fired.
    pub fn stopped_early(&self) -> bool {
        self.stopped
    }

    pub fn replay_buffers(&self) -> (&ReplayBuffer<T>, &ReplayBuffer<T>) {
        (&self.pool_t, &self.pool_a)
    }

    fn non_finite(&self, term: &'static str) -> Error {
        Error::NonFinite {
            term,
            iteration: self.iteration,
        }
    }

    fn check(&self, term: &'static str, v: T) -> Result<f64> {
        let v = v.as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.non_finite(term))
        }
    }

    fn apply(&mut self, id: NetId, grads: Option<Vec<Vec<T>>>) -> Result<()> {
        let grads = grads.ok_or_else(|| Error::Input(format!("no gradient for {}", id.as_str())))?;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(self.non_finite(id.as_str()));
        }
        let i = id as usize;
        self.opts[i].apply(&mut self.nets[i], &grads)
    }

    fn check_batches(&self, bt: &Batch<T>, ba: Option<&Batch<T>>) -> Result<()> {
        let n = self.image_size;
        let ok = |b: &Batch<T>| {
            b.images.iter().all(|x| x.shape() == (1, n, n))
                && b.labels.iter().all(|y| y.height == n && y.width == n)
                && b.images.len() == b.labels.len()
        };
        if bt.is_empty() || !ok(bt) {
            return Err(Error::Input(format!("target batch must hold 1x{n}x{n} images with labels")));
        }
        if let Some(ba) = ba {
            if ba.len() != bt.len() || !ok(ba) {
                return Err(Error::Input(
                    "assistant batch must match the target batch in size and shape".into(),
                ));
            }
        }
        Ok(())
    }

    /// Begins an iteration for manual sub-step execution.
    pub fn begin_iteration(&self) -> IterationState<T> {
        IterationState::new()
    }

    /// Runs one sub-step. Sub-steps must be run in [`SubStep::ALL`] order;
    /// the translation steps may be skipped entirely under
    /// [`TrainingMode::NoIam`].
    pub fn sub_step(
        &mut self,
        step: SubStep,
        bt: &Batch<T>,
        ba: &Batch<T>,
        st: &mut IterationState<T>,
    ) -> Result<()> {
        if !self.cfg.mode.is_mutual() {
            return Err(Error::Config(format!(
                "mode {} has no alternating sub-steps",
                self.cfg.mode.as_str()
            )));
        }
        let idx = SubStep::ALL.iter().position(|s| *s == step).unwrap();
        let skip_ok = self.cfg.mode == TrainingMode::NoIam && st.next == 0 && idx == 4;
        if idx != st.next && !skip_ok {
            return Err(Error::Input(format!(
                "sub-step {step:?} out of order (expected {:?})",
                SubStep::ALL.get(st.next)
            )));
        }
        if idx < 4 && !self.cfg.mode.uses_alignment() {
            return Err(Error::Config("translation steps are disabled in no_iam mode".into()));
        }
        self.check_batches(bt, Some(ba))?;
        match step {
            SubStep::GenA2T => self.step_gen_a2t(bt, ba, st)?,
            SubStep::DiscT => self.step_disc(NetId::DiscT, bt, ba, st)?,
            SubStep::GenT2A => self.step_gen_t2a(bt, ba, st)?,
            SubStep::DiscA => self.step_disc(NetId::DiscA, bt, ba, st)?,
            SubStep::SegLosses => self.step_seg_losses(bt, ba, st)?,
            SubStep::UpdateSegSyn => {
                let g = st.grad_syn.take();
                self.apply(NetId::SegSyn, g)?
            }
            SubStep::UpdateSegReal => {
                let g = st.grad_real.take();
                self.apply(NetId::SegReal, g)?
            }
        }
        st.next = idx + 1;
        Ok(())
    }

    /// Closes an iteration started with [`Trainer::begin_iteration`]:
    /// finalizes the report, logs it and advances the iteration counter.
    pub fn finish_iteration(&mut self, st: IterationState<T>) -> Result<LossReport> {
        if st.next != SubStep::ALL.len() {
            return Err(Error::Input("iteration finished before all sub-steps ran".into()));
        }
        Ok(self.record(st.report))
    }

    fn record(&mut self, mut report: LossReport) -> LossReport {
        let (kd1, kd2) = self.cfg.effective_kd();
        let cyc = if self.cfg.mode.uses_alignment() { self.cfg.lambda_cyc } else { 0.0 };
        report.finalize(cyc, kd1, kd2);
        self.iteration += 1;
        self.metrics.push(MetricsRecord {
            iteration: self.iteration,
            epoch: self.epoch,
            report,
        });
        report
    }

    /// One training iteration under the configured mode.
    ///
    /// For the mutual modes this runs the seven sub-steps in order (the
    /// translation steps are skipped under `no_iam`). For the
    /// single-segmentor modes `S_real` is the trained segmentor: `baseline`
    /// and the target phase of `fine_tune` use `bt`, `joint_training` takes
    /// one step on `bt` then one on `ba`. Pass `bt` as the assistant batch's
    /// stand-in for the assistant phase of `fine_tune` via
    /// [`Trainer::supervised_iteration`].
    pub fn train_iteration(&mut self, bt: &Batch<T>, ba: Option<&Batch<T>>) -> Result<LossReport> {
        match self.cfg.mode {
            TrainingMode::Baseline | TrainingMode::FineTune => self.supervised_iteration(bt),
            TrainingMode::JointTraining => {
                let ba = ba.ok_or_else(|| Error::Input("joint training needs an assistant batch".into()))?;
                self.check_batches(bt, Some(ba))?;
                let l1 = self.supervised_update(bt)?;
                let l2 = self.supervised_update(ba)?;
                Ok(self.record(LossReport {
                    sup_real: 0.5 * (l1 + l2),
                    ..Default::default()
                }))
            }
            _ => {
                let ba = ba.ok_or_else(|| Error::Input("mutual training needs an assistant batch".into()))?;
                let mut st = self.begin_iteration();
                for step in SubStep::ALL {
                    if step.target().is_some_and(|id| !id.is_segmentor()) && !self.cfg.mode.uses_alignment() {
                        continue;
                    }
                    self.sub_step(step, bt, ba, &mut st)?;
                }
                self.finish_iteration(st)
            }
        }
    }

    /// One supervised update of `S_real` on `batch`, logged as an iteration.
    pub fn supervised_iteration(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        self.check_batches(batch, None)?;
        let l = self.supervised_update(batch)?;
        Ok(self.record(LossReport {
            sup_real: l,
            ..Default::default()
        }))
    }

    fn supervised_update(&mut self, batch: &Batch<T>) -> Result<f64> {
        let inv_b = T::one() / T::from_usize(batch.len()).unwrap();
        let incl = self.cfg.dice_include_background;
        let mut grads = None;
        let mut total = T::zero();
        {
            let s = self.network(NetId::SegReal);
            for (x, y) in batch.images.iter().zip(&batch.labels) {
                let tr = s.trace(x, GanVariant::Vanilla)?;
                let (l, g) = supervised_loss_grad(y, &probs(tr.output()), incl)?;
                total += l;
                accumulate(&mut grads, tr.backward(&g, true).params, inv_b);
            }
        }
        let l = self.check("sup_real", total * inv_b)?;
        self.apply(NetId::SegReal, grads)?;
        Ok(l)
    }

    fn step_gen_a2t(&mut self, bt: &Batch<T>, ba: &Batch<T>, st: &mut IterationState<T>) -> Result<()> {
        let v = self.cfg.gan_variant;
        let lam = T::lit(self.cfg.lambda_cyc);
        let w_sup = T::lit(self.cfg.sup_syn_weight);
        let incl = self.cfg.dice_include_background;
        let inv_b = T::one() / T::from_usize(bt.len()).unwrap();
        let g = self.network(NetId::GenA2T);
        let g_back = self.network(NetId::GenT2A);
        let d = self.network(NetId::DiscT);
        let s_syn = self.network(NetId::SegSyn);
        let lam_idt = T::lit(self.cfg.lambda_identity);
        let mut grads = None;
        let (mut adv, mut cyc, mut idt) = (T::zero(), T::zero(), T::zero());
        st.fake_t.clear();
        for ((xa, ya), xt) in ba.images.iter().zip(&ba.labels).zip(&bt.images) {
            let tr = g.trace(xa, v)?;
            let fake_t = tr.output();
            let tr_d = d.trace(fake_t, v)?;
            let (a, gp) = generator_adv_loss_grad(tr_d.output(), v)?;
            let mut g_fake = tr_d.backward(&gp, false).input;
            let tr_rec = g_back.trace(fake_t, v)?;
            let (c1, gr) = l1_grad(xa, tr_rec.output())?;
            let mut gi = tr_rec.backward(&gr, false).input;
            gi.scale(lam);
            g_fake.add_assign(&gi);
            if w_sup > T::zero() {
                // S_syn only passes the gradient through to its input.
                let tr_s = s_syn.trace(fake_t, v)?;
                let (_, gs) = supervised_loss_grad(ya, &probs(tr_s.output()), incl)?;
                let mut gi = tr_s.backward(&gs, false).input;
                gi.scale(w_sup);
                g_fake.add_assign(&gi);
            }
            g_fake.scale(inv_b);
            accumulate(&mut grads, tr.backward(&g_fake, true).params, T::one());
            st.fake_t.push(fake_t.clone());

            let fake_a = translate(g_back, xt)?;
            let tr_r = g.trace(&fake_a, v)?;
            let (c2, mut gr) = l1_grad(xt, tr_r.output())?;
            gr.scale(lam * inv_b);
            accumulate(&mut grads, tr_r.backward(&gr, true).params, T::one());
            if lam_idt > T::zero() {
                let tr_i = g.trace(xt, v)?;
                let (li, mut gi) = l1_grad(xt, tr_i.output())?;
                gi.scale(lam * lam_idt * inv_b);
                accumulate(&mut grads, tr_i.backward(&gi, true).params, T::one());
                idt += li;
            }
            adv += a;
            cyc += c1 + c2;
        }
        st.report.adv_t = self.check("adv_t", adv * inv_b)?;
        st.report.cyc = self.check("cyc", cyc * inv_b)?;
        st.report.idt = self.check("idt", idt * inv_b)?;
        self.apply(NetId::GenA2T, grads)
    }

    fn step_gen_t2a(&mut self, bt: &Batch<T>, ba: &Batch<T>, st: &mut IterationState<T>) -> Result<()> {
        let v = self.cfg.gan_variant;
        let lam = T::lit(self.cfg.lambda_cyc);
        let inv_b = T::one() / T::from_usize(bt.len()).unwrap();
        let g = self.network(NetId::GenT2A);
        let g_back = self.network(NetId::GenA2T);
        let d = self.network(NetId::DiscA);
        let lam_idt = T::lit(self.cfg.lambda_identity);
        let mut grads = None;
        let mut adv = T::zero();
        st.fake_a.clear();
        st.x_a2t.clear();
        for (xt, xa) in bt.images.iter().zip(&ba.images) {
            let tr = g.trace(xt, v)?;
            let fake_a = tr.output();
            let tr_d = d.trace(fake_a, v)?;
            let (a, gp) = generator_adv_loss_grad(tr_d.output(), v)?;
            let mut g_fake = tr_d.backward(&gp, false).input;
            let tr_rec = g_back.trace(fake_a, v)?;
            let (_, gr) = l1_grad(xt, tr_rec.output())?;
            let mut gi = tr_rec.backward(&gr, false).input;
            gi.scale(lam);
            g_fake.add_assign(&gi);
            g_fake.scale(inv_b);
            accumulate(&mut grads, tr.backward(&g_fake, true).params, T::one());
            st.fake_a.push(fake_a.clone());

            // G_a2t is final for this iteration: its output feeds the segmentors.
            let x_a2t = translate(g_back, xa)?;
            let tr_r = g.trace(&x_a2t, v)?;
            let (_, mut gr) = l1_grad(xa, tr_r.output())?;
            gr.scale(lam * inv_b);
            accumulate(&mut grads, tr_r.backward(&gr, true).params, T::one());
            st.x_a2t.push(x_a2t);
            if lam_idt > T::zero() {
                let tr_i = g.trace(xa, v)?;
                let (_, mut gi) = l1_grad(xa, tr_i.output())?;
                gi.scale(lam * lam_idt * inv_b);
                accumulate(&mut grads, tr_i.backward(&gi, true).params, T::one());
            }
            adv += a;
        }
        st.report.adv_a = self.check("adv_a", adv * inv_b)?;
        self.apply(NetId::GenT2A, grads)
    }

    fn step_disc(&mut self, id: NetId, bt: &Batch<T>, ba: &Batch<T>, st: &mut IterationState<T>) -> Result<()> {
        let v = self.cfg.gan_variant;
        let inv_b = T::one() / T::from_usize(bt.len()).unwrap();
        let (reals, fakes, dir) = match id {
            NetId::DiscT => (&bt.images, &st.fake_t, 0),
            _ => (&ba.images, &st.fake_a, 1),
        };
        let mut rng = rng_for(self.cfg.seed, Stream::Replay, self.iteration * 2 + dir);
        let mut pooled = Vec::with_capacity(fakes.len());
        {
            let pool = if dir == 0 { &mut self.pool_t } else { &mut self.pool_a };
            for f in fakes {
                pooled.push(pool.query(f, &mut rng));
            }
        }
        let d = self.network(id);
        let mut grads = None;
        let mut loss = T::zero();
        for (real, fake) in reals.iter().zip(&pooled) {
            let tr_r = d.trace(real, v)?;
            let tr_f = d.trace(fake, v)?;
            let (l, gr, gf) = discriminator_loss_grad(tr_r.output(), tr_f.output(), v)?;
            accumulate(&mut grads, tr_r.backward(&gr, true).params, inv_b);
            accumulate(&mut grads, tr_f.backward(&gf, true).params, inv_b);
            loss += l;
        }
        if id == NetId::DiscT {
            st.report.d_t = self.check("d_t", loss * inv_b)?;
        } else {
            st.report.d_a = self.check("d_a", loss * inv_b)?;
        }
        self.apply(id, grads)
    }

    fn step_seg_losses(&mut self, bt: &Batch<T>, ba: &Batch<T>, st: &mut IterationState<T>) -> Result<()> {
        let (kd1, kd2) = self.cfg.effective_kd();
        let (kd1, kd2) = (T::lit(kd1), T::lit(kd2));
        let incl = self.cfg.dice_include_background;
        let inv_b = T::one() / T::from_usize(bt.len()).unwrap();
        if st.x_a2t.is_empty() {
            st.x_a2t = if self.cfg.mode.uses_alignment() {
                let g = self.network(NetId::GenA2T);
                ba.images.iter().map(|x| translate(g, x)).collect::<Result<_>>()?
            } else {
                ba.images.clone()
            };
        }
        let s_syn = self.network(NetId::SegSyn);
        let s_real = self.network(NetId::SegReal);
        let v = GanVariant::Vanilla;
        let (mut g_syn, mut g_real) = (None, None);
        let mut sums = [T::zero(); 4];
        for (((x_at, ya), xt), yt) in st.x_a2t.iter().zip(&ba.labels).zip(&bt.images).zip(&bt.labels) {
            let syn_at = s_syn.trace(x_at, v)?;
            let syn_t = s_syn.trace(xt, v)?;
            let real_t = s_real.trace(xt, v)?;
            let real_at = s_real.trace(x_at, v)?;
            // Teachers enter as constants: only the student trace is backpropagated.
            let p_syn_at = probs(syn_at.output());
            let p_real_t = probs(real_t.output());
            let (sup_syn, g1) = supervised_loss_grad(ya, &p_syn_at, incl)?;
            let (sup_real, g2) = supervised_loss_grad(yt, &p_real_t, incl)?;
            let (kd_r2s, mut g3) = kd_loss_grad(&p_real_t, &probs(syn_t.output()))?;
            let (kd_s2r, mut g4) = kd_loss_grad(&p_syn_at, &probs(real_at.output()))?;
            accumulate(&mut g_syn, syn_at.backward(&g1, true).params, inv_b);
            if kd2 > T::zero() {
                g3.scale(kd2);
                accumulate(&mut g_syn, syn_t.backward(&g3, true).params, inv_b);
            }
            accumulate(&mut g_real, real_t.backward(&g2, true).params, inv_b);
            if kd1 > T::zero() {
                g4.scale(kd1);
                accumulate(&mut g_real, real_at.backward(&g4, true).params, inv_b);
            }
            for (s, l) in sums.iter_mut().zip([sup_syn, sup_real, kd_s2r, kd_r2s]) {
                *s += l;
            }
        }
        st.report.sup_syn = self.check("sup_syn", sums[0] * inv_b)?;
        st.report.sup_real = self.check("sup_real", sums[1] * inv_b)?;
        st.report.kd_s2r = self.check("kd_s2r", sums[2] * inv_b)?;
        st.report.kd_r2s = self.check("kd_r2s", sums[3] * inv_b)?;
        st.grad_syn = g_syn;
        st.grad_real = g_real;
        Ok(())
    }

    /// Segment with one model. `Ensemble` averages both segmentors; the
    /// single-segmentor tags use `S_real`.
    pub fn predict(&self, tag: ModelTag, x: &Tensor<T>) -> Result<ProbabilityMap<T>> {
        crate::eval::predict_with(self, tag, x)
    }

    fn total_epochs(&self) -> u64 {
        match self.cfg.mode {
            TrainingMode::FineTune => 2 * self.cfg.epochs,
            _ => self.cfg.epochs,
        }
    }

    /// True while the fine-tune schedule is in its assistant phase.
    fn in_assistant_phase(&self) -> bool {
        self.cfg.mode == TrainingMode::FineTune && self.epoch < self.cfg.epochs
    }

    fn schedule_epoch(&self) -> u64 {
        if self.cfg.mode == TrainingMode::FineTune && self.epoch >= self.cfg.epochs {
            self.epoch - self.cfg.epochs
        } else {
            self.epoch
        }
    }

    fn load_sample(&self, ds: &Dataset, index: usize, aug_index: u64) -> LabeledSample {
        let s = ds.get(index);
        if self.cfg.augment {
            augment_sample(s, derive_seed(self.cfg.seed, Stream::Augment, aug_index))
        } else {
            s.clone()
        }
    }

    fn epoch_order(&self, n: usize, shuffle_index: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, Stream::Shuffle, shuffle_index));
        order
    }

    fn draw_assistant(&mut self, ds: &Dataset, count: usize) -> Result<Batch<T>> {
        let n = ds.len() as u64;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let j = self.assistant_cursor;
            let order = self.epoch_order(ds.len(), 2 * (j / n) + 1);
            samples.push(self.load_sample(ds, order[(j % n) as usize], 2 * j + 1));
            self.assistant_cursor += 1;
        }
        Batch::from_samples(&samples)
    }

    /// Runs epochs until the budget, early stopping, or
    /// `opts.max_iterations` is reached. Resumes from the current counters.
    pub fn run(&mut self, target: &Dataset, assistant: &Dataset, opts: &RunOptions<'_>) -> Result<()> {
        self.check_datasets(target, assistant)?;
        let mut log = match &opts.metrics_log {
            Some(p) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            ),
            None => None,
        };
        let b = self.cfg.batch_size;
        while self.epoch < self.total_epochs() && !self.stopped {
            let seg_epoch = self.schedule_epoch();
            for id in [NetId::SegSyn, NetId::SegReal] {
                decay_segmentor_lr(&mut self.opts[id as usize], seg_epoch, &self.cfg);
            }
            let assistant_phase = self.in_assistant_phase();
            let source = if assistant_phase { assistant } else { target };
            let n = source.len();
            let order = self.epoch_order(n, 2 * self.epoch + u64::from(assistant_phase));
            let per_epoch = n.div_ceil(b) as u64;
            while self.iter_in_epoch < per_epoch {
                if opts.max_iterations.is_some_and(|m| self.iteration >= m) {
                    return Ok(());
                }
                let lo = self.iter_in_epoch as usize * b;
                let hi = (lo + b).min(n);
                let samples: Vec<LabeledSample> = (lo..hi)
                    .map(|p| {
                        let aug = 2 * (self.epoch * n as u64 + p as u64);
                        self.load_sample(source, order[p], aug)
                    })
                    .collect();
                let bt = Batch::from_samples(&samples)?;
                let ba = if self.cfg.mode.reads_assistant() && !assistant_phase && self.cfg.mode != TrainingMode::FineTune {
                    Some(self.draw_assistant(assistant, bt.len())?)
                } else {
                    None
                };
                self.train_iteration(&bt, ba.as_ref())?;
                self.iter_in_epoch += 1;
                if let Some(f) = &mut log {
                    let line = self.metrics.last().expect("just recorded").to_line();
                    writeln!(f, "{line}").map_err(|e| Error::io(opts.metrics_log.as_ref().unwrap(), e))?;
                }
            }
            self.epoch += 1;
            self.iter_in_epoch = 0;
            if self.cfg.mode == TrainingMode::FineTune && self.epoch == self.cfg.epochs {
                // Fresh optimizer for the target phase.
                let i = NetId::SegReal as usize;
                self.opts[i] = OptimizerState::new(&self.nets[i], Self::adam(&self.cfg, NetId::SegReal));
            }
            // Leave the optimizers at the rate of the next epoch.
            let seg_epoch = self.schedule_epoch();
            for id in [NetId::SegSyn, NetId::SegReal] {
                decay_segmentor_lr(&mut self.opts[id as usize], seg_epoch, &self.cfg);
            }
            if let (Some(val), Some(patience)) = (opts.validation, self.cfg.early_stop_patience) {
                if !self.in_assistant_phase() {
                    let tag = if self.cfg.mode.is_mutual() { ModelTag::Ensemble } else { ModelTag::Real };
                    let score = evaluate_trainer(self, tag, val, Aggregation::Micro)?.mean;
                    if score > self.best_score {
                        self.best_score = score;
                        self.epochs_since_best = 0;
                    } else {
                        self.epochs_since_best += 1;
                        if self.epochs_since_best >= patience {
                            self.stopped = true;
                        }
                    }
                }
            }
            if let Some(dir) = &opts.checkpoint_dir {
                if opts.checkpoint_every > 0 && self.epoch % opts.checkpoint_every == 0 {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    checkpoint_save(self, &dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
                    checkpoint_save(self, &dir.join("latest.ckpt"))?;
                }
            }
        }
        Ok(())
    }

    fn check_datasets(&self, target: &Dataset, assistant: &Dataset) -> Result<()> {
        let n = self.image_size;
        if target.is_empty() {
            return Err(Error::Config("target dataset is empty".into()));
        }
        if target.num_classes() != self.num_classes {
            return Err(Error::Config(format!(
                "target dataset has {} classes, trainer expects {}",
                target.num_classes(),
                self.num_classes
            )));
        }
        if target.shape() != Some((n, n)) {
            return Err(Error::Config(format!("target images must be {n}x{n}")));
        }
        if self.cfg.mode.reads_assistant() {
            if assistant.is_empty() {
                return Err(Error::Config("assistant dataset is empty".into()));
            }
            if assistant.num_classes() != target.num_classes() || assistant.shape() != target.shape() {
                return Err(Error::Config(
                    "assistant and target datasets differ in image size or class count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Sets a segmentor's learning rate to `lr0 * decay^floor(epoch / every)`.
pub fn decay_segmentor_lr<T>(opt: &mut OptimizerState<T>, epoch: u64, cfg: &TrainingConfig) {
    let k = (epoch / cfg.decay_every) as i32;
    opt.lr = opt.config.lr * cfg.segmentor_decay.powi(k);
}

/// Trains from scratch on `target` (and `assistant`, unless the mode is
/// `baseline`) for `cfg.epochs` epochs.
pub fn run_training<T: Scalar>(
    target: &Dataset,
    assistant: &Dataset,
    cfg: &TrainingConfig,
) -> Result<(Trainer<T>, Vec<MetricsRecord>)> {
    run_training_with(target, assistant, cfg, &RunOptions::default())
}

pub fn run_training_with<T: Scalar>(
    target: &Dataset,
    assistant: &Dataset,
    cfg: &TrainingConfig,
    opts: &RunOptions<'_>,
) -> Result<(Trainer<T>, Vec<MetricsRecord>)> {
    let (h, w) = target
        .shape()
        .ok_or_else(|| Error::Config("target dataset is empty".into()))?;
    if h != w {
        return Err(Error::Config(format!("images must be square, got {h}x{w}")));
    }
    let mut t = Trainer::new(cfg.clone(), target.num_classes(), h)?;
    t.run(target, assistant, opts)?;
    let metrics = t.metrics.clone();
    Ok((t, metrics))
}
