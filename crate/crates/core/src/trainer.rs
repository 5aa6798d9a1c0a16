//! Synthetic data with known evidence, minibatch training, and the
//! ELBO/EUBO bracket monitor.
//!
//! A run is a pure function of its [`TrainConfig`]: shuffles, minibatch
//! noise and evaluation noise all come from seeds derived from `seed`, and
//! wall-clock time is only recorded on request. Two runs with the same
//! config therefore write byte-identical metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::Matrix;
use crate::nets::{Checkpoint, Optimizer, OptimizerKind};
use crate::objectives::{ppca_decoder_net, NetSet, ObjectiveKind, Problem, Target};
use crate::ppca::{fit_ppca_with, Dataset, FitOptions, PpcaModel};
use crate::rng;

// seed-derivation tags
const TAG_TRUTH: u64 = 0x7472_7574;
const TAG_SAMPLE: u64 = 0x7361_6d70;
const TAG_INIT: u64 = 0x696e_6974;
const TAG_SHUFFLE: u64 = 0x7368_7566;
const TAG_BATCH: u64 = 0x6261_7463;
const TAG_EVAL: u64 = 0x6576_616c;

/// Points per chunk when evaluating with many MC samples.
const EVAL_CHUNK: usize = 25;

/// Ground-truth projection: Gram–Schmidt of a seeded Gaussian matrix with
/// column `k` scaled by `2^{-k}`.
pub fn ground_truth_projection(n_x: usize, n_z: usize, seed: u64) -> Result<Matrix> {
    if n_z == 0 || n_z > n_x {
        return Err(Error::Dimension(format!(
            "need 1 <= n_z <= n_x, got n_z={n_z}, n_x={n_x}"
        )));
    }
    let mut stream = rng::stream(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n_z);
    while cols.len() < n_z {
        let mut v = rng::normals(&mut stream, n_x);
        for q in &cols {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            cols.push(v);
        }
    }
    Ok(Matrix::from_fn(n_x, n_z, |r, k| {
        cols[k][r] * 0.5f64.powi(k as i32)
    }))
}

/// Draws `n_points` from a random ground-truth P-PCA model.
pub fn generate_synthetic(
    n_x: usize,
    n_z: usize,
    sigma: f64,
    n_points: usize,
    seed: u64,
) -> Result<(Dataset, PpcaModel)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let c = ground_truth_projection(n_x, n_z, rng::derive(seed, &[TAG_TRUTH]))?;
    let model = PpcaModel::new(c, sigma)?;
    let data = model.sample(n_points, rng::derive(seed, &[TAG_SAMPLE]));
    Ok((data, model))
}

/// Where the training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Drawn from a random ground-truth model; exact evidence is reported.
    Synthetic { sigma: f64, n_points: usize },
    /// A CSV file; exact evidence is reported only if `truth_model` is given.
    Csv {
        path: PathBuf,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        truth_model: Option<PathBuf>,
    },
}

/// Decoder family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    /// A trained MLP.
    Learned,
    /// Fixed to the likelihood of the P-PCA model fitted to the training split.
    Ppca,
}

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `learning_rate` at epoch 1 to zero after the last epoch.
    Cosine,
}

impl LrSchedule {
    /// Rate used during `epoch` (1-based) of `epochs`.
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let t = (epoch - 1) as f64 / epochs as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Everything that determines a run. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub n_x: usize,
    pub n_z: usize,
    pub data: DataSource,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "one")]
    pub mc_samples: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (plus before training and at the end).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_mc")]
    pub eval_mc_samples: usize,
    /// Held-out fraction, taken from the end of the dataset.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_decoder")]
    pub decoder: DecoderMode,
    /// Second objective co-trained on the same data and seeds (bracket runs).
    #[serde(default)]
    pub partner: Option<ObjectiveKind>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Adds wall-clock seconds to each row; makes metrics non-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}
fn one() -> usize {
    1
}
fn default_eval_every() -> usize {
    10
}
fn default_eval_mc() -> usize {
    256
}
fn default_eval_fraction() -> f64 {
    0.2
}
fn default_decoder() -> DecoderMode {
    DecoderMode::Learned
}

impl TrainConfig {
    /// Defaults for a synthetic run: N_x=16, N_z=3, σ=0.1, N=2000.
    pub fn synthetic(objective: ObjectiveKind, seed: u64) -> Self {
        Self {
            objective,
            n_x: 16,
            n_z: 3,
            data: DataSource::Synthetic {
                sigma: 0.1,
                n_points: 2000,
            },
            hidden: default_hidden(),
            epochs: 200,
            batch_size: 100,
            learning_rate: 1e-3,
            optimizer: default_optimizer(),
            lr_schedule: default_schedule(),
            mc_samples: 1,
            seed,
            eval_every: default_eval_every(),
            eval_mc_samples: default_eval_mc(),
            eval_fraction: default_eval_fraction(),
            decoder: default_decoder(),
            partner: None,
            metrics: None,
            checkpoint: None,
            record_wall_time: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io::with_path(e, path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_z == 0 || self.n_z > self.n_x {
            return bad(format!(
                "need 1 <= n_z <= n_x, got n_z={}, n_x={}",
                self.n_z, self.n_x
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.mc_samples == 0 || self.eval_mc_samples == 0 {
            return bad("mc_samples must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!(
                "eval_fraction must be in (0, 1), got {}",
                self.eval_fraction
            ));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be >= 1".into());
        }
        if let DataSource::Synthetic { sigma, n_points } = self.data {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return bad(format!("sigma must be > 0, got {sigma}"));
            }
            let n_train = n_points - ((n_points as f64) * self.eval_fraction).round() as usize;
            if self.batch_size > n_train {
                return bad(format!(
                    "batch_size {} exceeds the {n_train} training points",
                    self.batch_size
                ));
            }
        }
        Ok(())
    }
}

/// One evaluation row. Serialized with exactly these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub objective: ObjectiveKind,
    pub value: f64,
    pub recon: f64,
    pub regu: f64,
    pub extra: f64,
    /// Mean exact log-evidence over the eval set, when ground truth is known.
    pub exact_evidence: Option<f64>,
    /// `D[V‖Y]`, `D[V‖U]` or `J[V‖U]`.
    pub gap: f64,
    /// SE of the mean bound across eval points.
    pub std_error: f64,
    /// SE of the mean of `bound_i − log p(x_i)` across eval points.
    pub paired_std_error: Option<f64>,
    /// Mean training loss over the preceding epoch (absent at epoch 0).
    pub train_loss: Option<f64>,
    pub wall_time: Option<f64>,
    /// Set only on the final row of an aborted run.
    pub diagnostic: Option<String>,
}

/// All rows of one run, ordered by epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: ObjectiveKind,
    pub rows: Vec<EvalRow>,
    #[serde(skip)]
    pub nets: Option<NetSet>,
    pub aborted: bool,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EvalRow> {
        self.rows.last()
    }

    /// Last row that is not a diagnostic.
    pub fn last_good(&self) -> Option<&EvalRow> {
        self.rows.iter().rev().find(|r| r.diagnostic.is_none())
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut *w, row)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Training and evaluation data plus the models they come with.
pub struct PreparedData {
    pub train: Dataset,
    pub eval: Dataset,
    /// Known generating model (synthetic data or a supplied truth file).
    pub truth: Option<PpcaModel>,
    /// P-PCA fitted to the training split (reference posterior for VAE_A).
    pub fitted: PpcaModel,
}

pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let (all, truth) = match &cfg.data {
        DataSource::Synthetic { sigma, n_points } => {
            let (d, m) = generate_synthetic(cfg.n_x, cfg.n_z, *sigma, *n_points, cfg.seed)?;
            (d, Some(m))
        }
        DataSource::Csv {
            path,
            header,
            truth_model,
        } => {
            let d = io::read_csv(path, *header)?;
            if d.dim() != cfg.n_x {
                return Err(Error::Dimension(format!(
                    "{} has {} columns, config n_x = {}",
                    path.display(),
                    d.dim(),
                    cfg.n_x
                )));
            }
            let truth = truth_model.as_deref().map(io::load_model).transpose()?;
            if let Some(t) = &truth {
                if t.n_x() != cfg.n_x {
                    return Err(Error::Dimension(
                        "truth model n_x differs from config".into(),
                    ));
                }
            }
            (d, truth)
        }
    };
    let (train, eval) = all.split_tail(cfg.eval_fraction);
    if train.len() < cfg.batch_size.max(2) || eval.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} training / {} eval points for batch size {}",
            train.len(),
            eval.len(),
            cfg.batch_size
        )));
    }
    let fit_opts = FitOptions {
        sigma: if cfg.n_z < cfg.n_x {
            crate::ppca::SigmaChoice::Auto
        } else {
            crate::ppca::SigmaChoice::Fixed(1e-3)
        },
        ..FitOptions::default()
    };
    let fitted = fit_ppca_with(&train, cfg.n_z, &fit_opts)?;
    Ok(PreparedData {
        train,
        eval,
        truth,
        fitted,
    })
}

fn mean_sd_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n as f64;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (v / n as f64).sqrt()
}

struct Evaluator<'a> {
    eval: &'a Matrix,
    evidence: Option<Vec<f64>>,
    mc: usize,
    seed: u64,
}

impl Evaluator<'_> {
    fn row(
        &self,
        problem: &Problem<'_>,
        epoch: usize,
        train_loss: Option<f64>,
        started: Option<Instant>,
    ) -> Result<EvalRow> {
        let est = problem.evaluate_chunked(self.eval, self.mc, self.seed, EVAL_CHUNK)?;
        let (exact_evidence, paired) = match &self.evidence {
            Some(ev) => {
                let diffs: Vec<f64> = est.per_point.iter().zip(ev).map(|(b, e)| b - e).collect();
                let mean = ev.iter().sum::<f64>() / ev.len() as f64;
                (Some(mean), Some(mean_sd_error(&diffs)))
            }
            None => (None, None),
        };
        Ok(EvalRow {
            epoch,
            objective: problem.kind,
            value: est.value,
            recon: est.recon,
            regu: est.regu,
            extra: est.extra,
            exact_evidence,
            gap: est.gap,
            std_error: est.std_error,
            paired_std_error: paired,
            train_loss,
            wall_time: started.map(|t| t.elapsed().as_secs_f64()),
            diagnostic: None,
        })
    }
}

fn diagnostic_row(
    kind: ObjectiveKind,
    epoch: usize,
    loss: f64,
    reason: String,
    started: Option<Instant>,
) -> EvalRow {
    EvalRow {
        epoch,
        objective: kind,
        value: f64::NAN,
        recon: f64::NAN,
        regu: f64::NAN,
        extra: f64::NAN,
        exact_evidence: None,
        gap: f64::NAN,
        std_error: f64::NAN,
        paired_std_error: None,
        train_loss: Some(loss),
        wall_time: started.map(|t| t.elapsed().as_secs_f64()),
        diagnostic: Some(reason),
    }
}

/// Networks a run of `kind` starts from. Every objective trained with the
/// same config starts its shared slots from the same weights.
pub fn initial_nets(cfg: &TrainConfig, kind: ObjectiveKind) -> Result<NetSet> {
    NetSet::init(
        kind,
        cfg.n_x,
        cfg.n_z,
        &cfg.hidden,
        rng::derive(cfg.seed, &[TAG_INIT]),
    )
}

/// Trains one objective on prepared data. Rows are also streamed to `sink`.
pub fn train_on(
    cfg: &TrainConfig,
    kind: ObjectiveKind,
    data: &PreparedData,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = cfg.record_wall_time.then(Instant::now);
    let mut nets = initial_nets(cfg, kind)?;
    let fixed_decoder = cfg.decoder == DecoderMode::Ppca;
    if fixed_decoder {
        nets.dec = ppca_decoder_net(&data.fitted)?;
        if let Some(d) = nets.dec_aux.as_mut() {
            *d = ppca_decoder_net(&data.fitted)?;
        }
    }
    let model = kind.needs_model().then_some(&data.fitted);
    let mut params = nets.params();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len())?;
    // decoder slots occupy a known range of the flat vector
    let frozen: Vec<(usize, usize)> = if fixed_decoder {
        let mut ranges = Vec::new();
        let mut offset = 0;
        for (role, n) in nets.roles().into_iter().zip(slot_sizes(&nets)) {
            if role.starts_with("dec") {
                ranges.push((offset, offset + n));
            }
            offset += n;
        }
        ranges
    } else {
        Vec::new()
    };

    let evidence = match &data.truth {
        Some(t) => Some(
            (0..data.eval.len())
                .map(|i| t.evidence_logpdf(data.eval.row(i)))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let evaluator = Evaluator {
        eval: data.eval.points(),
        evidence,
        mc: cfg.eval_mc_samples,
        seed: rng::derive(cfg.seed, &[TAG_EVAL]),
    };
    let mut rows = Vec::new();
    let mut emit = |row: EvalRow, rows: &mut Vec<EvalRow>| -> Result<()> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &row)?;
            writeln!(w)?;
            w.flush()?;
        }
        rows.push(row);
        Ok(())
    };

    let problem = Problem::new(kind, nets.refs(), model)?;
    emit(evaluator.row(&problem, 0, None, started)?, &mut rows)?;

    let train = data.train.points();
    let n = train.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let n_batches = n / cfg.batch_size;
    for epoch in 1..=cfg.epochs {
        opt.set_learning_rate(cfg.lr_schedule.rate(cfg.learning_rate, epoch, cfg.epochs))?;
        order.sort_unstable();
        order.shuffle(&mut rng::stream(rng::derive(
            cfg.seed,
            &[TAG_SHUFFLE, epoch as u64],
        )));
        let mut loss_sum = 0.0;
        for b in 0..n_batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch = Matrix::from_fn(idx.len(), train.cols(), |r, c| train[(idx[r], c)]);
            let seed = rng::derive(cfg.seed, &[TAG_BATCH, epoch as u64, b as u64]);
            let problem = Problem::new(kind, nets.refs(), model)?;
            let result = problem.differentiate(&batch, cfg.mc_samples, seed, Target::Loss);
            let diff = match result {
                Ok(d) if d.loss.is_finite() => d,
                Ok(d) => {
                    let reason = format!("non-finite loss at epoch {epoch}, batch {b}");
                    emit(
                        diagnostic_row(kind, epoch, d.loss, reason, started),
                        &mut rows,
                    )?;
                    return Ok(TrainReport {
                        objective: kind,
                        rows,
                        nets: Some(nets),
                        aborted: true,
                    });
                }
                Err(e) => return Err(e),
            };
            let mut grads = nets.flatten_grads(&diff.grads)?;
            if grads.iter().any(|g| !g.is_finite()) {
                let reason = format!("non-finite gradient at epoch {epoch}, batch {b}");
                emit(
                    diagnostic_row(kind, epoch, diff.loss, reason, started),
                    &mut rows,
                )?;
                return Ok(TrainReport {
                    objective: kind,
                    rows,
                    nets: Some(nets),
                    aborted: true,
                });
            }
            for &(lo, hi) in &frozen {
                grads[lo..hi].iter_mut().for_each(|g| *g = 0.0);
            }
            loss_sum += diff.loss;
            opt.step(&mut params, &grads)?;
            if let Err(e) = nets.set_params(&params) {
                let reason = format!("parameters left the finite range at epoch {epoch}: {e}");
                emit(
                    diagnostic_row(kind, epoch, diff.loss, reason, started),
                    &mut rows,
                )?;
                return Ok(TrainReport {
                    objective: kind,
                    rows,
                    nets: Some(nets),
                    aborted: true,
                });
            }
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let problem = Problem::new(kind, nets.refs(), model)?;
            let row = evaluator.row(&problem, epoch, Some(loss_sum / n_batches as f64), started)?;
            let finite = [row.value, row.recon, row.regu, row.extra, row.gap]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                let reason = format!("non-finite evaluation at epoch {epoch}");
                emit(
                    diagnostic_row(kind, epoch, loss_sum, reason, started),
                    &mut rows,
                )?;
                return Ok(TrainReport {
                    objective: kind,
                    rows,
                    nets: Some(nets),
                    aborted: true,
                });
            }
            emit(row, &mut rows)?;
        }
    }

    if let Some(path) = &cfg.checkpoint {
        let ckpt = Checkpoint {
            nets: nets.states(),
            optimizer: opt.clone(),
            step: opt.steps(),
        };
        let path = if cfg.partner.is_some() {
            suffixed(path, kind)
        } else {
            path.clone()
        };
        ckpt.save(&path)?;
    }
    Ok(TrainReport {
        objective: kind,
        rows,
        nets: Some(nets),
        aborted: false,
    })
}

fn slot_sizes(nets: &NetSet) -> Vec<usize> {
    let mut v = vec![nets.enc_v.param_count()];
    if let Some(n) = &nets.enc_aux {
        v.push(n.param_count());
    }
    v.push(nets.dec.param_count());
    if let Some(n) = &nets.dec_aux {
        v.push(n.param_count());
    }
    v
}

/// `ckpt.json` → `ckpt.EUBO.json`.
pub fn suffixed(path: &Path, kind: ObjectiveKind) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{kind}.{ext}"),
        None => format!("{stem}.{kind}"),
    };
    path.with_file_name(name)
}

/// Runs `cfg.objective`, writing metrics and the checkpoint if configured.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    match &cfg.metrics {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).map_err(|e| io::with_path(e, path))?);
            let report = train_on(cfg, cfg.objective, &data, Some(&mut w))?;
            w.flush()?;
            Ok(report)
        }
        None => train_on(cfg, cfg.objective, &data, None),
    }
}

/// Direction of the bracket width over the trailing window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapTrend {
    Shrinking,
    Stalled,
    Diverging,
}

/// Bracket state after co-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStatus {
    /// Final `EUBO − ELBO`.
    pub width: f64,
    pub trend: GapTrend,
    /// Least-squares slope of the width over the trailing window (nats/eval).
    pub slope: f64,
    /// Final `D[V‖U]` of the upper-bound run.
    pub encoder_gap: f64,
    /// `√(se_lower² + se_upper²)` of the final rows (paired SE when available).
    pub combined_std_error: f64,
    pub widths: Vec<f64>,
}

pub const TREND_WINDOW: usize = 10;
pub const TREND_TOL: f64 = 1e-3;

fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let xbar = (n - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xbar;
        num += dx * (y - ybar);
        den += dx * dx;
    }
    num / den
}

fn row_se(r: &EvalRow) -> f64 {
    r.paired_std_error.unwrap_or(r.std_error)
}

/// Width and trend of the `[ELBO, EUBO]` bracket from co-evaluated rows.
pub fn bracket_monitor(elbo_rows: &[EvalRow], eubo_rows: &[EvalRow]) -> Result<ConvergenceStatus> {
    let good = |rows: &[EvalRow]| -> Vec<EvalRow> {
        rows.iter()
            .filter(|r| r.diagnostic.is_none())
            .cloned()
            .collect()
    };
    let (lo, hi) = (good(elbo_rows), good(eubo_rows));
    if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| a.epoch != b.epoch)
    {
        return Err(Error::Contract(format!(
            "bracket rows must share the eval cadence ({} vs {} rows)",
            lo.len(),
            hi.len()
        )));
    }
    let widths: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| b.value - a.value).collect();
    let start = widths.len().saturating_sub(TREND_WINDOW);
    let slope = ls_slope(&widths[start..]);
    let trend = if slope < -TREND_TOL {
        GapTrend::Shrinking
    } else if slope > TREND_TOL {
        GapTrend::Diverging
    } else {
        GapTrend::Stalled
    };
    let (last_lo, last_hi) = (lo.last().expect("nonempty"), hi.last().expect("nonempty"));
    Ok(ConvergenceStatus {
        width: *widths.last().expect("nonempty"),
        trend,
        slope,
        encoder_gap: last_hi.gap,
        combined_std_error: row_se(last_lo).hypot(row_se(last_hi)),
        widths,
    })
}

/// Both runs of a bracket experiment and their joint status.
#[derive(Clone, Debug)]
pub struct BracketReport {
    pub lower: TrainReport,
    pub upper: TrainReport,
    pub status: ConvergenceStatus,
}

/// Co-trains `cfg.objective` and `cfg.partner` (default ELBO and EUBO) on
/// the same data and seeds, in two threads. Metrics rows are interleaved by
/// epoch, lower bound first.
pub fn train_bracket(cfg: &TrainConfig) -> Result<BracketReport> {
    cfg.validate()?;
    let partner = cfg.partner.unwrap_or(match cfg.objective {
        ObjectiveKind::Elbo => ObjectiveKind::Eubo,
        _ => ObjectiveKind::Elbo,
    });
    let (a, b) = (cfg.objective, partner);
    if a.direction() == b.direction() {
        return Err(Error::InvalidArgument(format!(
            "bracket needs one lower and one upper bound, got {a} and {b}"
        )));
    }
    let (lower_kind, upper_kind) = match a.direction() {
        crate::objectives::Direction::Lower => (a, b),
        crate::objectives::Direction::Upper => (b, a),
    };
    let mut cfg = cfg.clone();
    cfg.partner = Some(partner);
    let data = prepare_data(&cfg)?;
    let (lower, upper) = std::thread::scope(|s| {
        let lo = s.spawn(|| train_on(&cfg, lower_kind, &data, None));
        let hi = s.spawn(|| train_on(&cfg, upper_kind, &data, None));
        (
            lo.join().expect("lower-bound thread panicked"),
            hi.join().expect("upper-bound thread panicked"),
        )
    });
    let (lower, upper) = (lower?, upper?);
    if let Some(path) = &cfg.metrics {
        let mut w = BufWriter::new(File::create(path).map_err(|e| io::with_path(e, path))?);
        let n = lower.rows.len().max(upper.rows.len());
        for i in 0..n {
            for rows in [&lower.rows, &upper.rows] {
                if let Some(r) = rows.get(i) {
                    serde_json::to_writer(&mut w, r)?;
                    writeln!(w)?;
                }
            }
        }
        w.flush()?;
    }
    let status = bracket_monitor(&lower.rows, &upper.rows)?;
    Ok(BracketReport {
        lower,
        upper,
        status,
    })
}
