//! One experiment: every task × method × trial, then bundling and a
//! runtime exercise on the deployed bundle.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TaskConfig};
use super::idx;
use crate::bundle::{
    self, Bundle, BundleAccounting, CompressionReport, EncodedModel, EscapeFormat, LayerPayload,
};
use crate::dataset::{LabeledDataset, Splits};
use crate::nn::{self, ModelGraph};
use crate::optimizer::{self, CompressedModel, Heuristic, OptimizeReport};
use crate::pool::{pool_weights, GroupConfig, GroupId, WeightPool};
use crate::pq::{self, learn_group_codebook, CodebookPair, GroupCodebook, LayerCodes, PqError};
use crate::quant::{self, to_f16, F16CodebookPair, F16GroupCodebook};
use crate::runtime::{self, Arena, Flash, RuntimeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "pq-s")]
    PqS,
    #[serde(rename = "pq-m")]
    PqM,
    #[serde(rename = "pq-mopt")]
    PqMOpt,
    #[serde(rename = "yono")]
    Yono,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Original,
        Method::Int8,
        Method::PqS,
        Method::PqM,
        Method::PqMOpt,
        Method::Yono,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Int8 => "int8",
            Method::PqS => "pq-s",
            Method::PqM => "pq-m",
            Method::PqMOpt => "pq-mopt",
            Method::Yono => "yono",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Methods that run the reassignment loop's optimizer.
    pub fn optimizer_flags(self) -> Option<(Option<usize>, Heuristic)> {
        match self {
            Method::PqS | Method::PqM => Some((Some(0), Heuristic::None)),
            Method::PqMOpt => Some((None, Heuristic::None)),
            Method::Yono => Some((None, Heuristic::Ours)),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Train,
    Codebooks,
    Compress,
    Bundle,
    Runtime,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Codebooks => "codebooks",
            Stage::Compress => "compress",
            Stage::Bundle => "bundle",
            Stage::Runtime => "runtime",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}]{} {message}", context.as_ref().map(|c| format!(" {c}:")).unwrap_or_default())]
pub struct HarnessError {
    pub stage: Stage,
    pub context: Option<String>,
    pub message: String,
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage, context: impl Into<String>) -> Result<T, HarnessError>;
}

impl<T, E: fmt::Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage, context: impl Into<String>) -> Result<T, HarnessError> {
        self.map_err(|e| {
            let c: String = context.into();
            HarnessError {
                stage,
                context: (!c.is_empty()).then_some(c),
                message: e.to_string(),
            }
        })
    }
}

/// Derives an independent 64-bit seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.trials as u64)
        .map(|t| derive_seed(cfg.seed, t + 1))
        .collect()
}

/// A task's data for one trial.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub splits: Splits,
    /// Fresh inputs for the int8-vs-float agreement check.
    pub agreement: Tensor,
}

pub fn load_task(
    cfg: &ExperimentConfig,
    task: &TaskConfig,
    seed: u64,
) -> Result<TaskData, HarnessError> {
    let ctx = task.name.as_str();
    let full = match (&task.idx, task.generator) {
        (Some(src), _) => {
            let d = idx::ingest_idx(Path::new(&src.images), Path::new(&src.labels), src.classes)
                .stage(Stage::Data, ctx)?;
            if d.sample_shape() != task.input_shape().as_slice() {
                return Err(HarnessError {
                    stage: Stage::Data,
                    context: Some(task.name.clone()),
                    message: format!(
                        "IDX images are {:?}, config says {:?}",
                        d.sample_shape(),
                        task.input_shape()
                    ),
                });
            }
            let mut order: Vec<usize> = (0..d.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            d.subset(&order)
        }
        (None, Some(g)) => g.generate(task.samples, seed),
        (None, None) => unreachable!("validated config"),
    };
    let splits = Splits::partition(&full, cfg.test_fraction, cfg.holdout_fraction);
    for (what, part) in [("train", &splits.train), ("test", &splits.test)] {
        if part.is_empty() {
            return Err(HarnessError {
                stage: Stage::Data,
                context: Some(task.name.clone()),
                message: format!("{what} split is empty"),
            });
        }
    }
    let agreement = match task.generator {
        Some(g) if task.idx.is_none() => {
            g.generate(cfg.agreement_samples, derive_seed(seed, 0xA6))
                .inputs
        }
        _ => full.head(cfg.agreement_samples).inputs,
    };
    Ok(TaskData { splits, agreement })
}

pub fn train_original(
    cfg: &ExperimentConfig,
    task: &TaskConfig,
    data: &TaskData,
    seed: u64,
) -> Result<ModelGraph, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1A));
    let mut model = cfg
        .build_model(task, &mut rng)
        .stage(Stage::Train, &task.name)?;
    let classes = model.num_classes().stage(Stage::Train, &task.name)?;
    if classes != data.splits.train.num_classes {
        return Err(HarnessError {
            stage: Stage::Train,
            context: Some(task.name.clone()),
            message: format!(
                "model has {classes} outputs, data has {} classes",
                data.splits.train.num_classes
            ),
        });
    }
    nn::train(
        &mut model,
        &data.splits.train,
        &cfg.train.to_train_config(derive_seed(seed, 0x7A)),
    )
    .stage(Stage::Train, &task.name)?;
    log::info!("trained {}", task.name);
    Ok(model)
}

fn empty_f16(g: &GroupConfig) -> F16CodebookPair {
    F16CodebookPair {
        g3x3: F16GroupCodebook {
            group: g.group(GroupId::G3x3),
            subs: vec![],
        },
        g1x1fc: F16GroupCodebook {
            group: g.group(GroupId::G1x1Fc),
            subs: vec![],
        },
    }
}

/// Learns one group codebook, shrinking `k` when the pool is too small.
fn learn_group_clipped(pool: &WeightPool, k: usize, seed: u64) -> Result<GroupCodebook, PqError> {
    let rows = pool.num_rows() - pool.fully_padded_rows().len();
    if rows < 2 {
        return Ok(GroupCodebook::empty(pool.group));
    }
    let mut k = k.min(1 << (usize::BITS - 1 - rows.leading_zeros()));
    loop {
        match learn_group_codebook(pool, k, seed) {
            Ok((g, _)) => return Ok(g),
            Err(PqError::TooFewDistinct { .. } | PqError::TooFewRows { .. }) if k > 2 => k /= 2,
            Err(e) => return Err(e),
        }
    }
}

/// Codebooks for a set of models; groups no model uses stay empty.
pub fn learn_pair(models: &[&ModelGraph], k: usize, seed: u64) -> Result<CodebookPair, PqError> {
    let (p3, p1) = pool_weights(models, &GroupConfig::default())?;
    Ok(CodebookPair::new(
        learn_group_clipped(&p3, k, seed)?,
        learn_group_clipped(&p1, k, seed)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// The split the compression loop sees.
    pub test: f64,
    /// Never seen by training or compression.
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub accuracy: Accuracy,
    pub escapes: Vec<usize>,
    pub trace: Option<OptimizeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: String,
    pub held_out: bool,
    pub original_f32_bytes: usize,
    pub params: usize,
    pub outcomes: Vec<MethodOutcome>,
}

impl TaskOutcome {
    pub fn get(&self, m: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeModelCheck {
    pub model: String,
    pub arena_bytes: usize,
    /// Resident int8 weights equal the offline f32→f16→f32→int8 pipeline.
    pub weights_match: bool,
    pub int8_test_accuracy: f64,
    /// Top-1 agreement of the int8 path with the float reference executor.
    pub agreement: f64,
    pub agreement_samples: usize,
    pub bytes_read: usize,
    pub bytes_written: usize,
    /// Same model stored as raw f32.
    pub raw_bytes_read: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeCheck {
    pub capacity: usize,
    pub flash_bytes: usize,
    pub flash_capacity: usize,
    pub models: Vec<RuntimeModelCheck>,
    pub swap_sequences: usize,
    pub swap_steps: usize,
    pub high_water: usize,
    /// Every step kept usage within capacity.
    pub within_capacity: bool,
    /// A too-small arena rejected the load and stayed empty.
    pub capacity_error_clean: bool,
    /// A failed swap kept the previous model resident and usable.
    pub failed_swap_kept_previous: bool,
    /// A truncated image was rejected before reaching the arena.
    pub truncated_image_rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub tasks: Vec<TaskOutcome>,
    /// Suite (non-held-out) bundle bytes per method.
    pub sizes: BTreeMap<Method, usize>,
    pub suite_original_bytes: usize,
    /// Fingerprint of the shared pair before and after compressing held-out tasks.
    pub fingerprint: String,
    pub fingerprint_after: String,
    pub accounting: Option<BundleAccounting>,
    pub ratio: Option<CompressionReport>,
    /// Bytes the held-out models add to the suite bundle.
    pub growth_bytes: usize,
    pub growth_original_bytes: usize,
    pub runtime: Option<RuntimeCheck>,
}

/// Everything a trial produced, for callers that want to re-check it.
#[derive(Debug, Clone)]
pub struct TrialArtifacts {
    pub outcome: TrialOutcome,
    pub originals: Vec<ModelGraph>,
    pub data: Vec<TaskData>,
    pub pair: Option<CodebookPair>,
    /// Deployed models per optimizer method, in task order.
    pub compressed: BTreeMap<Method, Vec<CompressedModel>>,
    pub suite_bundle: Option<Vec<u8>>,
    /// Suite plus held-out models.
    pub full_bundle: Option<Vec<u8>>,
    /// Every single-bundle method, suite models first, then held-out ones.
    pub bundles: BTreeMap<Method, Bundle>,
    pub suite_len: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn calib(cfg: &ExperimentConfig, d: &TaskData) -> Tensor {
    d.splits.train.head(cfg.calibration_samples).inputs
}

fn arena_accuracy(arena: &mut Arena, data: &LabeledDataset) -> Result<f64, RuntimeError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = arena.predict(&data.inputs)?;
    Ok(pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count() as f64
        / data.len() as f64)
}

fn eval_both(model: &ModelGraph, d: &TaskData) -> Result<Accuracy, nn::NnError> {
    Ok(Accuracy {
        test: nn::evaluate(model, &d.splits.test)?,
        holdout: if d.splits.holdout.is_empty() {
            0.0
        } else {
            nn::evaluate(model, &d.splits.holdout)?
        },
    })
}

fn deploy(
    cfg: &ExperimentConfig,
    c: &CompressedModel,
    original: &ModelGraph,
    f16: &F16CodebookPair,
    d: &TaskData,
) -> Result<EncodedModel, bundle::BundleError> {
    bundle::encode_for_deployment(
        &c.recon,
        &c.codes,
        f16,
        EscapeFormat::Int8,
        &calib(cfg, d),
        original.f32_bytes() as u64,
    )
}

/// Runs one trial end to end.
pub fn run_trial(
    cfg: &ExperimentConfig,
    trial: usize,
    seed: u64,
) -> Result<TrialArtifacts, HarnessError> {
    let tasks: Vec<&TaskConfig> = cfg.suite().chain(cfg.held_out()).collect();
    let n_suite = cfg.suite().count();
    let mut data = Vec::with_capacity(tasks.len());
    let mut originals = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let s = derive_seed(seed, 100 + i as u64);
        let d = load_task(cfg, t, s)?;
        originals.push(train_original(cfg, t, &d, s)?);
        data.push(d);
    }
    let mut outcomes: Vec<TaskOutcome> = tasks
        .iter()
        .zip(&originals)
        .map(|(t, m)| TaskOutcome {
            task: t.name.clone(),
            held_out: t.held_out,
            original_f32_bytes: m.f32_bytes(),
            params: m.param_count(),
            outcomes: vec![],
        })
        .collect();
    let mut sizes = BTreeMap::new();
    let suite_original_bytes: usize = originals[..n_suite].iter().map(|m| m.f32_bytes()).sum();
    sizes.insert(Method::Original, suite_original_bytes);

    // Original and post-training int8.
    let gcfg = GroupConfig::default();
    let no_books = empty_f16(&gcfg);
    let mut int8_models = Vec::new();
    for (i, (m, d)) in originals.iter().zip(&data).enumerate() {
        let acc = eval_both(m, d).stage(Stage::Train, &tasks[i].name)?;
        outcomes[i].outcomes.push(MethodOutcome {
            method: Method::Original,
            accuracy: acc,
            escapes: vec![],
            trace: None,
        });
        let em = bundle::encode_for_deployment(
            m,
            &LayerCodes::new(),
            &no_books,
            EscapeFormat::Int8,
            &calib(cfg, d),
            m.f32_bytes() as u64,
        )
        .stage(Stage::Bundle, &tasks[i].name)?;
        int8_models.push(em);
    }
    let int8_bundle = Bundle {
        codebooks: no_books.clone(),
        models: int8_models.clone(),
    };
    let int8_flash = Flash::from_bundle(&int8_bundle).stage(Stage::Bundle, "int8")?;
    let mut arena = Arena::new(cfg.arena_bytes);
    for (i, d) in data.iter().enumerate() {
        arena
            .load(&int8_flash, &tasks[i].name)
            .stage(Stage::Runtime, &tasks[i].name)?;
        let acc = Accuracy {
            test: arena_accuracy(&mut arena, &d.splits.test)
                .stage(Stage::Runtime, &tasks[i].name)?,
            holdout: arena_accuracy(&mut arena, &d.splits.holdout)
                .stage(Stage::Runtime, &tasks[i].name)?,
        };
        outcomes[i].outcomes.push(MethodOutcome {
            method: Method::Int8,
            accuracy: acc,
            escapes: vec![],
            trace: None,
        });
    }
    let int8_suite = Bundle {
        codebooks: no_books.clone(),
        models: int8_models[..n_suite].to_vec(),
    };
    sizes.insert(
        Method::Int8,
        bundle::serialize(&int8_suite)
            .stage(Stage::Bundle, "int8")?
            .len(),
    );

    let mut artifacts = TrialArtifacts {
        outcome: TrialOutcome {
            trial,
            seed,
            tasks: vec![],
            sizes: BTreeMap::new(),
            suite_original_bytes,
            fingerprint: String::new(),
            fingerprint_after: String::new(),
            accounting: None,
            ratio: None,
            growth_bytes: 0,
            growth_original_bytes: 0,
            runtime: None,
        },
        originals: vec![],
        data: vec![],
        pair: None,
        compressed: BTreeMap::new(),
        suite_bundle: None,
        full_bundle: None,
        bundles: BTreeMap::new(),
        suite_len: n_suite,
    };
    if n_suite == 0 {
        artifacts.outcome.tasks = outcomes;
        artifacts.outcome.sizes = sizes;
        artifacts.originals = originals;
        artifacts.data = data;
        return Ok(artifacts);
    }

    // PQ-S: each model gets its own pair.
    let mut pqs_bytes = 0;
    for (i, (m, d)) in originals.iter().zip(&data).enumerate() {
        let name = &tasks[i].name;
        let own = learn_pair(&[m], cfg.k, derive_seed(seed, 0x55 + i as u64))
            .stage(Stage::Codebooks, name)?;
        let mut ocfg = cfg.optimize_config(derive_seed(seed, 0x5000 + i as u64));
        ocfg.max_outer_iters = Some(0);
        let (c, report) = optimizer::optimize(m, &own, &d.splits.train, &d.splits.test, &ocfg)
            .stage(Stage::Compress, format!("{name} pq-s"))?;
        let acc = eval_both(&c.recon, d).stage(Stage::Compress, name)?;
        if i < n_suite {
            let f16 = to_f16(&own).stage(Stage::Bundle, name)?;
            let em = deploy(cfg, &c, m, &f16, d).stage(Stage::Bundle, name)?;
            pqs_bytes += bundle::serialize(&Bundle {
                codebooks: f16,
                models: vec![em],
            })
            .stage(Stage::Bundle, name)?
            .len();
        }
        outcomes[i].outcomes.push(MethodOutcome {
            method: Method::PqS,
            accuracy: acc,
            escapes: c.escapes.iter().copied().collect(),
            trace: Some(report),
        });
    }
    sizes.insert(Method::PqS, pqs_bytes);

    // Shared pair over the suite only.
    let suite_refs: Vec<&ModelGraph> = originals[..n_suite].iter().collect();
    let pair = learn_pair(&suite_refs, cfg.k, derive_seed(seed, 0xC0DE))
        .stage(Stage::Codebooks, "shared")?;
    let fingerprint = hex(&pair.fingerprint());
    let f16 = to_f16(&pair).stage(Stage::Codebooks, "shared")?;
    let mut compressed: BTreeMap<Method, Vec<CompressedModel>> = BTreeMap::new();
    for (i, (m, d)) in originals.iter().zip(&data).enumerate() {
        let name = &tasks[i].name;
        let mut base = cfg.optimize_config(derive_seed(seed, 0x6000 + i as u64));
        base.max_outer_iters = tasks[i].max_outer_iters.or(base.max_outer_iters);
        let acc_orig = nn::evaluate(m, &d.splits.test).stage(Stage::Compress, name)?;
        let init = optimizer::initial_finetune(m, &pair, &d.splits.train, &d.splits.test, &base)
            .stage(Stage::Compress, name)?;
        for method in [Method::PqM, Method::PqMOpt, Method::Yono] {
            let (iters, heuristic) = method.optimizer_flags().unwrap();
            let mut ocfg = base.clone();
            ocfg.max_outer_iters = iters.or(base.max_outer_iters);
            ocfg.heuristic = heuristic;
            let (c, report) = optimizer::em_optimize(
                m,
                init.clone(),
                &pair,
                &d.splits.train,
                &d.splits.test,
                &ocfg,
                acc_orig,
            )
            .stage(Stage::Compress, format!("{name} {method}"))?;
            log::info!(
                "{name} {method}: {:.4} -> {:.4}, escapes {:?}",
                acc_orig,
                report.acc_final,
                report.escapes
            );
            let acc = eval_both(&c.recon, d).stage(Stage::Compress, name)?;
            outcomes[i].outcomes.push(MethodOutcome {
                method,
                accuracy: acc,
                escapes: c.escapes.iter().copied().collect(),
                trace: Some(report),
            });
            compressed.entry(method).or_default().push(c);
        }
    }
    let fingerprint_after = hex(&pair.fingerprint());

    let mut suite_bundle = None;
    let mut full_bundle = None;
    let mut full = None;
    let mut bundles = BTreeMap::from([(Method::Int8, int8_bundle)]);
    for method in [Method::PqM, Method::PqMOpt, Method::Yono] {
        let models: Vec<EncodedModel> = compressed[&method]
            .iter()
            .zip(&originals)
            .zip(&data)
            .map(|((c, m), d)| deploy(cfg, c, m, &f16, d))
            .collect::<Result<_, _>>()
            .stage(Stage::Bundle, method.name())?;
        let suite = Bundle {
            codebooks: f16.clone(),
            models: models[..n_suite].to_vec(),
        };
        let bytes = bundle::serialize(&suite).stage(Stage::Bundle, method.name())?;
        sizes.insert(method, bytes.len());
        if method == Method::Yono {
            suite_bundle = Some(bytes);
            let b = Bundle {
                codebooks: f16.clone(),
                models: models.clone(),
            };
            full_bundle = Some(bundle::serialize(&b).stage(Stage::Bundle, "yono")?);
            full = Some(b.clone());
        }
        bundles.insert(
            method,
            Bundle {
                codebooks: f16.clone(),
                models,
            },
        );
    }
    let suite_bytes = suite_bundle.clone().unwrap();
    let full_bytes = full_bundle.clone().unwrap();
    let (_, accounting) =
        bundle::deserialize_with_accounting(&suite_bytes).stage(Stage::Bundle, "yono")?;
    let ratio =
        bundle::compression_ratio(&suite_refs, &suite_bytes).stage(Stage::Bundle, "yono")?;
    let growth_original_bytes: usize = originals[n_suite..].iter().map(|m| m.f32_bytes()).sum();

    let runtime = runtime_check(
        cfg,
        full.as_ref().unwrap(),
        &full_bytes,
        &compressed[&Method::Yono],
        &pair,
        &data,
        seed,
    )?;

    artifacts.outcome = TrialOutcome {
        trial,
        seed,
        tasks: outcomes,
        sizes,
        suite_original_bytes,
        fingerprint,
        fingerprint_after,
        accounting: Some(accounting),
        ratio: Some(ratio),
        growth_bytes: full_bytes.len() - suite_bytes.len(),
        growth_original_bytes,
        runtime: Some(runtime),
    };
    artifacts.originals = originals;
    artifacts.data = data;
    artifacts.pair = Some(pair);
    artifacts.compressed = compressed;
    artifacts.suite_bundle = suite_bundle;
    artifacts.full_bundle = full_bundle;
    artifacts.bundles = bundles;
    Ok(artifacts)
}

/// Int8 weights the runtime should hold, computed from the float
/// reconstruction without going through the bundle.
pub fn offline_int8_weights(
    c: &CompressedModel,
    pair: &CodebookPair,
    layer: usize,
) -> Option<Vec<i8>> {
    let w = if c.escapes.contains(&layer) {
        c.recon.weight(layer)?.data().to_vec()
    } else {
        let skeleton = &c.recon;
        let r = pq::reconstruct_model(&c.codes, pair, skeleton, &c.escapes).ok()?;
        r.weight(layer)?
            .data()
            .iter()
            .map(|&v| half::f16::from_f32(v).to_f32())
            .collect()
    };
    let qp = quant::calibrate(&w).ok()?;
    Some(quant::quantize(&w, qp))
}

fn runtime_check(
    cfg: &ExperimentConfig,
    deployed: &Bundle,
    bytes: &[u8],
    compressed: &[CompressedModel],
    pair: &CodebookPair,
    data: &[TaskData],
    seed: u64,
) -> Result<RuntimeCheck, HarnessError> {
    let st = Stage::Runtime;
    let flash = Flash::new(bytes.to_vec()).stage(st, "deployed bundle")?;
    let raw = Bundle {
        codebooks: empty_f16(&GroupConfig::default()),
        models: compressed
            .iter()
            .zip(data)
            .map(|(c, d)| {
                bundle::encode_for_deployment(
                    &c.recon,
                    &LayerCodes::new(),
                    &deployed.codebooks,
                    EscapeFormat::RawF32,
                    &calib(cfg, d),
                    0,
                )
            })
            .collect::<Result<_, _>>()
            .stage(st, "raw bundle")?,
    };
    let raw_flash = Flash::from_bundle(&raw).stage(st, "raw bundle")?;
    let mut arena = Arena::new(cfg.arena_bytes);
    let mut models = Vec::new();
    for ((em, c), d) in deployed.models.iter().zip(compressed).zip(data) {
        let name = em.name.as_str();
        let stats = arena.load(&flash, name).stage(st, name)?;
        let mut weights_match = true;
        for (i, l) in em.layers.iter().enumerate() {
            if matches!(l.payload, LayerPayload::Weighted { .. }) {
                weights_match &=
                    arena.resident_weights(i + 1) == offline_int8_weights(c, pair, i + 1);
            }
        }
        let int8_test_accuracy = arena_accuracy(&mut arena, &d.splits.test).stage(st, name)?;
        let ours = arena.predict(&d.agreement).stage(st, name)?;
        let reference = nn::train::predict(&em.reference_model(&deployed.codebooks), &d.agreement)
            .stage(st, name)?;
        let agree = ours.iter().zip(&reference).filter(|(a, b)| a == b).count();
        let raw_stats = arena.load(&raw_flash, name).stage(st, name)?;
        models.push(RuntimeModelCheck {
            model: name.to_string(),
            arena_bytes: runtime::required_bytes(em).stage(st, name)?,
            weights_match,
            int8_test_accuracy,
            agreement: agree as f64 / ours.len().max(1) as f64,
            agreement_samples: ours.len(),
            bytes_read: stats.bytes_read,
            bytes_written: stats.bytes_written,
            raw_bytes_read: raw_stats.bytes_read,
        });
    }

    // Random swap/infer sequences.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5A));
    let mut within_capacity = true;
    let mut high_water = 0;
    for _ in 0..cfg.swap_sequences {
        let mut arena = Arena::new(cfg.arena_bytes);
        for _ in 0..cfg.swap_steps {
            let i = rng.random_range(0..deployed.models.len());
            let name = &deployed.models[i].name;
            arena.swap(&flash, name).stage(st, name.as_str())?;
            let test = &data[i].splits.test;
            let s = rng.random_range(0..test.len());
            let x = test.inputs.slice_outer(s, s + 1);
            arena.infer(x.data()).stage(st, name.as_str())?;
            within_capacity &=
                arena.high_water() <= arena.capacity() && arena.used() <= arena.capacity();
        }
        high_water = high_water.max(arena.high_water());
    }

    // Failure paths.
    let mut tiny = Arena::new(1);
    let capacity_error_clean = matches!(
        tiny.load(&flash, &deployed.models[0].name),
        Err(RuntimeError::Capacity { .. })
    ) && tiny.resident().is_none()
        && tiny.high_water() == 0;
    let needs: Vec<usize> = models.iter().map(|m| m.arena_bytes).collect();
    let (small, big) = (
        (0..needs.len()).min_by_key(|&i| needs[i]).unwrap(),
        (0..needs.len()).max_by_key(|&i| needs[i]).unwrap(),
    );
    let mut failed_swap_kept_previous = true;
    if needs[small] < needs[big] {
        let mut a = Arena::new(needs[small]);
        let small_name = &deployed.models[small].name;
        a.load(&flash, small_name).stage(st, small_name.as_str())?;
        let before = a.resident_weights(1);
        let failed = a.swap(&flash, &deployed.models[big].name).is_err();
        let x = data[small].splits.test.inputs.slice_outer(0, 1);
        failed_swap_kept_previous = failed
            && a.resident_name() == Some(small_name.as_str())
            && a.resident_weights(1) == before
            && a.infer(x.data()).is_ok();
    }
    let truncated_image_rejected = Flash::new(bytes[..bytes.len() - 1].to_vec()).is_err();

    Ok(RuntimeCheck {
        capacity: cfg.arena_bytes,
        flash_bytes: flash.len(),
        flash_capacity: cfg.flash_bytes,
        models,
        swap_sequences: cfg.swap_sequences,
        swap_steps: cfg.swap_steps,
        high_water,
        within_capacity,
        capacity_error_clean,
        failed_swap_kept_previous,
        truncated_image_rejected,
    })
}

/// Runs every trial.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<Vec<TrialArtifacts>, HarnessError> {
    cfg.validate().stage(Stage::Data, "config")?;
    trial_seeds(cfg)
        .into_iter()
        .enumerate()
        .map(|(t, s)| {
            log::info!("trial {t} (seed {s})");
            run_trial(cfg, t, s)
        })
        .collect()
}
