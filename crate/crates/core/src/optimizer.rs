//! Recovering accuracy after encoding a model against frozen codebooks.
//!
//! The first and last compressible layers are finetuned right away. Then an
//! EM-style loop alternates code reassignment for every layer outside the
//! finetune set with a finetune of the set, stopping once the reconstructed
//! model is within `epsilon` of the original. Optionally, each round also
//! grows the set by the layer with the largest squared weight difference per
//! parameter.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::nn::{self, Freeze, ModelGraph, NnError, TrainConfig};
use crate::pq::{self, CodebookPair, LayerCodes, PqError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pq(#[from] PqError),
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("every compressible layer is already in the finetune set")]
    NoEligibleLayer,
    #[error("model {0} has no compressible layers")]
    NothingToCompress(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    /// Grow the finetune set by the worst-reconstructed layer per parameter.
    Ours,
    /// Keep the finetune set at the first and last layer.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    /// Tolerated absolute accuracy loss (fraction).
    pub epsilon: f64,
    /// Outer iterations; `None` means one per middle layer.
    pub max_outer_iters: Option<usize>,
    pub heuristic: Heuristic,
    /// Budget for every finetune call; the seed is re-derived per call.
    pub finetune: TrainConfig,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            max_outer_iters: None,
            heuristic: Heuristic::Ours,
            finetune: TrainConfig {
                epochs: 5,
                patience: Some(2),
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(OptimizeError::Config(format!(
                "epsilon {} outside (0, 1]",
                self.epsilon
            )));
        }
        if self.finetune.epochs == 0 || self.finetune.batch_size == 0 {
            return Err(OptimizeError::Config(
                "finetune epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }

    fn finetune_cfg(&self, call: u64) -> TrainConfig {
        TrainConfig {
            seed: self
                .seed
                .wrapping_mul(0x2545_F491_4F6C_DD1D)
                .wrapping_add(call),
            ..self.finetune.clone()
        }
    }
}

/// Layers whose weights are trained (and later stored outside the codebooks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneSet(BTreeSet<usize>);

impl FinetuneSet {
    pub fn new(first: usize, last: usize) -> Self {
        Self([first, last].into())
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.contains(&index)
    }

    pub fn insert(&mut self, index: usize) -> bool {
        self.0.insert(index)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn layers(&self) -> &BTreeSet<usize> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Converged,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Codes that changed during reassignment.
    pub reassigned: usize,
    pub finetuned: Vec<usize>,
    pub acc_orig: f64,
    pub acc_recon: f64,
    /// Squared weight difference per parameter for layers outside the set.
    pub scores: BTreeMap<usize, f64>,
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub model: String,
    pub acc_orig: f64,
    /// Reconstructed accuracy before and after the initial finetune.
    pub acc_encoded: f64,
    pub acc_initial: f64,
    pub iterations: Vec<IterationRecord>,
    pub status: Status,
    /// Iteration whose state was returned (0 = initial finetune).
    pub returned_iteration: usize,
    pub acc_final: f64,
    pub escapes: Vec<usize>,
}

impl OptimizeReport {
    /// One JSON object per line: a header, one line per iteration, a summary.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let head = serde_json::json!({
            "event": "start",
            "model": self.model,
            "acc_orig": self.acc_orig,
            "acc_encoded": self.acc_encoded,
            "acc_initial": self.acc_initial,
        });
        out.push_str(&head.to_string());
        out.push('\n');
        for it in &self.iterations {
            let mut v = serde_json::to_value(it).expect("plain data");
            v["event"] = "iteration".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let tail = serde_json::json!({
            "event": "done",
            "status": self.status,
            "returned_iteration": self.returned_iteration,
            "acc_final": self.acc_final,
            "escapes": self.escapes,
        });
        out.push_str(&tail.to_string());
        out.push('\n');
        out
    }
}

/// A model after optimization: weights as deployed (f32), codes for every
/// compressible layer outside `escapes`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub recon: ModelGraph,
    pub codes: LayerCodes,
    pub escapes: BTreeSet<usize>,
}

/// State after the initial finetune of the first and last layers.
#[derive(Debug, Clone)]
pub struct InitialState {
    pub recon: ModelGraph,
    pub codes: LayerCodes,
    pub acc_encoded: f64,
    pub acc_initial: f64,
}

fn finetune(
    recon: &mut ModelGraph,
    set: &FinetuneSet,
    train: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(), NnError> {
    recon.unfreeze_all();
    for idx in recon.compressible_layers() {
        if !set.contains(idx) {
            // Biases are never compressed, so they keep training.
            recon.freeze(idx, Freeze::WeightOnly);
        }
    }
    recon.bn_static = true;
    let res = nn::train(recon, train, cfg);
    recon.unfreeze_all();
    res.map(|_| ())
}

fn boundary(model: &ModelGraph) -> Result<FinetuneSet, OptimizeError> {
    let (first, last) = model
        .boundary_layers()
        .ok_or_else(|| OptimizeError::NothingToCompress(model.name.clone()))?;
    Ok(FinetuneSet::new(first, last))
}

/// Reconstructs the model from its codes and finetunes the first and last layers.
pub fn initial_finetune(
    model: &ModelGraph,
    pair: &CodebookPair,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &OptimizeConfig,
) -> Result<InitialState, OptimizeError> {
    cfg.validate()?;
    let set = boundary(model)?;
    let codes = pq::encode_model(model, pair)?;
    let mut recon = pq::reconstruct_model(&codes, pair, model, &BTreeSet::new())?;
    recon.bn_static = true;
    let acc_encoded = nn::evaluate(&recon, test)?;
    finetune(&mut recon, &set, train, &cfg.finetune_cfg(0))?;
    let acc_initial = nn::evaluate(&recon, test)?;
    Ok(InitialState {
        recon,
        codes,
        acc_encoded,
        acc_initial,
    })
}

/// `‖W − Ŵ‖² / N` for every compressible layer outside `set`.
pub fn layer_scores(
    orig: &ModelGraph,
    recon: &ModelGraph,
    set: &FinetuneSet,
) -> BTreeMap<usize, f64> {
    orig.compressible_layers()
        .into_iter()
        .filter(|&i| !set.contains(i))
        .map(|i| {
            let w = orig.weight(i).expect("compressible layers own weights");
            let w_hat = recon.weight(i).expect("same structure");
            (i, w.sq_diff(w_hat) / w.len() as f64)
        })
        .collect()
}

/// The layer outside `set` with the largest squared weight difference per
/// parameter; ties go to the lowest index.
pub fn select_layer_heuristic(
    orig: &ModelGraph,
    recon: &ModelGraph,
    set: &FinetuneSet,
) -> Result<usize, OptimizeError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in layer_scores(orig, recon, set) {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(OptimizeError::NoEligibleLayer)
}

struct Checkpoint {
    iteration: usize,
    acc: f64,
    recon: ModelGraph,
    codes: LayerCodes,
    set: FinetuneSet,
}

/// Runs the reassignment / finetune loop starting from `init`.
///
/// `acc_orig` is the original model's accuracy on `test`, computed once by the caller.
pub fn em_optimize(
    orig: &ModelGraph,
    init: InitialState,
    pair: &CodebookPair,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &OptimizeConfig,
    acc_orig: f64,
) -> Result<(CompressedModel, OptimizeReport), OptimizeError> {
    cfg.validate()?;
    let mut set = boundary(orig)?;
    let middle = orig.compressible_layers().len().saturating_sub(2);
    let max_iters = cfg.max_outer_iters.unwrap_or(middle);
    let within = |acc: f64| acc_orig - cfg.epsilon <= acc;

    let InitialState {
        mut recon,
        mut codes,
        acc_encoded,
        acc_initial,
    } = init;
    let mut best = Checkpoint {
        iteration: 0,
        acc: acc_initial,
        recon: recon.clone(),
        codes: codes.clone(),
        set: set.clone(),
    };
    let mut iterations = Vec::new();
    let mut status = if within(acc_initial) {
        Status::Converged
    } else {
        Status::Exhausted
    };

    let mut it = 0;
    while status == Status::Exhausted && it < max_iters {
        it += 1;
        // E-step: reassign codes of every layer outside the set.
        let (new_codes, _) = pq::encode_layers(&recon, pair, |i| !set.contains(i))?;
        let mut reassigned = 0;
        for (idx, cm) in new_codes {
            if let Some(old) = codes.get(&idx) {
                reassigned += old
                    .codes
                    .iter()
                    .zip(&cm.codes)
                    .filter(|(a, b)| a != b)
                    .count();
            }
            codes.insert(idx, cm);
        }
        codes.retain(|i, _| !set.contains(*i));

        // M-step: rebuild from codes, keep the set's weights, finetune.
        recon = pq::reconstruct_model(&codes, pair, &recon, set.layers())?;
        finetune(&mut recon, &set, train, &cfg.finetune_cfg(it as u64))?;
        let acc = nn::evaluate(&recon, test)?;
        let finetuned: Vec<usize> = set.layers().iter().copied().collect();
        if acc > best.acc {
            best = Checkpoint {
                iteration: it,
                acc,
                recon: recon.clone(),
                codes: codes.clone(),
                set: set.clone(),
            };
        }

        let scores = layer_scores(orig, &recon, &set);
        let mut selected = None;
        if within(acc) {
            status = Status::Converged;
            best = Checkpoint {
                iteration: it,
                acc,
                recon: recon.clone(),
                codes: codes.clone(),
                set: set.clone(),
            };
        } else if cfg.heuristic == Heuristic::Ours && !scores.is_empty() {
            let pick = select_layer_heuristic(orig, &recon, &set)?;
            set.insert(pick);
            selected = Some(pick);
        }
        iterations.push(IterationRecord {
            iteration: it,
            reassigned,
            finetuned,
            acc_orig,
            acc_recon: acc,
            scores,
            selected,
        });
    }

    let mut codes = best.codes;
    codes.retain(|i, _| !best.set.contains(*i));
    let report = OptimizeReport {
        model: orig.name.clone(),
        acc_orig,
        acc_encoded,
        acc_initial,
        iterations,
        status,
        returned_iteration: best.iteration,
        acc_final: best.acc,
        escapes: best.set.layers().iter().copied().collect(),
    };
    Ok((
        CompressedModel {
            recon: best.recon,
            codes,
            escapes: best.set.0,
        },
        report,
    ))
}

/// Initial finetune followed by the EM loop.
pub fn optimize(
    model: &ModelGraph,
    pair: &CodebookPair,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &OptimizeConfig,
) -> Result<(CompressedModel, OptimizeReport), OptimizeError> {
    let acc_orig = nn::evaluate(model, test)?;
    let init = initial_finetune(model, pair, train, test, cfg)?;
    em_optimize(model, init, pair, train, test, cfg, acc_orig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelBuilder, TrainConfig};
    use crate::pool::{pool_weights, GroupConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, classes: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.6).unwrap();
        let mut x = Vec::with_capacity(n * 4);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            let a = c as f32 * std::f32::consts::TAU / classes as f32;
            for v in [a.cos(), a.sin(), (2.0 * a).cos(), (2.0 * a).sin()] {
                x.push(1.5 * v + noise.sample(&mut rng));
            }
            y.push(c);
        }
        LabeledDataset::new(Tensor::new(vec![n, 4], x).unwrap(), y, classes).unwrap()
    }

    fn mlp(seed: u64) -> ModelGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelBuilder::new("mlp", vec![4])
            .fc(32)
            .relu()
            .fc(32)
            .relu()
            .fc(32)
            .relu()
            .fc(32)
            .relu()
            .fc(5)
            .build(&mut rng)
            .unwrap()
    }

    fn trained() -> (ModelGraph, LabeledDataset, LabeledDataset) {
        let train = blobs(600, 5, 1);
        let test = blobs(200, 5, 2);
        let mut m = mlp(3);
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        nn::train(&mut m, &train, &cfg).unwrap();
        m.bn_static = true;
        (m, train, test)
    }

    fn pair_for(m: &ModelGraph, k: usize) -> CodebookPair {
        let (g3, g1) = pool_weights(&[m], &GroupConfig::default()).unwrap();
        let g3 = if g3.num_rows() == 0 {
            crate::pq::GroupCodebook::empty(g3.group)
        } else {
            crate::pq::learn_group_codebook(&g3, k, 1).unwrap().0
        };
        let g1 = crate::pq::learn_group_codebook(&g1, k, 1).unwrap().0;
        CodebookPair::new(g3, g1)
    }

    #[test]
    fn score_example_prefers_small_damaged_layer() {
        // Layer A: diff² = 4 over 100 params; layer B: diff² = 2 over 10 params.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig = ModelBuilder::new("t", vec![10])
            .fc(10)
            .fc(1)
            .fc(10)
            .fc(2)
            .build(&mut rng)
            .unwrap();
        let mut recon = orig.clone();
        // Layer 1 (100 params): add 0.2 to every weight → diff² = 4.
        recon
            .params
            .get_mut(&1)
            .unwrap()
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w += 0.2);
        // Layer 2 (10 params): add sqrt(0.2) to every weight → diff² = 2.
        let d = 0.2f32.sqrt();
        recon
            .params
            .get_mut(&2)
            .unwrap()
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w += d);
        let set = FinetuneSet::new(3, 4);
        let scores = layer_scores(&orig, &recon, &set);
        assert!((scores[&1] - 0.04).abs() < 1e-6);
        assert!((scores[&2] - 0.2).abs() < 1e-6);
        assert_eq!(select_layer_heuristic(&orig, &recon, &set).unwrap(), 2);
    }

    #[test]
    fn identical_models_tie_to_lowest_index() {
        let m = mlp(1);
        let set = FinetuneSet::new(1, 9);
        assert_eq!(select_layer_heuristic(&m, &m, &set).unwrap(), 3);
        let mut full = set.clone();
        for i in m.compressible_layers() {
            full.insert(i);
        }
        assert_eq!(
            select_layer_heuristic(&m, &m, &full),
            Err(OptimizeError::NoEligibleLayer)
        );
    }

    #[test]
    fn scores_match_straight_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let orig = ModelBuilder::new("r", vec![2, 6, 6])
            .conv3x3(4, 1, 1)
            .conv3x3(6, 1, 1)
            .conv1x1(5)
            .conv3x3(3, 2, 1)
            .flatten()
            .fc(7)
            .fc(3)
            .build(&mut rng)
            .unwrap();
        let mut recon = orig.clone();
        for p in recon.params.values_mut() {
            for w in p.weight.data_mut() {
                *w += rng.random_range(-0.3..0.3);
            }
        }
        let set = FinetuneSet::new(1, 7);
        let mut oracle = Vec::new();
        for layer in &orig.layers {
            if !layer.kind.is_compressible() || set.contains(layer.index) {
                continue;
            }
            let a = &orig.params[&layer.index].weight;
            let b = &recon.params[&layer.index].weight;
            let mut sum = 0.0f64;
            for i in 0..a.len() {
                let d = a.data()[i] as f64 - b.data()[i] as f64;
                sum += d * d;
            }
            oracle.push((layer.index, sum / a.len() as f64));
        }
        let scores = layer_scores(&orig, &recon, &set);
        assert_eq!(scores.len(), oracle.len());
        for (i, s) in &oracle {
            assert_eq!(scores[i], *s);
        }
        let want = oracle
            .iter()
            .fold(oracle[0], |b, &x| if x.1 > b.1 { x } else { b })
            .0;
        assert_eq!(select_layer_heuristic(&orig, &recon, &set).unwrap(), want);
    }

    #[test]
    fn middle_layers_are_frozen_during_initial_finetune() {
        let (m, train, test) = trained();
        let pair = pair_for(&m, 32);
        let codes = pq::encode_model(&m, &pair).unwrap();
        let before = pq::reconstruct_model(&codes, &pair, &m, &BTreeSet::new()).unwrap();
        let hash = pair.fingerprint();
        let init = initial_finetune(&m, &pair, &train, &test, &OptimizeConfig::default()).unwrap();
        for i in [3, 5, 7] {
            assert!(
                init.recon
                    .weight(i)
                    .unwrap()
                    .bit_eq(before.weight(i).unwrap()),
                "layer {i}"
            );
        }
        assert!(!init
            .recon
            .weight(1)
            .unwrap()
            .bit_eq(before.weight(1).unwrap()));
        assert!(init.acc_initial >= init.acc_encoded);
        assert_eq!(pair.fingerprint(), hash);
    }

    #[test]
    fn epsilon_one_exits_after_initial_finetune() {
        let (m, train, test) = trained();
        let pair = pair_for(&m, 16);
        let cfg = OptimizeConfig {
            epsilon: 1.0,
            ..OptimizeConfig::default()
        };
        let init = initial_finetune(&m, &pair, &train, &test, &cfg).unwrap();
        let codes = init.codes.clone();
        let (out, report) = em_optimize(&m, init, &pair, &train, &test, &cfg, 1.0).unwrap();
        assert!(report.iterations.is_empty());
        assert_eq!(report.status, Status::Converged);
        assert_eq!(out.escapes, [1, 9].into());
        let mut kept = codes;
        kept.retain(|i, _| ![1, 9].contains(i));
        assert_eq!(out.codes, kept);
    }

    #[test]
    fn exact_codeword_model_converges_immediately() {
        let (m, train, test) = trained();
        let pair = pair_for(&m, 32);
        let codes = pq::encode_model(&m, &pair).unwrap();
        let exact = pq::reconstruct_model(&codes, &pair, &m, &BTreeSet::new()).unwrap();
        let (_, report) =
            optimize(&exact, &pair, &train, &test, &OptimizeConfig::default()).unwrap();
        assert_eq!(report.acc_encoded, report.acc_orig);
        assert!(report.iterations.is_empty());
        assert_eq!(report.status, Status::Converged);
    }

    /// Replaces a layer's codes by the worst-fitting codeword of each sub-vector.
    fn damage(codes: &mut LayerCodes, pair: &CodebookPair, m: &ModelGraph, layer: usize) {
        let (clean, _) = pq::encode_layers(m, pair, |i| i == layer).unwrap();
        let book = pair.group(clean[&layer].group);
        let w = m.weight(layer).unwrap().data();
        let d = book.group().d;
        let dsub = book.group().dsub();
        let cm = codes.get_mut(&layer).unwrap();
        for r in 0..cm.rows() {
            for (s, sub) in book.subs().iter().enumerate() {
                let start = r * d + s * dsub;
                let mut x = vec![0.0f32; dsub];
                for (j, v) in x.iter_mut().enumerate() {
                    *v = w.get(start + j).copied().unwrap_or(0.0);
                }
                let far = (0..sub.k())
                    .max_by(|&a, &b| {
                        crate::pq::kmeans::sq_dist(&x, sub.codeword(a))
                            .total_cmp(&crate::pq::kmeans::sq_dist(&x, sub.codeword(b)))
                    })
                    .unwrap();
                cm.codes[r * cm.m + s] = far as u16;
            }
        }
    }

    #[test]
    fn heuristic_finds_injected_damage() {
        let (m, train, test) = trained();
        let pair = pair_for(&m, 32);
        let acc_orig = nn::evaluate(&m, &test).unwrap();
        let run = |heuristic| {
            let cfg = OptimizeConfig {
                epsilon: 1e-9,
                heuristic,
                seed: 4,
                ..OptimizeConfig::default()
            };
            let mut init = initial_finetune(&m, &pair, &train, &test, &cfg).unwrap();
            damage(&mut init.codes, &pair, &m, 5);
            init.recon =
                pq::reconstruct_model(&init.codes, &pair, &init.recon, &[1, 9].into()).unwrap();
            init.acc_initial = nn::evaluate(&init.recon, &test).unwrap();
            em_optimize(&m, init, &pair, &train, &test, &cfg, acc_orig).unwrap()
        };
        let (ours, r_ours) = run(Heuristic::Ours);
        assert_eq!(r_ours.iterations[0].selected, Some(5));
        let scores = &r_ours.iterations[0].scores;
        assert!(scores.iter().all(|(&i, &s)| i == 5 || s < scores[&5]));
        let (none, r_none) = run(Heuristic::None);
        assert!(r_none
            .iterations
            .iter()
            .all(|it| it.finetuned == vec![1, 9]));
        assert!(
            r_ours.acc_final >= r_none.acc_final,
            "{} < {}",
            r_ours.acc_final,
            r_none.acc_final
        );
        assert!(ours.escapes.contains(&5));
        assert_eq!(none.escapes, [1, 9].into());
        // Layers outside the set keep their codes through reassignment.
        assert!(r_none.iterations.iter().all(|it| it.reassigned == 0));
    }

    #[test]
    fn zero_outer_iterations_only_initial() {
        let (m, train, test) = trained();
        let pair = pair_for(&m, 16);
        let cfg = OptimizeConfig {
            epsilon: 1e-9,
            max_outer_iters: Some(0),
            ..OptimizeConfig::default()
        };
        let (out, report) = optimize(&m, &pair, &train, &test, &cfg).unwrap();
        assert!(report.iterations.is_empty());
        assert_eq!(out.escapes, [1, 9].into());
        let lines = report.to_json_lines();
        assert_eq!(lines.lines().count(), 2);
        for l in lines.lines() {
            serde_json::from_str::<serde_json::Value>(l).unwrap();
        }
    }
}
