//! Training loop and experiment suite runner.
//!
//! One training run follows the configured schedule: seeded shuffling, plain
//! SGD on the combined objective with only the configured terms, learning
//! rate drops at fixed epochs, early stopping on held-out 10-fold
//! verification accuracy, and restoration of the best-validation parameters
//! at exit. The suite runner trains one model per group-mode assignment
//! from the same seed and initial encoder state, shares one evaluation pair
//! set across rows, and caches duplicate assignments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Tape};
use crate::data::{self, SyntheticDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, GroupLossInput, LossWeights};
use crate::model::{EncoderConfig, HeadMode, MultiTaskModel};
use crate::rng;

/// Per-group training role for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupMode {
    Predict,
    Suppress,
    Off,
}

/// Group name → mode. Groups absent from the map are off. One mode per
/// group, so the predict and suppress sets cannot overlap.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupModeAssignment {
    modes: BTreeMap<String, GroupMode>,
}

impl GroupModeAssignment {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn from_map(modes: BTreeMap<String, GroupMode>) -> Self {
        GroupModeAssignment { modes }
    }

    pub fn mode_of(&self, group: &str) -> GroupMode {
        self.modes.get(group).copied().unwrap_or(GroupMode::Off)
    }

    pub fn is_baseline(&self) -> bool {
        self.modes.values().all(|m| *m == GroupMode::Off)
    }

    /// Parse the compact notation: `FR`, or `+` followed by predict letters,
    /// then optionally `-` followed by suppress letters. Letters name the
    /// five canonical groups; a letter on both sides violates disjointness.
    pub fn from_mode_string(s: &str) -> Result<Self> {
        let normalized: String = s.trim().chars().map(|c| if c == '−' { '-' } else { c }).collect();
        if normalized.eq_ignore_ascii_case("fr") {
            return Ok(Self::baseline());
        }
        let mut modes = BTreeMap::new();
        let mut current: Option<GroupMode> = None;
        for c in normalized.chars() {
            match c {
                '+' => current = Some(GroupMode::Predict),
                '-' => current = Some(GroupMode::Suppress),
                letter => {
                    let mode = current.ok_or_else(|| {
                        Error::config("modes", format!("`{s}`: expected `+` or `-` before `{letter}`"))
                    })?;
                    let group = data::group_for_letter(letter.to_ascii_uppercase()).ok_or_else(
                        || Error::config("modes", format!("`{s}`: unknown group letter `{letter}`")),
                    )?;
                    if let Some(prev) = modes.insert(group.to_string(), mode) {
                        let what = if prev == mode { "listed twice" } else { "both predicted and suppressed" };
                        return Err(Error::config(
                            "modes",
                            format!("`{s}`: group `{group}` {what}"),
                        ));
                    }
                }
            }
        }
        if modes.is_empty() {
            return Err(Error::config("modes", format!("`{s}`: no groups named")));
        }
        Ok(GroupModeAssignment { modes })
    }

    /// Canonical notation for this assignment given the dataset's group
    /// order; `FR` for the baseline.
    pub fn mode_string(&self, group_order: &[String]) -> String {
        let letter = |g: &str| data::group_letter(g).unwrap_or('?');
        let predict: String = group_order
            .iter()
            .filter(|g| self.mode_of(g) == GroupMode::Predict)
            .map(|g| letter(g))
            .collect();
        let suppress: String = group_order
            .iter()
            .filter(|g| self.mode_of(g) == GroupMode::Suppress)
            .map(|g| letter(g))
            .collect();
        match (predict.is_empty(), suppress.is_empty()) {
            (true, true) => "FR".to_string(),
            (false, true) => format!("+{predict}"),
            (true, false) => format!("-{suppress}"),
            (false, false) => format!("+{predict}-{suppress}"),
        }
    }

    pub fn validate_against(&self, dataset: &SyntheticDataset) -> Result<()> {
        let groups: Vec<String> = dataset
            .config
            .group_sizes()
            .into_iter()
            .map(|(g, _)| g)
            .collect();
        for name in self.modes.keys() {
            if !groups.contains(name) {
                return Err(Error::config(
                    "modes",
                    format!("group `{name}` is not present in the dataset"),
                ));
            }
        }
        Ok(())
    }
}

/// Mode assignment as written in configs: either the compact notation
/// (`"+PMN-A"`, `"FR"`) or an explicit group → mode map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModeSpec {
    Notation(String),
    Map(BTreeMap<String, GroupMode>),
}

impl Default for ModeSpec {
    fn default() -> Self {
        ModeSpec::Notation("FR".to_string())
    }
}

impl ModeSpec {
    pub fn resolve(&self) -> Result<GroupModeAssignment> {
        match self {
            ModeSpec::Notation(s) => GroupModeAssignment::from_mode_string(s),
            ModeSpec::Map(map) => Ok(GroupModeAssignment::from_map(map.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub early_stop_patience: usize,
    pub weights: LossWeights,
    pub modes: ModeSpec,
    pub encoder: EncoderConfig,
    /// Held-out pair count for the validation metric.
    pub val_pairs: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 512,
            lr: 0.01,
            lr_drop_epochs: vec![20, 35],
            lr_drop_factor: 0.1,
            early_stop_patience: 20,
            weights: LossWeights::default(),
            modes: ModeSpec::default(),
            encoder: EncoderConfig::default(),
            val_pairs: 2000,
            precision: Precision::Double,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be nonnegative"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return Err(Error::config("lr_drop_factor", "must lie in (0, 1)"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("early_stop_patience", "must be positive"));
        }
        if self.val_pairs == 0 || !self.val_pairs.is_multiple_of(2) {
            return Err(Error::config("val_pairs", "must be even and positive"));
        }
        self.weights.validate()?;
        self.encoder.validate()?;
        self.modes.resolve()?;
        Ok(())
    }
}

/// Learning rate at `epoch`: base rate times the drop factor once per drop
/// epoch that has been reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let drops = config
        .lr_drop_epochs
        .iter()
        .filter(|&&d| d <= epoch)
        .count();
    config.lr * config.lr_drop_factor.powi(drops as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_id: f64,
    pub l_attr: Option<f64>,
    pub l_adv: Option<f64>,
    pub total: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub early_stopped: bool,
}

impl History {
    /// CSV with columns for the active loss terms only; floats round-trip.
    pub fn to_csv(&self) -> String {
        let has_attr = self.epochs.iter().any(|e| e.l_attr.is_some());
        let has_adv = self.epochs.iter().any(|e| e.l_adv.is_some());
        let mut out = String::from("epoch,l_id");
        if has_attr {
            out.push_str(",l_attr");
        }
        if has_adv {
            out.push_str(",l_adv");
        }
        out.push_str(",total,val_metric,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{}", e.epoch, e.l_id));
            if has_attr {
                out.push_str(&format!(",{}", e.l_attr.unwrap_or(f64::NAN)));
            }
            if has_adv {
                out.push_str(&format!(",{}", e.l_adv.unwrap_or(f64::NAN)));
            }
            out.push_str(&format!(",{},{},{}\n", e.total, e.val_metric, e.lr));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MultiTaskModel,
    pub history: History,
}

/// Build the model an assignment calls for: heads only for non-off groups,
/// identity count from the training split, encoder seeded by the run seed.
pub fn build_model(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<MultiTaskModel> {
    let assignment = config.modes.resolve()?;
    assignment.validate_against(dataset)?;
    let mut encoder = config.encoder.clone();
    encoder.seed = config.seed;
    if encoder.input_dim != dataset.config.input_dim {
        return Err(Error::config(
            "encoder.input_dim",
            format!(
                "{} does not match dataset input_dim {}",
                encoder.input_dim, dataset.config.input_dim
            ),
        ));
    }
    let mut heads = Vec::new();
    for (group, size) in dataset.config.group_sizes() {
        match assignment.mode_of(&group) {
            GroupMode::Predict => heads.push((group, size, HeadMode::Predict)),
            GroupMode::Suppress => heads.push((group, size, HeadMode::Suppress)),
            GroupMode::Off => {}
        }
    }
    MultiTaskModel::new(encoder, dataset.config.num_train_identities(), &heads)
}

struct ActiveGroup {
    name: String,
    attr_indices: Vec<usize>,
    mode: HeadMode,
}

/// Train `model` on the dataset's training split under `config`. Returns the
/// model restored to its best-validation parameters plus the epoch history.
pub fn train(
    mut model: MultiTaskModel,
    dataset: &SyntheticDataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let assignment = config.modes.resolve()?;
    assignment.validate_against(dataset)?;

    // Head bindings must mirror the dataset's group structure exactly.
    let group_slices = dataset.config.group_slices();
    let mut active: Vec<ActiveGroup> = Vec::new();
    for (group, indices) in &group_slices {
        let mode = match assignment.mode_of(group) {
            GroupMode::Predict => HeadMode::Predict,
            GroupMode::Suppress => HeadMode::Suppress,
            GroupMode::Off => continue,
        };
        let head = model
            .attribute_heads
            .iter()
            .find(|h| h.group_name == *group)
            .ok_or_else(|| {
                Error::config("modes", format!("model has no head for group `{group}`"))
            })?;
        if head.group_size() != indices.len() {
            return Err(Error::config(
                "modes",
                format!(
                    "head for `{group}` has {} outputs, dataset group has {}",
                    head.group_size(),
                    indices.len()
                ),
            ));
        }
        if head.mode != mode {
            return Err(Error::config(
                "modes",
                format!("head for `{group}` is wired {:?}, assignment says {mode:?}", head.mode),
            ));
        }
        active.push(ActiveGroup {
            name: group.clone(),
            attr_indices: indices.clone(),
            mode,
        });
    }

    let train_idx = dataset.train_indices();
    if train_idx.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let val_pairs =
        data::make_verification_pairs(dataset, config.val_pairs, rng::derive(config.seed, "val-pairs"))?;

    let input_dim = dataset.config.input_dim;
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val: f64::NEG_INFINITY,
        early_stopped: false,
    };
    let mut best_params: Vec<Vec<f64>> = model.params().iter().map(|p| p.values.clone()).collect();
    let mut epochs_since_best = 0usize;

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut order = train_idx.clone();
        let mut shuffle_rng = rng::substream(config.seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut sum_id = 0.0;
        let mut sum_attr = 0.0;
        let mut sum_adv = 0.0;
        let mut sum_total = 0.0;
        let mut seen = 0usize;
        let has_predict = active.iter().any(|g| g.mode == HeadMode::Predict);
        let has_suppress = active.iter().any(|g| g.mode == HeadMode::Suppress);

        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let bs = chunk.len();
            let mut tape = Tape::with_precision(config.precision);
            let binding = model.bind(&mut tape)?;

            let mut flat = Vec::with_capacity(bs * input_dim);
            let mut labels = Vec::with_capacity(bs);
            for &i in chunk {
                flat.extend_from_slice(&dataset.samples[i].features);
                labels.push(dataset.samples[i].identity);
            }
            let x = tape.constant(flat, vec![bs, input_dim])?;
            let z = model.encode(&mut tape, &binding, x)?;
            let id_logits = model.identity_logits(&mut tape, &binding, z)?;
            let l_id = losses::cosface_loss(
                &mut tape,
                id_logits,
                &labels,
                config.weights.margin_m,
                config.weights.scale_r,
            )?;

            // (logits, targets, mask) per active group, split by wiring.
            let mut group_data: Vec<(usize, crate::autodiff::TensorId, Vec<f64>, Vec<bool>)> =
                Vec::with_capacity(active.len());
            for (gi, group) in active.iter().enumerate() {
                let logits = model.attribute_logits(&mut tape, &binding, z, &group.name)?;
                let mut targets = Vec::with_capacity(bs * group.attr_indices.len());
                for &i in chunk {
                    for &a in &group.attr_indices {
                        targets.push(f64::from(dataset.samples[i].attributes[a]));
                    }
                }
                let mask = vec![true; targets.len()];
                group_data.push((gi, logits, targets, mask));
            }
            fn collect<'a>(
                mode: HeadMode,
                active: &'a [ActiveGroup],
                data: &'a [(usize, crate::autodiff::TensorId, Vec<f64>, Vec<bool>)],
            ) -> Vec<GroupLossInput<'a>> {
                data.iter()
                    .filter(|(gi, ..)| active[*gi].mode == mode)
                    .map(|(gi, logits, targets, mask)| GroupLossInput {
                        group: &active[*gi].name,
                        logits: *logits,
                        targets,
                        mask,
                    })
                    .collect()
            }
            let l_attr = if has_predict {
                let inputs = collect(HeadMode::Predict, &active, &group_data);
                Some(losses::attribute_prediction_loss(&mut tape, &inputs)?)
            } else {
                None
            };
            let l_adv = if has_suppress {
                let inputs = collect(HeadMode::Suppress, &active, &group_data);
                Some(losses::adversarial_suppression_loss(&mut tape, &inputs)?)
            } else {
                None
            };
            let total = losses::total_loss(&mut tape, l_id, l_attr, l_adv, &config.weights)?;

            let id_v = tape.values(l_id)[0];
            let attr_v = l_attr.map(|t| tape.values(t)[0]);
            let adv_v = l_adv.map(|t| tape.values(t)[0]);
            let total_v = tape.values(total)[0];
            if !total_v.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_no,
                    l_id: id_v,
                    l_attr: attr_v,
                    l_adv: adv_v,
                });
            }

            tape.backward(total)?;
            model.sgd_step(&tape, &binding, lr);
            if model
                .params()
                .iter()
                .any(|p| !p.values.iter().all(|v| v.is_finite()))
            {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_no,
                    l_id: id_v,
                    l_attr: attr_v,
                    l_adv: adv_v,
                });
            }

            let w = bs as f64;
            sum_id += id_v * w;
            sum_attr += attr_v.unwrap_or(0.0) * w;
            sum_adv += adv_v.unwrap_or(0.0) * w;
            sum_total += total_v * w;
            seen += bs;
        }

        let scores = eval::embed_and_score(&model, dataset, &val_pairs)?;
        let val_metric = eval::verification_accuracy_10fold(&scores, &val_pairs)?.mean;

        let n = seen as f64;
        history.epochs.push(EpochStats {
            epoch,
            l_id: sum_id / n,
            l_attr: has_predict.then_some(sum_attr / n),
            l_adv: has_suppress.then_some(sum_adv / n),
            total: sum_total / n,
            val_metric,
            lr,
        });

        if val_metric > history.best_val {
            history.best_val = val_metric;
            history.best_epoch = epoch;
            best_params = model.params().iter().map(|p| p.values.clone()).collect();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.early_stop_patience {
                history.early_stopped = true;
                break;
            }
        }
    }

    for (param, best) in model.params_mut().into_iter().zip(best_params) {
        param.values = best;
    }
    Ok(TrainedModel { model, history })
}

/// One row of a suite run. Carries the trained model so downstream
/// analyses (probes, embedding extraction) reuse it without retraining.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub mode: String,
    pub fold_report: eval::FoldReport,
    pub best_epoch: usize,
    pub epochs_ran: usize,
    pub history: History,
    pub model: MultiTaskModel,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub rows: Vec<SuiteRow>,
}

impl SuiteResult {
    /// Verification table in report order, accuracy as a percentage.
    pub fn to_table(&self) -> eval::Table {
        let mut table = eval::Table::new(
            "verification accuracy by training mode",
            vec!["verif_pct".to_string(), "best_epoch".to_string(), "epochs".to_string()],
        );
        for row in &self.rows {
            table.push(
                row.mode.clone(),
                vec![
                    row.fold_report.mean * 100.0,
                    row.best_epoch as f64,
                    row.epochs_ran as f64,
                ],
            );
        }
        table.sort_rows_for_report();
        table
    }
}

/// Train one model per assignment from the same seed and initial encoder
/// state, evaluate all of them on one shared pair set, and emit a table
/// keyed by mode notation. Duplicate assignments reuse the cached result.
pub fn run_experiment_suite(
    dataset: &SyntheticDataset,
    suite: &[ModeSpec],
    base_config: &TrainConfig,
    jobs: usize,
) -> Result<SuiteResult> {
    if suite.is_empty() {
        return Err(Error::config("suite", "must list at least one mode"));
    }
    base_config.validate()?;
    let group_order: Vec<String> = dataset
        .config
        .group_sizes()
        .into_iter()
        .map(|(g, _)| g)
        .collect();

    let mut keys = Vec::with_capacity(suite.len());
    let mut unique: Vec<(String, GroupModeAssignment)> = Vec::new();
    for spec in suite {
        let assignment = spec.resolve()?;
        assignment.validate_against(dataset)?;
        let key = assignment.mode_string(&group_order);
        if !unique.iter().any(|(k, _)| *k == key) {
            unique.push((key.clone(), assignment));
        }
        keys.push(key);
    }

    let eval_pairs = data::make_verification_pairs(
        dataset,
        base_config.val_pairs,
        rng::derive(base_config.seed, "suite-eval-pairs"),
    )?;

    let run_one = |key: &str, assignment: &GroupModeAssignment| -> Result<SuiteRow> {
        let mut config = base_config.clone();
        config.modes = ModeSpec::Map(
            group_order
                .iter()
                .map(|g| (g.clone(), assignment.mode_of(g)))
                .collect(),
        );
        let model = build_model(dataset, &config)?;
        let trained = train(model, dataset, &config)?;
        let scores = eval::embed_and_score(&trained.model, dataset, &eval_pairs)?;
        let fold_report = eval::verification_accuracy_10fold(&scores, &eval_pairs)?;
        Ok(SuiteRow {
            mode: key.to_string(),
            fold_report,
            best_epoch: trained.history.best_epoch,
            epochs_ran: trained.history.epochs.len(),
            history: trained.history,
            model: trained.model,
        })
    };

    let workers = jobs.max(1).min(unique.len());
    let results: Vec<Result<SuiteRow>> = if workers <= 1 {
        unique.iter().map(|(k, a)| run_one(k, a)).collect()
    } else {
        let queue = std::sync::Mutex::new((0..unique.len()).collect::<Vec<_>>());
        let slots: Vec<std::sync::Mutex<Option<Result<SuiteRow>>>> =
            (0..unique.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let next = queue.lock().expect("queue lock").pop();
                    let Some(i) = next else { break };
                    let (key, assignment) = &unique[i];
                    let row = run_one(key, assignment);
                    *slots[i].lock().expect("slot lock") = Some(row);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot").expect("worker finished"))
            .collect()
    };

    let mut by_key: BTreeMap<String, SuiteRow> = BTreeMap::new();
    for ((key, _), row) in unique.iter().zip(results) {
        by_key.insert(key.clone(), row?);
    }
    let rows = keys
        .iter()
        .map(|k| by_key.get(k).expect("cached row").clone())
        .collect();
    Ok(SuiteResult { rows })
}
