//! Monte-Carlo faulty evaluation and the robustness analyses built on it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fault::{DeviationConfig, DeviationKind};
use crate::nn::{classify_slice, FaultInjector, NoFaults, TrainedModel};
use crate::rng::LayerStreams;
use crate::spec::{Architecture, ModelSpec};

/// Misclassification rate of reliable inference over `data`.
pub fn clean_error(model: &TrainedModel, data: &Dataset) -> Result<f64> {
    check_data(model, data)?;
    let wrong = (0..data.len())
        .into_par_iter()
        .filter(|&i| classify_slice(model, data.image(i), &mut NoFaults) != usize::from(data.labels[i]))
        .count();
    Ok(wrong as f64 / data.len() as f64)
}

fn check_data(model: &TrainedModel, data: &Dataset) -> Result<()> {
    let features: usize = data.sample_shape().iter().product();
    if features != model.spec().input().len() {
        return Err(Error::shape(model.spec().input().len(), data.sample_shape()));
    }
    if data.is_empty() {
        return Err(Error::Domain("empty evaluation set".into()));
    }
    Ok(())
}

/// 1.96 · sample standard deviation / sqrt(R); zero for a single realization.
pub fn ci95(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub spec: ModelSpec,
    pub n_params: usize,
    pub dev: DeviationConfig,
    pub realizations: usize,
    pub per_realization_error: Vec<f64>,
    pub mean_error: f64,
    pub seed: u64,
}

impl EvalRecord {
    pub fn ci95(&self) -> f64 {
        ci95(&self.per_realization_error)
    }

    pub fn summary(&self) -> ResultRow {
        ResultRow {
            model_id: self.model_id.clone(),
            spec: self.spec,
            n_params: self.n_params,
            kind: self.dev.kind(),
            p: self.dev.p(),
            realizations: self.realizations,
            mean_error: self.mean_error,
            ci95: self.ci95(),
            seed: self.seed,
        }
    }
}

/// Error rate of `model` under `dev`, averaged over `realizations`
/// independent deviation draws across the whole of `test`.
///
/// Realization `r` of input `i` uses the substream (seed, model_id, r, i),
/// with one stream per network stage below that.
pub fn evaluate_error_rate(
    model: &TrainedModel,
    model_id: &str,
    test: &Dataset,
    dev: &DeviationConfig,
    realizations: usize,
    seed: u64,
) -> Result<EvalRecord> {
    if realizations < 1 {
        return Err(Error::Domain("at least one realization is required".into()));
    }
    check_data(model, test)?;
    let per_realization_error = if dev.is_active() {
        (0..realizations)
            .map(|r| {
                let wrong = (0..test.len())
                    .into_par_iter()
                    .filter(|&i| {
                        let streams = LayerStreams::new(seed, model_id, r as u64, i as u64);
                        let mut injector = FaultInjector { dev, streams: &streams };
                        classify_slice(model, test.image(i), &mut injector) != usize::from(test.labels[i])
                    })
                    .count();
                wrong as f64 / test.len() as f64
            })
            .collect()
    } else {
        vec![clean_error(model, test)?; realizations]
    };
    let mean_error = per_realization_error.iter().sum::<f64>() / realizations as f64;
    Ok(EvalRecord {
        model_id: model_id.to_string(),
        spec: *model.spec(),
        n_params: model.n_params(),
        dev: *dev,
        realizations,
        per_realization_error,
        mean_error,
        seed,
    })
}

/// A model under evaluation together with its identifier.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub model: &'a TrainedModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub records: Vec<EvalRecord>,
    pub p_values: Vec<f64>,
    pub kinds: Vec<DeviationKind>,
}

impl ResultsTable {
    pub fn summary(&self) -> Result<SummaryTable> {
        SummaryTable::new(self.records.iter().map(EvalRecord::summary).collect())
    }
}

fn sort_key(a: &ResultRow, b: &ResultRow) -> std::cmp::Ordering {
    a.model_id
        .cmp(&b.model_id)
        .then(a.kind.cmp(&b.kind))
        .then(a.p.total_cmp(&b.p))
}

/// Every (model, kind, p) combination. `none` yields one record per model at
/// p = 0. The result is ordered by key and does not depend on the order of
/// `models` or on the thread count.
pub fn sweep(
    models: &[Candidate],
    p_values: &[f64],
    kinds: &[DeviationKind],
    realizations: usize,
    seed: u64,
    range: (f64, f64),
    test: &Dataset,
) -> Result<ResultsTable> {
    if models.is_empty() || p_values.is_empty() || kinds.is_empty() {
        return Err(Error::Domain("sweep needs models, p values and kinds".into()));
    }
    let mut ps = p_values.to_vec();
    ps.sort_by(f64::total_cmp);
    ps.dedup();
    let mut ks = kinds.to_vec();
    ks.sort();
    ks.dedup();

    let mut ids = HashSet::new();
    for m in models {
        if !ids.insert(m.id) {
            return Err(Error::Precondition(format!("duplicate model id `{}`", m.id)));
        }
    }

    let mut jobs = Vec::new();
    for m in models {
        for &kind in &ks {
            if kind == DeviationKind::None {
                jobs.push((m, DeviationConfig::none().with_range(range.0, range.1)?));
                continue;
            }
            for &p in &ps {
                jobs.push((m, DeviationConfig::new(kind, p)?.with_range(range.0, range.1)?));
            }
        }
    }
    let mut records = jobs
        .par_iter()
        .map(|(m, dev)| evaluate_error_rate(m.model, m.id, test, dev, realizations, seed))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| sort_key(&a.summary(), &b.summary()));
    Ok(ResultsTable {
        records,
        p_values: ps,
        kinds: ks,
    })
}

/// Flattened evaluation outcome; what the results CSV carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model_id: String,
    pub spec: ModelSpec,
    pub n_params: usize,
    pub kind: DeviationKind,
    pub p: f64,
    pub realizations: usize,
    pub mean_error: f64,
    pub ci95: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn is_clean(&self) -> bool {
        self.kind == DeviationKind::None || self.p == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    rows: Vec<ResultRow>,
}

impl SummaryTable {
    /// Rejects duplicate (model_id, kind, p) keys.
    pub fn new(mut rows: Vec<ResultRow>) -> Result<Self> {
        rows.sort_by(sort_key);
        for pair in rows.windows(2) {
            if sort_key(&pair[0], &pair[1]).is_eq() {
                return Err(Error::Precondition(format!(
                    "duplicate result key ({}, {}, {})",
                    pair[1].model_id, pair[1].kind, pair[1].p
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn model_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.rows.iter().map(|r| r.model_id.as_str()).collect();
        ids.dedup();
        ids
    }

    /// Clean error and size of every model that has a clean record.
    pub fn clean_errors(&self) -> BTreeMap<&str, (f64, usize)> {
        let mut out = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.is_clean()) {
            out.entry(r.model_id.as_str()).or_insert((r.mean_error, r.n_params));
        }
        out
    }

    /// Distinct p values recorded for `kind`, ascending.
    pub fn p_values(&self, kind: DeviationKind) -> Vec<f64> {
        let mut ps: Vec<f64> = self.rows.iter().filter(|r| r.kind == kind).map(|r| r.p).collect();
        ps.sort_by(f64::total_cmp);
        ps.dedup();
        ps
    }

    pub fn kinds(&self) -> Vec<DeviationKind> {
        let mut ks: Vec<DeviationKind> = self.rows.iter().map(|r| r.kind).collect();
        ks.sort();
        ks.dedup();
        ks
    }
}

/// Hyperparameter used to group models for best-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Family,
    Layers,
    Neurons,
    Kernel,
    PoolSize,
    FeatureMaps,
    Pooling,
}

impl GroupKey {
    pub fn value(self, spec: &ModelSpec) -> String {
        let family = if spec.is_cnn() { "CNN" } else { "MLP" };
        let field = match (self, spec.arch()) {
            (GroupKey::Family, _) => return family.into(),
            (GroupKey::Layers, _) => Some(spec.depth().to_string()),
            (GroupKey::Neurons, Architecture::Mlp { neurons, .. }) => Some(neurons.to_string()),
            (GroupKey::Kernel, Architecture::Cnn { kernel, .. }) => Some(kernel.to_string()),
            (GroupKey::PoolSize, Architecture::Cnn { pool_size, .. }) => Some(pool_size.to_string()),
            (GroupKey::FeatureMaps, Architecture::Cnn { feature_maps, .. }) => Some(feature_maps.to_string()),
            (GroupKey::Pooling, Architecture::Cnn { pooling, .. }) => Some(pooling.to_string()),
            _ => None,
        };
        // Families are never mixed within a group.
        format!("{family}:{}", field.unwrap_or_default())
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "family" => GroupKey::Family,
            "L" => GroupKey::Layers,
            "N" => GroupKey::Neurons,
            "C" => GroupKey::Kernel,
            "P" => GroupKey::PoolSize,
            "F" => GroupKey::FeatureMaps,
            "pool" => GroupKey::Pooling,
            other => return Err(Error::Domain(format!("unknown group key `{other}`"))),
        })
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKey::Family => "family",
            GroupKey::Layers => "L",
            GroupKey::Neurons => "N",
            GroupKey::Kernel => "C",
            GroupKey::PoolSize => "P",
            GroupKey::FeatureMaps => "F",
            GroupKey::Pooling => "pool",
        })
    }
}

/// Keep, within each group, the `k` models with the lowest clean error
/// (ties: fewer parameters, then model id). Returns all rows of kept models.
pub fn select_best_k_per_group(table: &SummaryTable, key: GroupKey, k: usize) -> Result<SummaryTable> {
    let clean = table.clean_errors();
    let mut groups: BTreeMap<String, Vec<(&str, f64, usize)>> = BTreeMap::new();
    for id in table.model_ids() {
        let &(err, n) = clean
            .get(id)
            .ok_or_else(|| Error::Precondition(format!("model `{id}` has no clean (p = 0) record")))?;
        let spec = &table.rows.iter().find(|r| r.model_id == id).unwrap().spec;
        groups.entry(key.value(spec)).or_default().push((id, err, n));
    }
    let mut kept = HashSet::new();
    for members in groups.values_mut() {
        members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)).then(a.0.cmp(b.0)));
        kept.extend(members.iter().take(k).map(|m| m.0.to_string()));
    }
    SummaryTable::new(
        table
            .rows
            .iter()
            .filter(|r| kept.contains(&r.model_id))
            .cloned()
            .collect(),
    )
}

/// Group label of each model, for the curves output.
pub fn group_of(table: &SummaryTable, key: GroupKey) -> BTreeMap<String, String> {
    table
        .rows
        .iter()
        .map(|r| (r.model_id.clone(), key.value(&r.spec)))
        .collect()
}

fn smallest_by<'a>(candidates: impl Iterator<Item = &'a ResultRow>) -> Option<&'a ResultRow> {
    candidates.min_by(|a, b| {
        a.n_params
            .cmp(&b.n_params)
            .then(a.mean_error.total_cmp(&b.mean_error))
            .then(a.model_id.cmp(&b.model_id))
    })
}

/// Smallest model whose mean error at (p, kind) meets `target`; ties go to
/// the lower error, then the lower id.
pub fn smallest_model_for_target(table: &SummaryTable, target: f64, p: f64, kind: DeviationKind) -> Option<&ResultRow> {
    smallest_by(
        table
            .rows
            .iter()
            .filter(|r| r.kind == kind && (kind == DeviationKind::None || r.p == p) && r.mean_error <= target),
    )
}

/// n(M_o) / n(M): M_o is the smallest model meeting `target` under reliable
/// computation, M the smallest meeting it at (p, kind) among models that
/// also meet it clean. `Ok(None)` when no such M exists.
pub fn fault_tolerance_efficiency(table: &SummaryTable, target: f64, p: f64, kind: DeviationKind) -> Result<Option<f64>> {
    let clean = table.clean_errors();
    let feasible_clean = |id: &str| clean.get(id).is_some_and(|&(e, _)| e <= target);
    let reference = clean
        .iter()
        .filter(|(_, &(e, _))| e <= target)
        .min_by(|a, b| a.1 .1.cmp(&b.1 .1).then(a.1 .0.total_cmp(&b.1 .0)).then(a.0.cmp(b.0)))
        .map(|(_, &(_, n))| n)
        .ok_or_else(|| {
            Error::Precondition(format!("no model reaches error target {target} without deviations"))
        })?;

    let chosen = if p == 0.0 || kind == DeviationKind::None {
        Some(reference)
    } else {
        smallest_by(
            table
                .rows
                .iter()
                .filter(|r| r.kind == kind && r.p == p && r.mean_error <= target && feasible_clean(&r.model_id)),
        )
        .map(|r| r.n_params)
    };
    Ok(chosen.map(|n| reference as f64 / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallestRow {
    pub target: f64,
    pub kind: DeviationKind,
    pub p: f64,
    pub model_id: String,
    pub n_params: usize,
}

/// Smallest-model rows for every target, non-`none` kind and recorded p;
/// infeasible (target, p) pairs are omitted.
pub fn smallest_curves(table: &SummaryTable, targets: &[f64]) -> Vec<SmallestRow> {
    let mut out = Vec::new();
    for &target in targets {
        for kind in table.kinds().into_iter().filter(|&k| k != DeviationKind::None) {
            for p in table.p_values(kind) {
                if let Some(r) = smallest_model_for_target(table, target, p, kind) {
                    out.push(SmallestRow {
                        target,
                        kind,
                        p,
                        model_id: r.model_id.clone(),
                        n_params: r.n_params,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyRow {
    pub target: f64,
    pub kind: DeviationKind,
    pub p: f64,
    pub efficiency: f64,
}

/// Efficiency curves; fails if any target is not reachable clean.
pub fn efficiency_curves(table: &SummaryTable, targets: &[f64]) -> Result<Vec<EfficiencyRow>> {
    let mut out = Vec::new();
    for &target in targets {
        for kind in table.kinds().into_iter().filter(|&k| k != DeviationKind::None) {
            for p in table.p_values(kind) {
                if let Some(efficiency) = fault_tolerance_efficiency(table, target, p, kind)? {
                    out.push(EfficiencyRow {
                        target,
                        kind,
                        p,
                        efficiency,
                    });
                }
            }
        }
    }
    Ok(out)
}
