//! The `train`, `eval` and `analyze` subcommands as library calls.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use faultlab_core::experiment::{
    efficiency_curves, group_of, select_best_k_per_group, smallest_curves, sweep, Candidate, GroupKey, ResultRow,
    SummaryTable,
};
use faultlab_core::fault::DeviationKind;
use faultlab_core::rng::StreamKey;
use faultlab_core::{train, Dataset, Split, TrainedModel};
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::grid::GridConfig;
use crate::results::{read_results, sort_rows, to_csv};
use crate::zoo::{write_atomic, Zoo};

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::Config("--jobs must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn load(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let data = Dataset::load_mnist(dir, split)?;
    Ok(match limit {
        Some(n) => data.take(n),
        None => data,
    })
}

/// Training seed of replica `replica` under the run seed `seed`.
pub fn model_seed(seed: u64, replica: u64) -> u64 {
    StreamKey::root(seed).named("model").child(replica).seed()
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub grid: PathBuf,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub trained: Vec<String>,
    pub skipped_existing: Vec<String>,
    pub skipped_invalid: Vec<String>,
}

/// Train every grid model missing from the zoo. Models already present
/// with a valid checksum and identical settings are left alone.
pub fn train_grid(args: &TrainArgs) -> Result<TrainSummary> {
    let grid = GridConfig::load(&args.grid)?;
    let plan = grid.expand()?;
    let mut zoo = Zoo::open_or_create(&args.out)?;
    let data_dir = args.data_dir.display().to_string();

    let m = &zoo.manifest;
    if !m.models.is_empty() && (m.train_limit != grid.train_limit || m.test_limit != grid.test_limit) {
        return Err(CliError::Config(format!(
            "{} was built with train_limit {:?} and test_limit {:?}; use a fresh --out",
            args.out.display(),
            m.train_limit,
            m.test_limit
        )));
    }
    zoo.manifest.data_dir = Some(data_dir);
    zoo.manifest.train_limit = grid.train_limit;
    zoo.manifest.test_limit = grid.test_limit;

    let mut summary = TrainSummary {
        skipped_invalid: plan.skipped.clone(),
        ..Default::default()
    };
    let mut pending = Vec::new();
    for planned in &plan.models {
        let cfg = grid.train.with_seed(model_seed(args.seed, planned.replica));
        cfg.validate()?;
        match zoo.entry(&planned.model_id) {
            Some(entry) => {
                zoo.verified_blob(entry)?;
                if entry.train != cfg || entry.spec != planned.spec {
                    return Err(CliError::Config(format!(
                        "`{}` exists with different training settings; use a fresh --out",
                        planned.model_id
                    )));
                }
                summary.skipped_existing.push(planned.model_id.clone());
            }
            None => pending.push((planned.clone(), cfg)),
        }
    }
    for id in &plan.skipped {
        eprintln!("skipping {id}: kernels do not fit the feature map");
    }
    if pending.is_empty() {
        zoo.save()?;
        return Ok(summary);
    }

    let train_set = load(&args.data_dir, Split::Train, grid.train_limit)?;
    let test_set = load(&args.data_dir, Split::Test, grid.test_limit)?;
    let zoo = Mutex::new(zoo);
    with_jobs(args.jobs, || {
        pending.par_iter().try_for_each(|(planned, cfg)| -> Result<()> {
            let (model, report) = train::train(planned.spec, &train_set, Some(&test_set), cfg)?;
            let err = report.clean_test_error.expect("test set given");
            eprintln!("trained {} (clean test error {err})", planned.model_id);
            let mut zoo = zoo.lock().unwrap();
            zoo.insert(&planned.model_id, planned.replica, &model, *cfg, err)?;
            // Saved after every model so an interrupted run resumes.
            zoo.save()
        })
    })??;
    summary.trained = pending.into_iter().map(|(p, _)| p.model_id).collect();
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub zoo: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub kinds: Vec<DeviationKind>,
    pub p: Vec<f64>,
    pub realizations: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub range: (f64, f64),
    pub jobs: Option<usize>,
    pub test_limit: Option<usize>,
}

pub fn eval(args: &EvalArgs) -> Result<Vec<ResultRow>> {
    let zoo = Zoo::open(&args.zoo)?;
    if zoo.manifest.models.is_empty() {
        return Err(CliError::Config(format!("{} holds no models", args.zoo.display())));
    }
    let data_dir = match (&args.data_dir, &zoo.manifest.data_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(CliError::Config("no data directory given or recorded".into())),
    };
    let test = load(&data_dir, Split::Test, args.test_limit.or(zoo.manifest.test_limit))?;
    let models = zoo
        .manifest
        .models
        .iter()
        .map(|e| Ok((e.model_id.as_str(), zoo.load_model(e)?)))
        .collect::<Result<Vec<(&str, TrainedModel)>>>()?;
    let candidates: Vec<Candidate> = models.iter().map(|(id, model)| Candidate { id, model }).collect();

    let table = with_jobs(args.jobs, || {
        sweep(&candidates, &args.p, &args.kinds, args.realizations, args.seed, args.range, &test)
    })??;
    let mut rows: Vec<ResultRow> = table.records.iter().map(|r| r.summary()).collect();
    sort_rows(&mut rows);
    write_atomic(&args.out, &to_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Curves,
    Smallest,
    Efficiency,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "curves" => Ok(Mode::Curves),
            "smallest" => Ok(Mode::Smallest),
            "efficiency" => Ok(Mode::Efficiency),
            _ => Err(format!("unknown mode `{s}` (curves, smallest, efficiency)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub results: PathBuf,
    pub mode: Mode,
    pub targets: Vec<f64>,
    pub group_by: GroupKey,
    pub k: usize,
    pub out: PathBuf,
}

fn csv_bytes<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// Render the requested analysis of a results table as CSV bytes.
pub fn analyze_table(table: &SummaryTable, args: &AnalyzeArgs) -> Result<Vec<u8>> {
    if args.mode != Mode::Curves && args.targets.is_empty() {
        return Err(CliError::Config("--targets is required for this mode".into()));
    }
    Ok(match args.mode {
        Mode::Curves => {
            if args.k == 0 {
                return Err(CliError::Config("--k must be >= 1".into()));
            }
            let kept = select_best_k_per_group(table, args.group_by, args.k)?;
            let groups = group_of(&kept, args.group_by);
            let mut rows: Vec<(&String, &ResultRow)> = kept.rows().iter().map(|r| (&groups[&r.model_id], r)).collect();
            rows.sort_by(|a, b| {
                a.0.cmp(b.0)
                    .then(a.1.kind.cmp(&b.1.kind))
                    .then(a.1.p.total_cmp(&b.1.p))
                    .then(a.1.n_params.cmp(&b.1.n_params))
                    .then(a.1.model_id.cmp(&b.1.model_id))
            });
            csv_bytes(
                ["group", "model_id", "kind", "p", "mean_error", "ci95", "n_params"],
                rows.into_iter().map(|(g, r)| {
                    [
                        g.clone(),
                        r.model_id.clone(),
                        r.kind.to_string(),
                        r.p.to_string(),
                        r.mean_error.to_string(),
                        r.ci95.to_string(),
                        r.n_params.to_string(),
                    ]
                }),
            )
        }
        Mode::Smallest => csv_bytes(
            ["target", "kind", "p", "model_id", "n_params"],
            smallest_curves(table, &args.targets).into_iter().map(|r| {
                [
                    r.target.to_string(),
                    r.kind.to_string(),
                    r.p.to_string(),
                    r.model_id,
                    r.n_params.to_string(),
                ]
            }),
        ),
        Mode::Efficiency => {
            let rows = efficiency_curves(table, &args.targets).map_err(|e| match e {
                faultlab_core::Error::Precondition(m) => CliError::Infeasible(m),
                other => other.into(),
            })?;
            csv_bytes(
                ["target", "kind", "p", "efficiency"],
                rows.into_iter()
                    .map(|r| [r.target.to_string(), r.kind.to_string(), r.p.to_string(), r.efficiency.to_string()]),
            )
        }
    })
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let table = SummaryTable::new(read_results(&args.results)?)?;
    let bytes = analyze_table(&table, args)?;
    write_atomic(&args.out, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use faultlab_core::ModelSpec;

    fn row(id: &str, n: usize, kind: DeviationKind, p: f64, err: f64) -> ResultRow {
        ResultRow {
            model_id: id.into(),
            spec: ModelSpec::mlp(1, n).unwrap(),
            n_params: ModelSpec::mlp(1, n).unwrap().count_params(),
            kind,
            p,
            realizations: 5,
            mean_error: err,
            ci95: 0.0,
            seed: 0,
        }
    }

    fn table() -> SummaryTable {
        use DeviationKind::*;
        SummaryTable::new(vec![
            row("small", 5, None, 0.0, 0.08),
            row("small", 5, Erasure, 0.01, 0.2),
            row("big", 50, None, 0.0, 0.04),
            row("big", 50, Erasure, 0.01, 0.09),
        ])
        .unwrap()
    }

    fn args(mode: Mode, targets: Vec<f64>) -> AnalyzeArgs {
        AnalyzeArgs {
            results: PathBuf::new(),
            mode,
            targets,
            group_by: GroupKey::Layers,
            k: 1,
            out: PathBuf::new(),
        }
    }

    #[test]
    fn curves_keep_best_per_group() {
        let out = String::from_utf8(analyze_table(&table(), &args(Mode::Curves, vec![])).unwrap()).unwrap();
        assert_eq!(
            out,
            "group,model_id,kind,p,mean_error,ci95,n_params\n\
             MLP:1,big,none,0,0.04,0,39760\n\
             MLP:1,big,erasure,0.01,0.09,0,39760\n"
        );
    }

    #[test]
    fn smallest_and_efficiency() {
        let out = String::from_utf8(analyze_table(&table(), &args(Mode::Smallest, vec![0.1])).unwrap()).unwrap();
        assert_eq!(out, "target,kind,p,model_id,n_params\n0.1,erasure,0.01,big,39760\n");
        let out = String::from_utf8(analyze_table(&table(), &args(Mode::Efficiency, vec![0.1])).unwrap()).unwrap();
        assert_eq!(out, format!("target,kind,p,efficiency\n0.1,erasure,0.01,{}\n", 3985.0 / 39760.0));
    }

    #[test]
    fn infeasible_efficiency_target_is_an_error() {
        let err = analyze_table(&table(), &args(Mode::Efficiency, vec![0.01])).unwrap_err();
        assert!(matches!(err, CliError::Infeasible(_)), "{err}");
    }

    #[test]
    fn model_seeds_differ_by_replica_and_run() {
        assert_ne!(model_seed(0, 0), model_seed(0, 1));
        assert_ne!(model_seed(0, 0), model_seed(1, 0));
        assert_eq!(model_seed(5, 2), model_seed(5, 2));
    }
}
