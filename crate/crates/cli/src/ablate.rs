//! Graph-construction and association-level sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use evgraph::datagen::{generate_synthetic, Dataset, Informativeness};
use evgraph::graph::GraphKind;
use evgraph::metrics::{accuracy, auc, binary_f1, summarize, Summary};
use evgraph::train::Split;

use crate::io::{optional, write_csv};
use crate::{load_data, predict_probs, predicted_classes, train_model, uncertainty_report, CliError, CliResult, RunConfig};

pub const RUNS_FILE: &str = "ablation_runs.csv";
pub const SUMMARY_FILE: &str = "ablation_summary.csv";
pub const CONFIDENCE: f64 = 0.95;

/// Metrics of one trained model, all on test subjects unless noted.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub graph: GraphKind,
    /// `None` for file data.
    pub informativeness: Option<Informativeness>,
    pub seed: u64,
    pub fold: Option<usize>,
    /// Deterministic single-pass accuracy.
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    /// Accuracy of the Monte-Carlo mean prediction.
    pub mced_accuracy: f64,
    /// Mean predictive entropy over test subjects.
    pub uncertainty: f64,
    /// Mean predictive entropy over all subjects.
    pub uncertainty_all: f64,
    pub entropy_min: f64,
    pub entropy_max: f64,
    pub classes: usize,
}

/// Aggregate of all runs sharing a graph kind and association level.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub graph: GraphKind,
    pub informativeness: Option<Informativeness>,
    pub accuracy: Summary,
    pub auc: Option<Summary>,
    pub f1: Option<Summary>,
    pub mced_accuracy: Summary,
    pub uncertainty: Summary,
    pub uncertainty_all: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub runs: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
}

impl Ablation {
    pub fn cell(&self, graph: GraphKind, informativeness: Option<Informativeness>) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.graph == graph && c.informativeness == informativeness)
    }

    pub fn runs_of(&self, graph: GraphKind, informativeness: Option<Informativeness>) -> Vec<&RunResult> {
        self.runs
            .iter()
            .filter(|r| r.graph == graph && r.informativeness == informativeness)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Job {
    informativeness: Option<Informativeness>,
    graph: GraphKind,
    seed: u64,
    fold: Option<usize>,
}

/// Reassigns labeled subjects to `folds` stratified folds shuffled by
/// `seed`: fold `fold` becomes test, the next one validation, the rest
/// training. Unlabeled subjects are untouched.
pub fn fold_splits(dataset: &Dataset, folds: usize, fold: usize, seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = dataset.splits.clone();
    for class in 0..dataset.n_classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == Some(class) && dataset.splits[i] != Split::Unlabeled)
            .collect();
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            let f = pos % folds;
            splits[i] = if f == fold {
                Split::Test
            } else if f == (fold + 1) % folds {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    splits
}

fn jobs(config: &RunConfig) -> Vec<Job> {
    let levels: Vec<Option<Informativeness>> = if config.data.is_some() {
        vec![None]
    } else {
        config.ablate.informativeness.iter().copied().map(Some).collect()
    };
    let folds: Vec<Option<usize>> = match config.ablate.folds {
        Some(k) => (0..k).map(Some).collect(),
        None => vec![None],
    };
    let mut out = Vec::new();
    for &informativeness in &levels {
        for &graph in &config.ablate.graphs {
            for &seed in &config.ablate.seeds {
                for &fold in &folds {
                    out.push(Job {
                        informativeness,
                        graph,
                        seed,
                        fold,
                    });
                }
            }
        }
    }
    out
}

fn run_job(config: &RunConfig, file_data: Option<&Dataset>, job: Job) -> CliResult<RunResult> {
    let mut run = config.clone();
    run.graph = job.graph;
    run.train.seed = job.seed;
    run.baseline.seed = job.seed;
    let mut dataset = match (file_data, job.informativeness) {
        (Some(d), _) => d.clone(),
        (None, level) => {
            run.synthetic.seed = job.seed;
            if let Some(level) = level {
                run.synthetic.informativeness = level;
            }
            generate_synthetic(&run.synthetic)?
        }
    };
    if let (Some(k), Some(fold)) = (config.ablate.folds, job.fold) {
        dataset.splits = fold_splits(&dataset, k, fold, job.seed);
    }
    let mask = dataset.label_mask()?;
    let test = mask.indices(Split::Test);
    if test.is_empty() {
        return Err(CliError::config("ablation needs labeled test subjects"));
    }
    let labels = mask.dense_labels(0);

    let checkpoint = train_model(&run, &dataset)?.checkpoint;
    let probs = predict_probs(&checkpoint, &dataset)?;
    let predicted = predicted_classes(&probs);
    let report = uncertainty_report(&checkpoint, &dataset, run.train.t_mc, job.seed)?;
    let (entropy_min, entropy_max) = report
        .entropy
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &h| (lo.min(h), hi.max(h)));
    Ok(RunResult {
        graph: job.graph,
        informativeness: job.informativeness,
        seed: job.seed,
        fold: job.fold,
        accuracy: accuracy(&predicted, &labels, &test)?,
        auc: auc(&probs, &labels, &test),
        f1: if dataset.n_classes == 2 {
            binary_f1(&predicted, &labels, &test)
        } else {
            None
        },
        mced_accuracy: accuracy(&report.predictions(), &labels, &test)?,
        uncertainty: report.mean_entropy(&test).unwrap_or(f64::NAN),
        uncertainty_all: report.mean_entropy_all(),
        entropy_min,
        entropy_max,
        classes: dataset.n_classes,
    })
}

fn summary_of(values: impl Iterator<Item = f64>) -> Summary {
    let v: Vec<f64> = values.collect();
    summarize(&v, CONFIDENCE).expect("cells are never empty")
}

/// Optional metrics are summarized only when every run produced them.
fn optional_summary(values: impl Iterator<Item = Option<f64>>) -> Option<Summary> {
    let v: Option<Vec<f64>> = values.collect();
    v.and_then(|v| summarize(&v, CONFIDENCE))
}

fn summarize_cells(runs: &[RunResult]) -> Vec<CellSummary> {
    let mut keys: Vec<(Option<Informativeness>, GraphKind)> = Vec::new();
    for r in runs {
        if !keys.contains(&(r.informativeness, r.graph)) {
            keys.push((r.informativeness, r.graph));
        }
    }
    keys.into_iter()
        .map(|(informativeness, graph)| {
            let cell: Vec<&RunResult> = runs
                .iter()
                .filter(|r| r.graph == graph && r.informativeness == informativeness)
                .collect();
            CellSummary {
                graph,
                informativeness,
                accuracy: summary_of(cell.iter().map(|r| r.accuracy)),
                auc: optional_summary(cell.iter().map(|r| r.auc)),
                f1: optional_summary(cell.iter().map(|r| r.f1)),
                mced_accuracy: summary_of(cell.iter().map(|r| r.mced_accuracy)),
                uncertainty: summary_of(cell.iter().map(|r| r.uncertainty)),
                uncertainty_all: summary_of(cell.iter().map(|r| r.uncertainty_all)),
            }
        })
        .collect()
}

/// Trains and evaluates every grid cell for every seed (and fold). Runs
/// execute concurrently; results keep grid order.
pub fn run_ablation(config: &RunConfig) -> CliResult<Ablation> {
    let file_data = match config.data {
        Some(_) => Some(load_data(config)?),
        None => None,
    };
    let runs: Vec<RunResult> = jobs(config)
        .into_par_iter()
        .map(|job| run_job(config, file_data.as_ref(), job))
        .collect::<CliResult<_>>()?;
    let cells = summarize_cells(&runs);
    Ok(Ablation { runs, cells })
}

fn level_name(level: Option<Informativeness>) -> &'static str {
    level.map_or("file", Informativeness::as_str)
}

fn mean_ci(s: Option<Summary>) -> [String; 2] {
    match s {
        Some(s) => [s.mean.to_string(), s.half_width.to_string()],
        None => [String::new(), String::new()],
    }
}

pub fn write_ablation(ablation: &Ablation, out: &Path) -> CliResult<()> {
    let header: Vec<String> = [
        "graph",
        "informativeness",
        "seed",
        "fold",
        "accuracy",
        "auc",
        "f1",
        "mced_accuracy",
        "uncertainty",
        "uncertainty_all",
    ]
    .map(String::from)
    .to_vec();
    let rows = ablation.runs.iter().map(|r| {
        vec![
            r.graph.as_str().to_string(),
            level_name(r.informativeness).to_string(),
            r.seed.to_string(),
            r.fold.map(|f| f.to_string()).unwrap_or_default(),
            r.accuracy.to_string(),
            optional(r.auc),
            optional(r.f1),
            r.mced_accuracy.to_string(),
            r.uncertainty.to_string(),
            r.uncertainty_all.to_string(),
        ]
    });
    write_csv(&out.join(RUNS_FILE), &header, rows)?;

    let mut header = vec!["graph".to_string(), "informativeness".to_string(), "runs".to_string()];
    for metric in ["accuracy", "auc", "f1", "mced_accuracy", "uncertainty", "uncertainty_all"] {
        header.push(format!("{metric}_mean"));
        header.push(format!("{metric}_ci95"));
    }
    let rows = ablation.cells.iter().map(|c| {
        let mut row = vec![
            c.graph.as_str().to_string(),
            level_name(c.informativeness).to_string(),
            c.accuracy.n.to_string(),
        ];
        for s in [
            Some(c.accuracy),
            c.auc,
            c.f1,
            Some(c.mced_accuracy),
            Some(c.uncertainty),
            Some(c.uncertainty_all),
        ] {
            row.extend(mean_ci(s));
        }
        row
    });
    write_csv(&out.join(SUMMARY_FILE), &header, rows)
}

fn pct(s: Option<Summary>) -> String {
    s.map_or("-".into(), |s| format!("{:5.1} ± {:4.1}", 100.0 * s.mean, 100.0 * s.half_width))
}

/// Human-readable table of the cell summaries.
pub fn render_table(ablation: &Ablation) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<9} {:<8} {:>4}  {:>13}  {:>13}  {:>13}  {:>13}  {:>15}",
        "graph", "metadata", "runs", "accuracy %", "AUC %", "F1 %", "MCED acc %", "uncertainty"
    );
    for c in &ablation.cells {
        let _ = writeln!(
            out,
            "{:<9} {:<8} {:>4}  {:>13}  {:>13}  {:>13}  {:>13}  {:>15}",
            c.graph.as_str(),
            level_name(c.informativeness),
            c.accuracy.n,
            pct(Some(c.accuracy)),
            pct(c.auc),
            pct(c.f1),
            pct(Some(c.mced_accuracy)),
            format!("{:.3} ± {:.3}", c.uncertainty.mean, c.uncertainty.half_width),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        let mut c = RunConfig::default();
        c.synthetic.n_subjects = 40;
        c.synthetic.feature_dim = 6;
        c.train.epochs = 4;
        c.train.layers = 1;
        c.train.hidden_width = 4;
        c.train.latent_dim = 6;
        c.train.predictor_hidden = 8;
        c.train.t_mc = 4;
        c.ablate.seeds = vec![0, 1];
        c
    }

    #[test]
    fn grid_of_three_graphs_gives_three_cells() {
        let a = run_ablation(&quick()).unwrap();
        assert_eq!(a.runs.len(), 6);
        assert_eq!(a.cells.len(), 3);
        let graphs: Vec<GraphKind> = a.cells.iter().map(|c| c.graph).collect();
        assert_eq!(graphs, [GraphKind::Random, GraphKind::Affinity, GraphKind::Adaptive]);
        assert!(a.cells.iter().all(|c| c.accuracy.n == 2 && c.f1.is_some() && c.auc.is_some()));
        for r in &a.runs {
            assert!(r.entropy_min >= 0.0 && r.entropy_max <= 2f64.ln());
        }
    }

    #[test]
    fn informativeness_levels_multiply_the_grid() {
        let mut c = quick();
        c.ablate.graphs = vec![GraphKind::Adaptive];
        c.ablate.informativeness = Informativeness::ALL.to_vec();
        let a = run_ablation(&c).unwrap();
        let levels: Vec<_> = a.cells.iter().map(|c| c.informativeness).collect();
        assert_eq!(levels, Informativeness::ALL.map(Some));
    }

    #[test]
    fn folds_partition_labeled_subjects() {
        let d = generate_synthetic(&Default::default()).unwrap();
        let k = 5;
        let mut test_count = vec![0; d.len()];
        for f in 0..k {
            let s = fold_splits(&d, k, f, 3);
            for (i, split) in s.iter().enumerate() {
                if *split == Split::Test {
                    test_count[i] += 1;
                }
            }
            let n_test = s.iter().filter(|&&x| x == Split::Test).count();
            assert!((38..=42).contains(&n_test), "{n_test}");
        }
        assert!(test_count.iter().all(|&c| c == 1));
    }

    #[test]
    fn folded_ablation_runs_every_fold() {
        let mut c = quick();
        c.ablate.graphs = vec![GraphKind::Random];
        c.ablate.seeds = vec![0];
        c.ablate.folds = Some(3);
        let a = run_ablation(&c).unwrap();
        let folds: Vec<_> = a.runs.iter().map(|r| r.fold).collect();
        assert_eq!(folds, [Some(0), Some(1), Some(2)]);
    }
}
