//! Population datasets: CSV ingestion, a parameterized synthetic
//! generator, and the fixed (non-learned) baseline graphs.
//!
//! On disk a dataset is three CSV files keyed by `subject_id`:
//!
//! * `features.csv`: `subject_id` followed by numeric imaging features.
//! * `metadata.csv`: `subject_id` followed by typed columns whose headers
//!   read `name:continuous` or `name:categorical`. Categorical columns are
//!   one-hot expanded into `name=value` columns, values in sorted order.
//! * `labels.csv`: `subject_id,class,split` with an optional class and a
//!   split among `train`, `val`, `test`, `unlabeled`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphKind, PopulationGraph};
use crate::numcore::Matrix;
use crate::pae::{normalize_metadata, NormStats};
use crate::train::{LabelMask, Split};

pub const FEATURES_FILE: &str = "features.csv";
pub const METADATA_FILE: &str = "metadata.csv";
pub const LABELS_FILE: &str = "labels.csv";

/// Origin of one expanded metadata column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetadataColumn {
    Continuous { name: String },
    /// One indicator column of a categorical variable.
    Categorical { name: String, value: String },
}

impl MetadataColumn {
    pub fn name(&self) -> &str {
        match self {
            MetadataColumn::Continuous { name } | MetadataColumn::Categorical { name, .. } => name,
        }
    }

    /// Header of the expanded column, e.g. `age` or `sex=F`.
    pub fn expanded_name(&self) -> String {
        match self {
            MetadataColumn::Continuous { name } => name.clone(),
            MetadataColumn::Categorical { name, value } => format!("{name}={value}"),
        }
    }
}

/// Subjects with imaging features, encoded metadata and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub feature_names: Vec<String>,
    /// `N × C`
    pub features: Matrix,
    pub metadata_columns: Vec<MetadataColumn>,
    /// `N × M` after one-hot expansion.
    pub metadata: Matrix,
    pub labels: Vec<Option<usize>>,
    pub splits: Vec<Split>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn label_mask(&self) -> Result<LabelMask> {
        LabelMask::new(self.labels.clone(), self.splits.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.features.rows() != n || self.metadata.rows() != n {
            return Err(Error::Config(format!(
                "{n} subjects but {} feature rows and {} metadata rows",
                self.features.rows(),
                self.metadata.rows()
            )));
        }
        if self.labels.len() != n || self.splits.len() != n {
            return Err(Error::Config(format!(
                "{n} subjects but {} labels and {} splits",
                self.labels.len(),
                self.splits.len()
            )));
        }
        if self.feature_names.len() != self.features.cols()
            || self.metadata_columns.len() != self.metadata.cols()
        {
            return Err(Error::Config("column names do not match matrix widths".into()));
        }
        if let Some((i, c)) = self
            .labels
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.filter(|&c| c >= self.n_classes).map(|c| (i, c)))
        {
            return Err(Error::Config(format!(
                "subject {} has class {c} but only {} classes exist",
                self.ids[i], self.n_classes
            )));
        }
        Ok(())
    }
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    /// `(line, subject_id, remaining fields)`
    rows: Vec<(u64, String, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        parse_error(path, line, e.to_string())
    };
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("subject_id") {
        return Err(parse_error(path, 1, "first column must be subject_id"));
    }
    let mut rows = Vec::new();
    let mut seen = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_error(path, line, "empty subject_id"));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(parse_error(
                path,
                line,
                format!("duplicate subject_id {id:?} (first seen on line {first})"),
            ));
        }
        rows.push((line, id, record.iter().skip(1).map(String::from).collect()));
    }
    Ok(Table {
        path: path.to_path_buf(),
        header: header[1..].to_vec(),
        rows,
    })
}

fn parse_number(path: &Path, line: u64, column: &str, field: &str) -> Result<f64> {
    if field.is_empty() {
        return Err(parse_error(path, line, format!("missing value in column {column}")));
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_error(
            path,
            line,
            format!("non-numeric value {field:?} in column {column}"),
        )),
    }
}

/// Row of `table` for each row of `reference`, erroring on unknown or
/// absent ids.
fn align<'t>(table: &'t Table, reference: &Table) -> Result<Vec<&'t (u64, String, Vec<String>)>> {
    let order = &reference.rows;
    let index: HashMap<&str, usize> = order.iter().enumerate().map(|(i, r)| (r.1.as_str(), i)).collect();
    let mut slots: Vec<Option<&(u64, String, Vec<String>)>> = vec![None; order.len()];
    for row in &table.rows {
        match index.get(row.1.as_str()) {
            Some(&i) => slots[i] = Some(row),
            None => {
                return Err(parse_error(
                    &table.path,
                    row.0,
                    format!("unknown subject_id {:?} (not in {})", row.1, reference.path.display()),
                ))
            }
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| {
                parse_error(
                    &reference.path,
                    order[i].0,
                    format!("subject_id {:?} is missing from {}", order[i].1, table.path.display()),
                )
            })
        })
        .collect()
}

enum ColumnType {
    Continuous,
    Categorical,
}

/// Joins the three CSV files on `subject_id`; subjects keep the order of
/// the features file.
pub fn load_dataset(features_path: &Path, metadata_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ft = read_table(features_path)?;
    if ft.header.is_empty() {
        return Err(parse_error(features_path, 1, "no feature columns"));
    }
    if ft.rows.is_empty() {
        return Err(parse_error(features_path, 1, "no subjects"));
    }
    let ids: Vec<String> = ft.rows.iter().map(|r| r.1.clone()).collect();
    let mut features = Matrix::zeros(ids.len(), ft.header.len());
    for (i, (line, _, fields)) in ft.rows.iter().enumerate() {
        for (j, field) in fields.iter().enumerate() {
            features.set(i, j, parse_number(features_path, *line, &ft.header[j], field)?);
        }
    }

    let mt = read_table(metadata_path)?;
    let mut types = Vec::with_capacity(mt.header.len());
    let mut names = Vec::with_capacity(mt.header.len());
    for h in &mt.header {
        let (name, kind) = h.rsplit_once(':').ok_or_else(|| {
            parse_error(metadata_path, 1, format!("column {h:?} lacks a :continuous or :categorical type"))
        })?;
        let kind = match kind {
            "continuous" => ColumnType::Continuous,
            "categorical" => ColumnType::Categorical,
            other => {
                return Err(parse_error(
                    metadata_path,
                    1,
                    format!("column {name:?} has unknown type {other:?}"),
                ))
            }
        };
        names.push(name.to_string());
        types.push(kind);
    }
    let meta_rows = align(&mt, &ft)?;
    let mut columns = Vec::new();
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    for (j, kind) in types.iter().enumerate() {
        match kind {
            ColumnType::Continuous => {
                let values = meta_rows
                    .iter()
                    .map(|(line, _, f)| parse_number(metadata_path, *line, &names[j], &f[j]))
                    .collect::<Result<Vec<_>>>()?;
                columns.push(MetadataColumn::Continuous { name: names[j].clone() });
                blocks.push(values);
            }
            ColumnType::Categorical => {
                if let Some((line, _, _)) = meta_rows.iter().find(|(_, _, f)| f[j].is_empty()) {
                    return Err(parse_error(
                        metadata_path,
                        *line,
                        format!("missing value in column {}", names[j]),
                    ));
                }
                let levels: BTreeSet<&str> = meta_rows.iter().map(|(_, _, f)| f[j].as_str()).collect();
                for level in levels {
                    columns.push(MetadataColumn::Categorical {
                        name: names[j].clone(),
                        value: level.to_string(),
                    });
                    blocks.push(
                        meta_rows
                            .iter()
                            .map(|(_, _, f)| if f[j] == level { 1.0 } else { 0.0 })
                            .collect(),
                    );
                }
            }
        }
    }
    let metadata = Matrix::from_fn(ids.len(), blocks.len(), |i, j| blocks[j][i]);

    let lt = read_table(labels_path)?;
    if lt.header != ["class", "split"] {
        return Err(parse_error(labels_path, 1, "header must be subject_id,class,split"));
    }
    let label_rows = align(&lt, &ft)?;
    let mut labels = Vec::with_capacity(ids.len());
    let mut splits = Vec::with_capacity(ids.len());
    for (line, _, f) in label_rows {
        let class = if f[0].is_empty() {
            None
        } else {
            Some(f[0].parse::<usize>().map_err(|_| {
                parse_error(labels_path, *line, format!("class {:?} is not a non-negative integer", f[0]))
            })?)
        };
        let split = f[1]
            .parse::<Split>()
            .map_err(|e| parse_error(labels_path, *line, e.to_string()))?;
        if split == Split::Train && class.is_none() {
            return Err(parse_error(labels_path, *line, "training subject without a class"));
        }
        labels.push(class);
        splits.push(split);
    }
    let n_classes = labels.iter().flatten().max().map_or(2, |&m| (m + 1).max(2));

    let dataset = Dataset {
        ids,
        feature_names: ft.header.clone(),
        features,
        metadata_columns: columns,
        metadata,
        labels,
        splits,
        n_classes,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Loads `features.csv`, `metadata.csv` and `labels.csv` from `dir`.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join(FEATURES_FILE), &dir.join(METADATA_FILE), &dir.join(LABELS_FILE))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Config(format!("writing {}: {e}", path.display()))
}

/// Writes the three dataset files into `dir`, inverting the one-hot
/// expansion of categorical columns.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(FEATURES_FILE);
    let mut w = csv_writer(&path)?;
    let err = write_err(&path);
    let mut header = vec!["subject_id".to_string()];
    header.extend(dataset.feature_names.iter().cloned());
    w.write_record(&header).map_err(&err)?;
    for (i, id) in dataset.ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(dataset.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    // Group expanded columns back into source variables, in first-seen order.
    let mut variables: Vec<(String, bool, Vec<usize>)> = Vec::new();
    for (j, col) in dataset.metadata_columns.iter().enumerate() {
        let categorical = matches!(col, MetadataColumn::Categorical { .. });
        match variables.iter_mut().find(|(n, c, _)| n == col.name() && *c && categorical) {
            Some(v) => v.2.push(j),
            None => variables.push((col.name().to_string(), categorical, vec![j])),
        }
    }
    let path = dir.join(METADATA_FILE);
    let mut w = csv_writer(&path)?;
    let err = write_err(&path);
    let mut header = vec!["subject_id".to_string()];
    for (name, categorical, _) in &variables {
        header.push(format!("{name}:{}", if *categorical { "categorical" } else { "continuous" }));
    }
    w.write_record(&header).map_err(&err)?;
    for (i, id) in dataset.ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        for (name, categorical, cols) in &variables {
            if *categorical {
                let hot = cols.iter().find(|&&j| dataset.metadata.get(i, j) == 1.0).ok_or_else(|| {
                    Error::Config(format!("subject {id} has no level set for {name}"))
                })?;
                match &dataset.metadata_columns[*hot] {
                    MetadataColumn::Categorical { value, .. } => rec.push(value.clone()),
                    MetadataColumn::Continuous { .. } => unreachable!("grouped as categorical"),
                }
            } else {
                rec.push(dataset.metadata.get(i, cols[0]).to_string());
            }
        }
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(LABELS_FILE);
    let mut w = csv_writer(&path)?;
    let err = write_err(&path);
    w.write_record(["subject_id", "class", "split"]).map_err(&err)?;
    for (i, id) in dataset.ids.iter().enumerate() {
        let class = dataset.labels[i].map(|c| c.to_string()).unwrap_or_default();
        w.write_record([id.as_str(), class.as_str(), dataset.splits[i].as_str()])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// How much the metadata says about the class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Informativeness {
    /// Independent of the class.
    Noise,
    /// One noisy class-correlated column; the rest noise.
    Partial,
    /// A latent subgroup, which fixes the class, is encoded jointly in a
    /// few columns; the rest are nuisance noise.
    Full,
}

impl Informativeness {
    pub const ALL: [Informativeness; 3] = [Informativeness::Noise, Informativeness::Partial, Informativeness::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Informativeness::Noise => "noise",
            Informativeness::Partial => "partial",
            Informativeness::Full => "full",
        }
    }
}

impl fmt::Display for Informativeness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Informativeness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Informativeness::Noise),
            "partial" => Ok(Informativeness::Partial),
            "full" => Ok(Informativeness::Full),
            other => Err(Error::Config(format!(
                "unknown informativeness {other:?} (expected noise, partial or full)"
            ))),
        }
    }
}

/// Parameters of the synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub metadata_dim: usize,
    /// Standard deviation of the Gaussian noise around each class centroid;
    /// centroids sit at distance 2 from each other.
    pub feature_noise: f64,
    pub informativeness: Informativeness,
    /// Spread of the subgroup code in `full` metadata.
    pub metadata_jitter: f64,
    /// Class signal strength of the correlated column in `partial`
    /// metadata, in units of its noise.
    pub partial_signal: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 200,
            n_classes: 2,
            feature_dim: 32,
            metadata_dim: 6,
            feature_noise: 1.3,
            informativeness: Informativeness::Full,
            metadata_jitter: 0.25,
            partial_signal: 2.0,
            seed: 0,
        }
    }
}

/// Subgroups per class in `full` metadata.
const SUBGROUPS: usize = 2;

fn class_bits(n_classes: usize) -> u32 {
    usize::BITS - (n_classes - 1).leading_zeros()
}

/// Integer code of subgroup `(class, subtype)`. The class bits are
/// flipped for the second subtype, so that no single code bit agrees
/// with the class; for two classes the class is the XOR of both bits.
fn subgroup_code(class: usize, subtype: usize, n_classes: usize) -> usize {
    let bits = class_bits(n_classes);
    let flip = if subtype == 1 { (1 << bits) - 1 } else { 0 };
    (class ^ flip) | (subtype << bits)
}

impl SynthSpec {
    /// Columns carrying the subgroup code in `full` metadata.
    pub fn code_columns(&self) -> usize {
        class_bits(self.n_classes) as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_subjects", self.n_subjects),
            ("feature_dim", self.feature_dim),
            ("metadata_dim", self.metadata_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.n_subjects < self.n_classes {
            return Err(Error::Config("fewer subjects than classes".into()));
        }
        if self.feature_dim < self.n_classes {
            return Err(Error::Config(format!(
                "feature_dim {} cannot hold {} class centroids",
                self.feature_dim, self.n_classes
            )));
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("metadata_jitter", self.metadata_jitter),
            ("partial_signal", self.partial_signal),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.informativeness == Informativeness::Full && self.metadata_dim < self.code_columns() {
            return Err(Error::Config(format!(
                "full metadata needs at least {} columns for {} classes",
                self.code_columns(),
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Class-conditional synthetic population with a stratified 60/20/20
/// train/val/test split. Deterministic in the spec.
///
/// Class `c` has centroid `√2·e_c`. In `full` metadata each subject
/// belongs to one of two subtypes per class, drawn uniformly; the binary
/// code of its subgroup is written as ±1 in the leading columns with
/// Gaussian jitter, and the remaining columns are unit noise. The class is
/// a function of the code but not of any single column.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_subjects;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let subtype: Vec<usize> = (0..n).map(|_| rng.random_range(0..SUBGROUPS)).collect();

    let mut features = Matrix::zeros(n, spec.feature_dim);
    for i in 0..n {
        for j in 0..spec.feature_dim {
            let centroid = if j == labels[i] { std::f64::consts::SQRT_2 } else { 0.0 };
            let z: f64 = rng.sample(StandardNormal);
            features.set(i, j, centroid + spec.feature_noise * z);
        }
    }

    let mut metadata = Matrix::zeros(n, spec.metadata_dim);
    let code_cols = spec.code_columns();
    let class_offset = (spec.n_classes - 1) as f64 / 2.0;
    for i in 0..n {
        let code = subgroup_code(labels[i], subtype[i], spec.n_classes);
        for j in 0..spec.metadata_dim {
            let z: f64 = rng.sample(StandardNormal);
            let v = match spec.informativeness {
                Informativeness::Noise => z,
                Informativeness::Partial if j == 0 => {
                    spec.partial_signal * (labels[i] as f64 - class_offset) + z
                }
                Informativeness::Partial => z,
                Informativeness::Full if j < code_cols => {
                    let bit = (code >> j) & 1;
                    (2.0 * bit as f64 - 1.0) + spec.metadata_jitter * z
                }
                Informativeness::Full => z,
            };
            metadata.set(i, j, v);
        }
    }

    let splits = stratified_split(&labels, spec.n_classes, spec.seed)?;
    let width = |k: usize| (k.max(2) - 1).to_string().len();
    let id_width = width(n);
    Ok(Dataset {
        ids: (0..n).map(|i| format!("s{i:0id_width$}")).collect(),
        feature_names: (0..spec.feature_dim)
            .map(|j| format!("f{j:0w$}", w = width(spec.feature_dim)))
            .collect(),
        features,
        metadata_columns: (0..spec.metadata_dim)
            .map(|j| MetadataColumn::Continuous {
                name: format!("m{j:0w$}", w = width(spec.metadata_dim)),
            })
            .collect(),
        metadata,
        labels: labels.into_iter().map(Some).collect(),
        splits,
        n_classes: spec.n_classes,
    })
}

/// Per-class shuffled 60/20/20 train/val/test assignment.
pub fn stratified_split(labels: &[usize], n_classes: usize, seed: u64) -> Result<Vec<Split>> {
    if let Some(&c) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Config(format!("label {c} out of range for {n_classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut splits = vec![Split::Test; labels.len()];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let m = members.len();
        let n_train = (0.6 * m as f64).round() as usize;
        let n_val = (0.2 * m as f64).round() as usize;
        for (rank, &i) in members.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(splits)
}

/// Settings for the fixed baseline graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    /// Edge probability of the random graph.
    pub edge_probability: f64,
    /// Per-column similarity threshold `β` of the affinity graph; a column
    /// agrees when `exp(−|z_i − z_j|) > β` on standardized metadata.
    pub affinity_threshold: f64,
    /// Agreeing columns needed for an affinity edge; half the columns
    /// (rounded up) when unset.
    pub min_agreeing_columns: Option<usize>,
    pub seed: u64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            edge_probability: 0.1,
            affinity_threshold: 0.6,
            min_agreeing_columns: None,
            seed: 0,
        }
    }
}

/// Fixed graph over the dataset's subjects with unit-weight edges.
pub fn build_baseline_graph(kind: GraphKind, dataset: &Dataset, params: &BaselineParams) -> Result<PopulationGraph> {
    let n = dataset.len();
    let mut w = Matrix::identity(n);
    match kind {
        GraphKind::Adaptive => {
            return Err(Error::Config(
                "the adaptive graph is learned during training, not a baseline".into(),
            ))
        }
        GraphKind::Random => {
            let p = params.edge_probability;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("edge_probability {p} outside [0, 1]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random::<f64>() < p {
                        w.set(i, j, 1.0);
                        w.set(j, i, 1.0);
                    }
                }
            }
        }
        GraphKind::Affinity => {
            let beta = params.affinity_threshold;
            if beta.is_nan() {
                return Err(Error::Config("affinity_threshold is NaN".into()));
            }
            let m = dataset.metadata.cols();
            let needed = params.min_agreeing_columns.unwrap_or(m.div_ceil(2)).max(1);
            if m > 0 {
                let z = normalize_metadata(&dataset.metadata, &NormStats::fit(&dataset.metadata)?)?;
                for i in 0..n {
                    for j in (i + 1)..n {
                        let agree = (0..m)
                            .filter(|&c| (-(z.get(i, c) - z.get(j, c)).abs()).exp() > beta)
                            .count();
                        if agree >= needed {
                            w.set(i, j, 1.0);
                            w.set(j, i, 1.0);
                        }
                    }
                }
            }
        }
    }
    PopulationGraph::new(dataset.features.clone(), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn small(informativeness: Informativeness, seed: u64) -> Dataset {
        generate_synthetic(&SynthSpec {
            n_subjects: 60,
            informativeness,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = small(Informativeness::Full, 3);
        assert_eq!(a, small(Informativeness::Full, 3));
        assert_ne!(a, small(Informativeness::Full, 4));
    }

    #[test]
    fn labels_balanced_and_split_stratified() {
        let d = generate_synthetic(&SynthSpec::default()).unwrap();
        for c in 0..2 {
            let members: Vec<usize> = (0..200).filter(|&i| d.labels[i] == Some(c)).collect();
            assert_eq!(members.len(), 100);
            let count = |s| members.iter().filter(|&&i| d.splits[i] == s).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (60, 20, 20));
        }
    }

    /// Pooled Pearson chi-square of class against the sign of each
    /// metadata column; columns are independent under the null, so the
    /// statistics add.
    fn chi_square_p_value(d: &Dataset) -> f64 {
        let n = d.len() as f64;
        let mut stat = 0.0;
        let mut dof = 0.0;
        for col in 0..d.metadata.cols() {
            let mut table = vec![[0.0f64; 2]; d.n_classes];
            for i in 0..d.len() {
                let bin = usize::from(d.metadata.get(i, col) > 0.0);
                table[d.labels[i].unwrap()][bin] += 1.0;
            }
            let col_tot = [0, 1].map(|b| table.iter().map(|r| r[b]).sum::<f64>());
            for row in &table {
                let row_tot = row[0] + row[1];
                for b in 0..2 {
                    let expected = row_tot * col_tot[b] / n;
                    stat += (row[b] - expected).powi(2) / expected;
                }
            }
            dof += (d.n_classes - 1) as f64;
        }
        1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
    }

    #[test]
    fn noise_metadata_carries_no_class_signal() {
        for seed in 0..10 {
            let d = generate_synthetic(&SynthSpec {
                informativeness: Informativeness::Noise,
                seed,
                ..Default::default()
            })
            .unwrap();
            let p = chi_square_p_value(&d);
            assert!(p > 0.01, "seed {seed}: p = {p}");
        }
    }

    #[test]
    fn chi_square_detects_partial_metadata() {
        let d = generate_synthetic(&SynthSpec {
            informativeness: Informativeness::Partial,
            ..Default::default()
        })
        .unwrap();
        assert!(chi_square_p_value(&d) < 1e-6);
    }

    fn leave_one_out_1nn(d: &Dataset) -> f64 {
        let joined = |i: usize| -> Vec<f64> {
            d.features.row(i).iter().chain(d.metadata.row(i)).copied().collect()
        };
        let rows: Vec<Vec<f64>> = (0..d.len()).map(joined).collect();
        let mut hits = 0;
        for i in 0..d.len() {
            let nearest = (0..d.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da: f64 = rows[i].iter().zip(&rows[a]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = rows[i].iter().zip(&rows[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            hits += usize::from(d.labels[nearest] == d.labels[i]);
        }
        hits as f64 / d.len() as f64
    }

    #[test]
    fn full_metadata_without_feature_noise_is_perfectly_separable() {
        for n_classes in [2, 3] {
            let d = generate_synthetic(&SynthSpec {
                feature_noise: 0.0,
                n_classes,
                seed: 9,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(leave_one_out_1nn(&d), 1.0);
        }
    }

    #[test]
    fn full_metadata_code_fixes_class() {
        let d = generate_synthetic(&SynthSpec {
            metadata_jitter: 0.0,
            ..Default::default()
        })
        .unwrap();
        let bit = |i, j| usize::from(d.metadata.get(i, j) > 0.0);
        for i in 0..d.len() {
            assert_eq!(Some(bit(i, 0) ^ bit(i, 1)), d.labels[i]);
        }
        // Neither code column alone predicts the class.
        for j in 0..2 {
            let agree = (0..d.len()).filter(|&i| Some(bit(i, j)) == d.labels[i]).count();
            let frac = agree as f64 / d.len() as f64;
            assert!((frac - 0.5).abs() < 0.15, "column {j}: {frac}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SynthSpec { n_subjects: 0, ..Default::default() },
            SynthSpec { n_classes: 1, ..Default::default() },
            SynthSpec { feature_noise: -1.0, ..Default::default() },
            SynthSpec { feature_dim: 1, ..Default::default() },
            SynthSpec { metadata_dim: 1, ..Default::default() },
        ];
        for s in bad {
            assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))), "{s:?}");
        }
        assert!(generate_synthetic(&SynthSpec {
            metadata_dim: 1,
            informativeness: Informativeness::Noise,
            ..Default::default()
        })
        .is_ok());
    }

    #[test]
    fn baseline_graph_extremes() {
        let d = small(Informativeness::Full, 1);
        let n = d.len();
        let random = |p| {
            build_baseline_graph(
                GraphKind::Random,
                &d,
                &BaselineParams {
                    edge_probability: p,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        assert_eq!(random(0.0).edge_weights, Matrix::identity(n));
        assert_eq!(random(1.0).edge_weights, Matrix::ones(n, n));
        let never = BaselineParams {
            affinity_threshold: f64::INFINITY,
            ..Default::default()
        };
        let g = build_baseline_graph(GraphKind::Affinity, &d, &never).unwrap();
        assert_eq!(g.edge_weights, Matrix::identity(n));
        assert!(build_baseline_graph(GraphKind::Adaptive, &d, &never).is_err());
    }

    #[test]
    fn baseline_graphs_are_valid_population_graphs() {
        for info in Informativeness::ALL {
            let d = small(info, 2);
            for kind in [GraphKind::Random, GraphKind::Affinity] {
                let g = build_baseline_graph(kind, &d, &BaselineParams::default()).unwrap();
                g.validate().unwrap();
                assert!(g.edge_weights.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn informativeness_names_round_trip() {
        for i in Informativeness::ALL {
            assert_eq!(i.as_str().parse::<Informativeness>().unwrap(), i);
        }
        assert!("medium".parse::<Informativeness>().is_err());
    }
}
