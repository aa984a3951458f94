//! Seeded synthetic tasks with known ground truth, and CSV ingestion.
//!
//! Every generator is a pure function of its [`TaskSpec`]: the same spec
//! (seed included) yields bitwise-identical datasets.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::network::{
    Activation, LayerSpec, MaskSource, ModelSpec, Network, NetworkError, OperatorOptions, Widths,
};

pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

type Result<T> = std::result::Result<T, DataError>;

fn default_seed() -> u64 {
    0
}

fn default_fraction() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Classes depend only on a random subset of the input coordinates.
    PlantedFeatures {
        input_dim: usize,
        classes: usize,
        informative: usize,
        train: usize,
        val: usize,
        test: usize,
        /// Standard deviation of score noise, relative to the score spread.
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    /// Regression targets from a seeded residual teacher network.
    TeacherStudent {
        input_dim: usize,
        output_dim: usize,
        width: usize,
        hidden: usize,
        blocks: usize,
        train: usize,
        val: usize,
        test: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    CsvClassification {
        path: PathBuf,
        #[serde(default = "default_fraction")]
        val_fraction: f64,
        #[serde(default = "default_fraction")]
        test_fraction: f64,
        #[serde(default = "default_seed")]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `(rows, dim)` regression targets.
    Values { dim: usize, data: Vec<f64> },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values { dim, data } => data.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values { dim, data } => Targets::Values {
                dim: *dim,
                data: idx
                    .iter()
                    .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
        }
    }
}

/// Row-major samples; a split may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub cols: usize,
    pub x: Vec<f64>,
    pub y: Targets,
}

impl Split {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            cols: self.cols,
            x: idx
                .iter()
                .flat_map(|&i| self.x[i * self.cols..(i + 1) * self.cols].iter().copied())
                .collect(),
            y: self.y.select(idx),
        }
    }

    /// Features as a `(rows, cols)` tensor; fails on an empty split.
    pub fn features(&self) -> Result<Tensor> {
        Tensor::new(vec![self.rows(), self.cols], self.x.clone())
            .map_err(|e| DataError::Invalid(format!("empty or malformed split: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputKind {
    Classes(usize),
    Regression(usize),
}

impl OutputKind {
    pub fn width(&self) -> usize {
        match self {
            OutputKind::Classes(n) | OutputKind::Regression(n) => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metadata {
    /// Coordinates the planted labels depend on, ascending.
    pub informative: Option<Vec<usize>>,
    pub teacher: Option<ModelSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub output: OutputKind,
    pub metadata: Metadata,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.cols
    }
}

impl TaskSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            TaskSpec::PlantedFeatures { .. } => gen_planted_features(self),
            TaskSpec::TeacherStudent { .. } => gen_teacher_student(self).map(|(d, _)| d),
            TaskSpec::CsvClassification {
                path,
                val_fraction,
                test_fraction,
                seed,
            } => load_csv_dataset(path, *val_fraction, *test_fraction, *seed),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn check_train(train: usize) -> Result<()> {
    if train == 0 {
        return Err(DataError::Invalid("train split is empty".into()));
    }
    Ok(())
}

fn three_way(x: Vec<f64>, y: Targets, cols: usize, train: usize, val: usize) -> [Split; 3] {
    let all = Split { cols, x, y };
    let n = all.rows();
    let idx: Vec<usize> = (0..n).collect();
    [
        all.select(&idx[..train]),
        all.select(&idx[train..train + val]),
        all.select(&idx[train + val..]),
    ]
}

/// Planted-feature classification. Inputs are standard normal; the label is
/// the quantile bin of `vᵀ tanh(A x_S)` (plus optional noise), so only the
/// coordinates in `S` carry signal and classes are balanced.
pub fn gen_planted_features(spec: &TaskSpec) -> Result<Dataset> {
    let &TaskSpec::PlantedFeatures {
        input_dim,
        classes,
        informative,
        train,
        val,
        test,
        noise,
        seed,
    } = spec
    else {
        return Err(DataError::Invalid("not a planted-features task".into()));
    };
    if informative == 0 {
        return Err(DataError::Invalid("informative feature count is zero".into()));
    }
    if informative > input_dim {
        return Err(DataError::Invalid(format!(
            "{informative} informative features exceed input dimension {input_dim}"
        )));
    }
    if classes < 2 {
        return Err(DataError::Invalid("need at least two classes".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::Invalid(format!("noise {noise} is not a valid level")));
    }
    check_train(train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = (0..input_dim).collect();
    coords.shuffle(&mut rng);
    let mut s: Vec<usize> = coords[..informative].to_vec();
    s.sort_unstable();
    let scale = 2.0 / (informative as f64).sqrt();
    let a: Vec<f64> = normal_vec(&mut rng, informative * informative)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let v = normal_vec(&mut rng, informative);

    let n = train + val + test;
    let x = normal_vec(&mut rng, n * input_dim);
    let mut score: Vec<f64> = (0..n)
        .map(|r| {
            let row = &x[r * input_dim..(r + 1) * input_dim];
            (0..informative)
                .map(|i| {
                    let pre: f64 = (0..informative).map(|j| a[i * informative + j] * row[s[j]]).sum();
                    v[i] * pre.tanh()
                })
                .sum()
        })
        .collect();
    if noise > 0.0 {
        let mean = score.iter().sum::<f64>() / n as f64;
        let sd = (score.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for sc in &mut score {
            *sc += noise * sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut sorted = score.clone();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..classes).map(|c| sorted[c * n / classes]).collect();
    let labels: Vec<usize> = score
        .iter()
        .map(|sc| cuts.partition_point(|c| c <= sc))
        .collect();

    let [train_s, val_s, test_s] = three_way(x, Targets::Classes(labels), input_dim, train, val);
    Ok(Dataset {
        train: train_s,
        val: val_s,
        test: test_s,
        output: OutputKind::Classes(classes),
        metadata: Metadata {
            informative: Some(s),
            teacher: None,
        },
    })
}

/// Discrete teacher architecture of a teacher-student task.
pub fn teacher_spec(spec: &TaskSpec) -> Result<ModelSpec> {
    let &TaskSpec::TeacherStudent {
        input_dim,
        output_dim,
        width,
        hidden,
        blocks,
        ..
    } = spec
    else {
        return Err(DataError::Invalid("not a teacher-student task".into()));
    };
    let mut layers = vec![LayerSpec::Linear {
        name: "in".into(),
        out_features: width,
        activation: Activation::None,
        search: None,
    }];
    if blocks > 0 {
        layers.push(LayerSpec::Residual {
            name: "stage".into(),
            blocks,
            hidden: Widths::Uniform(hidden),
            hidden_search: None,
            depth_search: None,
        });
    }
    layers.push(LayerSpec::Linear {
        name: "out".into(),
        out_features: output_dim,
        activation: Activation::None,
        search: None,
    });
    let m = ModelSpec {
        input_dim,
        seq_len: 1,
        input_search: None,
        layers,
        groups: vec![],
    };
    m.layout()?;
    Ok(m)
}

/// Regression task whose targets are a seeded teacher's outputs on standard
/// normal inputs, plus optional Gaussian noise.
pub fn gen_teacher_student(spec: &TaskSpec) -> Result<(Dataset, Network)> {
    let &TaskSpec::TeacherStudent {
        input_dim,
        output_dim,
        train,
        val,
        test,
        noise,
        seed,
        ..
    } = spec
    else {
        return Err(DataError::Invalid("not a teacher-student task".into()));
    };
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::Invalid(format!("noise {noise} is not a valid level")));
    }
    check_train(train)?;
    let tspec = teacher_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Network::build(&tspec, &mut rng, OperatorOptions::default())?;
    let n = train + val + test;
    let x = normal_vec(&mut rng, n * input_dim);
    let inputs = Tensor::new(vec![n, input_dim], x.clone()).map_err(NetworkError::from)?;
    let mut y = teacher.predict(&inputs, MaskSource::Soft)?.into_data();
    if noise > 0.0 {
        for v in &mut y {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let targets = Targets::Values {
        dim: output_dim,
        data: y,
    };
    let [train_s, val_s, test_s] = three_way(x, targets, input_dim, train, val);
    Ok((
        Dataset {
            train: train_s,
            val: val_s,
            test: test_s,
            output: OutputKind::Regression(output_dim),
            metadata: Metadata {
                informative: None,
                teacher: Some(tspec),
            },
        },
        teacher,
    ))
}

/// Raw rows of a labeled CSV file, before splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Reads a header row then numeric feature columns and a final integer
/// label column.
pub fn read_csv_table(path: &Path) -> Result<CsvTable> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Row {
            row: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 {
        return Err(DataError::Row {
            row: 1,
            reason: "need at least one feature column and a label column".into(),
        });
    }
    let d = header.len() - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| DataError::Row {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(DataError::Row {
                row,
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (j, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::Row {
                row,
                reason: format!("column `{}`: cannot parse `{cell}` as a number", header[j]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Row {
                    row,
                    reason: format!("column `{}` is not finite", header[j]),
                });
            }
            x.push(v);
        }
        let label = &rec[d];
        y.push(label.parse::<usize>().map_err(|_| DataError::Row {
            row,
            reason: format!("label `{label}` is not a nonnegative integer"),
        })?);
    }
    if y.is_empty() {
        return Err(DataError::Invalid(format!("{}: no data rows", path.display())));
    }
    let first = y[0];
    if y.iter().all(|&l| l == first) {
        return Err(DataError::Invalid(format!(
            "{}: every row (2..={}) has label {first}; need at least two classes",
            path.display(),
            y.len() + 1
        )));
    }
    let x = Tensor::new(vec![y.len(), d], x).map_err(NetworkError::from)?;
    Ok(CsvTable { header, x, y })
}

/// Splits a table by seeded shuffle and standardizes every column with
/// train-split statistics.
///
/// Rows are put in a canonical order before shuffling, so the split depends
/// on the rows and the seed but not on their order in the file.
pub fn split_standardized(
    table: &CsvTable,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&val_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || val_fraction + test_fraction >= 1.0
    {
        return Err(DataError::Invalid(format!(
            "split fractions {val_fraction} and {test_fraction} leave no training rows"
        )));
    }
    let n = table.y.len();
    let d = table.x.shape()[1];
    let row = |i: usize| &table.x.data()[i * d..(i + 1) * d];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        row(i)
            .iter()
            .zip(row(j))
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(table.y[i].cmp(&table.y[j]))
    });
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_val = (val_fraction * n as f64).round() as usize;
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(DataError::Invalid("no training rows after splitting".into()));
    }
    let all = Split {
        cols: d,
        x: table.x.data().to_vec(),
        y: Targets::Classes(table.y.clone()),
    };
    let mut train = all.select(&order[..n_train]);
    let mut val = all.select(&order[n_train..n_train + n_val]);
    let mut test = all.select(&order[n_train + n_val..]);

    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n_train {
        for c in 0..d {
            mean[c] += train.x[r * d + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for r in 0..n_train {
        for c in 0..d {
            var[c] += (train.x[r * d + c] - mean[c]).powi(2);
        }
    }
    let sd: Vec<f64> = var
        .iter()
        .map(|v| (v / n_train as f64).max(VARIANCE_FLOOR).sqrt())
        .collect();
    for s in [&mut train, &mut val, &mut test] {
        for (i, v) in s.x.iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - mean[c]) / sd[c];
        }
    }
    let classes = table.y.iter().max().unwrap() + 1;
    Ok(Dataset {
        train,
        val,
        test,
        output: OutputKind::Classes(classes),
        metadata: Metadata::default(),
    })
}

pub fn load_csv_dataset(
    path: &Path,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    split_standardized(&read_csv_table(path)?, val_fraction, test_fraction, seed)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn planted(noise: f64, seed: u64) -> TaskSpec {
        TaskSpec::PlantedFeatures {
            input_dim: 64,
            classes: 10,
            informative: 8,
            train: 8000,
            val: 1000,
            test: 1000,
            noise,
            seed,
        }
    }

    fn teacher(noise: f64) -> TaskSpec {
        TaskSpec::TeacherStudent {
            input_dim: 6,
            output_dim: 2,
            width: 8,
            hidden: 8,
            blocks: 2,
            train: 50,
            val: 10,
            test: 10,
            noise,
            seed: 3,
        }
    }

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn planted_is_reproducible_and_balanced() {
        let a = planted(0.0, 1).generate().unwrap();
        let b = planted(0.0, 1).generate().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, planted(0.0, 2).generate().unwrap());

        let s = a.metadata.informative.as_ref().unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&i| i < 64));

        let mut counts = [0usize; 10];
        for split in [&a.train, &a.val, &a.test] {
            let Targets::Classes(c) = &split.y else { panic!() };
            c.iter().for_each(|&l| counts[l] += 1);
        }
        for &c in &counts {
            assert!((900..=1100).contains(&c), "{counts:?}");
        }
        assert_eq!((a.train.rows(), a.val.rows(), a.test.rows()), (8000, 1000, 1000));
    }

    #[test]
    fn planted_labels_ignore_noise_coordinates() {
        // relabel after scrambling every coordinate outside S: same labels
        let spec = planted(0.0, 4);
        let d = spec.generate().unwrap();
        let s = d.metadata.informative.clone().unwrap();
        let TaskSpec::PlantedFeatures { seed, .. } = spec else { unreachable!() };
        // regenerate the rule's inputs and recompute with noise columns zeroed
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords: Vec<usize> = (0..64).collect();
        coords.shuffle(&mut rng);
        let scale = 2.0 / 8f64.sqrt();
        let a: Vec<f64> = normal_vec(&mut rng, 64).into_iter().map(|v| v * scale).collect();
        let v = normal_vec(&mut rng, 8);
        let score = |row: &[f64]| -> f64 {
            (0..8)
                .map(|i| v[i] * (0..8).map(|j| a[i * 8 + j] * row[s[j]]).sum::<f64>().tanh())
                .sum()
        };
        let Targets::Classes(labels) = &d.train.y else { panic!() };
        // the label order must be a function of the score alone
        let mut pairs: Vec<(f64, usize)> = (0..d.train.rows())
            .map(|r| {
                let mut row = d.train.x[r * 64..(r + 1) * 64].to_vec();
                for (c, x) in row.iter_mut().enumerate() {
                    if !s.contains(&c) {
                        *x = 0.0;
                    }
                }
                (score(&row), labels[r])
            })
            .collect();
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
        assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn planted_rejects_bad_specs() {
        let mut spec = planted(0.0, 0);
        if let TaskSpec::PlantedFeatures { informative, .. } = &mut spec {
            *informative = 0;
        }
        assert!(spec.generate().is_err());
        if let TaskSpec::PlantedFeatures { informative, .. } = &mut spec {
            *informative = 65;
        }
        assert!(spec.generate().is_err());
    }

    #[test]
    fn teacher_reproduces_its_targets() {
        let (d, net) = gen_teacher_student(&teacher(0.0)).unwrap();
        let y = net.predict(&d.train.features().unwrap(), MaskSource::Soft).unwrap();
        let Targets::Values { dim, data } = &d.train.y else { panic!() };
        assert_eq!(*dim, 2);
        assert_eq!(y.data(), &data[..]);
        assert_eq!(d.metadata.teacher.as_ref().unwrap(), net.spec());

        let (_, again) = gen_teacher_student(&teacher(0.0)).unwrap();
        assert_eq!(net.params(), again.params());
        let (noisy, _) = gen_teacher_student(&teacher(0.1)).unwrap();
        assert_ne!(noisy.train.y, d.train.y);
        assert_eq!(noisy.train.x, d.train.x);
    }

    #[test]
    fn csv_toy_file() {
        let f = write_csv("a,b,label\n1.0,2.0,0\n3.5,-1,1\n0,0,2\n");
        let t = read_csv_table(f.path()).unwrap();
        assert_eq!(t.x.shape(), &[3, 2]);
        assert_eq!(t.y, vec![0, 1, 2]);
        assert_eq!(t.header, vec!["a", "b", "label"]);
    }

    #[test]
    fn csv_constant_column_standardizes_to_zero() {
        let mut text = String::from("c,v,label\n");
        for i in 0..20 {
            text.push_str(&format!("5.0,{i},{}\n", i % 2));
        }
        let f = write_csv(&text);
        let d = load_csv_dataset(f.path(), 0.2, 0.2, 7).unwrap();
        assert_eq!(d.train.rows(), 12);
        for s in [&d.train, &d.val, &d.test] {
            assert!(s.x.iter().step_by(2).all(|&v| v == 0.0));
        }
        let n = d.train.rows() as f64;
        let mean: f64 = d.train.x.iter().skip(1).step_by(2).sum::<f64>() / n;
        let var: f64 = d.train.x.iter().skip(1).step_by(2).map(|v| v * v).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_split_ignores_file_order() {
        let rows: Vec<String> = (0..30).map(|i| format!("{i},{},{}", i * i, i % 3)).collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let a = write_csv(&format!("x,y,label\n{}\n", rows.join("\n")));
        let b = write_csv(&format!("x,y,label\n{}\n", shuffled.join("\n")));
        let da = load_csv_dataset(a.path(), 0.2, 0.2, 5).unwrap();
        let db = load_csv_dataset(b.path(), 0.2, 0.2, 5).unwrap();
        assert_eq!(da, db);
        assert_eq!(da.train.rows() + da.val.rows() + da.test.rows(), 30);
        let dc = load_csv_dataset(a.path(), 0.2, 0.2, 6).unwrap();
        assert_ne!(da.train, dc.train);
    }

    #[test]
    fn csv_errors_name_rows() {
        let cases = [
            ("a,label\n1,0\n2\n", "row 3"),
            ("a,label\n1,0\nx,1\n", "row 3"),
            ("a,label\n1,0\n2,-1\n", "row 3"),
            ("a,label\n1,4\n2,4\n", "two classes"),
        ];
        for (text, needle) in cases {
            let f = write_csv(text);
            let err = read_csv_table(f.path()).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
        let err = read_csv_table(Path::new("/nonexistent/file.csv")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn task_spec_is_strict() {
        let ok: TaskSpec = serde_json::from_str(
            r#"{"kind": "planted-features", "input_dim": 4, "classes": 2, "informative": 2,
                "train": 10, "val": 2, "test": 2}"#,
        )
        .unwrap();
        assert!(matches!(ok, TaskSpec::PlantedFeatures { seed: 0, .. }));
        let bad = serde_json::from_str::<TaskSpec>(
            r#"{"kind": "planted-features", "input_dim": 4, "classes": 2, "informative": 2,
                "train": 10, "val": 2, "test": 2, "extra": 1}"#,
        );
        assert!(bad.is_err());
    }
}
