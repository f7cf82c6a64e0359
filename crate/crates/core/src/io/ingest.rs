//! Reading and writing CSV data directories.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector3};

use super::{write_csv, COORDS_FILE, COUNTS_FILE, VALUES_FILE, VOCAB_FILE, WORDS_FILE};
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::vmf;

const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelKind {
    Object,
    Column,
    ValueColumn,
    Word,
}

impl LabelKind {
    const ALL: [LabelKind; 4] = [LabelKind::Object, LabelKind::Column, LabelKind::ValueColumn, LabelKind::Word];

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.to_string() == s)
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Object => "object",
            LabelKind::Column => "column",
            LabelKind::ValueColumn => "value_column",
            LabelKind::Word => "word",
        })
    }
}

/// Label to index assignment, first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Labels {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Labels {
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let mut out = Self::default();
        for n in names {
            out.insert(&n);
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn insert(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Labels of every index in a data directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    pub objects: Labels,
    pub columns: Labels,
    pub value_columns: Labels,
    pub words: Labels,
}

impl Vocab {
    fn labels_mut(&mut self, kind: LabelKind) -> &mut Labels {
        match kind {
            LabelKind::Object => &mut self.objects,
            LabelKind::Column => &mut self.columns,
            LabelKind::ValueColumn => &mut self.value_columns,
            LabelKind::Word => &mut self.words,
        }
    }

    fn labels(&self, kind: LabelKind) -> &Labels {
        match kind {
            LabelKind::Object => &self.objects,
            LabelKind::Column => &self.columns,
            LabelKind::ValueColumn => &self.value_columns,
            LabelKind::Word => &self.words,
        }
    }

    /// Object ids from the dataset, every other label its own index.
    pub fn for_dataset(dataset: &Dataset) -> Self {
        let numbered = |n: usize| Labels::from_names((0..n).map(|i| i.to_string()));
        Self {
            objects: Labels::from_names(dataset.object_ids.iter().cloned()),
            columns: numbered(dataset.counts.ncols()),
            value_columns: numbered(dataset.values.ncols()),
            words: numbered(dataset.categories.ncols()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut vocab = Vocab::default();
        let mut rows = CsvRows::open(path, &["kind", "index", "label"])?;
        while let Some((line, rec)) = rows.next_record()? {
            let kind = LabelKind::parse(&rec[0]).ok_or_else(|| rows.err(line, format!("unknown kind `{}`", &rec[0])))?;
            let index: usize = rec[1].parse().map_err(|_| rows.err(line, format!("bad index `{}`", &rec[1])))?;
            let labels = vocab.labels_mut(kind);
            if index != labels.len() {
                return Err(rows.err(line, format!("{kind} index {index} out of sequence, expected {}", labels.len())));
            }
            if labels.get(&rec[2]).is_some() {
                return Err(rows.err(line, format!("duplicate {kind} label `{}`", &rec[2])));
            }
            labels.insert(&rec[2]);
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_csv(path, |w| {
            w.write_record(["kind", "index", "label"])?;
            for kind in LabelKind::ALL {
                for (i, name) in self.labels(kind).names().iter().enumerate() {
                    w.write_record([kind.to_string(), i.to_string(), name.clone()])?;
                }
            }
            Ok(())
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Words whose total count falls below this are dropped.
    pub word_threshold: u64,
    /// Fixed object list; rows naming any other object are rejected.
    pub objects: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub vocab: Vocab,
    /// Words removed by the threshold.
    pub dropped_words: Vec<String>,
}

/// CSV reader that checks the header and yields records with their line numbers.
struct CsvRows {
    path: PathBuf,
    reader: csv::Reader<std::fs::File>,
    width: usize,
}

impl CsvRows {
    fn open_any(path: &Path, headers: &[&[&str]]) -> Result<(Self, usize)> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::Parse { path: path.into(), line: 1, message: format!("{other:?}") },
            })?;
        let found: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Parse { path: path.into(), line: 1, message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        let which = headers.iter().position(|h| h.len() == found.len() && h.iter().zip(&found).all(|(a, b)| a == b));
        match which {
            Some(i) => Ok((Self { path: path.into(), reader, width: headers[i].len() }, i)),
            None => {
                let expected: Vec<String> = headers.iter().map(|h| h.join(",")).collect();
                Err(Error::Parse {
                    path: path.into(),
                    line: 1,
                    message: format!("header `{}` should be `{}`", found.join(","), expected.join("` or `")),
                })
            }
        }
    }

    fn open(path: &Path, header: &[&str]) -> Result<Self> {
        Ok(Self::open_any(path, &[header])?.0)
    }

    fn err(&self, line: u64, message: String) -> Error {
        Error::Parse { path: self.path.clone(), line, message }
    }

    fn next_record(&mut self) -> Result<Option<(u64, csv::StringRecord)>> {
        let mut rec = csv::StringRecord::new();
        match self.reader.read_record(&mut rec) {
            Ok(false) => Ok(None),
            Ok(true) => {
                let line = rec.position().map_or(0, |p| p.line());
                if rec.len() != self.width {
                    return Err(self.err(line, format!("expected {} fields, found {}", self.width, rec.len())));
                }
                if rec.iter().any(str::is_empty) {
                    return Err(self.err(line, "empty field".into()));
                }
                Ok(Some((line, rec)))
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                Err(self.err(line, e.to_string()))
            }
        }
    }

    fn number(&self, line: u64, field: &str, what: &str) -> Result<f64> {
        let v: f64 = field.parse().map_err(|_| self.err(line, format!("{what} `{field}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(line, format!("{what} `{field}` is not finite")));
        }
        Ok(v)
    }

    fn count(&self, line: u64, field: &str) -> Result<f64> {
        let v = self.number(line, field, "count")?;
        if v < 0.0 {
            return Err(self.err(line, format!("negative count {field}")));
        }
        if v.fract() != 0.0 {
            return Err(self.err(line, format!("count {field} is not an integer")));
        }
        Ok(v)
    }
}

struct ObjectIndex {
    labels: Labels,
    frozen: bool,
}

impl ObjectIndex {
    fn resolve(&mut self, rows: &CsvRows, line: u64, id: &str) -> Result<usize> {
        match self.labels.get(id) {
            Some(i) => Ok(i),
            None if self.frozen => Err(rows.err(line, format!("unknown object `{id}`"))),
            None => Ok(self.labels.insert(id)),
        }
    }
}

type Cells = Vec<(usize, usize, f64)>;

/// Reads `object_id,<label>,<number>` triplets, rejecting repeated cells.
fn read_triplets(
    path: &Path,
    label: &str,
    value: &str,
    objects: &mut ObjectIndex,
    columns: &mut Labels,
) -> Result<Cells> {
    let mut rows = CsvRows::open(path, &["object_id", label, value])?;
    let mut cells = Vec::new();
    let mut seen: HashMap<(usize, usize), u64> = HashMap::new();
    while let Some((line, rec)) = rows.next_record()? {
        let i = objects.resolve(&rows, line, &rec[0])?;
        let v = if value == "count" { rows.count(line, &rec[2])? } else { rows.number(line, &rec[2], value)? };
        let j = columns.insert(&rec[1]);
        if let Some(first) = seen.insert((i, j), line) {
            return Err(rows.err(line, format!("cell ({}, {}) already given on line {first}", &rec[0], &rec[1])));
        }
        cells.push((i, j, v));
    }
    Ok(cells)
}

fn read_coords(path: &Path, objects: &mut ObjectIndex) -> Result<Vec<(usize, Vector3<f64>)>> {
    let (mut rows, format) = CsvRows::open_any(path, &[&["object_id", "lat", "lon"], &["object_id", "x", "y", "z"]])?;
    let mut out = Vec::new();
    while let Some((line, rec)) = rows.next_record()? {
        let i = objects.resolve(&rows, line, &rec[0])?;
        let v = if format == 0 {
            let lat = rows.number(line, &rec[1], "lat")?;
            let lon = rows.number(line, &rec[2], "lon")?;
            vmf::latlon_to_sphere(lat, lon).map_err(|e| rows.err(line, e.to_string()))?
        } else {
            let v = Vector3::new(
                rows.number(line, &rec[1], "x")?,
                rows.number(line, &rec[2], "y")?,
                rows.number(line, &rec[3], "z")?,
            );
            if (v.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(rows.err(line, format!("vector has norm {}, expected 1", v.norm())));
            }
            v
        };
        out.push((i, v));
    }
    Ok(out)
}

fn fill(p: usize, n: usize, cells: &Cells) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, n);
    for &(i, j, v) in cells {
        m[(i, j)] = v;
    }
    m
}

/// Reads a data directory. Labels listed in its `vocab.csv` keep their
/// indices; new labels are appended in first-seen order.
pub fn ingest(dir: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let vocab_path = dir.join(VOCAB_FILE);
    let mut vocab = if vocab_path.exists() { Vocab::load(&vocab_path)? } else { Vocab::default() };
    let mut objects = match &opts.objects {
        Some(ids) => ObjectIndex { labels: Labels::from_names(ids.iter().cloned()), frozen: true },
        None => ObjectIndex { labels: std::mem::take(&mut vocab.objects), frozen: false },
    };

    let present = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    let (counts_path, values_path, words_path, coords_path) =
        (present(COUNTS_FILE), present(VALUES_FILE), present(WORDS_FILE), present(COORDS_FILE));
    if counts_path.is_none() && values_path.is_none() && words_path.is_none() && coords_path.is_none() {
        return Err(Error::Invalid(format!("no data files found in {}", dir.display())));
    }

    let counts = match &counts_path {
        Some(p) => read_triplets(p, "column_id", "count", &mut objects, &mut vocab.columns)?,
        None => Vec::new(),
    };
    let values = match &values_path {
        Some(p) => read_triplets(p, "column_id", "value", &mut objects, &mut vocab.value_columns)?,
        None => Vec::new(),
    };
    let mut words = match &words_path {
        Some(p) => read_triplets(p, "word", "count", &mut objects, &mut vocab.words)?,
        None => Vec::new(),
    };
    let coords = match &coords_path {
        Some(p) => Some(read_coords(p, &mut objects)?),
        None => None,
    };

    let mut dropped_words = Vec::new();
    if opts.word_threshold > 0 && !vocab.words.is_empty() {
        let mut totals = vec![0.0; vocab.words.len()];
        for &(_, j, v) in &words {
            totals[j] += v;
        }
        let mut kept = Labels::default();
        let mut remap = vec![None; totals.len()];
        for (j, name) in vocab.words.names().iter().enumerate() {
            if totals[j] >= opts.word_threshold as f64 {
                remap[j] = Some(kept.insert(name));
            } else {
                dropped_words.push(name.clone());
            }
        }
        words = words.into_iter().filter_map(|(i, j, v)| remap[j].map(|k| (i, k, v))).collect();
        vocab.words = kept;
        if !dropped_words.is_empty() {
            log::info!("dropped {} words below the threshold {}", dropped_words.len(), opts.word_threshold);
        }
    }

    let p = objects.labels.len();
    if p == 0 {
        return Err(Error::Invalid(format!("no objects in {}", dir.display())));
    }
    let values_m = fill(p, vocab.value_columns.len(), &values);
    if values_path.is_some() && values.len() != p * vocab.value_columns.len() {
        let mut have = vec![false; p * vocab.value_columns.len()];
        for &(i, j, _) in &values {
            have[i * vocab.value_columns.len() + j] = true;
        }
        let missing = have.iter().position(|h| !h).expect("a missing cell");
        let (i, j) = (missing / vocab.value_columns.len(), missing % vocab.value_columns.len());
        return Err(Error::Invalid(format!(
            "{VALUES_FILE}: no value for object `{}`, column `{}`",
            objects.labels.names()[i],
            vocab.value_columns.names()[j]
        )));
    }
    let coords = coords.map(|list| {
        let mut per = vec![Vec::new(); p];
        for (i, v) in list {
            per[i].push(v);
        }
        per
    });
    let mut dataset = Dataset::new(
        fill(p, vocab.columns.len(), &counts),
        values_m,
        fill(p, vocab.words.len(), &words),
        coords,
    );
    dataset.object_ids = objects.labels.names().to_vec();
    vocab.objects = objects.labels;
    Ok(Ingested { dataset, vocab, dropped_words })
}

fn write_triplets(path: &Path, header: [&str; 3], m: &DMatrix<f64>, rows: &Labels, cols: &Labels, dense: bool) -> Result<()> {
    write_csv(path, |w| {
        w.write_record(header)?;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if dense || v != 0.0 {
                    w.write_record([rows.names()[i].as_str(), cols.names()[j].as_str(), &v.to_string()])?;
                }
            }
        }
        Ok(())
    })
}

/// Writes every present modality of `dataset` plus `vocab.csv` into `dir`.
/// Coordinates are written as `x,y,z` so that re-reading is exact.
pub fn write_dataset(dataset: &Dataset, vocab: &Vocab, dir: &Path) -> Result<()> {
    let p = dataset.objects();
    if vocab.objects.len() != p
        || vocab.columns.len() != dataset.counts.ncols()
        || vocab.value_columns.len() != dataset.values.ncols()
        || vocab.words.len() != dataset.categories.ncols()
    {
        return Err(Error::Shape("vocabulary does not match the dataset".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let objects = &vocab.objects;
    if dataset.counts.ncols() > 0 {
        write_triplets(&dir.join(COUNTS_FILE), ["object_id", "column_id", "count"], &dataset.counts, objects, &vocab.columns, false)?;
    }
    if dataset.values.ncols() > 0 {
        write_triplets(&dir.join(VALUES_FILE), ["object_id", "column_id", "value"], &dataset.values, objects, &vocab.value_columns, true)?;
    }
    if dataset.categories.ncols() > 0 {
        write_triplets(&dir.join(WORDS_FILE), ["object_id", "word", "count"], &dataset.categories, objects, &vocab.words, false)?;
    }
    if let Some(coords) = &dataset.coords {
        write_csv(&dir.join(COORDS_FILE), |w| {
            w.write_record(["object_id", "x", "y", "z"])?;
            for (i, list) in coords.iter().enumerate() {
                for v in list {
                    w.write_record([objects.names()[i].clone(), v.x.to_string(), v.y.to_string(), v.z.to_string()])?;
                }
            }
            Ok(())
        })?;
    }
    vocab.save(&dir.join(VOCAB_FILE))
}
