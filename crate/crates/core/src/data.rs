//! QoS matrices, entity metadata, density splits and outlier filtering.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker for a missing observation in dense matrix text files.
pub const MISSING_SENTINEL: f64 = -1.0;

/// Added to the interquartile range so constant services do not divide by zero.
pub const IQR_EPSILON: f64 = 1e-9;

/// One observed `(user, service) → value` entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub user: usize,
    pub service: usize,
    pub value: f64,
}

impl Observation {
    pub fn new(user: usize, service: usize, value: f64) -> Self {
        Observation {
            user,
            service,
            value,
        }
    }

    pub fn key(&self) -> (usize, usize) {
        (self.user, self.service)
    }
}

/// Sparse user × service matrix of non-negative response times.
///
/// Entries are kept sorted row-major with unique keys.
#[derive(Debug, Clone, PartialEq)]
pub struct QosMatrix {
    n_users: usize,
    n_services: usize,
    entries: Vec<Observation>,
}

impl QosMatrix {
    pub fn new(n_users: usize, n_services: usize, mut entries: Vec<Observation>) -> Result<Self> {
        for e in &entries {
            if e.user >= n_users || e.service >= n_services {
                return Err(Error::Validation(format!(
                    "entry ({}, {}) outside a {n_users}x{n_services} matrix",
                    e.user, e.service
                )));
            }
            if !e.value.is_finite() || e.value < 0.0 {
                return Err(Error::Validation(format!(
                    "entry ({}, {}) has invalid value {}",
                    e.user, e.service, e.value
                )));
            }
        }
        entries.sort_by_key(Observation::key);
        if let Some(w) = entries.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(Error::Validation(format!(
                "duplicate entry ({}, {})",
                w[0].user, w[0].service
            )));
        }
        Ok(QosMatrix {
            n_users,
            n_services,
            entries,
        })
    }

    /// An empty matrix with the same dimensions.
    pub fn empty_like(&self) -> Self {
        QosMatrix {
            n_users: self.n_users,
            n_services: self.n_services,
            entries: Vec::new(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_services(&self) -> usize {
        self.n_services
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn get(&self, user: usize, service: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&(user, service), Observation::key)
            .ok()
            .map(|i| self.entries[i].value)
    }

    /// Observed values grouped by user (or by service).
    pub fn values_by(&self, kind: EntityKind) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.entity_count(kind)];
        for e in &self.entries {
            let idx = match kind {
                EntityKind::User => e.user,
                EntityKind::Service => e.service,
            };
            out[idx].push(e.value);
        }
        out
    }

    pub fn entity_count(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::User => self.n_users,
            EntityKind::Service => self.n_services,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.entries.is_empty())
            .then(|| self.entries.iter().map(|e| e.value).sum::<f64>() / self.entries.len() as f64)
    }

    /// Dense WS-DREAM text: one line per user, tab-separated, `-1` for missing.
    pub fn to_matrix_text(&self) -> String {
        let mut out = String::new();
        let mut it = self.entries.iter().peekable();
        for u in 0..self.n_users {
            for s in 0..self.n_services {
                if s > 0 {
                    out.push('\t');
                }
                match it.peek() {
                    Some(e) if e.key() == (u, s) => {
                        write!(out, "{}", e.value).expect("write to string");
                        it.next();
                    }
                    _ => write!(out, "{MISSING_SENTINEL}").expect("write to string"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    User,
    Service,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Service => "service",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixFormat {
    /// Dense whitespace-separated rows with `-1` for missing entries.
    #[default]
    MatrixText,
    /// Long format `user,service,value` with a header row.
    Csv,
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<QosMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = match format {
        MatrixFormat::MatrixText => parse_matrix_text(&text, path)?,
        MatrixFormat::Csv => parse_long_csv(&text, path)?,
    };
    log::info!(
        "loaded {}: {} users x {} services, {} observed",
        path.display(),
        m.n_users(),
        m.n_services(),
        m.len()
    );
    Ok(m)
}

pub fn save_matrix(path: &Path, m: &QosMatrix) -> Result<()> {
    fs::write(path, m.to_matrix_text()).map_err(|e| Error::io(path, e))
}

/// Parses the dense text layout. `origin` is only used in error messages.
pub fn parse_matrix_text(text: &str, origin: &Path) -> Result<QosMatrix> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut entries = Vec::new();
    let mut width = None;
    let mut n_users = 0;
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for (s, tok) in line.split_whitespace().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(lineno, format!("not a number: {tok:?}")))?;
            count += 1;
            if v == MISSING_SENTINEL {
                continue;
            }
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "{}: line {lineno}: invalid value {v}",
                    origin.display()
                )));
            }
            entries.push(Observation::new(n_users, s, v));
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(parse_err(
                    lineno,
                    format!("row has {count} values, expected {w}"),
                ))
            }
            _ => {}
        }
        n_users += 1;
    }
    let Some(n_services) = width else {
        return Err(parse_err(0, "no matrix rows".into()));
    };
    QosMatrix::new(n_users, n_services, entries)
}

fn parse_long_csv(text: &str, origin: &Path) -> Result<QosMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut entries = Vec::new();
    for (i, rec) in reader.deserialize::<Observation>().enumerate() {
        let obs = rec.map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        entries.push(obs);
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: "no entries".into(),
        });
    }
    let n_users = entries.iter().map(|e| e.user).max().unwrap_or(0) + 1;
    let n_services = entries.iter().map(|e| e.service).max().unwrap_or(0) + 1;
    QosMatrix::new(n_users, n_services, entries)
}

/// Region assignment for one user or service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMeta {
    pub entity_index: usize,
    /// Index into [`Metadata::vocab`]; 0 means unknown.
    pub region_index: usize,
    pub kind: EntityKind,
}

/// Entity regions plus the interned region vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub kind: EntityKind,
    pub entities: Vec<EntityMeta>,
    /// Region names; slot 0 is the reserved unknown region.
    pub vocab: Vec<String>,
}

impl Metadata {
    /// Metadata where every entity is in the unknown region.
    pub fn unknown(kind: EntityKind) -> Self {
        Metadata {
            kind,
            entities: Vec::new(),
            vocab: vec![String::new()],
        }
    }

    /// Interns `(index, region)` rows; blank regions map to index 0.
    pub fn from_rows<'a>(
        kind: EntityKind,
        rows: impl IntoIterator<Item = (usize, &'a str)>,
    ) -> Result<Self> {
        let mut vocab = vec![String::new()];
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        let mut entities = Vec::new();
        for (entity_index, region) in rows {
            if !seen.insert(entity_index) {
                return Err(Error::Validation(format!(
                    "duplicate {} index {entity_index}",
                    kind.as_str()
                )));
            }
            let region = region.trim();
            let region_index = if region.is_empty() {
                0
            } else {
                *lookup.entry(region.to_string()).or_insert_with(|| {
                    vocab.push(region.to_string());
                    vocab.len() - 1
                })
            };
            entities.push(EntityMeta {
                entity_index,
                region_index,
                kind,
            });
        }
        Ok(Metadata {
            kind,
            entities,
            vocab,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Region index per entity `0..n`, with 0 for entities not listed.
    pub fn region_indices(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for e in &self.entities {
            if e.entity_index < n {
                out[e.entity_index] = e.region_index;
            }
        }
        out
    }

    /// Writes the `index,region` CSV layout read by [`load_metadata`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,region\n");
        for e in &self.entities {
            let _ = writeln!(out, "{},{}", e.entity_index, self.vocab[e.region_index]);
        }
        out
    }
}

/// Reads entity regions from either an `index,region` CSV with a header
/// row or a WS-DREAM `userlist.txt`/`wslist.txt` (detected by a first line
/// starting with `[`).
pub fn load_metadata(path: &Path, kind: EntityKind) -> Result<Metadata> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        parse_wsdream_list(&text, path, kind)
    } else {
        parse_metadata_csv(&text, path, kind)
    }
}

fn parse_metadata_csv(text: &str, path: &Path, kind: EntityKind) -> Result<Metadata> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let index: usize = rec
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad entity index {:?}", rec.get(0).unwrap_or("")),
            })?;
        rows.push((index, rec.get(1).unwrap_or("").to_string()));
    }
    Metadata::from_rows(kind, rows.iter().map(|(i, r)| (*i, r.as_str())))
}

/// Tab-separated WS-DREAM entity list; the region is the `[Country]` column.
pub fn parse_wsdream_list(text: &str, path: &Path, kind: EntityKind) -> Result<Metadata> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(0, "empty entity list".into()))?;
    let country = header
        .split('\t')
        .position(|c| c.trim().eq_ignore_ascii_case("[country]"))
        .ok_or_else(|| parse_err(1, "no [Country] column".into()))?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim_start().starts_with('=') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let index = cols[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(i + 1, format!("bad entity index {:?}", cols[0])))?;
        let region = cols.get(country).map_or("", |c| c.trim());
        let region = if region == "null" { "" } else { region };
        rows.push((index, region.to_string()));
    }
    Metadata::from_rows(kind, rows.iter().map(|(i, r)| (*i, r.as_str())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of observed entries kept for training, in `(0, 1]`.
    pub density: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!(
                "density {} is outside (0, 1]",
                self.density
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: QosMatrix,
    pub test: QosMatrix,
}

/// Number of training entries for `n` observations at `density`.
pub fn train_count(n: usize, density: f64) -> usize {
    ((density * n as f64).round() as usize).min(n)
}

/// Seeded random partition of the observed entries into train and test.
///
/// The row-major entry list is Fisher–Yates shuffled with xoshiro256++ and
/// the first `round(density · n)` entries become the training matrix.
pub fn split_by_density(m: &QosMatrix, spec: SplitSpec) -> Result<Split> {
    spec.validate()?;
    if m.is_empty() {
        return Err(Error::Validation("cannot split an empty matrix".into()));
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        order.swap(i, j);
    }
    let n_train = train_count(m.len(), spec.density);
    let pick = |idx: &[usize]| {
        let mut v: Vec<Observation> = idx.iter().map(|&i| m.entries[i]).collect();
        v.sort_by_key(Observation::key);
        QosMatrix {
            n_users: m.n_users,
            n_services: m.n_services,
            entries: v,
        }
    };
    Ok(Split {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
    })
}

/// `ceil(fraction · n)`, ignoring floating-point noise right above an integer.
pub fn outlier_count(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierFilter {
    pub retained: QosMatrix,
    pub removed: Vec<Observation>,
}

/// Median and interquartile range of a non-empty slice (linear interpolation
/// between order statistics).
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    (q(0.5), q(0.75) - q(0.25))
}

/// Drops the `ceil(fraction · |test|)` most anomalous test entries.
///
/// An entry's score is `|q − median_s| / (IQR_s + ε)` where the median and
/// IQR come from service `s`'s values in `reference` (the training matrix in
/// the evaluation protocol). Services without reference values use the
/// statistics of all reference values. Ties go to the smaller
/// `(user, service)` key.
pub fn filter_outliers(test: &QosMatrix, reference: &QosMatrix, fraction: f64) -> Result<OutlierFilter> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "outlier fraction {fraction} is outside [0, 1)"
        )));
    }
    let n_remove = outlier_count(test.len(), fraction);
    if n_remove == 0 {
        return Ok(OutlierFilter {
            retained: test.clone(),
            removed: Vec::new(),
        });
    }
    if reference.is_empty() {
        return Err(Error::Validation(
            "outlier filtering needs a non-empty reference matrix".into(),
        ));
    }
    let all: Vec<f64> = reference.entries.iter().map(|e| e.value).collect();
    let global = median_iqr(&all);
    let per_service: Vec<Option<(f64, f64)>> = reference
        .values_by(EntityKind::Service)
        .iter()
        .map(|v| (!v.is_empty()).then(|| median_iqr(v)))
        .collect();

    let mut scored: Vec<(f64, usize)> = test
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (median, iqr) = per_service
                .get(e.service)
                .copied()
                .flatten()
                .unwrap_or(global);
            ((e.value - median).abs() / (iqr + IQR_EPSILON), i)
        })
        .collect();
    // Entries are row-major, so the position breaks ties by (user, service).
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut drop = vec![false; test.len()];
    for &(_, i) in &scored[..n_remove] {
        drop[i] = true;
    }
    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for (e, d) in test.entries.iter().zip(drop) {
        if d {
            removed.push(*e);
        } else {
            kept.push(*e);
        }
    }
    Ok(OutlierFilter {
        retained: QosMatrix {
            entries: kept,
            ..test.empty_like()
        },
        removed,
    })
}

/// Sidecar describing a written split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub density: f64,
    pub n_users: usize,
    pub n_services: usize,
    pub n_observed: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl SplitManifest {
    pub fn new(split: &Split, spec: SplitSpec) -> Self {
        SplitManifest {
            seed: spec.seed,
            density: spec.density,
            n_users: split.train.n_users,
            n_services: split.train.n_services,
            n_observed: split.train.len() + split.test.len(),
            n_train: split.train.len(),
            n_test: split.test.len(),
        }
    }
}

/// Long-format `user,service,value` CSV.
pub fn entries_to_csv(m: &QosMatrix) -> String {
    let mut out = String::from("user,service,value\n");
    for e in &m.entries {
        let _ = writeln!(out, "{},{},{}", e.user, e.service, e.value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn origin() -> PathBuf {
        PathBuf::from("<mem>")
    }

    fn matrix_of(n: usize) -> QosMatrix {
        let entries = (0..n).map(|i| Observation::new(i / 5, i % 5, i as f64)).collect();
        QosMatrix::new(n.div_ceil(5), 5, entries).unwrap()
    }

    #[test]
    fn parses_sentinel_text() {
        let m = parse_matrix_text("1.0 -1\n0.5 2.0", &origin()).unwrap();
        assert_eq!((m.n_users(), m.n_services(), m.len()), (2, 2, 3));
        assert_eq!(m.get(0, 0), Some(1.0));
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.get(1, 0), Some(0.5));
        assert_eq!(m.get(1, 1), Some(2.0));
    }

    #[test]
    fn empty_text_is_parse_error() {
        assert!(matches!(parse_matrix_text("", &origin()), Err(Error::Parse { .. })));
        assert!(matches!(parse_matrix_text("\n  \n", &origin()), Err(Error::Parse { .. })));
    }

    #[test]
    fn ragged_row_names_line() {
        let err = parse_matrix_text("1 2 3\n4 5\n", &origin()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_non_sentinel_is_validation_error() {
        let err = parse_matrix_text("1 -0.5\n", &origin()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(matches!(
            parse_matrix_text("1 -2\n", &origin()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn matrix_rejects_out_of_range_and_duplicates() {
        assert!(QosMatrix::new(1, 1, vec![Observation::new(1, 0, 1.0)]).is_err());
        assert!(QosMatrix::new(
            2,
            2,
            vec![Observation::new(0, 1, 1.0), Observation::new(0, 1, 2.0)]
        )
        .is_err());
        assert!(QosMatrix::new(1, 1, vec![Observation::new(0, 0, f64::NAN)]).is_err());
    }

    #[test]
    fn metadata_interns_in_first_appearance_order() {
        let m = Metadata::from_rows(EntityKind::User, [(0, "US"), (1, "DE"), (2, "US")]).unwrap();
        let idx: Vec<usize> = m.entities.iter().map(|e| e.region_index).collect();
        assert_eq!(idx, vec![1, 2, 1]);
        assert_eq!(m.vocab_size(), 3);
    }

    #[test]
    fn blank_region_is_reserved_index() {
        let m = Metadata::from_rows(EntityKind::Service, [(0, ""), (1, "  "), (2, "JP")]).unwrap();
        let idx: Vec<usize> = m.entities.iter().map(|e| e.region_index).collect();
        assert_eq!(idx, vec![0, 0, 1]);
        assert_eq!(m.region_indices(4), vec![0, 0, 1, 0]);
    }

    #[test]
    fn wsdream_list_uses_country_column() {
        let text = "[User ID]\t[IP Address]\t[Country]\t[AS]\n\
                    ====\t====\t====\t====\n\
                    0\t12.108.127.138\tUnited States\tAS7018\n\
                    1\t12.46.129.15\tnull\tAS2386\n\
                    2\t122.1.115.91\tJapan\tAS4713\n";
        let m = parse_wsdream_list(text, &origin(), EntityKind::User).unwrap();
        assert_eq!(m.region_indices(3), vec![1, 0, 2]);
        assert_eq!(m.vocab[1], "United States");
        let no_country = parse_wsdream_list("[User ID]\t[AS]\n0\tx\n", &origin(), EntityKind::User);
        assert!(matches!(no_country, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn metadata_file_formats_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("users.csv");
        fs::write(&csv, "index,region\n0,DE\n1,\n").unwrap();
        assert_eq!(load_metadata(&csv, EntityKind::User).unwrap().region_indices(2), vec![1, 0]);
        let txt = dir.path().join("userlist.txt");
        fs::write(&txt, "[User ID]\t[Country]\n0\tDE\n").unwrap();
        assert_eq!(load_metadata(&txt, EntityKind::User).unwrap().vocab, vec!["", "DE"]);
    }

    #[test]
    fn duplicate_entity_is_validation_error() {
        let err = Metadata::from_rows(EntityKind::User, [(0, "US"), (0, "DE")]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn split_sizes_follow_rounding() {
        let m = matrix_of(10);
        let s = split_by_density(&m, SplitSpec { density: 0.2, seed: 1 }).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (2, 8));

        let full = split_by_density(&m, SplitSpec { density: 1.0, seed: 1 }).unwrap();
        assert!(full.test.is_empty());
        assert_eq!(full.train, m);
    }

    #[test]
    fn split_rejects_bad_density() {
        let m = matrix_of(4);
        for density in [0.0, -0.1, 1.5, f64::NAN] {
            let err = split_by_density(&m, SplitSpec { density, seed: 0 }).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let m = matrix_of(200);
        let a = split_by_density(&m, SplitSpec { density: 0.3, seed: 9 }).unwrap();
        let b = split_by_density(&m, SplitSpec { density: 0.3, seed: 9 }).unwrap();
        let c = split_by_density(&m, SplitSpec { density: 0.3, seed: 10 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn outlier_count_ceil_rule() {
        assert_eq!(outlier_count(8, 0.1), 1);
        assert_eq!(outlier_count(10, 0.1), 1);
        assert_eq!(outlier_count(30, 0.1), 3);
        assert_eq!(outlier_count(31, 0.1), 4);
        assert_eq!(outlier_count(5, 0.0), 0);
    }

    #[test]
    fn filter_removes_obvious_outlier() {
        // Service 0: {1,1,1,1,100}. Median 1, IQR 0, so the scores are
        // 0,0,0,0 and 99/1e-9 — only the 100 entry stands out.
        let entries = [1.0, 1.0, 100.0, 1.0, 1.0]
            .iter()
            .enumerate()
            .map(|(u, &v)| Observation::new(u, 0, v))
            .collect();
        let m = QosMatrix::new(5, 1, entries).unwrap();
        let f = filter_outliers(&m, &m, 0.2).unwrap();
        assert_eq!(f.removed, vec![Observation::new(2, 0, 100.0)]);
        assert_eq!(f.retained.len(), 4);
    }

    #[test]
    fn filter_fraction_zero_is_identity() {
        let m = matrix_of(12);
        let f = filter_outliers(&m, &m, 0.0).unwrap();
        assert_eq!(f.retained, m);
        assert!(f.removed.is_empty());
    }

    #[test]
    fn filter_ceil_on_eight_entries() {
        let m = matrix_of(8);
        let f = filter_outliers(&m, &m, 0.1).unwrap();
        assert_eq!(f.removed.len(), 1);
        assert_eq!(f.retained.len(), 7);
    }

    #[test]
    fn filter_ties_prefer_smaller_key() {
        // All scores equal: the first row-major entry goes.
        let entries = (0..4).map(|u| Observation::new(u, 0, 2.0)).collect();
        let m = QosMatrix::new(4, 1, entries).unwrap();
        let f = filter_outliers(&m, &m, 0.25).unwrap();
        assert_eq!(f.removed[0].key(), (0, 0));
    }

    #[test]
    fn filter_rejects_fraction_one() {
        let m = matrix_of(3);
        assert!(matches!(filter_outliers(&m, &m, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn filter_falls_back_to_global_stats() {
        // Reference has no values for service 1.
        let reference = QosMatrix::new(
            3,
            2,
            vec![
                Observation::new(0, 0, 1.0),
                Observation::new(1, 0, 2.0),
                Observation::new(2, 0, 3.0),
            ],
        )
        .unwrap();
        let test = QosMatrix::new(
            3,
            2,
            vec![Observation::new(0, 1, 2.0), Observation::new(1, 1, 50.0)],
        )
        .unwrap();
        let f = filter_outliers(&test, &reference, 0.5).unwrap();
        assert_eq!(f.removed[0].key(), (1, 1));
    }

    #[test]
    fn median_iqr_interpolates() {
        let (med, iqr) = median_iqr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(med, 2.5);
        // q25 = 1.75, q75 = 3.25
        assert_eq!(iqr, 1.5);
    }

    #[test]
    fn text_round_trip_preserves_values() {
        let m = QosMatrix::new(
            2,
            3,
            vec![
                Observation::new(0, 2, 0.1 + 0.2),
                Observation::new(1, 0, 1e-7),
                Observation::new(1, 1, 0.0),
            ],
        )
        .unwrap();
        let back = parse_matrix_text(&m.to_matrix_text(), &origin()).unwrap();
        assert_eq!(back, m);
    }
}
