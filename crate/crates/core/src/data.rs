//! Observed data `(X, A, Y)` with an optional sensitive attribute, CSV
//! ingestion and the random partitions used by cross-fitting and
//! train/test evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, Rows, StreamTag};

/// Observed sample. Immutable after construction.
///
/// The *unit row* of a unit is `[s, x_1, …, x_p]` when a sensitive
/// attribute is present and `[x_1, …, x_p]` otherwise; feature maps and
/// nuisance learners index into unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Rows,
    a: Vec<u8>,
    y: Vec<f64>,
    s: Option<Vec<u32>>,
    n_groups: usize,
    column_names: Option<Vec<String>>,
}

impl Dataset {
    /// Validating constructor. `x` must have `a.len()` rows.
    pub fn new(
        x: Rows,
        a: Vec<u8>,
        y: Vec<f64>,
        s: Option<Vec<u32>>,
        column_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let ds = Self::assemble(x, a, y, s, column_names)?;
        if let Some(s) = &ds.s {
            if ds.n_groups < 2 {
                return Err(Error::InvalidData(
                    "sensitive attribute needs at least two groups".into(),
                ));
            }
            let mut seen = vec![false; ds.n_groups];
            for &g in s {
                seen[g as usize] = true;
            }
            if let Some(g) = seen.iter().position(|&v| !v) {
                return Err(Error::EmptyGroup(g));
            }
        }
        Ok(ds)
    }

    /// Shape and value checks shared by [`Dataset::new`] and row subsets.
    /// Subsets keep the parent's group count even if a group is absent.
    fn assemble(
        x: Rows,
        a: Vec<u8>,
        y: Vec<f64>,
        s: Option<Vec<u32>>,
        column_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = a.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        if let Some((i, v)) = a.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::TreatmentOutOfRange {
                column: "a".into(),
                row: i + 1,
                value: v.to_string(),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                column: "y".into(),
                row: i + 1,
            });
        }
        if let Some(i) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                column: format!("x{}", i % x.width().max(1) + 1),
                row: i / x.width().max(1) + 1,
            });
        }
        let n_groups = match &s {
            Some(s) => {
                if s.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: s.len(),
                    });
                }
                s.iter().max().map_or(0, |&m| m as usize + 1)
            }
            None => 0,
        };
        if let Some(names) = &column_names {
            if names.len() != x.width() {
                return Err(Error::DimensionMismatch {
                    expected: x.width(),
                    got: names.len(),
                });
            }
        }
        Ok(Self {
            x,
            a,
            y,
            s,
            n_groups,
            column_names,
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn p(&self) -> usize {
        self.x.width()
    }

    pub fn x(&self) -> &Rows {
        &self.x
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn s(&self) -> Option<&[u32]> {
        self.s.as_deref()
    }

    /// Number of sensitive groups `G` (0 without a sensitive attribute).
    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    pub fn n_arm(&self, arm: u8) -> usize {
        self.a.iter().filter(|&&v| v == arm).count()
    }

    /// Width of a unit row.
    pub fn unit_width(&self) -> usize {
        self.p() + usize::from(self.s.is_some())
    }

    /// Names of the unit-row columns: `s` (if present) then the covariates.
    pub fn unit_column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.unit_width());
        if self.s.is_some() {
            names.push("s".to_string());
        }
        match &self.column_names {
            Some(c) => names.extend(c.iter().cloned()),
            None => names.extend((1..=self.p()).map(|j| format!("x{j}"))),
        }
        names
    }

    /// All unit rows as a matrix.
    pub fn unit_rows(&self) -> Rows {
        let w = self.unit_width();
        let mut data = Vec::with_capacity(self.n() * w);
        for i in 0..self.n() {
            if let Some(s) = &self.s {
                data.push(f64::from(s[i]));
            }
            data.extend_from_slice(self.x.row(i));
        }
        Rows::new(data, w)
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Self::assemble(
            self.x.select(idx),
            idx.iter().map(|&i| self.a[i]).collect(),
            idx.iter().map(|&i| self.y[i]).collect(),
            self.s.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
            self.column_names.clone(),
        )
        .expect("subset of a valid dataset is valid");
        out.n_groups = self.n_groups;
        out
    }

    /// Copy with a replaced outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Dataset> {
        let mut out = Self::assemble(
            self.x.clone(),
            self.a.clone(),
            y,
            self.s.clone(),
            self.column_names.clone(),
        )?;
        out.n_groups = self.n_groups;
        Ok(out)
    }

    /// Writes the dataset as CSV with columns `y,a[,s],<covariates>`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_csv_to(&mut w, &[])?;
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    /// Writes header plus rows, appending `extra` columns (name, values).
    pub fn write_csv_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>, extra: &[(&str, &[f64])]) -> Result<()> {
        let mut header = vec!["y".to_string(), "a".to_string()];
        header.extend(self.unit_column_names());
        header.extend(extra.iter().map(|(n, _)| n.to_string()));
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            rec.clear();
            rec.push(self.y[i].to_string());
            rec.push(self.a[i].to_string());
            if let Some(s) = &self.s {
                rec.push(s[i].to_string());
            }
            rec.extend(self.x.row(i).iter().map(f64::to_string));
            rec.extend(extra.iter().map(|(_, v)| v[i].to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    }
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub sensitive: Option<String>,
    /// Covariate columns; empty means every column not otherwise assigned
    /// and not listed in `ignore`.
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub ignore: Vec<String>,
}

impl CsvSchema {
    pub fn new(outcome: &str, treatment: &str) -> Self {
        Self {
            outcome: outcome.into(),
            treatment: treatment.into(),
            sensitive: None,
            covariates: Vec::new(),
            ignore: Vec::new(),
        }
    }
}

/// Loads and validates a dataset. Lines starting with `#` are metadata and
/// skipped. Sensitive codes are re-indexed densely in ascending numeric
/// order.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_csv_from(file, schema)
}

pub fn load_csv_from<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = col(&schema.outcome)?;
    let a_col = col(&schema.treatment)?;
    let s_col = schema.sensitive.as_deref().map(col).transpose()?;
    let x_names: Vec<String> = if schema.covariates.is_empty() {
        headers
            .iter()
            .filter(|h| {
                **h != schema.outcome
                    && **h != schema.treatment
                    && Some(h.as_str()) != schema.sensitive.as_deref()
                    && !schema.ignore.contains(h)
            })
            .cloned()
            .collect()
    } else {
        schema.covariates.clone()
    };
    if x_names.is_empty() {
        return Err(Error::InvalidData("no covariate columns".into()));
    }
    let x_cols = x_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;

    let parse = |rec: &csv::StringRecord, c: usize, row: usize| -> Result<f64> {
        let raw = rec.get(c).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| Error::NonNumeric {
            column: headers[c].clone(),
            row,
            value: raw.to_string(),
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                column: headers[c].clone(),
                row,
            });
        }
        Ok(v)
    };

    let (mut xs, mut a, mut y, mut s_raw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        y.push(parse(&rec, y_col, row)?);
        let av = parse(&rec, a_col, row)?;
        if av != 0.0 && av != 1.0 {
            return Err(Error::TreatmentOutOfRange {
                column: headers[a_col].clone(),
                row,
                value: rec.get(a_col).unwrap_or("").to_string(),
            });
        }
        a.push(av as u8);
        if let Some(c) = s_col {
            s_raw.push(parse(&rec, c, row)?);
        }
        for &c in &x_cols {
            xs.push(parse(&rec, c, row)?);
        }
    }
    if a.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let s = s_col.map(|_| reindex_groups(&s_raw));
    Dataset::new(Rows::new(xs, x_cols.len()), a, y, s, Some(x_names))
}

/// Dense 0-based codes in ascending order of the raw values.
fn reindex_groups(raw: &[f64]) -> Vec<u32> {
    let mut codes: BTreeMap<u64, u32> = BTreeMap::new();
    let key = |v: f64| {
        // total order on finite floats
        let b = v.to_bits();
        if v.is_sign_negative() {
            !b
        } else {
            b | (1 << 63)
        }
    };
    for &v in raw {
        codes.entry(key(v)).or_insert(0);
    }
    for (code, slot) in codes.values_mut().enumerate() {
        *slot = code as u32;
    }
    raw.iter().map(|&v| codes[&key(v)]).collect()
}

/// Assignment of units to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n: usize,
    pub k: usize,
    pub fold_of: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    /// Builds from an explicit labelling (labels in `0..k`, all folds nonempty).
    pub fn from_labels(fold_of: Vec<usize>, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("fold count must be at least 2"));
        }
        let mut sizes = vec![0usize; k];
        for &f in &fold_of {
            if f >= k {
                return Err(Error::invalid(format!("fold label {f} out of range 0..{k}")));
            }
            sizes[f] += 1;
        }
        if let Some(f) = sizes.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("fold {f} is empty")));
        }
        Ok(Self {
            n: fold_of.len(),
            k,
            fold_of,
            seed,
        })
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Indices of every unit outside `fold`, in ascending order.
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Uniformly shuffled, balanced fold assignment.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count {k} < 2")));
    }
    if k > n {
        return Err(Error::invalid(format!("fold count {k} exceeds n = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut numeric::stream(seed, StreamTag::Folds, 0));
    let mut fold_of = vec![0; n];
    for (j, &i) in perm.iter().enumerate() {
        fold_of[i] = j % k;
    }
    FoldAssignment::from_labels(fold_of, k, seed)
}

/// Random disjoint split into `n_train` and `n - n_train` rows; each part
/// keeps the original row order.
pub fn split_train_test(ds: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.n();
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "n_train = {n_train} must satisfy 1 <= n_train < n = {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut numeric::stream(seed, StreamTag::Split, 0));
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_yax() -> CsvSchema {
        CsvSchema::new("y", "a")
    }

    #[test]
    fn parses_three_row_csv() {
        let csv = "y,a,x1\n1.0,1,0.2\n2.0,0,0.4\n3.0,1,0.6\n";
        let ds = load_csv_from(csv.as_bytes(), &schema_yax()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.p(), 1);
        assert_eq!(ds.a(), &[1, 0, 1]);
        assert_eq!(ds.y(), &[1.0, 2.0, 3.0]);
        assert_eq!(ds.x().row(2), &[0.6]);
    }

    #[test]
    fn rejects_treatment_outside_binary() {
        let csv = "y,a,x1\n1.0,1,0.2\n2.0,2,0.4\n3.0,1,0.6\n";
        let err = load_csv_from(csv.as_bytes(), &schema_yax()).unwrap_err();
        assert!(matches!(err, Error::TreatmentOutOfRange { row: 2, .. }), "{err}");
        assert!(err.to_string().contains("treatment outside {0,1}"));
    }

    #[test]
    fn reindexes_sensitive_codes() {
        let csv = "y,a,s,x1\n1,1,3,0.1\n2,0,1,0.2\n3,1,3,0.3\n";
        let mut schema = schema_yax();
        schema.sensitive = Some("s".into());
        let ds = load_csv_from(csv.as_bytes(), &schema).unwrap();
        assert_eq!(ds.s().unwrap(), &[1, 0, 1]);
        assert_eq!(ds.n_groups(), 2);
        assert_eq!(ds.p(), 1);
        assert_eq!(ds.unit_rows().row(0), &[1.0, 0.1]);
    }

    #[test]
    fn rejects_bad_cells() {
        for csv in [
            "y,a,x1\n1.0,1,abc\n",
            "y,a,x1\nNaN,1,0.1\n",
            "y,a,x1\n1.0,1,inf\n",
            "y,a,x1\n",
        ] {
            assert!(load_csv_from(csv.as_bytes(), &schema_yax()).is_err(), "{csv}");
        }
        let err = load_csv(Path::new("/nonexistent/file.csv"), &schema_yax()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn skips_metadata_lines() {
        let csv = "# {\"version\":\"x\"}\ny,a,x1\n1.0,1,0.2\n";
        assert_eq!(load_csv_from(csv.as_bytes(), &schema_yax()).unwrap().n(), 1);
    }

    #[test]
    fn folds_are_balanced() {
        let f = make_folds(4, 2, 7).unwrap();
        assert_eq!(f.sizes(), vec![2, 2]);
        let f = make_folds(5, 2, 7).unwrap();
        let mut sizes = f.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 3]);
        assert!(make_folds(3, 4, 0).is_err());
        assert!(make_folds(3, 1, 0).is_err());
        assert_eq!(make_folds(50, 5, 3).unwrap(), make_folds(50, 5, 3).unwrap());
    }

    fn toy(n: usize) -> Dataset {
        let x = Rows::new((0..n).map(|i| i as f64).collect(), 1);
        let a = (0..n).map(|i| (i % 2) as u8).collect();
        let y = (0..n).map(|i| i as f64 * 10.0).collect();
        Dataset::new(x, a, y, None, None).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = toy(10);
        let (tr, te) = split_train_test(&ds, 7, 1).unwrap();
        assert_eq!((tr.n(), te.n()), (7, 3));
        let (tr2, te2) = split_train_test(&ds, 7, 1).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        assert!(split_train_test(&ds, 10, 1).is_err());
        assert!(split_train_test(&ds, 0, 1).is_err());
    }
}
