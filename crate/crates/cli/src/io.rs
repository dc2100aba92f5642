use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use ipslearn::constraints::{ConstraintKind, ConstraintSpec};
use ipslearn::data::{load_csv_from, CsvSchema, Dataset};
use ipslearn::nuisance::LearnerSpec;
use ipslearn::Error;
use serde::Serialize;

use crate::{ConstraintArgs, Failure, SchemaArgs};

/// Columns written by `simulate` that are never covariates.
const ORACLE_COLUMNS: [&str; 3] = ["y0", "y1", "true_pi"];

pub type CliResult<T> = std::result::Result<T, Failure>;

pub trait Classify<T> {
    fn usage(self) -> CliResult<T>;
    fn internal(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn internal(self) -> CliResult<T> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

/// Library errors split by cause: bad input is a usage error, numerical
/// breakdown is internal.
pub fn classify(e: Error) -> Failure {
    let internal = match &e {
        Error::Singular(_) => true,
        Error::Fold { source, .. } => matches!(**source, Error::Singular(_)),
        _ => false,
    };
    if internal {
        Failure::Internal(e.into())
    } else {
        Failure::Usage(e.into())
    }
}

pub fn lib<T>(r: ipslearn::Result<T>) -> CliResult<T> {
    r.map_err(classify)
}

/// Provenance record written at the top of every output.
#[derive(Debug, Serialize)]
pub struct Metadata<'a, C: Serialize> {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: &'a C,
}

impl<'a, C: Serialize> Metadata<'a, C> {
    pub fn new(command: &'static str, seed: u64, config: &'a C) -> Self {
        Self {
            artifact: "ipslearn",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
        }
    }

    pub fn comment_line(&self) -> CliResult<String> {
        Ok(format!("# metadata: {}\n", serde_json::to_string(self).internal()?))
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .usage()
}

fn header_of(text: &str) -> CliResult<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    Ok(rdr.headers().usage()?.iter().map(str::to_string).collect())
}

/// Resolves schema flags against the file header.
pub fn schema_for(header: &[String], args: &SchemaArgs) -> CsvSchema {
    let mut schema = CsvSchema::new(&args.outcome, &args.treatment);
    schema.sensitive = if args.no_sensitive {
        None
    } else {
        args.sensitive
            .clone()
            .or_else(|| header.iter().any(|h| h == "s").then(|| "s".to_string()))
    };
    schema.covariates = args.covariates.clone();
    schema.ignore = args.ignore.clone();
    for c in ORACLE_COLUMNS {
        if header.iter().any(|h| h == c) && !schema.ignore.iter().any(|i| i == c) {
            schema.ignore.push(c.to_string());
        }
    }
    if args.no_sensitive && header.iter().any(|h| h == "s") {
        schema.ignore.push("s".into());
    }
    schema
}

pub fn load_data(path: &Path, args: &SchemaArgs) -> CliResult<(Dataset, CsvSchema)> {
    let text = read_text(path)?;
    let schema = schema_for(&header_of(&text)?, args);
    let ds = load_csv_from(text.as_bytes(), &schema)
        .with_context(|| format!("loading {}", path.display()))
        .usage()?;
    Ok((ds, schema))
}

/// Like [`load_data`], but an absent outcome column is filled with zeros
/// (covariate files for the semi-synthetic formulas carry no outcome).
pub fn load_covariates(path: &Path, args: &SchemaArgs) -> CliResult<(Dataset, CsvSchema)> {
    let text = read_text(path)?;
    let header = header_of(&text)?;
    if header.contains(&args.outcome) {
        return load_data(path, args);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = header.clone();
    head.push(args.outcome.clone());
    w.write_record(&head).internal()?;
    for rec in rdr.records() {
        let mut rec: Vec<String> = rec.usage()?.iter().map(str::to_string).collect();
        rec.push("0".into());
        w.write_record(&rec).internal()?;
    }
    let buf = w.into_inner().map_err(|e| anyhow!("{e}")).internal()?;
    let schema = schema_for(&head, args);
    let ds = load_csv_from(buf.as_slice(), &schema)
        .with_context(|| format!("loading {}", path.display()))
        .usage()?;
    Ok((ds, schema))
}

/// A learner name or a JSON spec file.
pub fn learner(arg: &str) -> CliResult<LearnerSpec> {
    let spec = if arg.ends_with(".json") {
        let text = read_text(Path::new(arg))?;
        serde_json::from_str(&text)
            .with_context(|| format!("learner spec {arg}"))
            .usage()?
    } else {
        lib(LearnerSpec::from_name(arg))?
    };
    lib(spec.validate())?;
    Ok(spec)
}

/// Applies constraint flags on top of `base`.
pub fn constraint(args: &ConstraintArgs, base: ConstraintSpec) -> CliResult<ConstraintSpec> {
    let mut spec = base;
    if let Some(kind) = &args.constraint {
        spec.kind = lib(ConstraintKind::parse(kind))?;
        if spec.kind != ConstraintKind::Quantile {
            spec.tau = None;
        }
    }
    if let Some(t) = args.threshold {
        spec.threshold = t;
    }
    if let Some(tau) = args.quantile_tau {
        spec.tau = Some(tau);
    }
    lib(spec.validate())?;
    Ok(spec)
}

/// Output sink: a file, or stdout for `None` and `-`.
pub struct Sink {
    path: Option<PathBuf>,
    buf: Vec<u8>,
}

impl Sink {
    pub fn new(path: Option<&Path>) -> Self {
        Self {
            path: path.filter(|p| p.as_os_str() != "-").map(Path::to_path_buf),
            buf: Vec::new(),
        }
    }

    pub fn buffer(&mut self) -> &mut Vec<u8> {
        &mut self.buf
    }

    pub fn finish(self) -> CliResult<()> {
        match self.path {
            Some(p) => fs::write(&p, &self.buf)
                .with_context(|| format!("cannot write {}", p.display()))
                .internal(),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(&self.buf).and_then(|()| out.flush()).internal()
            }
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).internal()?;
    v.push(b'\n');
    Ok(v)
}
