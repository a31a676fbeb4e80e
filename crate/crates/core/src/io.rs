//! Files: observation CSVs, density CSVs, model files and configuration.
//!
//! Every writer goes through a temporary file in the destination directory
//! followed by a rename, so readers never see partial output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::Functional;
use crate::density::{Kernel, RawPanel};
use crate::error::{Error, Result};
use crate::far::FarModel;
use crate::function_space::{EigenSystem, GridFunction, GridHeader, GridSpec, OperatorRep};
use crate::simulation::KChoice;

const MODEL_MAGIC: &[u8; 8] = b"FDARMDL1";
const MODEL_VERSION: u32 = 1;
const JSON_FORMAT_TAG: &str = "fdar-model";

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = parent_dir(path);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Serializes rows into CSV text.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::invalid(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(io_err)?;
    for row in rows {
        w.write_record(row).map_err(io_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, csv_string(header, rows)?.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(format!("json encoding failed: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, column: usize, reason: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, column, reason: reason.into() }
}

/// Reads a two-column `period,value` CSV into a panel.
pub fn read_observations(path: &Path) -> Result<RawPanel> {
    let bytes = read_bytes(path)?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(bytes.as_slice());
    let mut records = reader.records();
    let header = records.next().expect("nonempty input").map_err(|e| parse_err(path, 1, 1, e.to_string()))?;
    let names: Vec<&str> = header.iter().collect();
    if names != ["period", "value"] {
        return Err(parse_err(path, 1, 1, format!("expected header 'period,value', found '{}'", names.join(","))));
    }
    let mut pairs = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, 1, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 2 {
            return Err(parse_err(path, line, record.len().min(2) + 1, format!("expected 2 fields, found {}", record.len())));
        }
        let label = &record[0];
        if label.is_empty() {
            return Err(parse_err(path, line, 1, "empty period label"));
        }
        let value: f64 = record[1].parse().map_err(|_| parse_err(path, line, 2, format!("'{}' is not a number", &record[1])))?;
        if !value.is_finite() {
            return Err(parse_err(path, line, 2, "value is not finite"));
        }
        pairs.push((label.to_string(), value));
    }
    RawPanel::from_pairs(pairs)
}

/// Writes observations as `period,value` rows.
pub fn write_observations(path: &Path, blocks: &[(String, Vec<f64>)]) -> Result<()> {
    let rows: Vec<Vec<String>> =
        blocks.iter().flat_map(|(label, values)| values.iter().map(move |v| vec![label.clone(), fmt_f64(*v)])).collect();
    write_csv(path, &["period", "value"], &rows)
}

/// Reads an `x,density` CSV whose abscissae form a uniform grid.
pub fn read_density(path: &Path) -> Result<GridFunction> {
    let bytes = read_bytes(path)?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_reader(bytes.as_slice());
    let mut records = reader.records();
    let header = records.next().expect("nonempty input").map_err(|e| parse_err(path, 1, 1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["x", "density"] {
        return Err(parse_err(path, 1, 1, "expected header 'x,density'"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in records {
        let record = record.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line() as usize), 1, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 2 {
            return Err(parse_err(path, line, record.len().min(2) + 1, format!("expected 2 fields, found {}", record.len())));
        }
        for (col, out) in [(0, &mut xs), (1, &mut ys)] {
            let v: f64 =
                record[col].parse().map_err(|_| parse_err(path, line, col + 1, format!("'{}' is not a number", &record[col])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, col + 1, "value is not finite"));
            }
            out.push(v);
        }
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::GridTooSmall { n, min: crate::function_space::MIN_GRID_POINTS });
    }
    let grid = GridSpec::uniform(xs[0], xs[n - 1], n)?;
    let tol = 1e-9 * grid.length();
    if let Some(i) = xs.iter().zip(grid.points()).position(|(x, p)| (x - p).abs() > tol) {
        return Err(parse_err(path, i + 2, 1, "abscissae are not equally spaced"));
    }
    GridFunction::new(grid, ys)
}

pub fn write_density(path: &Path, f: &GridFunction) -> Result<()> {
    let rows: Vec<Vec<String>> = f.grid().points().iter().zip(f.values()).map(|(x, y)| vec![fmt_f64(*x), fmt_f64(*y)]).collect();
    write_csv(path, &["x", "density"], &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFormat {
    #[default]
    Binary,
    Json,
}

impl std::str::FromStr for ModelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(ModelFormat::Binary),
            "json" => Ok(ModelFormat::Json),
            _ => Err(Error::invalid(format!("unknown model format '{s}'"))),
        }
    }
}

impl ModelFormat {
    /// Picks the format from a file extension, defaulting to binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ModelFormat::Json,
            _ => ModelFormat::Binary,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format: String,
    version: u32,
    grid: GridHeader,
    k: usize,
    sample_size: usize,
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// One eigenfunction per entry.
    eigenfunctions: Vec<Vec<f64>>,
    operator: Vec<Vec<f64>>,
    noise_covariance: Vec<Vec<f64>>,
    covariance: Vec<Vec<f64>>,
    cross_covariance: Vec<Vec<f64>>,
    residuals: Vec<Vec<f64>>,
    first_state: Vec<f64>,
    last_state: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format { offset: 0, reason: format!("{what} must be {n}x{n}") });
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Raw model contents before validation.
struct ModelParts {
    header: GridHeader,
    k: usize,
    sample_size: usize,
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    operator: DMatrix<f64>,
    noise_covariance: DMatrix<f64>,
    covariance: DMatrix<f64>,
    cross_covariance: DMatrix<f64>,
    residuals: Vec<Vec<f64>>,
    first_state: Vec<f64>,
    last_state: Vec<f64>,
}

impl ModelParts {
    fn of(model: &FarModel) -> Self {
        Self {
            header: model.grid().header(),
            k: model.k(),
            sample_size: model.sample_size(),
            mean: model.mean().values().to_vec(),
            eigenvalues: model.eigen().eigenvalues().to_vec(),
            eigenvectors: model.eigen().vectors().clone(),
            operator: model.operator().kernel().clone(),
            noise_covariance: model.noise_covariance().kernel().clone(),
            covariance: model.covariance().kernel().clone(),
            cross_covariance: model.cross_covariance().kernel().clone(),
            residuals: model.residuals().iter().map(|r| r.values().to_vec()).collect(),
            first_state: model.first_state().values().to_vec(),
            last_state: model.last_state().values().to_vec(),
        }
    }

    fn into_model(self) -> Result<FarModel> {
        let grid = GridSpec::from_header(self.header)?;
        let n = grid.n();
        if self.k == 0 || self.k > n {
            return Err(Error::Format { offset: 0, reason: format!("truncation level {} is outside 1..={n}", self.k) });
        }
        if self.residuals.len() + 1 != self.sample_size {
            return Err(Error::Format { offset: 0, reason: "residual count must be one less than the sample size".into() });
        }
        let func = |v: Vec<f64>| GridFunction::new(grid.clone(), v);
        let op = |m: DMatrix<f64>| OperatorRep::new(grid.clone(), m);
        Ok(FarModel {
            grid: grid.clone(),
            mean: func(self.mean)?,
            eigen: EigenSystem::from_parts(grid.clone(), self.eigenvalues, self.eigenvectors)?,
            k: self.k,
            a_hat: op(self.operator)?,
            q_hat: op(self.covariance)?,
            p_hat: op(self.cross_covariance)?,
            sigma_hat: op(self.noise_covariance)?,
            residuals: self.residuals.into_iter().map(func).collect::<Result<_>>()?,
            sample_size: self.sample_size,
            first_state: func(self.first_state)?,
            last_state: func(self.last_state)?,
        })
    }
}

fn encode_json(model: &FarModel) -> Result<Vec<u8>> {
    let p = ModelParts::of(model);
    let n = p.header.n;
    let doc = ModelDocument {
        format: JSON_FORMAT_TAG.into(),
        version: MODEL_VERSION,
        grid: p.header,
        k: p.k,
        sample_size: p.sample_size,
        mean: p.mean,
        eigenvalues: p.eigenvalues,
        eigenfunctions: (0..n).map(|k| p.eigenvectors.column(k).iter().copied().collect()).collect(),
        operator: rows_of(&p.operator),
        noise_covariance: rows_of(&p.noise_covariance),
        covariance: rows_of(&p.covariance),
        cross_covariance: rows_of(&p.cross_covariance),
        residuals: p.residuals,
        first_state: p.first_state,
        last_state: p.last_state,
    };
    serde_json::to_vec(&doc).map_err(|e| Error::invalid(format!("json encoding failed: {e}")))
}

fn decode_json(bytes: &[u8]) -> Result<FarModel> {
    let doc: ModelDocument = serde_json::from_slice(bytes).map_err(|e| Error::Format { offset: 0, reason: e.to_string() })?;
    if doc.format != JSON_FORMAT_TAG || doc.version != MODEL_VERSION {
        return Err(Error::Format { offset: 0, reason: format!("unsupported model document {} v{}", doc.format, doc.version) });
    }
    let n = doc.grid.n;
    if doc.eigenfunctions.len() != n || doc.eigenfunctions.iter().any(|c| c.len() != n) {
        return Err(Error::Format { offset: 0, reason: format!("eigenfunctions must be {n} vectors of length {n}") });
    }
    ModelParts {
        header: doc.grid,
        k: doc.k,
        sample_size: doc.sample_size,
        mean: doc.mean,
        eigenvalues: doc.eigenvalues,
        eigenvectors: DMatrix::from_fn(n, n, |i, k| doc.eigenfunctions[k][i]),
        operator: matrix_from_rows(&doc.operator, n, "operator")?,
        noise_covariance: matrix_from_rows(&doc.noise_covariance, n, "noise covariance")?,
        covariance: matrix_from_rows(&doc.covariance, n, "covariance")?,
        cross_covariance: matrix_from_rows(&doc.cross_covariance, n, "cross covariance")?,
        residuals: doc.residuals,
        first_state: doc.first_state,
        last_state: doc.last_state,
    }
    .into_model()
}

/// Binary layout, all little-endian: magic, u32 version, f64 a, f64 b,
/// u64 n, u64 K, u64 T, u64 residual count, then f64 blocks for the mean,
/// eigenvalues, eigenvectors (column by column), the operator, noise
/// covariance, covariance and cross covariance (row-major), the residuals,
/// and the first and last states.
fn encode_binary(model: &FarModel) -> Vec<u8> {
    let p = ModelParts::of(model);
    let n = p.header.n;
    let mut out = Vec::with_capacity(64 + 8 * n * (5 * n + p.residuals.len() + 4));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&p.header.a.to_le_bytes());
    out.extend_from_slice(&p.header.b.to_le_bytes());
    for v in [n, p.k, p.sample_size, p.residuals.len()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let mut put = |vals: &mut dyn Iterator<Item = f64>| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&mut p.mean.iter().copied());
    put(&mut p.eigenvalues.iter().copied());
    put(&mut p.eigenvectors.iter().copied());
    for m in [&p.operator, &p.noise_covariance, &p.covariance, &p.cross_covariance] {
        put(&mut m.transpose().iter().copied());
    }
    for r in &p.residuals {
        put(&mut r.iter().copied());
    }
    put(&mut p.first_state.iter().copied());
    put(&mut p.last_state.iter().copied());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format {
                offset: self.bytes.len(),
                reason: format!("unexpected end of file, needed {len} more bytes at {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format { offset: at, reason: format!("count {v} does not fit in memory") })
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        let raw = self.take(len * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn decode_binary(bytes: &[u8]) -> Result<FarModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MODEL_MAGIC {
        return Err(Error::Format { offset: 0, reason: "bad magic number".into() });
    }
    let version = c.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format { offset: 8, reason: format!("unsupported version {version}") });
    }
    let a = c.f64()?;
    let b = c.f64()?;
    let n = c.u64()?;
    let k = c.u64()?;
    let sample_size = c.u64()?;
    let n_resid = c.u64()?;
    let header_end = c.pos;
    let expected = n
        .checked_mul(n)
        .and_then(|nn| nn.checked_mul(5))
        .and_then(|v| v.checked_add(n.checked_mul(n_resid.checked_add(4)?)?))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format { offset: header_end, reason: "dimensions overflow".into() })?;
    let available = bytes.len() - header_end;
    if available < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            reason: format!("truncated: expected {expected} payload bytes, found {available}"),
        });
    }
    if available > expected {
        return Err(Error::Format { offset: header_end + expected, reason: "trailing bytes after model".into() });
    }
    let mean = c.f64s(n)?;
    let eigenvalues = c.f64s(n)?;
    let eigenvectors = DMatrix::from_vec(n, n, c.f64s(n * n)?);
    let mut row_major = || -> Result<DMatrix<f64>> { Ok(DMatrix::from_row_slice(n, n, &c.f64s(n * n)?)) };
    let operator = row_major()?;
    let noise_covariance = row_major()?;
    let covariance = row_major()?;
    let cross_covariance = row_major()?;
    let residuals = (0..n_resid).map(|_| c.f64s(n)).collect::<Result<_>>()?;
    let first_state = c.f64s(n)?;
    let last_state = c.f64s(n)?;
    ModelParts {
        header: GridHeader { a, b, n },
        k,
        sample_size,
        mean,
        eigenvalues,
        eigenvectors,
        operator,
        noise_covariance,
        covariance,
        cross_covariance,
        residuals,
        first_state,
        last_state,
    }
    .into_model()
}

pub fn encode_model(model: &FarModel, format: ModelFormat) -> Result<Vec<u8>> {
    match format {
        ModelFormat::Binary => Ok(encode_binary(model)),
        ModelFormat::Json => encode_json(model),
    }
}

/// Decodes either encoding, recognized by the binary magic number.
pub fn decode_model(bytes: &[u8]) -> Result<FarModel> {
    if bytes.starts_with(MODEL_MAGIC) {
        decode_binary(bytes)
    } else if bytes.first().is_some_and(|b| *b == b'{') {
        decode_json(bytes)
    } else {
        decode_binary(bytes)
    }
}

pub fn save_model(model: &FarModel, path: &Path, format: ModelFormat) -> Result<()> {
    write_atomic(path, &encode_model(model, format)?)
}

pub fn load_model(path: &Path) -> Result<FarModel> {
    let bytes = read_bytes(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    decode_model(&bytes)
}

/// Parses a JSON or TOML document, chosen by file extension.
pub fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, 1, "config is not valid UTF-8"))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(&text, s.start));
            parse_err(path, line, column, e.message().to_string())
        }),
        _ => serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.column(), e.to_string())),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Explicit support; when absent the support is chosen from the data.
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default = "default_grid_n")]
    pub n: usize,
    #[serde(default = "default_coverage")]
    pub coverage: f64,
}

fn default_grid_n() -> usize {
    crate::function_space::DEFAULT_GRID_POINTS
}

fn default_coverage() -> f64 {
    0.999
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { a: None, b: None, n: default_grid_n(), coverage: default_coverage() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default)]
    pub functionals: Vec<Functional>,
    #[serde(default = "default_kmax")]
    pub decomposition_kmax: usize,
}

fn default_features() -> usize {
    3
}

fn default_kmax() -> usize {
    4
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { features: default_features(), functionals: Vec::new(), decomposition_kmax: default_kmax() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replications: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.05
}

/// End-to-end pipeline description for `fdar run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default)]
    pub k: KChoice,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub model_format: ModelFormat,
}

impl PipelineConfig {
    /// Loads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_config(path)?;
        let base = parent_dir(path);
        if cfg.input.is_relative() {
            cfg.input = base.join(&cfg.input);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.input.is_file() {
            return Err(Error::invalid(format!("input file {} does not exist", self.input.display())));
        }
        match (self.grid.a, self.grid.b) {
            (Some(a), Some(b)) if !(a < b) => return Err(Error::InvalidSupport { a, b }),
            (Some(_), None) | (None, Some(_)) => return Err(Error::invalid("grid.a and grid.b must be given together")),
            _ => {}
        }
        if self.grid.n < crate::function_space::MIN_GRID_POINTS {
            return Err(Error::GridTooSmall { n: self.grid.n, min: crate::function_space::MIN_GRID_POINTS });
        }
        if !(self.grid.coverage > 0.5 && self.grid.coverage < 1.0) {
            return Err(Error::invalid("grid.coverage must lie in (0.5, 1)"));
        }
        if self.analysis.decomposition_kmax == 0 || self.analysis.decomposition_kmax > crate::analysis::MAX_MOMENT_ORDER {
            return Err(Error::invalid("analysis.decomposition_kmax must lie in 1..=10"));
        }
        if let Some(b) = &self.bootstrap {
            if b.replications < crate::bootstrap::MIN_REPLICATIONS || !(b.alpha > 0.0 && b.alpha < 1.0) {
                return Err(Error::invalid("bootstrap needs at least 100 replications and alpha in (0, 1)"));
            }
        }
        match &self.k {
            KChoice::Fixed { k } if *k == 0 => Err(Error::invalid("K must be at least 1")),
            KChoice::CrossValidation { candidates, n_validation }
                if candidates.is_empty() || candidates.contains(&0) || *n_validation == 0 =>
            {
                Err(Error::invalid("K candidates must be nonempty and at least 1"))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::DensityPanel;
    use crate::far::fit;
    use crate::function_space::make_grid;
    use std::sync::Arc;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn small_model() -> FarModel {
        let g: Arc<GridSpec> = make_grid(0.0, 1.0, 20).unwrap();
        let densities: Vec<_> = (0..9)
            .map(|t| {
                let c = 0.5 + 0.1 * ((t as f64) * 1.3).sin();
                let f = GridFunction::from_fn(&g, |x| (-(x - c).powi(2) / 0.02).exp()).unwrap();
                f.scale(1.0 / f.integral())
            })
            .collect();
        fit(&DensityPanel::unlabeled(g, densities).unwrap(), 2).unwrap()
    }

    fn assert_same(a: &FarModel, b: &FarModel) {
        assert_eq!(a.operator().kernel(), b.operator().kernel());
        assert_eq!(a.noise_covariance().kernel(), b.noise_covariance().kernel());
        assert_eq!(a.covariance().kernel(), b.covariance().kernel());
        assert_eq!(a.cross_covariance().kernel(), b.cross_covariance().kernel());
        assert_eq!(a.eigen().vectors(), b.eigen().vectors());
        assert_eq!(a.eigen().eigenvalues(), b.eigen().eigenvalues());
        assert_eq!(a.mean().values(), b.mean().values());
        assert_eq!(a.k(), b.k());
        assert_eq!(a.sample_size(), b.sample_size());
        assert_eq!(a.last_state().values(), b.last_state().values());
        assert_eq!(a.residuals().len(), b.residuals().len());
    }

    #[test]
    fn single_observation_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "obs.csv", "period,value\n1,0.5\n");
        let panel = read_observations(&p).unwrap();
        assert_eq!(panel.len(), 1);
        assert_eq!(panel.blocks()[0].values, vec![0.5]);
    }

    #[test]
    fn interleaved_periods_are_grouped_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "obs.csv", "period,value\n10,1\n2,2\n10,3\n2,4\n");
        let panel = read_observations(&p).unwrap();
        let labels: Vec<_> = panel.blocks().iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["2", "10"]);
        assert_eq!(panel.blocks()[0].values, vec![2.0, 4.0]);
    }

    #[test]
    fn parse_errors_carry_positions() {
        let dir = tempfile::tempdir().unwrap();
        let no_header = write(&dir, "a.csv", "1,0.5\n2,0.7\n");
        assert!(matches!(read_observations(&no_header), Err(Error::Parse { line: 1, .. })));
        let bad_value = write(&dir, "b.csv", "period,value\n1,0.5\n1,abc\n");
        assert!(matches!(read_observations(&bad_value), Err(Error::Parse { line: 3, column: 2, .. })));
        let short = write(&dir, "c.csv", "period,value\n1\n");
        assert!(matches!(read_observations(&short), Err(Error::Parse { line: 2, .. })));
        let empty = write(&dir, "d.csv", "");
        assert!(matches!(read_observations(&empty), Err(Error::EmptyFile(_))));
        let missing = dir.path().join("nope.csv");
        let err = read_observations(&missing).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn observation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        let blocks = vec![("a".to_string(), vec![0.1, 1.0 / 3.0]), ("b".to_string(), vec![-2.5])];
        write_observations(&p, &blocks).unwrap();
        let panel = read_observations(&p).unwrap();
        assert_eq!(panel.blocks()[0].values, blocks[0].1);
        assert_eq!(panel.blocks()[1].values, blocks[1].1);
    }

    #[test]
    fn density_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = make_grid(-1.0, 2.0, 31).unwrap();
        let f = GridFunction::from_fn(&g, |x| (x * 0.7).exp() / 3.0).unwrap();
        let p = dir.path().join("f.csv");
        write_density(&p, &f).unwrap();
        let back = read_density(&p).unwrap();
        assert_eq!(back.values(), f.values());
        assert!(back.grid().same_as(&g));
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let m = small_model();
        let back = decode_model(&encode_model(&m, ModelFormat::Binary).unwrap()).unwrap();
        assert_same(&m, &back);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = small_model();
        let back = decode_model(&encode_model(&m, ModelFormat::Json).unwrap()).unwrap();
        assert!(m.operator().max_abs_diff(back.operator()).unwrap() <= 1e-15);
        assert_same(&m, &back);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let bytes = encode_model(&small_model(), ModelFormat::Binary).unwrap();
        for cut in [4, 20, 60, bytes.len() - 3] {
            match decode_model(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_model(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_model();
        for (name, fmt) in [("m.bin", ModelFormat::Binary), ("m.json", ModelFormat::Json)] {
            let p = dir.path().join(name);
            save_model(&m, &p, fmt).unwrap();
            assert_same(&m, &load_model(&p).unwrap());
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn floats_use_seventeen_digits() {
        let x = 0.1 + 0.2;
        let s = fmt_f64(x);
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count(), 17);
    }

    #[test]
    fn pipeline_config_parsing() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir, "obs.csv", "period,value\n1,0.5\n");
        let toml_path = write(
            &dir,
            "run.toml",
            r#"
input = "obs.csv"
output_dir = "out"
kernel = "normal"

[grid]
n = 128

[k]
mode = "fixed"
k = 3

[analysis]
functionals = ["moment:2", "left:-1.0"]

[bootstrap]
replications = 200
seed = 7
"#,
        );
        let cfg = PipelineConfig::load(&toml_path).unwrap();
        assert_eq!(cfg.kernel, Kernel::Normal);
        assert_eq!(cfg.grid.n, 128);
        assert_eq!(cfg.analysis.functionals.len(), 2);
        assert_eq!(cfg.bootstrap.as_ref().unwrap().alpha, 0.05);
        assert!(cfg.input.is_file());

        let json_path = write(&dir, "run.json", r#"{"input": "missing.csv", "output_dir": "out"}"#);
        assert!(PipelineConfig::load(&json_path).is_err());
        let bad = write(&dir, "bad.json", "{\"input\": 3,\n \"output_dir\": \"o\"}");
        assert!(matches!(PipelineConfig::load(&bad), Err(Error::Parse { line: 1, .. })));
        let unknown = write(&dir, "u.toml", "input = \"obs.csv\"\noutput_dir = \"o\"\nbogus = 1\n");
        assert!(matches!(PipelineConfig::load(&unknown), Err(Error::Parse { line: 3, .. })));
    }
}
