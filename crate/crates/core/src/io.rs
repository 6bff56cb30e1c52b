//! Config parsing and result files.
//!
//! CSV files start with one `# manifest: {json}` line, then the header.
//! Floats are written with 17 significant digits.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::{CellKey, LotteryConfig, RunRecord, SampleSize, SweepGrid, SweepResult};
use crate::train::TrainConfig;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CSV_HEADER: [&str; 12] = [
    "n",
    "k",
    "m",
    "r",
    "scheme",
    "s",
    "trial",
    "seed",
    "success",
    "steps_to_success",
    "final_test_err",
    "diverged",
];

const MANIFEST_PREFIX: &str = "# manifest: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub base_seed: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(subcommand: impl Into<String>, base_seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.into(),
            version: ARTIFACT_VERSION.to_string(),
            base_seed,
            config: serde_json::to_value(config).map_err(|e| LabError::Parse(e.to_string()))?,
            outputs: Vec::new(),
        })
    }
}

/// Configs that can check themselves after deserialization.
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

impl Validate for SweepGrid {
    fn validate(&self) -> Result<()> {
        SweepGrid::validate(self)
    }
}

impl Validate for TrainConfig {
    fn validate(&self) -> Result<()> {
        TrainConfig::validate(self)
    }
}

impl Validate for LotteryConfig {
    fn validate(&self) -> Result<()> {
        self.train.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Json,
    Toml,
}

impl ConfigFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Ok(Self::Json),
            Some("toml") => Ok(Self::Toml),
            _ => Err(LabError::Parse(format!("{}: config must end in .json or .toml", path.display()))),
        }
    }
}

/// Deserializes and validates a config; unknown keys are rejected by name.
pub fn parse_config_str<T: DeserializeOwned + Validate>(text: &str, format: ConfigFormat) -> Result<T> {
    let value: T = match format {
        ConfigFormat::Json => serde_json::from_str(text).map_err(|e| LabError::Parse(e.to_string()))?,
        ConfigFormat::Toml => toml::from_str(text).map_err(|e| LabError::Parse(e.message().to_string()))?,
    };
    value.validate()?;
    Ok(value)
}

pub fn parse_config<T: DeserializeOwned + Validate>(path: &Path) -> Result<T> {
    let format = ConfigFormat::from_path(path)?;
    let text = fs::read_to_string(path).map_err(|source| LabError::Io { path: path.to_path_buf(), source })?;
    parse_config_str(&text, format)
}

fn float_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Parse(e.to_string())
}

/// Writes the manifest line, the header, and one row per record.
pub fn write_records_csv<W: Write>(mut out: W, manifest: &RunManifest, records: &[RunRecord]) -> Result<()> {
    let line = serde_json::to_string(manifest).map_err(|e| LabError::Parse(e.to_string()))?;
    writeln!(out, "{MANIFEST_PREFIX}{line}").map_err(|source| LabError::Io { path: PathBuf::from("<csv>"), source })?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for rec in records {
        let c = &rec.cell;
        w.write_record([
            c.n.to_string(),
            c.k.to_string(),
            c.m.to_string(),
            c.r.to_string(),
            c.scheme.clone(),
            c.s.to_string(),
            rec.trial.to_string(),
            rec.seed.to_string(),
            rec.success.to_string(),
            rec.steps_to_success.map(|v| v.to_string()).unwrap_or_default(),
            float_field(rec.final_test_err),
            rec.diverged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| LabError::Io { path: PathBuf::from("<csv>"), source })
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, idx: usize) -> Result<T> {
    let raw = row.get(idx).unwrap_or("");
    raw.parse().map_err(|_| LabError::Parse(format!("column `{}`: cannot parse {raw:?}", CSV_HEADER[idx])))
}

fn opt_field<T: std::str::FromStr>(row: &csv::StringRecord, idx: usize) -> Result<Option<T>> {
    if row.get(idx).unwrap_or("").is_empty() {
        Ok(None)
    } else {
        field(row, idx).map(Some)
    }
}

/// Reads a file written by [`write_records_csv`]. Columns not in the CSV
/// (train error, grokking gap, traces) come back empty.
pub fn read_records_csv<R: Read>(input: R) -> Result<(Option<RunManifest>, Vec<RunRecord>)> {
    let mut reader = BufReader::new(input);
    let mut manifest = None;
    let mut rest = String::new();
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|source| LabError::Io { path: PathBuf::from("<csv>"), source })?;
    if let Some(json) = first.strip_prefix(MANIFEST_PREFIX) {
        manifest = Some(serde_json::from_str(json.trim_end()).map_err(|e| LabError::Parse(format!("manifest: {e}")))?);
    } else {
        rest.push_str(&first);
    }
    reader.read_to_string(&mut rest).map_err(|source| LabError::Io { path: PathBuf::from("<csv>"), source })?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(rest.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        let got: Vec<&str> = header.iter().collect();
        let missing: Vec<&str> = CSV_HEADER.iter().copied().filter(|c| !got.contains(c)).collect();
        return Err(LabError::Parse(format!("CSV header mismatch; missing columns {missing:?}, got {got:?}")));
    }
    let mut records = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let m: SampleSize = field(&row, 2)?;
        records.push(RunRecord {
            cell: CellKey::new(field(&row, 0)?, field(&row, 1)?, m, field(&row, 3)?, row.get(4).unwrap_or(""), field(&row, 5)?),
            trial: field(&row, 6)?,
            seed: field(&row, 7)?,
            success: field(&row, 8)?,
            steps_to_success: opt_field(&row, 9)?,
            final_test_err: opt_field(&row, 10)?,
            final_train_err: None,
            diverged: field(&row, 11)?,
            grokking_gap: None,
            trace: Vec::new(),
        });
    }
    Ok((manifest, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(LabError::Parse(format!("unknown format {other:?}; expected csv or json"))),
        }
    }
}

/// A JSON artifact: the manifest next to the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonArtifact<T> {
    pub manifest: RunManifest,
    pub result: T,
}

pub fn to_json_string<T: Serialize>(manifest: &RunManifest, result: &T) -> Result<String> {
    serde_json::to_string_pretty(&JsonArtifact { manifest: manifest.clone(), result }).map_err(|e| LabError::Parse(e.to_string()))
}

pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<JsonArtifact<T>> {
    serde_json::from_str(text).map_err(|e| LabError::Parse(e.to_string()))
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| LabError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::File::create(path).map_err(|source| LabError::Io { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, manifest: &RunManifest, result: &T) -> Result<()> {
    let text = to_json_string(manifest, result)?;
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).map_err(|source| LabError::Io { path: path.to_path_buf(), source })
}

/// Writes `<stem>.csv` or `<stem>.json` under `dir` and returns the path.
pub fn emit_results(dir: &Path, stem: &str, manifest: &RunManifest, result: &SweepResult, format: OutputFormat) -> Result<PathBuf> {
    let mut manifest = manifest.clone();
    match format {
        OutputFormat::Csv => {
            let path = dir.join(format!("{stem}.csv"));
            manifest.outputs = vec![path.clone()];
            let f = create(&path)?;
            write_records_csv(std::io::BufWriter::new(f), &manifest, &result.records)?;
            Ok(path)
        }
        OutputFormat::Json => {
            let path = dir.join(format!("{stem}.json"));
            manifest.outputs = vec![path.clone()];
            write_json(&path, &manifest, result)?;
            Ok(path)
        }
    }
}

/// Loads a sweep written by [`emit_results`] and recomputes the aggregate.
pub fn load_results(path: &Path) -> Result<(Option<RunManifest>, SweepResult)> {
    let io = |source| LabError::Io { path: path.to_path_buf(), source };
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let text = fs::read_to_string(path).map_err(io)?;
            let art: JsonArtifact<SweepResult> = from_json_str(&text)?;
            Ok((Some(art.manifest), art.result))
        }
        _ => {
            let f = fs::File::open(path).map_err(io)?;
            let (manifest, records) = read_records_csv(f)?;
            Ok((manifest, SweepResult::from_records(records)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(m: SampleSize, trial: usize, success: bool) -> RunRecord {
        RunRecord {
            cell: CellKey::new(20, 3, m, 10, "sparse", 2),
            trial,
            seed: 0xDEAD_BEEF_0000_0001 + trial as u64,
            success,
            steps_to_success: success.then_some(1200 + trial),
            final_test_err: Some(if success { 0.1 / 3.0 } else { 0.49 + 1e-17 }),
            final_train_err: None,
            diverged: false,
            grokking_gap: None,
            trace: Vec::new(),
        }
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![record(SampleSize::Offline(300), 0, true), record(SampleSize::Online, 1, false), record(SampleSize::Online, 2, true)];
        let manifest = RunManifest::new("sweep", 5, &serde_json::json!({"trials": 3})).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &manifest, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# manifest: "));
        assert_eq!(text.lines().nth(1).unwrap(), CSV_HEADER.join(","));
        let (m2, back) = read_records_csv(&buf[..]).unwrap();
        assert_eq!(m2.unwrap(), manifest);
        assert_eq!(back, recs);
        assert_eq!(SweepResult::from_records(back), SweepResult::from_records(recs));
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let manifest = RunManifest::new("sweep", 0, &()).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &manifest, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(read_records_csv(text.as_bytes()).unwrap().1.is_empty());
    }

    #[test]
    fn bad_header_names_missing_column() {
        let text = "n,k,m,r,scheme,s,trial,seed,success,steps,final_test_err,diverged\n";
        let err = read_records_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("steps_to_success"), "{err}");
    }

    #[test]
    fn config_defaults_and_errors() {
        let grid: SweepGrid = parse_config_str(r#"{"n":[50],"k":[3],"m":["online"],"r":[10]}"#, ConfigFormat::Json).unwrap();
        assert_eq!(grid.train.rule.eta.w, 0.1);
        assert_eq!(grid.train.rule.lambda.w, 0.01);
        assert_eq!(grid.train.batch_size, 32);
        assert_eq!(grid.train.steps, 100_000);
        let err = parse_config_str::<SweepGrid>(r#"{"n":[50],"k":[3],"m":[100],"r":[10],"widht":3}"#, ConfigFormat::Json).unwrap_err();
        assert!(err.to_string().contains("widht"), "{err}");
        let toml_grid: SweepGrid = parse_config_str("n = [50]\nk = [3]\nm = [100, \"online\"]\nr = [10]\n[train]\nsteps = 5\n", ConfigFormat::Toml).unwrap();
        assert_eq!(toml_grid.train.steps, 5);
        let neg = r#"{"n":[50],"k":[3],"m":[100],"r":[10],"train":{"rule":{"eta":{"w":-0.1,"b":0.1,"u":0.1,"beta":0.1}}}}"#;
        assert!(parse_config_str::<SweepGrid>(neg, ConfigFormat::Json).is_err());
        let scalar: TrainConfig = parse_config_str(r#"{"rule":{"eta":0.05}}"#, ConfigFormat::Json).unwrap();
        assert_eq!(scalar.rule.eta, crate::mlp::LayerRates::uniform(0.05));
        assert!(parse_config_str::<TrainConfig>(r#"{"rule":{"eta":-1.0}}"#, ConfigFormat::Json).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let recs = vec![record(SampleSize::Offline(300), 0, true), record(SampleSize::Online, 1, false)];
        let result = SweepResult::from_records(recs);
        let manifest = RunManifest::new("sweep", 1, &()).unwrap();
        let text = to_json_string(&manifest, &result).unwrap();
        let back: JsonArtifact<SweepResult> = from_json_str(&text).unwrap();
        assert_eq!(back.result, result);
        assert_eq!(back.manifest, manifest);
    }

    #[test]
    fn io_errors_carry_the_path() {
        let err = parse_config::<SweepGrid>(Path::new("/nonexistent/dir/grid.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/grid.json"));
    }
}
