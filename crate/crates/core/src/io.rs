//! CSV ingest and export: long-format outcomes (`id,time,y`) and
//! wide-format covariates (`id,name,...`). Lines starting with `#` are
//! header comments.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Individual, LongitudinalDataset};
use crate::error::{invalid, Error, Result};

/// Provenance block written at the top of every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputHeader {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl OutputHeader {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn write_comments<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# {} {}", self.tool, self.version)?;
        writeln!(w, "# config_sha256: {}", self.config_hash)?;
        writeln!(w, "# seed: {}", self.seed)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Covariates rescaled to mean 0 and SD 1.
    pub standardize: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub notices: Vec<String>,
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r)
}

fn number(field: &str, column: &str, line: u64) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::InvalidInput(format!("line {line}: {column} value '{field}' is not a finite number")))
}

type Rows = Vec<(String, Vec<(f64, f64)>)>;

fn read_outcomes<R: Read>(r: R) -> Result<Rows> {
    let mut rd = reader(r);
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("outcome file lacks a '{name}' column")))
    };
    let (ci, ct, cy) = (col("id")?, col("time")?, col("y")?);
    let mut order: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(ci).unwrap_or("").to_string();
        if id.is_empty() {
            return invalid(format!("line {line}: empty id"));
        }
        let t = number(rec.get(ct).unwrap_or(""), "time", line)?;
        let y = number(rec.get(cy).unwrap_or(""), "y", line)?;
        let k = *index.entry(id.clone()).or_insert_with(|| {
            order.push((id.clone(), Vec::new()));
            order.len() - 1
        });
        order[k].1.push((t, y));
    }
    Ok(order)
}

fn read_covariates<R: Read>(r: R) -> Result<(Vec<String>, HashMap<String, Vec<f64>>)> {
    let mut rd = reader(r);
    let headers = rd.headers()?.clone();
    let ci = headers
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| Error::InvalidInput("covariate file lacks an 'id' column".into()))?;
    let names: Vec<String> = headers.iter().enumerate().filter(|(j, _)| *j != ci).map(|(_, h)| h.to_string()).collect();
    let mut out = HashMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(ci).unwrap_or("").to_string();
        let mut vals = Vec::with_capacity(names.len());
        for (j, h) in headers.iter().enumerate() {
            if j != ci {
                vals.push(number(rec.get(j).unwrap_or(""), h, line)?);
            }
        }
        if out.insert(id.clone(), vals).is_some() {
            return invalid(format!("line {line}: covariate id {id} appears twice"));
        }
    }
    Ok((names, out))
}

/// Builds a dataset from readers. Observations are sorted by time within
/// each individual; `covariates` may be omitted.
pub fn ingest_readers<R1: Read, R2: Read>(
    outcomes: R1,
    covariates: Option<R2>,
    opts: &IngestOptions,
) -> Result<(LongitudinalDataset, IngestReport)> {
    let rows = read_outcomes(outcomes)?;
    let mut report = IngestReport::default();
    let (names, cov) = match covariates {
        Some(r) => read_covariates(r)?,
        None => (Vec::new(), HashMap::new()),
    };
    if !names.is_empty() || !cov.is_empty() {
        let in_outcomes: BTreeSet<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
        let in_cov: BTreeSet<&str> = cov.keys().map(String::as_str).collect();
        let only_o: Vec<&str> = in_outcomes.difference(&in_cov).copied().collect();
        let only_c: Vec<&str> = in_cov.difference(&in_outcomes).copied().collect();
        if !only_o.is_empty() || !only_c.is_empty() {
            return invalid(format!(
                "ids missing from the covariate file: [{}]; ids missing from the outcome file: [{}]",
                only_o.join(", "),
                only_c.join(", ")
            ));
        }
    }
    let mut individuals = Vec::with_capacity(rows.len());
    let mut unsorted = Vec::new();
    for (id, mut obs) in rows {
        if obs.windows(2).any(|w| w[1].0 < w[0].0) {
            unsorted.push(id.clone());
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        if let Some(w) = obs.windows(2).find(|w| w[1].0 == w[0].0) {
            return invalid(format!("individual {id} has two observations at time {}", w[0].0));
        }
        individuals.push(Individual {
            covariates: cov.get(&id).cloned().unwrap_or_default(),
            times: obs.iter().map(|o| o.0).collect(),
            outcomes: obs.iter().map(|o| o.1).collect(),
            id,
        });
    }
    if !unsorted.is_empty() {
        let shown = unsorted.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
        let more = if unsorted.len() > 5 { ", ..." } else { "" };
        report
            .notices
            .push(format!("times of {} individuals were sorted ({shown}{more})", unsorted.len()));
    }
    for n in &report.notices {
        log::info!("{n}");
    }
    let mut ds = LongitudinalDataset::new(names, individuals)?;
    if !opts.standardize.is_empty() {
        ds.standardize(&opts.standardize)?;
    }
    Ok((ds, report))
}

pub fn ingest(outcomes: &Path, covariates: Option<&Path>, opts: &IngestOptions) -> Result<(LongitudinalDataset, IngestReport)> {
    let o = std::fs::File::open(outcomes)?;
    let c = covariates.map(std::fs::File::open).transpose()?;
    ingest_readers(o, c, opts)
}

/// Writes the dataset in the two layouts read by [`ingest_readers`].
/// Values use the shortest representation that parses back exactly.
pub fn export_writers<W1: Write, W2: Write>(
    ds: &LongitudinalDataset,
    mut outcomes: W1,
    mut covariates: W2,
    header: Option<&OutputHeader>,
) -> Result<()> {
    if let Some(h) = header {
        h.write_comments(&mut outcomes)?;
        h.write_comments(&mut covariates)?;
    }
    let mut o = csv::Writer::from_writer(outcomes);
    o.write_record(["id", "time", "y"])?;
    for ind in &ds.individuals {
        for (t, y) in ind.times.iter().zip(&ind.outcomes) {
            o.write_record([ind.id.as_str(), &t.to_string(), &y.to_string()])?;
        }
    }
    o.flush()?;
    let mut c = csv::Writer::from_writer(covariates);
    let mut head = vec!["id".to_string()];
    head.extend(ds.covariate_names.iter().cloned());
    c.write_record(&head)?;
    for ind in &ds.individuals {
        let mut rec = vec![ind.id.clone()];
        rec.extend(ind.covariates.iter().map(|v| v.to_string()));
        c.write_record(&rec)?;
    }
    c.flush()?;
    Ok(())
}

pub fn export(ds: &LongitudinalDataset, outcomes: &Path, covariates: &Path, header: Option<&OutputHeader>) -> Result<()> {
    let o = std::io::BufWriter::new(std::fs::File::create(outcomes)?);
    let c = std::io::BufWriter::new(std::fs::File::create(covariates)?);
    export_writers(ds, o, c, header)
}

#[cfg(test)]
mod tests {
    use super::*;

    const OUT: &str = "id,time,y\na,0,1.5\na,1,2.5\na,2,3.5\nb,2,1\nb,0,2\nb,1,3\n";
    const COV: &str = "# comment\nid,x1,x2\nb,1,5\na,3,7\n";

    #[test]
    fn shape_and_sorting() {
        let (ds, rep) = ingest_readers(OUT.as_bytes(), Some(COV.as_bytes()), &IngestOptions::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.individuals.iter().all(|i| i.times.len() == 3));
        assert_eq!(ds.individuals[1].times, vec![0.0, 1.0, 2.0]);
        assert_eq!(ds.individuals[1].outcomes, vec![2.0, 3.0, 1.0]);
        assert_eq!(ds.individuals[0].covariates, vec![3.0, 7.0]);
        assert_eq!(rep.notices.len(), 1);
    }

    #[test]
    fn errors() {
        let dup = "id,time,y\na,0,1\na,0,2\n";
        assert!(ingest_readers(dup.as_bytes(), None::<&[u8]>, &IngestOptions::default()).is_err());
        let bad = "id,time,y\na,0,1\na,x,2\n";
        let e = ingest_readers(bad.as_bytes(), None::<&[u8]>, &IngestOptions::default()).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let cov = "id,x\na,1\nc,2\n";
        let e = ingest_readers("id,time,y\na,0,1\nb,0,1\n".as_bytes(), Some(cov.as_bytes()), &IngestOptions::default())
            .unwrap_err()
            .to_string();
        assert!(e.contains('b') && e.contains('c'), "{e}");
    }

    #[test]
    fn round_trip() {
        let (ds, _) = ingest_readers(OUT.as_bytes(), Some(COV.as_bytes()), &IngestOptions::default()).unwrap();
        let (mut o, mut c) = (Vec::new(), Vec::new());
        export_writers(&ds, &mut o, &mut c, Some(&OutputHeader::new("abc", 1))).unwrap();
        let (back, _) = ingest_readers(o.as_slice(), Some(c.as_slice()), &IngestOptions::default()).unwrap();
        assert_eq!(back, ds);
    }
}
