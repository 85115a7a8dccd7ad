//! CSV emitters and the JSON run manifest.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::MetricsReport;
use super::train::{EpochRecord, StageSummary};
use crate::error::{GtpError, Result};
use crate::model::GtpConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model_variant: String,
    pub horizon: usize,
    #[serde(rename = "ADE")]
    pub ade: f64,
    #[serde(rename = "FDE")]
    pub fde: f64,
}

/// One row per (variant, horizon): the unweighted mean over scenes.
pub fn curve_rows(report: &MetricsReport) -> Vec<CurveRow> {
    report
        .aggregates()
        .into_iter()
        .map(|a| CurveRow {
            model_variant: a.variant,
            horizon: a.horizon,
            ade: a.scene_mean_ade,
            fde: a.scene_mean_fde,
        })
        .collect()
}

pub fn write_curves<W: Write>(out: W, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in curve_rows(report) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves<R: Read>(input: R) -> Result<Vec<CurveRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Into::into)
}

/// Per-scene cells with sample counts.
pub fn write_cells<W: Write>(out: W, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for cell in &report.cells {
        w.serialize(cell)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows `t, alpha_1 .. alpha_n`, with `t` counted from 1.
pub fn write_attention<W: Write>(out: W, attention: &[Vec<f64>]) -> Result<()> {
    let n = attention.first().map_or(0, Vec::len);
    if attention.iter().any(|a| a.len() != n) {
        return Err(GtpError::contract("attention rows of unequal width"));
    }
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("alpha_{i}")))
        .collect();
    w.write_record(&header)?;
    for (t, row) in attention.iter().enumerate() {
        let rec: Vec<String> = std::iter::once((t + 1).to_string())
            .chain(row.iter().map(|a| format!("{a:?}")))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_attention<R: Read>(input: R) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(input).records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| GtpError::Data(format!("attention value {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Per-epoch training curve. `val_metric` is empty when nothing was held out.
pub fn write_losses<W: Write>(out: W, curves: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in curves {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Content hash over named inputs, each framed like a git blob
/// (`blob <len>\0<bytes>`) so that concatenation is unambiguous.
pub fn content_hash<'a>(inputs: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in inputs {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes files by path in sorted order.
pub fn hash_files(paths: &[&Path]) -> Result<String> {
    let mut named: Vec<(String, Vec<u8>)> = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), std::fs::read(p)?)))
        .collect::<Result<_>>()?;
    named.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(content_hash(named.iter().map(|(n, b)| (n.as_str(), b.as_slice()))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: GtpConfig,
    pub seed: u64,
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub stages: Vec<StageSummary>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::MetricsCell;

    fn report(variants: &[&str], horizons: &[usize]) -> MetricsReport {
        let mut r = MetricsReport::default();
        for (i, v) in variants.iter().enumerate() {
            for &h in horizons {
                for s in ["a", "b"] {
                    let x = 0.1 * (i + 1) as f64 + h as f64 / 97.0 + f64::from(s == "b") / 3.0;
                    r.push(MetricsCell::from_samples(v, s, h, &[(x, 2.0 * x), (x / 7.0, x)]).unwrap());
                }
            }
        }
        r
    }

    #[test]
    fn curves_round_trip() {
        let r = report(&["full", "no_goal_features"], &[12, 16, 20, 24, 28]);
        let mut buf = Vec::new();
        write_curves(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("model_variant,horizon,ADE,FDE"));
        assert_eq!(read_curves(buf.as_slice()).unwrap(), curve_rows(&r));
    }

    #[test]
    fn attention_round_trip() {
        let att = vec![vec![0.2, 0.3, 0.5], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        let mut buf = Vec::new();
        write_attention(&mut buf, &att).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("t,alpha_1,alpha_2,alpha_3\n1,"));
        assert_eq!(read_attention(buf.as_slice()).unwrap(), att);
        assert!(write_attention(Vec::new(), &[vec![1.0], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn hash_depends_on_names_and_content() {
        let a = content_hash([("x", b"ab".as_slice()), ("y", b"c".as_slice())]);
        let b = content_hash([("x", b"a".as_slice()), ("y", b"bc".as_slice())]);
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
        assert_eq!(a, content_hash([("x", b"ab".as_slice()), ("y", b"c".as_slice())]));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let m = RunManifest {
            command: "train".into(),
            config: GtpConfig::default(),
            seed: 3,
            input_hash: content_hash([]),
            inputs: vec![],
            stages: vec![],
            outputs: vec!["model.ckpt".into()],
        };
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }
}
