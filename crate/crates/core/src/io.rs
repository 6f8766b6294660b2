//! Text formats for datasets and anchors, and JSON artifacts with a config
//! fingerprint.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::BinaryDataset;
use crate::error::{AdfaError, Result};
use crate::model::AnchorMap;

fn parse_err(line: usize, message: impl Into<String>) -> AdfaError {
    AdfaError::Parse {
        line,
        message: message.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l))
}

/// Sparse rows: each line lists the indices of the positive variables.
/// An empty line is an all-zero row. `width` fixes the row length;
/// otherwise it is one past the largest index seen.
pub fn parse_sparse_rows(text: &str, width: Option<usize>) -> Result<(usize, Vec<Vec<bool>>)> {
    let mut sparse = Vec::new();
    let mut max_seen = None;
    for (no, line) in content_lines(text) {
        let mut idx = Vec::new();
        for tok in line.split_whitespace() {
            let v: usize = tok
                .parse()
                .map_err(|_| parse_err(no, format!("`{tok}` is not a non-negative integer")))?;
            if let Some(w) = width {
                if v >= w {
                    return Err(parse_err(no, format!("index {v} out of range for width {w}")));
                }
            }
            if idx.contains(&v) {
                return Err(parse_err(no, format!("index {v} repeated")));
            }
            max_seen = max_seen.max(Some(v));
            idx.push(v);
        }
        sparse.push(idx);
    }
    let width = match (width, max_seen) {
        (Some(w), _) => w,
        (None, Some(v)) => v + 1,
        (None, None) => return Err(AdfaError::invalid("cannot infer the row width of an all-zero file")),
    };
    let rows = sparse
        .into_iter()
        .map(|idx| {
            let mut row = vec![false; width];
            for v in idx {
                row[v] = true;
            }
            row
        })
        .collect();
    Ok((width, rows))
}

pub fn format_sparse_rows(rows: &[Vec<bool>]) -> String {
    let mut out = String::new();
    for row in rows {
        let idx: Vec<String> = row
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i.to_string())
            .collect();
        out.push_str(&idx.join(" "));
        out.push('\n');
    }
    out
}

/// Reads a dataset and, optionally, a parallel latent-label file.
pub fn parse_dataset(
    path: &Path,
    width: Option<usize>,
    labels: Option<(&Path, usize)>,
) -> Result<BinaryDataset> {
    let (n, rows) = parse_sparse_rows(&std::fs::read_to_string(path)?, width)?;
    let latent = match labels {
        Some((p, m)) => {
            let (_, l) = parse_sparse_rows(&std::fs::read_to_string(p)?, Some(m))?;
            if l.len() != rows.len() {
                return Err(AdfaError::invalid(format!(
                    "label file has {} rows, dataset has {}",
                    l.len(),
                    rows.len()
                )));
            }
            Some(l)
        }
        None => None,
    };
    BinaryDataset::new(n, rows, latent)
}

pub fn write_dataset(data: &BinaryDataset, path: &Path, labels: Option<&Path>) -> Result<()> {
    std::fs::write(path, format_sparse_rows(&data.observed_rows))?;
    if let (Some(p), Some(l)) = (labels, &data.latent_rows) {
        std::fs::write(p, format_sparse_rows(l))?;
    }
    Ok(())
}

/// Anchors as read from a file; noise rates may be missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub names: Vec<String>,
    pub anchor_of: Vec<usize>,
    /// `(P(A=1|Y=1), P(A=1|Y=0))` when given.
    pub rates: Vec<Option<(f64, f64)>>,
}

impl AnchorSpec {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Latents without noise rates.
    pub fn missing_rates(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rates[i].is_none()).collect()
    }

    /// Requires rates for every latent.
    pub fn to_map(&self) -> Result<AnchorMap> {
        if let Some(&i) = self.missing_rates().first() {
            return Err(AdfaError::invalid(format!(
                "anchor of latent `{}` has no noise rates; estimate them first",
                self.names[i]
            )));
        }
        let rates: Vec<(f64, f64)> = self.rates.iter().map(|r| r.expect("checked")).collect();
        AnchorMap::from_rates(self.anchor_of.clone(), &rates)
    }

    pub fn from_map(names: Vec<String>, map: &AnchorMap) -> Self {
        Self {
            names,
            anchor_of: map.anchor_of.clone(),
            rates: (0..map.len())
                .map(|i| Some((map.p(i, true, true), map.p(i, true, false))))
                .collect(),
        }
    }

    /// Checks the anchors against an observed width.
    pub fn check_width(&self, n_observed: usize) -> Result<()> {
        for (name, &a) in self.names.iter().zip(&self.anchor_of) {
            if a >= n_observed {
                return Err(AdfaError::invalid(format!(
                    "anchor {a} of latent `{name}` is out of range for {n_observed} observed variables"
                )));
            }
        }
        Ok(())
    }
}

/// `latent_name observed_index [p_a1_given_y1 p_a1_given_y0]` per line;
/// blank lines and `#` comments are skipped.
pub fn parse_anchors_str(text: &str) -> Result<AnchorSpec> {
    let mut spec = AnchorSpec {
        names: Vec::new(),
        anchor_of: Vec::new(),
        rates: Vec::new(),
    };
    for (no, raw) in content_lines(text) {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 && toks.len() != 4 {
            return Err(parse_err(no, "expected `name index` or `name index p1 p0`"));
        }
        let name = toks[0].to_string();
        if spec.names.contains(&name) {
            return Err(parse_err(no, format!("latent `{name}` declared twice")));
        }
        let idx: usize = toks[1]
            .parse()
            .map_err(|_| parse_err(no, format!("`{}` is not an observed index", toks[1])))?;
        if let Some(other) = spec.anchor_of.iter().position(|&a| a == idx) {
            return Err(parse_err(
                no,
                format!("observed {idx} already anchors `{}`", spec.names[other]),
            ));
        }
        let rates = if toks.len() == 4 {
            let p = |t: &str| -> Result<f64> {
                let v: f64 = t.parse().map_err(|_| parse_err(no, format!("`{t}` is not a number")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(parse_err(no, format!("probability {v} outside [0, 1]")));
                }
                Ok(v)
            };
            let (p1, p0) = (p(toks[2])?, p(toks[3])?);
            if p1 == p0 {
                return Err(parse_err(no, "anchor rates must differ between Y=1 and Y=0"));
            }
            Some((p1, p0))
        } else {
            None
        };
        spec.names.push(name);
        spec.anchor_of.push(idx);
        spec.rates.push(rates);
    }
    if spec.is_empty() {
        return Err(AdfaError::invalid("anchor file declares no latents"));
    }
    Ok(spec)
}

pub fn parse_anchors(path: &Path) -> Result<AnchorSpec> {
    parse_anchors_str(&std::fs::read_to_string(path)?)
}

pub fn format_anchors(spec: &AnchorSpec) -> String {
    let mut out = String::new();
    for i in 0..spec.len() {
        let _ = match spec.rates[i] {
            Some((p1, p0)) => writeln!(out, "{} {} {p1} {p0}", spec.names[i], spec.anchor_of[i]),
            None => writeln!(out, "{} {}", spec.names[i], spec.anchor_of[i]),
        };
    }
    out
}

/// Hex SHA-256 of the JSON encoding of `config`.
pub fn fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Seed for a named stage, derived from the root seed.
pub fn stage_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

/// A stage output with the fingerprint of the configuration that made it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub kind: String,
    pub fingerprint: String,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned> Artifact<T> {
    pub fn new(kind: &str, fingerprint: String, payload: T) -> Self {
        Self {
            kind: kind.to_string(),
            fingerprint,
            payload,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if a.kind != kind {
            return Err(AdfaError::invalid(format!(
                "{} holds a `{}` artifact, expected `{kind}`",
                path.display(),
                a.kind
            )));
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_row_format() {
        let (w, rows) = parse_sparse_rows("3 17 250\n\n0\n", None).unwrap();
        assert_eq!(w, 251);
        assert_eq!(rows[0].iter().filter(|&&b| b).count(), 3);
        assert!(rows[0][3] && rows[0][17] && rows[0][250]);
        assert!(rows[1].iter().all(|&b| !b));
        assert_eq!(format_sparse_rows(&rows), "3 17 250\n\n0\n");
    }

    #[test]
    fn sparse_row_errors_carry_line_numbers() {
        match parse_sparse_rows("1 2\n3 x\n", None) {
            Err(AdfaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_sparse_rows("1\n\n9\n", Some(5)) {
            Err(AdfaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_sparse_rows("2 2\n", None).is_err());
    }

    #[test]
    fn anchor_line_with_rates() {
        let spec = parse_anchors_str("asthma 12 0.7 0.02\n").unwrap();
        assert_eq!(spec.anchor_of, vec![12]);
        let map = spec.to_map().unwrap();
        assert_eq!(map.p(0, true, true), 0.7);
        assert_eq!(map.p(0, true, false), 0.02);
        assert!((map.p(0, false, true) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn anchor_file_validation() {
        let spec = parse_anchors_str("# comment\na 1\n\nb 2 0.5 0.1\n").unwrap();
        assert_eq!(spec.missing_rates(), vec![0]);
        assert!(spec.to_map().unwrap_err().to_string().contains("`a`"));
        for (text, line) in [("a 1\nb 1\n", 2), ("a 1\na 2\n", 2), ("a x\n", 1), ("a 1 0.5\n", 1), ("a 1 1.5 0.1\n", 1)] {
            match parse_anchors_str(text) {
                Err(AdfaError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(spec.check_width(2).is_err());
        assert!(spec.check_width(3).is_ok());
    }

    #[test]
    fn anchors_round_trip() {
        let spec = parse_anchors_str("a 1 0.7 0.05\nb 0\n").unwrap();
        assert_eq!(parse_anchors_str(&format_anchors(&spec)).unwrap(), spec);
    }

    #[test]
    fn fingerprints_and_seeds_are_stable() {
        let a = fingerprint(&("x", 1)).unwrap();
        assert_eq!(a, fingerprint(&("x", 1)).unwrap());
        assert_ne!(a, fingerprint(&("x", 2)).unwrap());
        assert_eq!(a.len(), 64);
        assert_eq!(stage_seed(7, "moments"), stage_seed(7, "moments"));
        assert_ne!(stage_seed(7, "moments"), stage_seed(7, "loadings"));
    }

    #[test]
    fn artifact_kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        Artifact::new("thing", "f".into(), vec![1.5, 2.0]).write(&p).unwrap();
        assert_eq!(Artifact::<Vec<f64>>::read(&p, "thing").unwrap().payload, vec![1.5, 2.0]);
        assert!(Artifact::<Vec<f64>>::read(&p, "other").is_err());
    }
}
