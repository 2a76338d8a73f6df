//! Examples, datasets and the JSON Lines dataset format.
//!
//! One example per line:
//! `{"x":[...],"y":1,"meta":{"group":"g3","dataset_id":"a","forms":[[...]],"tokens":["..."]}}`.
//! `y` is a class index or a soft/multi-hot vector; `meta` and each of its
//! fields are optional.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Batch, Labels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    MultiHot(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forms: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
}

impl Meta {
    fn is_empty(&self) -> bool {
        *self == Meta::default()
    }

    pub fn num_forms(&self) -> usize {
        self.forms.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Label,
    #[serde(default, skip_serializing_if = "Meta::is_empty")]
    pub meta: Meta,
}

impl Example {
    pub fn new(x: Vec<f64>, y: Label) -> Self {
        Self {
            x,
            y,
            meta: Meta::default(),
        }
    }
}

/// Ordered collection of examples sharing one feature dimensionality and
/// one label representation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Wraps `examples` after checking they are consistent.
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let ds = Dataset { examples };
        if let Some((i, reason)) = ds.first_inconsistency() {
            return Err(Error::ShapeMismatch(format!("example {i}: {reason}")));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }

    /// Number of classes: the largest class index plus one, or the multi-hot width.
    pub fn num_classes(&self) -> usize {
        self.examples
            .iter()
            .map(|e| match &e.y {
                Label::Class(c) => c + 1,
                Label::MultiHot(v) => v.len(),
            })
            .max()
            .unwrap_or(0)
    }

    fn first_inconsistency(&self) -> Option<(usize, String)> {
        let first = self.examples.first()?;
        let dim = first.x.len();
        let multi_width = match &first.y {
            Label::Class(_) => None,
            Label::MultiHot(v) => Some(v.len()),
        };
        for (i, ex) in self.examples.iter().enumerate() {
            if let Some(r) = check_example(ex, dim, multi_width) {
                return Some((i, r));
            }
        }
        None
    }

    pub fn features(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.dim());
        for e in &self.examples {
            data.extend_from_slice(&e.x);
        }
        Matrix {
            rows: self.len(),
            cols: self.dim(),
            data,
        }
    }

    pub fn labels(&self) -> Labels {
        self.labels_of(0..self.len())
    }

    fn labels_of(&self, idx: impl Iterator<Item = usize> + Clone) -> Labels {
        match self.examples.first().map(|e| &e.y) {
            Some(Label::MultiHot(v)) => {
                let cols = v.len();
                let mut data = Vec::new();
                for i in idx.clone() {
                    if let Label::MultiHot(v) = &self.examples[i].y {
                        data.extend_from_slice(v);
                    }
                }
                Labels::MultiHot(Matrix {
                    rows: data.len() / cols.max(1),
                    cols,
                    data,
                })
            }
            _ => Labels::Classes(
                idx.map(|i| match self.examples[i].y {
                    Label::Class(c) => c,
                    Label::MultiHot(_) => unreachable!("validated label representation"),
                })
                .collect(),
            ),
        }
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.features(), self.labels())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&self.examples[i].x);
        }
        let features = Matrix {
            rows: indices.len(),
            cols: dim,
            data,
        };
        Batch::new(features, self.labels_of(indices.iter().copied()))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// Concatenates datasets that share dimensionality and label representation.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let mut examples = Vec::with_capacity(parts.iter().map(Dataset::len).sum());
        for p in parts {
            examples.extend(p.examples.iter().cloned());
        }
        Dataset::new(examples)
    }

    /// Originals followed by every alternative form as an extra example
    /// (the data-augmentation baseline).
    pub fn augmented_with_forms(&self) -> Dataset {
        let mut examples: Vec<Example> = self
            .examples
            .iter()
            .map(|e| Example {
                meta: Meta {
                    forms: None,
                    ..e.meta.clone()
                },
                ..e.clone()
            })
            .collect();
        for e in &self.examples {
            for f in e.meta.forms.iter().flatten() {
                examples.push(Example {
                    x: f.clone(),
                    y: e.y.clone(),
                    meta: Meta {
                        group: e.meta.group.clone(),
                        dataset_id: e.meta.dataset_id.clone(),
                        forms: None,
                        tokens: None,
                    },
                });
            }
        }
        Dataset { examples }
    }

    /// Count of examples per class index (argmax for multi-hot labels).
    pub fn label_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for e in &self.examples {
            let c = match &e.y {
                Label::Class(c) => *c,
                Label::MultiHot(v) => argmax(v),
            };
            *h.entry(c).or_insert(0) += 1;
        }
        h
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses JSON Lines; `origin` names the source in error messages.
    pub fn from_reader(reader: impl BufRead, origin: &Path) -> Result<Dataset> {
        let mut examples = Vec::new();
        let mut dim = None;
        let mut multi_width = None;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                reason,
            };
            let ex: Example = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let d = *dim.get_or_insert(ex.x.len());
            let w = *multi_width.get_or_insert(match &ex.y {
                Label::Class(_) => None,
                Label::MultiHot(v) => Some(v.len()),
            });
            if let Some(reason) = check_example(&ex, d, w) {
                return Err(parse_err(reason));
            }
            examples.push(ex);
        }
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset { examples })
    }
}

fn check_example(ex: &Example, dim: usize, multi_width: Option<usize>) -> Option<String> {
    if ex.x.len() != dim {
        return Some(format!("x has {} values, dataset has {dim}", ex.x.len()));
    }
    if dim == 0 {
        return Some("x is empty".into());
    }
    if ex.x.iter().any(|v| !v.is_finite()) {
        return Some("non-finite feature".into());
    }
    match (&ex.y, multi_width) {
        (Label::Class(_), None) => {}
        (Label::MultiHot(v), Some(w)) => {
            if v.len() != w {
                return Some(format!("label has {} entries, dataset has {w}", v.len()));
            }
            if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Some("multi-hot label outside [0, 1]".into());
            }
        }
        _ => return Some("label representation differs from the first example".into()),
    }
    for (k, f) in ex.meta.forms.iter().flatten().enumerate() {
        if f.len() != dim {
            return Some(format!("form {k} has {} values, dataset has {dim}", f.len()));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Some(format!("form {k} has a non-finite value"));
        }
    }
    None
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_reader(BufReader::new(file), path)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &dataset.examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(s: &str) -> Result<Dataset> {
        Dataset::from_reader(Cursor::new(s), Path::new("mem.jsonl"))
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse("").unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn dimension_error_names_the_line() {
        let s = "{\"x\":[1,2,3,4],\"y\":0}\n{\"x\":[1,2,3],\"y\":1}\n";
        let err = parse(s).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse("{\"x\":[1],\"y\":0}\nnot json\n").unwrap_err().to_string().contains(":2:"));
    }

    #[test]
    fn meta_fields_are_optional() {
        let s = "{\"x\":[0.5],\"y\":1}\n{\"x\":[1.5],\"y\":0,\"meta\":{\"group\":\"a\",\"forms\":[[2.5]]}}\n";
        let ds = parse(s).unwrap();
        assert_eq!(ds.examples[1].meta.group.as_deref(), Some("a"));
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.to_jsonl().unwrap(), s);
    }

    #[test]
    fn mixed_label_kinds_rejected() {
        assert!(parse("{\"x\":[1],\"y\":0}\n{\"x\":[1],\"y\":[0.0,1.0]}\n").is_err());
        assert!(parse("{\"x\":[1],\"y\":[0.0,1.5]}\n").is_err());
    }

    #[test]
    fn forms_dimension_checked() {
        assert!(parse("{\"x\":[1,2],\"y\":0,\"meta\":{\"forms\":[[1]]}}\n").is_err());
    }

    #[test]
    fn augmentation_appends_forms() {
        let s = "{\"x\":[0.0],\"y\":1,\"meta\":{\"forms\":[[1.0],[2.0]]}}\n{\"x\":[3.0],\"y\":0}\n";
        let aug = parse(s).unwrap().augmented_with_forms();
        let xs: Vec<f64> = aug.examples.iter().map(|e| e.x[0]).collect();
        assert_eq!(xs, vec![0.0, 3.0, 1.0, 2.0]);
        assert_eq!(aug.examples[3].y, Label::Class(1));
    }
}
