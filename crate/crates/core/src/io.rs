//! Dataset CSV files: `id,y` plus exactly one of `E` / `pop`, then optional
//! covariates `x1..xp`.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::diagnostics::offsets_from_population;
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::models::ObservedData;

#[derive(Debug, Clone, PartialEq)]
pub enum Exposure {
    /// Expected counts used directly as offsets.
    Expected(Vec<f64>),
    /// Population sizes; offsets follow by indirect standardization.
    Population(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub y: Vec<u64>,
    pub exposure: Exposure,
    /// `covariates[i]` is the row of area `i`.
    pub covariates: Vec<Vec<f64>>,
}

fn parse_f64(s: &str, line: usize, col: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("column {col}: expected a number, got {s:?}"),
    })
}

impl Dataset {
    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| header.iter().position(|h| h == name);
        let id_col = find("id").ok_or(Error::Parse { line: 1, msg: "missing column id".into() })?;
        let y_col = find("y").ok_or(Error::Parse { line: 1, msg: "missing column y".into() })?;
        let (exp_col, is_pop) = match (find("E"), find("pop")) {
            (Some(c), None) => (c, false),
            (None, Some(c)) => (c, true),
            (Some(_), Some(_)) => {
                return Err(Error::Parse { line: 1, msg: "columns E and pop are mutually exclusive".into() })
            }
            (None, None) => return Err(Error::Parse { line: 1, msg: "need a column E or pop".into() }),
        };
        let mut x_cols = Vec::new();
        for (c, h) in header.iter().enumerate() {
            if [id_col, y_col, exp_col].contains(&c) {
                continue;
            }
            match h.strip_prefix('x').and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 => x_cols.push((k, c)),
                _ => return Err(Error::Parse { line: 1, msg: format!("unexpected column {h:?}") }),
            }
        }
        x_cols.sort_unstable();
        if x_cols.iter().enumerate().any(|(i, (k, _))| *k != i + 1) {
            return Err(Error::Parse { line: 1, msg: "covariate columns must be x1..xp without gaps".into() });
        }

        let (mut ids, mut y, mut exposure, mut covariates) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            ids.push(rec[id_col].to_string());
            let count = rec[y_col].parse::<u64>().map_err(|_| Error::Parse {
                line,
                msg: format!("column y: expected a nonnegative integer, got {:?}", &rec[y_col]),
            })?;
            y.push(count);
            let e = parse_f64(&rec[exp_col], line, &header[exp_col])?;
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Parse { line, msg: format!("column {} must be positive", header[exp_col]) });
            }
            exposure.push(e);
            covariates.push(
                x_cols
                    .iter()
                    .map(|&(_, c)| parse_f64(&rec[c], line, &header[c]))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate id {dup:?}")));
        }
        Ok(Self {
            ids,
            y,
            exposure: if is_pop { Exposure::Population(exposure) } else { Exposure::Expected(exposure) },
            covariates,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.first().map_or(0, Vec::len)
    }

    pub fn offsets(&self) -> Result<Vec<f64>> {
        match &self.exposure {
            Exposure::Expected(e) => Ok(e.clone()),
            Exposure::Population(p) => offsets_from_population(p, &self.y),
        }
    }

    /// Checks row count and, when the graph carries labels, the id order.
    pub fn into_observed(self, graph: Arc<AdjacencyGraph>) -> Result<ObservedData> {
        if self.n() != graph.n() {
            return Err(Error::Length { what: "dataset rows", expected: graph.n(), got: self.n() });
        }
        if let Some(labels) = graph.labels() {
            if let Some(i) = (0..self.n()).find(|&i| labels[i] != self.ids[i]) {
                return Err(Error::invalid(format!(
                    "row {} has id {:?} but the graph labels area {} as {:?}",
                    i + 1,
                    self.ids[i],
                    i + 1,
                    labels[i]
                )));
            }
        }
        let offsets = self.offsets()?;
        ObservedData::new(graph, self.y, offsets, self.covariates)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (col, vals) = match &self.exposure {
            Exposure::Expected(e) => ("E", e),
            Exposure::Population(p) => ("pop", p),
        };
        let mut header = vec!["id".to_string(), "y".into(), col.into()];
        header.extend((1..=self.p()).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![self.ids[i].clone(), self.y[i].to_string(), vals[i].to_string()];
            row.extend(self.covariates[i].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
