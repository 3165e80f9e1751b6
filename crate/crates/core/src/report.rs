//! Report tables written as CSV and JSON.
//!
//! Every file starts with the run's manifest digest and seed so two outputs
//! can be matched to the runs that produced them. Values are printed with
//! four decimals in CSV and at full precision in JSON; empty cells are blank
//! in CSV and `null` in JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{pool_by_record, AgreementTable, ImageScores};
use crate::cite::Aggregation;
use crate::model::{AdClass, Component, Provenance};
use crate::pipeline::ResultStore;
use crate::Score;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("result store has no score cards")]
    EmptyStore,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportShape {
    Scores,
    Components,
    Agreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Option<Score>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl From<AgreementTable> for Table {
    fn from(t: AgreementTable) -> Self {
        Table {
            name: format!("agreement_{}", t.name),
            columns: t.columns,
            rows: t
                .rows
                .into_iter()
                .map(|r| Row {
                    label: r.label,
                    cells: r.cells,
                })
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct TableFile<'a> {
    manifest: &'a str,
    seed: u64,
    table: &'a Table,
}

impl Table {
    pub fn to_csv(&self, manifest: &str, seed: u64) -> String {
        let mut out = format!("# manifest {manifest}\n# seed {seed}\n");
        out.push_str("label");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_field(&r.label));
            for c in &r.cells {
                out.push(',');
                if let Some(v) = c {
                    out.push_str(&format!("{v:.4}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self, manifest: &str, seed: u64) -> String {
        let mut s = serde_json::to_string_pretty(&TableFile {
            manifest,
            seed,
            table: self,
        })
        .expect("table serializes");
        s.push('\n');
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn mean(values: impl Iterator<Item = Score>) -> Option<Score> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as Score)
}

const CONDITIONS: [Provenance; 3] = [Provenance::GeneratedFromAr, Provenance::GeneratedFromLlm, Provenance::Real];
const CLASSES: [AdClass; 2] = [AdClass::Commercial, AdClass::Psa];

fn pooled(store: &ResultStore, agg: Aggregation) -> Vec<(AdClass, Provenance, ImageScores)> {
    pool_by_record(&store.cards, agg)
        .into_iter()
        .filter_map(|(id, s)| {
            let meta = store.manifest.records.get(&id)?;
            Some((meta.ad_class, meta.provenance, s))
        })
        .collect()
}

/// Per-condition means of CITE, C_obj and PA for each ad class. Each image
/// contributes one value pooled over its statements.
pub fn scores_table(store: &ResultStore, agg: Aggregation) -> Table {
    let images = pooled(store, agg);
    let metrics: [(&str, fn(&ImageScores) -> Option<Score>); 3] =
        [("CITE", |s| s.cite), ("C_obj", |s| s.c_obj), ("PA", |s| s.pa)];
    let mut columns = Vec::new();
    for class in CLASSES {
        for (m, _) in &metrics {
            columns.push(format!("{} {m}", class.label()));
        }
    }
    let rows = CONDITIONS
        .iter()
        .filter(|&&p| images.iter().any(|(_, ip, _)| *ip == p))
        .map(|&p| Row {
            label: p.label().to_string(),
            cells: CLASSES
                .iter()
                .flat_map(|&class| {
                    let imgs = &images;
                    metrics.iter().map(move |(_, f)| {
                        mean(
                            imgs.iter()
                                .filter(|(c, ip, _)| *c == class && *ip == p)
                                .filter_map(|(_, _, s)| f(s)),
                        )
                    })
                })
                .collect(),
        })
        .collect();
    Table {
        name: "scores".into(),
        columns,
        rows,
    }
}

/// Per-component means on a 0–1 scale (score / 5), one row per ad class and
/// condition.
pub fn components_table(store: &ResultStore, agg: Aggregation) -> Table {
    let images = pooled(store, agg);
    let mut rows = Vec::new();
    for class in CLASSES {
        for p in CONDITIONS {
            let group: Vec<&ImageScores> = images
                .iter()
                .filter(|(c, ip, _)| *c == class && *ip == p)
                .map(|(_, _, s)| s)
                .collect();
            if group.is_empty() {
                continue;
            }
            rows.push(Row {
                label: format!("{} {}", class.label(), p.label()),
                cells: Component::ALL
                    .iter()
                    .map(|comp| mean(group.iter().filter_map(|s| s.components.get(comp)).map(|v| v / 5.0)))
                    .collect(),
            });
        }
    }
    Table {
        name: "components".into(),
        columns: Component::ALL.iter().map(|c| c.abbrev().to_string()).collect(),
        rows,
    }
}

/// Writes `<name>.csv` and `<name>.json` for every table. All files are
/// staged first and renamed into place only after every write succeeded.
pub fn write_tables(dir: &Path, tables: &[Table], manifest: &str, seed: u64) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut staged = Vec::new();
    let mut result = Ok(());
    for t in tables {
        for (ext, body) in [("csv", t.to_csv(manifest, seed)), ("json", t.to_json(manifest, seed))] {
            let fin = dir.join(format!("{}.{ext}", t.name));
            let tmp = dir.join(format!(".{}.{ext}.tmp", t.name));
            if let Err(e) = fs::write(&tmp, body) {
                result = Err(io(&tmp)(e));
                break;
            }
            staged.push((tmp, fin));
        }
        if result.is_err() {
            break;
        }
    }
    if let Err(e) = result {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
        return Err(e);
    }
    let mut written = Vec::new();
    for (tmp, fin) in staged {
        fs::rename(&tmp, &fin).map_err(io(&fin))?;
        written.push(fin);
    }
    Ok(written)
}

/// Writes the score or component report for a store.
pub fn emit_report(store: &ResultStore, shape: ReportShape, agg: Aggregation, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if store.cards.is_empty() {
        return Err(ReportError::EmptyStore);
    }
    let table = match shape {
        ReportShape::Scores => scores_table(store, agg),
        ReportShape::Components => components_table(store, agg),
        ReportShape::Agreement => return Ok(Vec::new()),
    };
    write_tables(dir, &[table], &store.manifest.digest, store.manifest.seed)
}

/// Writes agreement tables.
pub fn emit_agreement(tables: Vec<AgreementTable>, manifest: &str, seed: u64, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let tables: Vec<Table> = tables.into_iter().map(Table::from).collect();
    write_tables(dir, &tables, manifest, seed)
}

/// Per-record pooled scores keyed by id, for agreement inputs.
pub fn image_scores(store: &ResultStore, agg: Aggregation) -> BTreeMap<String, ImageScores> {
    pool_by_record(&store.cards, agg)
}
