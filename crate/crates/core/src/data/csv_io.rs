//! CSV ingestion and export with columns `id,text,label_sexist,label_category,label_vector`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use super::example::LabeledExample;
use super::labels::{is_none_label, Task, NOT_SEXIST, SEXIST};
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 5] = [
    "id",
    "text",
    "label_sexist",
    "label_category",
    "label_vector",
];

/// Official dataset name of the id column.
pub const EDOS_ID_COLUMN: &str = "rewire_id";

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept `rewire_id` as the id column.
    pub edos_columns: bool,
}

pub fn load_dataset(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Vec<LabeledExample>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, opts)
}

pub fn read_dataset<R: Read>(reader: R, opts: LoadOptions) -> Result<Vec<LabeledExample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| {
            let h = h.trim();
            h == name || (opts.edos_columns && name == "id" && h == EDOS_ID_COLUMN)
        })
    };
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(COLUMNS) {
        *slot = find(name).ok_or_else(|| Error::Format(format!("missing column `{name}`")))?;
    }

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let field = |i: usize| record.get(cols[i]).unwrap_or("");
        let id = field(0).to_string();
        let invalid = |message: String| Error::Validation {
            row: id.clone(),
            message,
        };
        let sexist = match Task::A.label_set().index(field(2)) {
            Some(i) => i == 1,
            None => return Err(invalid(format!("unknown label_sexist `{}`", field(2)))),
        };
        let parse = |task: Task, raw: &str| -> Result<Option<usize>> {
            if is_none_label(raw) {
                return Ok(None);
            }
            task.label_set()
                .index(raw)
                .map(Some)
                .ok_or_else(|| invalid(format!("unknown Task {task} label `{raw}`")))
        };
        let category = parse(Task::B, field(3))?;
        let vector = parse(Task::C, field(4))?;
        if !seen.insert(id.clone()) {
            return Err(invalid("duplicate id".into()));
        }
        out.push(LabeledExample::new(
            id.clone(),
            field(1),
            sexist,
            category,
            vector,
        )?);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_dataset(file, examples)
}

pub fn write_dataset<W: Write>(writer: W, examples: &[LabeledExample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS)?;
    let name =
        |task: Task, i: Option<usize>| i.and_then(|i| task.label_set().name(i)).unwrap_or("none");
    for ex in examples {
        let a = if ex.sexist { SEXIST } else { NOT_SEXIST };
        w.write_record([
            ex.id.as_str(),
            ex.text.as_str(),
            a,
            name(Task::B, ex.category),
            name(Task::C, ex.vector),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Unlabeled corpus: one document per line, blank lines skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn save_corpus(path: impl AsRef<Path>, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for l in lines {
        writeln!(f, "{}", l.replace(['\n', '\r'], " "))?;
    }
    f.flush()?;
    Ok(())
}
