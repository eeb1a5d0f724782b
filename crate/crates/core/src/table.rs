//! In-memory tables and RFC 4180 CSV input/output.
//!
//! Every cell is carried as text. An unquoted empty field is [`None`] (absent),
//! a quoted empty field (`""`) is the empty string, and the literal `NA` is
//! ordinary data.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// A nullable text cell.
pub type Cell = Option<String>;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("column `{0}` not found")]
    UnknownColumn(String),
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
}

/// Named columns over rows of nullable text cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    name: String,
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: Vec<String>, rows: Vec<Vec<Cell>>) -> Result<Self, TableError> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(TableError::DuplicateColumn(c.clone()));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(TableError::RaggedRow {
                    row: i,
                    found: row.len(),
                    expected: columns.len(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            columns,
            rows,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    pub fn has_column(&self, column: &str) -> bool {
        self.column_index(column).is_some()
    }

    /// Iterates the cells of one column.
    pub fn column_cells<'a>(&'a self, column: &str) -> Result<impl Iterator<Item = &'a Cell> + 'a, TableError> {
        let idx = self
            .column_index(column)
            .ok_or_else(|| TableError::UnknownColumn(column.to_string()))?;
        Ok(self.rows.iter().map(move |r| &r[idx]))
    }

    /// Projects onto `columns`, in that order.
    pub fn select(&self, columns: &[String]) -> Result<Table, TableError> {
        let idx = columns
            .iter()
            .map(|c| self.column_index(c).ok_or_else(|| TableError::UnknownColumn(c.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let rows = self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
            .collect();
        Table::new(self.name.clone(), columns.to_vec(), rows)
    }

    /// Sorted set of non-null texts in `column`.
    pub fn distinct_values(&self, column: &str) -> Result<Vec<String>, TableError> {
        let set: BTreeSet<&String> = self.column_cells(column)?.flatten().collect();
        Ok(set.into_iter().cloned().collect())
    }

    /// Serializes to CSV text (header row, `\n` line endings).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        write_record(&mut out, self.columns.iter().map(|c| Some(c.as_str())));
        for row in &self.rows {
            write_record(&mut out, row.iter().map(|c| c.as_deref()));
        }
        out
    }

    /// Parses CSV text with a header row.
    pub fn from_csv_str(name: impl Into<String>, text: &str) -> Result<Table, TableError> {
        let mut records = parse_csv(text)?;
        if records.is_empty() {
            return Err(TableError::Malformed {
                line: 1,
                reason: "missing header row".into(),
            });
        }
        let header: Vec<String> = records.remove(0).into_iter().map(|c| c.unwrap_or_default()).collect();
        let width = header.len();
        for (i, rec) in records.iter().enumerate() {
            if rec.len() != width {
                return Err(TableError::Malformed {
                    line: i + 2,
                    reason: format!("expected {width} fields, found {}", rec.len()),
                });
            }
        }
        Table::new(name, header, records)
    }
}

fn needs_quotes(field: &str) -> bool {
    field.is_empty() || field.contains([',', '"', '\n', '\r'])
}

fn write_record<'a>(out: &mut String, fields: impl Iterator<Item = Option<&'a str>>) {
    for (i, field) in fields.enumerate() {
        if i > 0 {
            out.push(',');
        }
        match field {
            None => {}
            Some(f) if needs_quotes(f) => {
                out.push('"');
                out.push_str(&f.replace('"', "\"\""));
                out.push('"');
            }
            Some(f) => out.push_str(f),
        }
    }
    out.push('\n');
}

/// RFC 4180 record parser. Unquoted empty fields come back as `None`.
fn parse_csv(text: &str) -> Result<Vec<Vec<Cell>>, TableError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut records = Vec::new();
    let mut record: Vec<Cell> = Vec::new();
    let mut field = String::new();
    let mut quoted = false;
    let mut line = 1usize;
    let mut chars = text.chars().peekable();
    // true once any character of the current record has been consumed
    let mut in_record = false;

    let end_field = |record: &mut Vec<Cell>, field: &mut String, quoted: &mut bool| {
        if *quoted || !field.is_empty() {
            record.push(Some(std::mem::take(field)));
        } else {
            record.push(None);
        }
        *quoted = false;
    };

    while let Some(ch) = chars.next() {
        in_record = true;
        match ch {
            '"' => {
                if !field.is_empty() || quoted {
                    return Err(TableError::Malformed {
                        line,
                        reason: "quote inside unquoted field".into(),
                    });
                }
                quoted = true;
                let start_line = line;
                loop {
                    match chars.next() {
                        None => {
                            return Err(TableError::Malformed {
                                line: start_line,
                                reason: "unbalanced quotes".into(),
                            })
                        }
                        Some('"') => {
                            if chars.peek() == Some(&'"') {
                                chars.next();
                                field.push('"');
                            } else {
                                break;
                            }
                        }
                        Some(c) => {
                            if c == '\n' {
                                line += 1;
                            }
                            field.push(c);
                        }
                    }
                }
                match chars.peek() {
                    None | Some(',') | Some('\n') | Some('\r') => {}
                    Some(_) => {
                        return Err(TableError::Malformed {
                            line,
                            reason: "unexpected character after closing quote".into(),
                        })
                    }
                }
            }
            ',' => end_field(&mut record, &mut field, &mut quoted),
            '\r' if chars.peek() == Some(&'\n') => {}
            '\n' => {
                end_field(&mut record, &mut field, &mut quoted);
                records.push(std::mem::take(&mut record));
                line += 1;
                in_record = false;
            }
            c => {
                if quoted {
                    return Err(TableError::Malformed {
                        line,
                        reason: "unexpected character after closing quote".into(),
                    });
                }
                field.push(c);
            }
        }
    }
    if in_record {
        end_field(&mut record, &mut field, &mut quoted);
        records.push(record);
    }
    Ok(records)
}

/// Loads a CSV file, optionally projecting onto `columns` (in the given order).
/// The table is named after the file stem.
pub fn load_table(path: impl AsRef<Path>, columns: Option<&[String]>) -> Result<Table, TableError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| TableError::Malformed {
        line: 0,
        reason: format!("invalid UTF-8: {e}"),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let table = Table::from_csv_str(name, &text)?;
    match columns {
        Some(cols) => table.select(cols),
        None => Ok(table),
    }
}

/// Writes `table` as CSV; `load_table` on the result yields the same table.
pub fn write_table(table: &Table, path: impl AsRef<Path>) -> Result<(), TableError> {
    let path = path.as_ref();
    let io_err = |source| TableError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(table.to_csv_string().as_bytes()).map_err(io_err)?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, TableError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            TableError::NotFound(path.to_path_buf())
        } else {
            TableError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}
