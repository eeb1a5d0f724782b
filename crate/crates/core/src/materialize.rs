//! Executes mapping specifications and composes harmonized tables.

use std::collections::HashMap;

use thiserror::Error;

use crate::mapspec::{EntryAction, MappingSpec, OnMissing, Transform};
use crate::table::{Cell, Table, TableError};

#[derive(Debug, Error)]
pub enum MaterializeError {
    #[error("source column `{0}` not found in input table")]
    MissingColumn(String),
    #[error("value `{value}` in column `{column}` has no mapping (on_missing=error)")]
    UnmappedValue { column: String, value: String },
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Applies `spec` to `input`. Output columns are the non-drop targets in entry
/// order; the row count is preserved and null cells stay null.
pub fn materialize_mapping(input: &Table, spec: &MappingSpec) -> Result<Table, MaterializeError> {
    struct Plan<'a> {
        column: &'a str,
        index: usize,
        transform: &'a Transform,
        dictionary: HashMap<&'a str, &'a str>,
    }

    let mut columns = Vec::new();
    let mut plans = Vec::new();
    for entry in spec.entries() {
        let EntryAction::Map { target, transform } = &entry.action else {
            continue;
        };
        let index = input
            .column_index(&entry.source)
            .ok_or_else(|| MaterializeError::MissingColumn(entry.source.clone()))?;
        let dictionary = match transform {
            Transform::Dictionary(pairs) => pairs.iter().map(|(s, t)| (s.as_str(), t.as_str())).collect(),
            _ => HashMap::new(),
        };
        columns.push(target.clone());
        plans.push(Plan {
            column: &entry.source,
            index,
            transform,
            dictionary,
        });
    }

    let mut rows = Vec::with_capacity(input.num_rows());
    for row in input.rows() {
        let mut out: Vec<Cell> = Vec::with_capacity(plans.len());
        for plan in &plans {
            let cell = &row[plan.index];
            let mapped = match plan.transform {
                Transform::Rename => cell.clone(),
                Transform::Constant(c) => Some(c.clone()),
                Transform::Dictionary(_) => match cell {
                    None => None,
                    Some(v) => match plan.dictionary.get(v.as_str()) {
                        Some(t) => Some(t.to_string()),
                        None => match spec.on_missing() {
                            OnMissing::Keep => Some(v.clone()),
                            OnMissing::Null => None,
                            OnMissing::Error => {
                                return Err(MaterializeError::UnmappedValue {
                                    column: plan.column.to_string(),
                                    value: v.clone(),
                                })
                            }
                        },
                    },
                },
            };
            out.push(mapped);
        }
        rows.push(out);
    }
    Ok(Table::new(input.name(), columns, rows)?)
}

/// Stacks tables. Columns are the union in first-appearance order; cells a
/// part lacks are null.
pub fn union_tables(parts: &[Table]) -> Table {
    let mut columns: Vec<String> = Vec::new();
    for part in parts {
        for c in part.columns() {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
    }
    let mut rows = Vec::with_capacity(parts.iter().map(Table::num_rows).sum());
    for part in parts {
        let layout: Vec<Option<usize>> = columns.iter().map(|c| part.column_index(c)).collect();
        for row in part.rows() {
            rows.push(layout.iter().map(|i| i.and_then(|i| row[i].clone())).collect());
        }
    }
    let name = parts.first().map(|p| p.name().to_string()).unwrap_or_default();
    Table::new(name, columns, rows).expect("union columns are unique and rows aligned")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapspec::{parse_spec, MappingEntry};

    fn t(columns: &[&str], rows: &[&[Option<&str>]]) -> Table {
        Table::new(
            "t",
            columns.iter().map(|c| c.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|c| c.map(str::to_string)).collect())
                .collect(),
        )
        .unwrap()
    }

    const GRADE_SPEC: &str = r#"[{"source":"Histologic_Grade_FIGO","target":"tumor_grade","matches":[["FIGO grade 1","G1"],["FIGO grade 2","G2"],["FIGO grade 3","G3"]]}]"#;

    #[test]
    fn dictionary_lookup() {
        let input = t(
            &["Histologic_Grade_FIGO"],
            &[&[Some("FIGO grade 2")], &[None], &[Some("FIGO grade 9")]],
        );
        let out = materialize_mapping(&input, &parse_spec(GRADE_SPEC).unwrap()).unwrap();
        assert_eq!(out.columns(), ["tumor_grade"]);
        assert_eq!(
            out.rows(),
            [
                vec![Some("G2".to_string())],
                vec![None],
                vec![Some("FIGO grade 9".to_string())]
            ]
        );
    }

    #[test]
    fn missing_value_policies() {
        let input = t(&["Histologic_Grade_FIGO"], &[&[Some("FIGO grade 9")]]);
        let entries = parse_spec(GRADE_SPEC).unwrap().entries().to_vec();
        let null = MappingSpec::new(entries.clone(), OnMissing::Null).unwrap();
        assert_eq!(materialize_mapping(&input, &null).unwrap().rows()[0], vec![None]);
        let strict = MappingSpec::new(entries, OnMissing::Error).unwrap();
        let err = materialize_mapping(&input, &strict).unwrap_err();
        assert_eq!(
            err.to_string(),
            "value `FIGO grade 9` in column `Histologic_Grade_FIGO` has no mapping (on_missing=error)"
        );
    }

    #[test]
    fn empty_table_keeps_header() {
        let input = t(&["Histologic_Grade_FIGO"], &[]);
        let out = materialize_mapping(&input, &parse_spec(GRADE_SPEC).unwrap()).unwrap();
        assert_eq!(out.columns(), ["tumor_grade"]);
        assert_eq!(out.num_rows(), 0);
    }

    #[test]
    fn rename_constant_drop_and_order() {
        let input = t(&["a", "b", "c"], &[&[Some("1"), Some("2"), None]]);
        let spec = MappingSpec::new(
            vec![
                MappingEntry::rename("c", "z"),
                MappingEntry::drop("a"),
                MappingEntry::constant("b", "k", "K"),
            ],
            OnMissing::Keep,
        )
        .unwrap();
        let out = materialize_mapping(&input, &spec).unwrap();
        assert_eq!(out.columns(), ["z", "k"]);
        assert_eq!(out.rows()[0], vec![None, Some("K".to_string())]);
    }

    #[test]
    fn missing_source_column() {
        let input = t(&["a"], &[]);
        let spec = MappingSpec::new(vec![MappingEntry::rename("b", "x")], OnMissing::Keep).unwrap();
        assert!(matches!(
            materialize_mapping(&input, &spec),
            Err(MaterializeError::MissingColumn(ref c)) if c == "b"
        ));
    }

    #[test]
    fn union_fills_nulls_block_diagonally() {
        let a = t(&["p", "q"], &[&[Some("a1"), Some("a2")], &[Some("a3"), Some("a4")]]);
        let b = t(&["r", "s"], &[&[Some("b1"), Some("b2")], &[Some("b3"), Some("b4")]]);
        let u = union_tables(&[a, b]);
        assert_eq!(u.columns(), ["p", "q", "r", "s"]);
        let s = |v: &str| Some(v.to_string());
        assert_eq!(
            u.rows(),
            [
                vec![s("a1"), s("a2"), None, None],
                vec![s("a3"), s("a4"), None, None],
                vec![None, None, s("b1"), s("b2")],
                vec![None, None, s("b3"), s("b4")],
            ]
        );
    }

    #[test]
    fn union_with_self_doubles() {
        let a = t(&["p"], &[&[Some("1")], &[None]]);
        assert_eq!(union_tables(&[a.clone(), a]).num_rows(), 4);
        assert_eq!(union_tables(&[]).columns().len(), 0);
    }
}
