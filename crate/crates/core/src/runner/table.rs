use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// A rectangular section of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.columns).map_err(csv_error)?;
        for row in &self.rows {
            out.write_record(row.iter().map(cell_text)).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A float as JSON; non-finite values become the strings `inf`, `-inf`, `NaN`.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x)
        .map(Value::Number)
        .unwrap_or_else(|| Value::String(format!("{x}")))
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Number(n) if n.is_f64() => format!("{:.16e}", n.as_f64().unwrap_or(f64::NAN)),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes table `selector` as CSV: a header row, then one row per entry,
/// floats with 17 significant digits.
pub fn emit_plot_data<W: Write>(tables: &BTreeMap<String, Table>, selector: &str, w: W) -> Result<()> {
    match tables.get(selector) {
        Some(t) => t.write_csv(w),
        None => {
            let names: Vec<&str> = tables.keys().map(String::as_str).collect();
            Err(Error::Config(format!(
                "unknown section '{selector}'; available: {}",
                if names.is_empty() { "none".to_string() } else { names.join(", ") }
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn floats_keep_seventeen_digits() {
        let mut t = Table::new(&["x", "label", "k"]);
        t.push(vec![num(0.1), json!("a,b"), json!(3)]);
        t.push(vec![num(f64::NEG_INFINITY), Value::Null, json!(-1)]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x,label,k\n1.0000000000000001e-1,\"a,b\",3\n-inf,,-1\n");
        let back: f64 = text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
        assert_eq!(back, 0.1);
    }

    #[test]
    fn empty_table_is_header_only() {
        let mut tables = BTreeMap::new();
        tables.insert("curve".to_string(), Table::new(&["xi", "theta", "rate"]));
        let mut buf = Vec::new();
        emit_plot_data(&tables, "curve", &mut buf).unwrap();
        assert_eq!(buf, b"xi,theta,rate\n");
    }

    #[test]
    fn unknown_selector_lists_sections() {
        let mut tables = BTreeMap::new();
        tables.insert("curve".to_string(), Table::default());
        let err = emit_plot_data(&tables, "nope", Vec::new()).unwrap_err();
        assert!(err.to_string().contains("available: curve"));
    }
}
