//! CSV tables with a versioned header comment line.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use anyhow::Context;

pub struct Table {
    text: String,
    columns: usize,
}

impl Table {
    /// `schema` names the table kind; it is written as `# modeconnect <schema> v1`.
    pub fn new(schema: &str, columns: &[&str]) -> Self {
        Table {
            text: format!("# modeconnect {schema} v1\n{}\n", columns.join(",")),
            columns: columns.len(),
        }
    }

    pub fn row(&mut self, cells: &[&dyn Display]) {
        assert_eq!(cells.len(), self.columns, "row width");
        let cells: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    #[cfg(test)]
    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, &self.text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Mean and population standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows() {
        let mut t = Table::new("demo", &["a", "b"]);
        t.row(&[&1, &"x"]);
        assert_eq!(t.as_str(), "# modeconnect demo v1\na,b\n1,x\n");
    }

    #[test]
    fn single_value_has_zero_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
