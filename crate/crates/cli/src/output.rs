use std::io::{self, Write};

use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Table,
}

/// Rows of strings with a header, rendered as CSV or an aligned text table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grid {
    pub title: Option<String>,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub footer: Vec<String>,
}

impl Grid {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn titled(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(|c| c.to_string()).collect());
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.footer.push(line.into());
    }

    /// CSV output carries only header and rows; titles and footers are
    /// emitted as `#` comment lines.
    pub fn write<W: Write>(&self, format: Format, mut out: W) -> io::Result<()> {
        match format {
            Format::Csv => {
                if let Some(t) = &self.title {
                    writeln!(out, "# {t}")?;
                }
                let mut w = csv::Writer::from_writer(&mut out);
                w.write_record(&self.headers)?;
                for r in &self.rows {
                    w.write_record(r)?;
                }
                w.flush()?;
                drop(w);
                for line in &self.footer {
                    writeln!(out, "# {line}")?;
                }
            }
            Format::Table => {
                if let Some(t) = &self.title {
                    writeln!(out, "{t}")?;
                }
                let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
                for r in &self.rows {
                    for (i, c) in r.iter().enumerate() {
                        if i < widths.len() {
                            widths[i] = widths[i].max(c.len());
                        }
                    }
                }
                let line = |cells: &[String]| {
                    cells
                        .iter()
                        .zip(&widths)
                        .map(|(c, w)| format!("{c:>w$}"))
                        .collect::<Vec<_>>()
                        .join("  ")
                };
                writeln!(out, "{}", line(&self.headers))?;
                writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "))?;
                for r in &self.rows {
                    writeln!(out, "{}", line(r))?;
                }
                for l in &self.footer {
                    writeln!(out, "{l}")?;
                }
            }
        }
        Ok(())
    }
}

/// Shortest round-trip form of an f64.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Fixed precision for table display.
pub fn fixed(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}
