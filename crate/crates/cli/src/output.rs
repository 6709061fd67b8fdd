use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::Context;

/// Line-oriented record sink: stdout or a file.
pub struct Sink(Box<dyn Write>);

impl Sink {
    pub fn open(path: Option<&Path>) -> anyhow::Result<Self> {
        Ok(Sink(match path {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        }))
    }

    pub fn line(&mut self, text: &str) -> anyhow::Result<()> {
        writeln!(self.0, "{text}")?;
        Ok(())
    }

    pub fn json(&mut self, value: &serde_json::Value) -> anyhow::Result<()> {
        self.line(&value.to_string())
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        self.0.flush()?;
        Ok(())
    }
}
