//! Columnar sample files: one sample per line, comma-separated features, label last.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context};
use flsim_core::model::Sample;

/// Reads samples, multiplying features by `scale` and optionally appending a
/// constant bias feature. A first line that does not parse as numbers is
/// treated as a header.
pub fn read_samples<R: Read>(reader: R, scale: f64, bias: bool) -> anyhow::Result<Vec<Sample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut width = None;
    for (line, record) in rdr.records().enumerate() {
        let record = record.with_context(|| format!("line {}", line + 1))?;
        let values: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => bail!("line {}: {e}", line + 1),
        };
        if values.len() < 2 {
            bail!("line {}: need at least one feature and a label", line + 1);
        }
        if *width.get_or_insert(values.len()) != values.len() {
            bail!("line {}: expected {} fields, found {}", line + 1, width.unwrap(), values.len());
        }
        if values.iter().any(|v| !v.is_finite()) {
            bail!("line {}: non-finite value", line + 1);
        }
        let (label, features) = values.split_last().expect("at least two fields");
        let mut input: Vec<f64> = features.iter().map(|v| v * scale).collect();
        if bias {
            input.push(1.0);
        }
        out.push(Sample::new(input, *label));
    }
    if out.is_empty() {
        bail!("no samples found");
    }
    Ok(out)
}

pub fn load_samples(path: &Path, scale: f64, bias: bool) -> anyhow::Result<Vec<Sample>> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_samples(std::io::BufReader::new(file), scale, bias).with_context(|| path.display().to_string())
}

pub fn write_samples<W: Write>(writer: W, samples: &[Sample]) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for s in samples {
        let row: Vec<String> = s
            .input
            .iter()
            .chain(std::iter::once(&s.label))
            .map(f64::to_string)
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
