use std::path::PathBuf;

use anyhow::{anyhow, bail, Context};
use clap::Args;

use fedpart::data::{save_dataset, Dataset};
use fedpart::Tensor;

use crate::CmdResult;

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// CSV with a header row, numeric feature columns and one `label` column.
    csv: PathBuf,
    /// Output dataset file.
    output: PathBuf,
    /// Class count; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
}

/// Parsed CSV contents: row-major features, labels, class count.
pub fn parse_csv(text: &str, classes: Option<usize>) -> anyhow::Result<(Vec<f64>, Vec<usize>, usize, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().context("reading CSV header")?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        bail!("empty CSV file");
    }
    let label_col = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case("label"))
        .ok_or_else(|| anyhow!("no label column"))?;
    let width = headers.len();
    if width < 2 {
        bail!("no feature columns");
    }
    let (mut features, mut labels) = (vec![], vec![]);
    for rec in rdr.records() {
        let rec = rec.context("malformed CSV")?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            bail!("line {line}: expected {width} fields, found {}", rec.len());
        }
        for (c, cell) in rec.iter().enumerate() {
            if c == label_col {
                let l: usize = cell
                    .parse()
                    .map_err(|_| anyhow!("line {line}: label {cell:?} is not a non-negative integer"))?;
                if let Some(k) = classes {
                    if l >= k {
                        bail!("line {line}: label {l} out of range for {k} classes");
                    }
                }
                labels.push(l);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| anyhow!("line {line}, column {}: {cell:?} is not a number", headers[c].to_string()))?;
                if !v.is_finite() {
                    bail!("line {line}, column {}: value is not finite", &headers[c]);
                }
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        bail!("CSV holds no data rows");
    }
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    Ok((features, labels, k, width - 1))
}

pub fn cmd_convert(args: ConvertArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.csv).with_context(|| format!("reading {}", args.csv.display()))?;
    let (features, labels, classes, dims) = parse_csv(&text, args.classes)?;
    let n = labels.len();
    let ds = Dataset::new(Tensor::new(vec![n, dims], features)?, labels, classes)?;
    save_dataset(&ds, &args.output)?;
    println!("n={n} K={classes} dims=[{dims}]");
    Ok(())
}
