//! Plain-text checkpoints holding an embedding model and its center bank.
//!
//! ```text
//! softtriple-ckpt v1 <D> <d> <C> <K> <hidden>
//! arch <identity|affine|mlp>
//! tensor layer0.weight <rows> <cols>
//! <cols values> ...             (one line per row)
//! tensor layer0.bias 1 <n>
//! ...
//! tensor centers <C*K> <d>
//! ...
//! ```
//!
//! Values are written with 17 significant digits so a save/load cycle
//! reproduces every parameter bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::linalg::Matrix;
use crate::losses::CenterBank;
use crate::model::{Architecture, Dense, EmbeddingModel};
use crate::{Error, Result};

pub const MAGIC: &str = "softtriple-ckpt";
pub const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub centers: CenterBank,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, data: &[f64]) -> std::io::Result<()> {
    writeln!(w, "tensor {name} {rows} {cols}")?;
    for row in data.chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: EmbeddingModel, centers: CenterBank) -> Result<Self> {
        if model.output_dim() != centers.dim() {
            return Err(Error::contract(format!(
                "model embeds into {} dims but centers have {}",
                model.output_dim(),
                centers.dim()
            )));
        }
        Ok(Self { model, centers })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let m = &self.model;
        writeln!(
            w,
            "{MAGIC} {VERSION} {} {} {} {} {}",
            m.input_dim(),
            m.output_dim(),
            self.centers.classes(),
            self.centers.per_class(),
            m.architecture().hidden()
        )?;
        writeln!(w, "arch {}", m.architecture().name())?;
        for (i, layer) in m.layers().iter().enumerate() {
            let wt = &layer.weight;
            write_tensor(w, &format!("layer{i}.weight"), wt.rows(), wt.cols(), wt.data())?;
            write_tensor(w, &format!("layer{i}.bias"), 1, layer.bias.len(), &layer.bias)?;
        }
        let c = &self.centers;
        write_tensor(w, "centers", c.classes() * c.per_class(), c.dim(), c.data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = Lines {
            inner: r.lines(),
            line_no: 0,
        };
        let header = lines.next_required("header")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 7 || fields[0] != MAGIC || fields[1] != VERSION {
            return Err(lines.error(format!("expected '{MAGIC} {VERSION} D d C K hidden', got '{header}'")));
        }
        let nums: Vec<usize> = fields[2..]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| lines.error(format!("bad header field: {e}")))?;
        let (input, output, classes, per_class, hidden) = (nums[0], nums[1], nums[2], nums[3], nums[4]);

        let arch_line = lines.next_required("arch line")?;
        let arch = match arch_line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["arch", "identity"] => Architecture::Identity,
            ["arch", "affine"] => Architecture::Affine,
            ["arch", "mlp"] => Architecture::Mlp { hidden },
            _ => return Err(lines.error(format!("unknown architecture line '{arch_line}'"))),
        };
        let shapes: Vec<(usize, usize)> = match arch {
            Architecture::Identity => vec![],
            Architecture::Affine => vec![(input, output)],
            Architecture::Mlp { hidden } => vec![(input, hidden), (hidden, output)],
        };
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, (fan_in, fan_out)) in shapes.into_iter().enumerate() {
            let weight = lines.tensor(&format!("layer{i}.weight"), fan_out, fan_in)?;
            let bias = lines.tensor(&format!("layer{i}.bias"), 1, fan_out)?;
            layers.push(Dense {
                weight: Matrix::from_vec(fan_out, fan_in, weight)?,
                bias,
            });
        }
        let centers = lines.tensor("centers", classes * per_class, output)?;
        if let Some(extra) = lines.next_nonempty()? {
            return Err(lines.error(format!("unexpected trailing content '{extra}'")));
        }
        let model = EmbeddingModel::from_layers(arch, input, output, layers)?;
        let centers = CenterBank::new(classes, per_class, output, centers)?;
        Self::new(model, centers)
    }
}

struct Lines<R: BufRead> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn error(&self, message: String) -> Error {
        Error::Parse {
            line: self.line_no,
            message,
        }
    }

    fn next_nonempty(&mut self) -> Result<Option<String>> {
        for line in self.inner.by_ref() {
            self.line_no += 1;
            let line = line?;
            if !line.trim().is_empty() {
                return Ok(Some(line));
            }
        }
        Ok(None)
    }

    fn next_required(&mut self, what: &str) -> Result<String> {
        match self.next_nonempty()? {
            Some(l) => Ok(l),
            None => Err(self.error(format!("unexpected end of file, expected {what}"))),
        }
    }

    fn tensor(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let head = self.next_required(&format!("tensor {name}"))?;
        let expected = format!("tensor {name} {rows} {cols}");
        if head.split_whitespace().collect::<Vec<_>>() != expected.split_whitespace().collect::<Vec<_>>() {
            return Err(self.error(format!("expected '{expected}', got '{head}'")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = self.next_required(&format!("row of {name}"))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.error(format!("'{tok}' is not a number")))?;
                if !v.is_finite() {
                    return Err(self.error(format!("non-finite value in {name}")));
                }
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(self.error(format!(
                    "row of {name} has {} values, expected {cols}",
                    data.len() - before
                )));
            }
        }
        Ok(data)
    }
}
