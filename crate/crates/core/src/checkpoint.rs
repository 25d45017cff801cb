//! Text checkpoint format.
//!
//! ```text
//! hidialog-checkpoint v1
//! dtype f64
//! [config] <line count>
//! key = value …
//! [dims] 11
//! vocab_size = 57 …
//! [classes] <count>
//! per:friends …
//! [neutral] none
//! [vocab] <count>
//! [PAD] …
//! [tensors] <count>
//! tensor encoder.token_emb 57 32
//! <row-major values, one matrix row per line>
//! end
//! ```
//!
//! Values are written in shortest round-trip decimal form, so a load after a
//! save reproduces every parameter bit for bit.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::preprocess::Vocab;
use crate::scalar::Scalar;
use crate::tape::ParamSet;

pub const MAGIC: &str = "hidialog-checkpoint v1";

#[derive(Debug)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub neutral_class: Option<usize>,
    pub model: Model<T>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn dims_fields(d: &ModelDims) -> [(&'static str, usize); 11] {
    [
        ("vocab_size", d.vocab_size),
        ("num_classes", d.num_classes),
        ("d_model", d.d_model),
        ("d_ff", d.d_ff),
        ("layers", d.layers),
        ("heads", d.heads),
        ("graph_layers", d.graph_layers),
        ("gtn_steps", d.gtn_steps),
        ("k_max", d.k_max),
        ("max_len", d.max_len),
        ("max_speakers", d.max_speakers),
    ]
}

impl<T: Scalar> Checkpoint<T> {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "dtype {}", T::DTYPE)?;
        let config = self.config.render();
        writeln!(out, "[config] {}", config.lines().count())?;
        out.write_all(config.as_bytes())?;
        let dims = dims_fields(&self.model.dims);
        writeln!(out, "[dims] {}", dims.len())?;
        for (k, v) in dims {
            writeln!(out, "{k} = {v}")?;
        }
        writeln!(out, "[classes] {}", self.class_names.len())?;
        for c in &self.class_names {
            writeln!(out, "{c}")?;
        }
        match self.neutral_class {
            Some(n) => writeln!(out, "[neutral] {n}")?,
            None => writeln!(out, "[neutral] none")?,
        }
        let vocab = self.model.vocab.tokens();
        writeln!(out, "[vocab] {}", vocab.len())?;
        for t in vocab {
            writeln!(out, "{t}")?;
        }
        let params = &self.model.params;
        writeln!(out, "[tensors] {}", params.len())?;
        for (name, tensor) in params.iter() {
            writeln!(out, "tensor {name} {} {}", tensor.nrows(), tensor.ncols())?;
            for row in tensor.rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_f64_lossy().to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        writeln!(out, "end")?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file"))?
                .map_err(Error::from)
        };
        if next()? != MAGIC {
            return Err(bad("missing or unsupported version tag"));
        }
        let dtype = next()?;
        if dtype != format!("dtype {}", T::DTYPE) {
            return Err(bad(format!(
                "{dtype:?} does not match requested {}",
                T::DTYPE
            )));
        }
        let count = |line: String, section: &str| -> Result<usize> {
            let rest = line
                .strip_prefix(&format!("[{section}] "))
                .ok_or_else(|| bad(format!("expected [{section}] section, found {line:?}")))?;
            rest.parse()
                .map_err(|_| bad(format!("bad {section} count")))
        };

        let n = count(next()?, "config")?;
        let mut config_text = String::new();
        for _ in 0..n {
            config_text.push_str(&next()?);
            config_text.push('\n');
        }
        let config = RunConfig::parse(&config_text, None)?;

        let n = count(next()?, "dims")?;
        let mut values = std::collections::HashMap::new();
        for _ in 0..n {
            let line = next()?;
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad("bad dims line"))?;
            values.insert(
                k.to_string(),
                v.parse::<usize>().map_err(|_| bad("bad dims value"))?,
            );
        }
        let dim = |k: &str| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| bad(format!("missing dim {k}")))
        };
        let dims = ModelDims {
            vocab_size: dim("vocab_size")?,
            num_classes: dim("num_classes")?,
            d_model: dim("d_model")?,
            d_ff: dim("d_ff")?,
            layers: dim("layers")?,
            heads: dim("heads")?,
            graph_layers: dim("graph_layers")?,
            gtn_steps: dim("gtn_steps")?,
            k_max: dim("k_max")?,
            max_len: dim("max_len")?,
            max_speakers: dim("max_speakers")?,
        };

        let n = count(next()?, "classes")?;
        let class_names = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let neutral = next()?;
        let neutral_class = match neutral.strip_prefix("[neutral] ") {
            Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| bad("bad neutral class"))?),
            None => return Err(bad("expected [neutral]")),
        };

        let n = count(next()?, "vocab")?;
        let vocab = Vocab::from_tokens((0..n).map(|_| next()).collect::<Result<_>>()?)?;

        let n = count(next()?, "tensors")?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let header = next()?;
            let parts: Vec<&str> = header.split(' ').collect();
            let [tag, name, rows, cols] = parts[..] else {
                return Err(bad(format!("bad tensor header {header:?}")));
            };
            if tag != "tensor" {
                return Err(bad(format!("bad tensor header {header:?}")));
            }
            let rows: usize = rows.parse().map_err(|_| bad("bad row count"))?;
            let cols: usize = cols.parse().map_err(|_| bad("bad column count"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next()?;
                let before = data.len();
                for v in line.split(' ').filter(|s| !s.is_empty()) {
                    let x: f64 = v
                        .parse()
                        .map_err(|_| bad(format!("bad value {v:?} in {name}")))?;
                    data.push(T::from_f64_lossy(x));
                }
                if data.len() - before != cols {
                    return Err(bad(format!("tensor {name}: row width differs from {cols}")));
                }
            }
            let tensor =
                Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
            params.add(name, tensor);
        }
        if next()? != "end" {
            return Err(bad("missing end marker"));
        }
        let model = Model::from_parts(dims, config.ablation(), vocab, params)?;
        if class_names.len() != model.dims.num_classes {
            return Err(bad("class count differs from dims"));
        }
        Ok(Checkpoint {
            config,
            class_names,
            neutral_class,
            model,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}
