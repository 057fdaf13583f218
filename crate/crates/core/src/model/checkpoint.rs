//! Plain-text parameter checkpoints.
//!
//! ```text
//! taml-checkpoint v1
//! config <input_dim> <h1> <h2> <h3> <activation> <n_heads>
//! tensor <rank> <dims...>
//! <row-major values, one matrix row per line>
//! ...
//! ```
//!
//! Values use the shortest decimal form that parses back to the same bits.

use std::io::{BufRead, Write};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{Activation, MlpConfig, MlpParams};

pub const CHECKPOINT_VERSION: &str = "taml-checkpoint v1";

pub fn write_checkpoint<W: Write>(params: &MlpParams, mut out: W) -> Result<()> {
    let c = params.config();
    writeln!(out, "{CHECKPOINT_VERSION}")?;
    writeln!(
        out,
        "config {} {} {} {} {} {}",
        c.input_dim,
        c.hidden_dims[0],
        c.hidden_dims[1],
        c.hidden_dims[2],
        c.activation.name(),
        c.n_heads
    )?;
    for t in params.tensors() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "tensor {} {}", t.rank(), dims.join(" "))?;
        let width = t.shape().last().copied().unwrap_or(1).max(1);
        for row in t.data().chunks(width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| bad(format!("expected a count, found {s:?}")))
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<MlpParams> {
    let mut lines = input.lines();
    let mut next = move || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad("unexpected end of file"))?
            .map_err(Error::from)
    };

    let header = next()?;
    if header.trim() != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported header {header:?}")));
    }
    let config_line = next()?;
    let fields: Vec<&str> = config_line.split_whitespace().collect();
    if fields.len() != 7 || fields[0] != "config" {
        return Err(bad(format!("bad config line {config_line:?}")));
    }
    let activation = match fields[5] {
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        other => return Err(bad(format!("unknown activation {other:?}"))),
    };
    let config = MlpConfig {
        input_dim: parse_usize(fields[1])?,
        hidden_dims: [
            parse_usize(fields[2])?,
            parse_usize(fields[3])?,
            parse_usize(fields[4])?,
        ],
        activation,
        n_heads: parse_usize(fields[6])?,
    };
    config.validate()?;

    let mut tensors = Vec::new();
    for _ in 0..config.param_shapes().len() {
        let line = next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"tensor") || fields.len() < 2 {
            return Err(bad(format!("bad tensor line {line:?}")));
        }
        let rank = parse_usize(fields[1])?;
        if fields.len() != rank + 2 {
            return Err(bad(format!("tensor line {line:?} does not list {rank} dims")));
        }
        let shape: Vec<usize> = fields[2..]
            .iter()
            .map(|s| parse_usize(s))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            for tok in next()?.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| bad(format!("bad value {tok:?}")))?,
                );
            }
        }
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        if !t.is_finite() {
            return Err(bad("non-finite parameter value"));
        }
        tensors.push(t);
    }
    MlpParams::from_tensors(config, tensors)
}
