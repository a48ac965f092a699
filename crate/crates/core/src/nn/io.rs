//! Plain-text parameter files.
//!
//! Layout (one record per line, whitespace separated):
//!
//! ```text
//! mlp v1
//! input_dim <n>
//! hidden_dims <h1> <h2> ...
//! output_dim <n>
//! activation tanh
//! dropout_keep_prob <p>
//! weight_decay <λ>
//! seed <u64>
//! layer <index> <out> <in>
//! w <in values>        # repeated <out> times, row-major
//! b <out values>
//! ...                  # one block per layer
//! end
//! ```
//!
//! Reals are written in shortest round-trip exponent form, so save/load is bit-exact.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};

use super::mlp::{Activation, DenseLayer, MlpConfig, MlpNetwork};
use crate::error::{Error, Result};

pub const MLP_MAGIC: &str = "mlp";
pub const MLP_VERSION: &str = "v1";

/// Line cursor that skips blanks and `#` comments and remembers the line number.
pub(crate) struct TokenLines<R> {
    inner: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> TokenLines<R> {
    pub(crate) fn new(inner: R) -> Self {
        TokenLines {
            inner,
            line_no: 0,
            buf: String::new(),
        }
    }

    pub(crate) fn line_no(&self) -> usize {
        self.line_no
    }

    pub(crate) fn next_tokens(&mut self) -> Result<Vec<String>> {
        loop {
            self.buf.clear();
            let n = self.inner.read_line(&mut self.buf)?;
            self.line_no += 1;
            if n == 0 {
                return Err(Error::parse(self.line_no, "unexpected end of file"));
            }
            let content = self.buf.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                return Ok(content.split_whitespace().map(str::to_owned).collect());
            }
        }
    }

    /// Next line, which must start with `key`; returns the remaining tokens.
    pub(crate) fn expect_key(&mut self, key: &str) -> Result<Vec<String>> {
        let mut toks = self.next_tokens()?;
        if toks.first().map(String::as_str) != Some(key) {
            return Err(Error::parse(
                self.line_no,
                format!("expected `{key}`, found `{}`", toks.join(" ")),
            ));
        }
        toks.remove(0);
        Ok(toks)
    }

    pub(crate) fn expect_single<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let toks = self.expect_key(key)?;
        if toks.len() != 1 {
            return Err(Error::parse(
                self.line_no,
                format!("`{key}` takes exactly one value"),
            ));
        }
        self.parse_token(&toks[0])
    }

    pub(crate) fn parse_token<T: std::str::FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse()
            .map_err(|_| Error::parse(self.line_no, format!("cannot parse `{tok}`")))
    }

    pub(crate) fn parse_all<T: std::str::FromStr>(&self, toks: &[String]) -> Result<Vec<T>> {
        toks.iter().map(|t| self.parse_token(t)).collect()
    }
}

fn write_reals<W: Write>(w: &mut W, tag: &str, values: impl Iterator<Item = f64>) -> Result<()> {
    write!(w, "{tag}")?;
    for v in values {
        write!(w, " {v:e}")?;
    }
    writeln!(w)?;
    Ok(())
}

pub fn write_mlp<W: Write>(net: &MlpNetwork, w: &mut W) -> Result<()> {
    let cfg = net.config();
    writeln!(w, "{MLP_MAGIC} {MLP_VERSION}")?;
    writeln!(w, "input_dim {}", cfg.input_dim)?;
    let hidden: Vec<String> = cfg.hidden_dims.iter().map(ToString::to_string).collect();
    writeln!(w, "hidden_dims {}", hidden.join(" "))?;
    writeln!(w, "output_dim {}", cfg.output_dim)?;
    writeln!(w, "activation {}", cfg.activation.name())?;
    writeln!(w, "dropout_keep_prob {:e}", cfg.dropout_keep_prob)?;
    writeln!(w, "weight_decay {:e}", cfg.weight_decay)?;
    writeln!(w, "seed {}", cfg.seed)?;
    for (i, layer) in net.layers.iter().enumerate() {
        writeln!(w, "layer {i} {} {}", layer.fan_out(), layer.fan_in())?;
        for row in layer.weights.rows() {
            write_reals(w, "w", row.iter().copied())?;
        }
        write_reals(w, "b", layer.biases.iter().copied())?;
    }
    writeln!(w, "end")?;
    Ok(())
}

pub(crate) fn read_mlp_from<R: BufRead>(lines: &mut TokenLines<R>) -> Result<MlpNetwork> {
    let header = lines.next_tokens()?;
    if header != [MLP_MAGIC, MLP_VERSION] {
        return Err(Error::parse(
            lines.line_no(),
            format!("expected `{MLP_MAGIC} {MLP_VERSION}` header"),
        ));
    }
    let input_dim = lines.expect_single("input_dim")?;
    let toks = lines.expect_key("hidden_dims")?;
    let hidden_dims = lines.parse_all(&toks)?;
    let output_dim = lines.expect_single("output_dim")?;
    let act: String = lines.expect_single("activation")?;
    let activation = Activation::from_name(&act)
        .ok_or_else(|| Error::parse(lines.line_no(), format!("unknown activation `{act}`")))?;
    let config = MlpConfig {
        input_dim,
        hidden_dims,
        output_dim,
        activation,
        dropout_keep_prob: lines.expect_single("dropout_keep_prob")?,
        weight_decay: lines.expect_single("weight_decay")?,
        seed: lines.expect_single("seed")?,
    };
    config
        .validate()
        .map_err(|e| Error::parse(lines.line_no(), e.to_string()))?;

    let mut layers = Vec::new();
    for (i, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
        let toks = lines.expect_key("layer")?;
        let dims: Vec<usize> = lines.parse_all(&toks)?;
        if dims != [i, fan_out, fan_in] {
            return Err(Error::parse(
                lines.line_no(),
                format!("layer {i} header does not match topology"),
            ));
        }
        let mut weights = Array2::zeros((fan_out, fan_in));
        for r in 0..fan_out {
            let toks = lines.expect_key("w")?;
            let row: Vec<f64> = lines.parse_all(&toks)?;
            if row.len() != fan_in {
                return Err(Error::parse(
                    lines.line_no(),
                    format!("expected {fan_in} weights, got {}", row.len()),
                ));
            }
            weights.row_mut(r).assign(&Array1::from(row));
        }
        let toks = lines.expect_key("b")?;
        let biases: Vec<f64> = lines.parse_all(&toks)?;
        if biases.len() != fan_out {
            return Err(Error::parse(
                lines.line_no(),
                format!("expected {fan_out} biases, got {}", biases.len()),
            ));
        }
        layers.push(DenseLayer {
            weights,
            biases: Array1::from(biases),
        });
    }
    lines.expect_key("end")?;
    MlpNetwork::from_layers(config, layers)
}

pub fn read_mlp<R: BufRead>(r: R) -> Result<MlpNetwork> {
    read_mlp_from(&mut TokenLines::new(r))
}
