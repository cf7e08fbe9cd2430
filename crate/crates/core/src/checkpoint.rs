//! Plain-text model checkpoints.
//!
//! ```text
//! advrec-checkpoint 1
//! encoder <mf|lightgcn>
//! tau <real>
//! layers <n>
//! table user <rows> <dim> <adam steps>
//! values
//! <rows lines of dim reals>
//! adam_m
//! <rows lines>
//! adam_v
//! <rows lines>
//! table item ...
//! hardness <embed|mlp>
//! table first ...
//! table second ...
//! end
//! ```
//!
//! Reals are written in Rust's shortest round-trip exponent form, so a
//! write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::InteractionSet;
use crate::encoder::{Encoder, EncoderKind};
use crate::error::{Error, Result};
use crate::loss::{HardnessKind, HardnessModel};
use crate::numkit::EmbeddingTable;

const MAGIC: &str = "advrec-checkpoint 1";

fn write_block(out: &mut String, label: &str, data: &[f64], dim: usize) {
    out.push_str(label);
    out.push('\n');
    for row in data.chunks(dim.max(1)) {
        let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

fn write_table(out: &mut String, name: &str, t: &EmbeddingTable) {
    let _ = writeln!(out, "table {name} {} {} {}", t.rows(), t.dim(), t.step_count());
    let (m, v) = t.moments();
    if t.dim() > 0 {
        write_block(out, "values", t.values(), t.dim());
        write_block(out, "adam_m", m, t.dim());
        write_block(out, "adam_v", v, t.dim());
    }
}

pub fn to_text(encoder: &Encoder, hardness: &HardnessModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "encoder {}", encoder.kind().name());
    let _ = writeln!(out, "tau {:e}", encoder.tau());
    let _ = writeln!(out, "layers {}", encoder.layers());
    write_table(&mut out, "user", encoder.user_table());
    write_table(&mut out, "item", encoder.item_table());
    let _ = writeln!(out, "hardness {}", hardness.kind().name());
    write_table(&mut out, "first", hardness.first());
    write_table(&mut out, "second", hardness.second());
    out.push_str("end\n");
    out
}

pub fn write_checkpoint(path: &Path, encoder: &Encoder, hardness: &HardnessModel) -> Result<()> {
    std::fs::write(path, to_text(encoder, hardness)).map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let (k, l) = self
            .inner
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end after line {}", self.line)))?;
        self.line = k + 1;
        Ok(l)
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("line {}: {msg}", self.line))
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key}`")))
    }

    fn number<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("bad number `{s}`")))
    }

    fn block(&mut self, label: &str, rows: usize, dim: usize) -> Result<Vec<f64>> {
        if self.next()? != label {
            return Err(self.err(format!("expected `{label}`")));
        }
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            let l = self.next()?;
            let before = data.len();
            for tok in l.split_whitespace() {
                data.push(self.number::<f64>(tok)?);
            }
            if data.len() - before != dim {
                return Err(self.err(format!("expected {dim} values")));
            }
        }
        Ok(data)
    }

    fn table(&mut self, name: &str) -> Result<EmbeddingTable> {
        let head = self.keyed("table")?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != name {
            return Err(self.err(format!("expected `table {name} <rows> <dim> <steps>`")));
        }
        let rows: usize = self.number(parts[1])?;
        let dim: usize = self.number(parts[2])?;
        let steps: u64 = self.number(parts[3])?;
        if dim == 0 {
            return EmbeddingTable::from_parts(rows, 0, vec![], vec![], vec![], steps);
        }
        let values = self.block("values", rows, dim)?;
        let m = self.block("adam_m", rows, dim)?;
        let v = self.block("adam_v", rows, dim)?;
        EmbeddingTable::from_parts(rows, dim, values, m, v, steps).map_err(|e| self.err(e))
    }
}

/// Parses a checkpoint. When `set` is given, table sizes must match it.
pub fn from_text(text: &str, set: Option<&InteractionSet>) -> Result<(Encoder, HardnessModel)> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.err("not an advrec checkpoint (version 1)"));
    }
    let kind: EncoderKind = lines.keyed("encoder")?.parse().map_err(|e| lines.err(e))?;
    let tau: f64 = {
        let t = lines.keyed("tau")?;
        lines.number(t)?
    };
    let layers: usize = {
        let t = lines.keyed("layers")?;
        lines.number(t)?
    };
    let users = lines.table("user")?;
    let items = lines.table("item")?;
    let hkind: HardnessKind = lines.keyed("hardness")?.parse().map_err(|e| lines.err(e))?;
    let first = lines.table("first")?;
    let second = lines.table("second")?;
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    if let Some(set) = set {
        let hardness_rows_ok =
            hkind == HardnessKind::Mlp || (first.rows() == set.n_users() && second.rows() == set.n_items());
        if users.rows() != set.n_users() || items.rows() != set.n_items() || !hardness_rows_ok {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint has {} users and {} items, dataset has {} and {}",
                users.rows(),
                items.rows(),
                set.n_users(),
                set.n_items()
            )));
        }
    }
    if hkind == HardnessKind::Mlp && first.dim() != users.dim() + 1 {
        return Err(Error::IncompatibleCheckpoint(
            "hardness projection does not match encoder dim".into(),
        ));
    }
    let encoder = Encoder::from_parts(kind, users, items, layers, set, tau)?;
    let hardness = HardnessModel::from_tables(hkind, first, second)?;
    Ok((encoder, hardness))
}

pub fn read_checkpoint(path: &Path, set: Option<&InteractionSet>) -> Result<(Encoder, HardnessModel)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, set)
}
