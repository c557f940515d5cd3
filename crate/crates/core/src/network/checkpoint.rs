//! Checkpoint layout: the `key=value` config block, one blank line, then the
//! named-tensor container.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::serialize::{read_tensors, write_tensors};

use super::config::ModelConfig;
use super::model::Model;

pub fn write_checkpoint(model: &Model, out: &mut impl Write) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    out.write_all(model.config.to_kv().as_bytes()).map_err(io)?;
    out.write_all(b"\n").map_err(io)?;
    let entries: Vec<(&str, &crate::tensor::Tensor)> = model.store.iter().map(|(_, n, t)| (n, t)).collect();
    write_tensors(out, entries)
}

/// Writes through a temporary sibling and renames it into place.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.partial");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(model, &mut w)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(input: &mut impl BufRead) -> Result<Model> {
    let mut config = String::new();
    let mut offset = 0;
    loop {
        let mut line = String::new();
        let n = input.read_line(&mut line).map_err(|e| Error::io("<checkpoint>", e))?;
        if n == 0 {
            return Err(Error::Format {
                kind: "checkpoint",
                offset,
                msg: "missing blank line after config block".into(),
            });
        }
        offset += n;
        if line.trim_end_matches(['\r', '\n']).is_empty() {
            break;
        }
        config.push_str(&line);
    }
    let config = ModelConfig::from_kv(&config)?;
    let mut model = Model::new(config, 0)?;
    let tensors = read_tensors(input, offset)?;
    model.store.load(tensors)?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
