//! Checkpoint directories: `manifest.txt`, `params.bin`, `optimizer.bin`
//! and `config.snapshot`.
//!
//! Each manifest line is `<file> <name> <rows>x<cols> <byte offset>`; the
//! binary files hold little-endian f64 arrays, row-major, back to back.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndcore::Tensor;

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.snapshot";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Model parameters and auxiliary `stats.*` arrays.
    pub params: Vec<(String, Tensor)>,
    /// Optimizer moments and `state.*` scalars.
    pub optimizer: Vec<(String, Tensor)>,
    pub config: String,
}

fn encode(arrays: &[(String, Tensor)], file: &str, manifest: &mut String) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for (name, t) in arrays {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid array name `{name}`")));
        }
        manifest.push_str(&format!("{file} {name} {}x{} {}\n", t.rows(), t.cols(), bytes.len()));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .chain(&self.optimizer)
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let params = encode(&self.params, PARAMS_FILE, &mut manifest)?;
        let optimizer = encode(&self.optimizer, OPTIMIZER_FILE, &mut manifest)?;
        fs::write(dir.join(PARAMS_FILE), params)?;
        fs::write(dir.join(OPTIMIZER_FILE), optimizer)?;
        fs::write(dir.join(CONFIG_FILE), &self.config)?;
        // the manifest goes last so a complete manifest implies complete data
        let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
        f.write_all(manifest.as_bytes())?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let params_bytes = fs::read(dir.join(PARAMS_FILE))?;
        let opt_bytes = fs::read(dir.join(OPTIMIZER_FILE))?;
        let config = fs::read_to_string(dir.join(CONFIG_FILE))?;
        let mut out = Checkpoint {
            config,
            ..Checkpoint::default()
        };
        for (k, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |msg: &str| Error::Checkpoint(format!("manifest line {}: {msg}", k + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [file, name, shape, offset] = parts[..] else {
                return Err(bad("expected 4 fields"));
            };
            let (r, c) = shape.split_once('x').ok_or_else(|| bad("bad shape"))?;
            let (rows, cols): (usize, usize) = (
                r.parse().map_err(|_| bad("bad shape"))?,
                c.parse().map_err(|_| bad("bad shape"))?,
            );
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            let (bytes, target) = match file {
                PARAMS_FILE => (&params_bytes, &mut out.params),
                OPTIMIZER_FILE => (&opt_bytes, &mut out.optimizer),
                other => return Err(bad(&format!("unknown file `{other}`"))),
            };
            let end = offset + 8 * rows * cols;
            if end > bytes.len() {
                return Err(bad("array extends past end of file"));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            target.push((name.to_string(), Tensor::from_vec(rows, cols, data)?));
        }
        Ok(out)
    }
}
