//! CSV and JSON artifacts, binary state dumps and solved-field directories.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{TableEntry, TableNode, TabulatedField};
use crate::mfg::{BlockLog, ConstantsLedger, Equilibrium, SolverConfig};
use crate::quantile::{GridFunction, QuantileField};
use crate::rshe::PathBundle;

/// One CSV row per record, header from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Describes the layout of a binary state dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub data_file: String,
    /// Always `"f64-le, path-major, then step, then node"`.
    pub layout: String,
    pub num_paths: usize,
    pub num_times: usize,
    pub grid_size: usize,
    pub times: Vec<f64>,
    pub h: f64,
    pub first_step: u64,
    pub num_modes: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub stream_ids: Vec<u64>,
}

const LAYOUT: &str = "f64-le, path-major, then step, then node";

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn dump_bundle(dir: &Path, stem: &str, bundle: &PathBundle) -> Result<DumpManifest> {
    fs::create_dir_all(dir)?;
    let data_file = format!("{stem}.bin");
    let mut w = BufWriter::new(File::create(dir.join(&data_file))?);
    for path in &bundle.paths {
        for state in path {
            for v in state.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    let manifest = DumpManifest {
        data_file,
        layout: LAYOUT.into(),
        num_paths: bundle.num_paths(),
        num_times: bundle.times.len(),
        grid_size: bundle.grid_size,
        times: bundle.times.clone(),
        h: bundle.h,
        first_step: bundle.first_step,
        num_modes: bundle.num_modes,
        lambda: bundle.lambda,
        seed: bundle.seed,
        stream_ids: bundle.stream_ids.clone(),
    };
    write_json(&dir.join(format!("{stem}.json")), &manifest)?;
    Ok(manifest)
}

/// Reads a dump written by [`dump_bundle`] from its manifest.
pub fn load_bundle(manifest_path: &Path) -> Result<PathBundle> {
    let manifest: DumpManifest = read_json(manifest_path)?;
    if manifest.layout != LAYOUT {
        return Err(Error::InvalidParameter(format!("unknown dump layout {:?}", manifest.layout)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut bytes = Vec::new();
    File::open(dir.join(&manifest.data_file))?.read_to_end(&mut bytes)?;
    let expected = manifest.num_paths * manifest.num_times * manifest.grid_size * 8;
    if bytes.len() != expected {
        return Err(Error::Dimension { expected, got: bytes.len() });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut paths = Vec::with_capacity(manifest.num_paths);
    for p in 0..manifest.num_paths {
        let mut path = Vec::with_capacity(manifest.num_times);
        for n in 0..manifest.num_times {
            let start = (p * manifest.num_times + n) * manifest.grid_size;
            path.push(QuantileField::new(values[start..start + manifest.grid_size].to_vec())?);
        }
        paths.push(path);
    }
    Ok(PathBundle {
        times: manifest.times,
        h: manifest.h,
        first_step: manifest.first_step,
        grid_size: manifest.grid_size,
        num_modes: manifest.num_modes,
        lambda: manifest.lambda,
        seed: manifest.seed,
        stream_ids: manifest.stream_ids,
        paths,
        records: None,
        drift: None,
    })
}

/// Serde adapter writing non-finite floats as `"inf"`, `"-inf"` or `"nan"`,
/// which JSON numbers cannot hold.
pub mod extended_float {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(D::Error::custom(format!("expected a number, inf, -inf or nan, got {other:?}"))),
            },
        }
    }
}

/// `manifest.json` of a solved-field directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldManifest {
    pub grid: usize,
    pub neighbors: usize,
    #[serde(with = "extended_float")]
    pub sup_bound: f64,
    #[serde(with = "extended_float")]
    pub lipschitz: f64,
    pub times: Vec<f64>,
    pub node_files: Vec<String>,
    pub config: Option<SolverConfig>,
    pub constants: Option<ConstantsLedger>,
    pub block_length: Option<f64>,
    pub blocks: Vec<BlockLog>,
    pub pass_distances: Vec<f64>,
    pub warnings: Vec<String>,
    /// Whether every block was solved; partial directories hold the latest
    /// blocks only.
    pub complete: bool,
}

fn node_header(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("mu_{i}")).chain((0..m).map(|i| format!("u_{i}"))).collect()
}

fn write_nodes(dir: &Path, grid: usize, nodes: &[TableNode]) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(nodes.len());
    for (k, node) in nodes.iter().enumerate() {
        let name = format!("node_{k:05}.csv");
        let mut w = csv::Writer::from_path(dir.join(&name))?;
        w.write_record(node_header(grid))?;
        for e in &node.entries {
            let row: Vec<String> = e
                .measure
                .values()
                .iter()
                .chain(e.section.values())
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        files.push(name);
    }
    Ok(files)
}

/// Writes the table nodes of a (possibly partial) solve.
pub fn save_nodes(dir: &Path, grid: usize, neighbors: usize, nodes: &[TableNode], bound: f64, lip: f64) -> Result<()> {
    let node_files = write_nodes(dir, grid, nodes)?;
    let manifest = FieldManifest {
        grid,
        neighbors,
        sup_bound: bound,
        lipschitz: lip,
        times: nodes.iter().map(|n| n.time).collect(),
        node_files,
        config: None,
        constants: None,
        block_length: None,
        blocks: Vec::new(),
        pass_distances: Vec::new(),
        warnings: Vec::new(),
        complete: false,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn save_equilibrium(dir: &Path, eq: &Equilibrium) -> Result<()> {
    let field = &eq.field;
    let node_files = write_nodes(dir, field.grid_size(), field.nodes())?;
    let manifest = FieldManifest {
        grid: field.grid_size(),
        neighbors: field.neighbors(),
        sup_bound: crate::field::DriftField::sup_bound(field),
        lipschitz: crate::field::DriftField::lipschitz(field),
        times: field.times(),
        node_files,
        config: Some(eq.config.clone()),
        constants: Some(eq.constants),
        block_length: Some(eq.block_length),
        blocks: eq.blocks.clone(),
        pass_distances: eq.pass_distances.clone(),
        warnings: eq.warnings.clone(),
        complete: true,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Reloads the tabulated field of a solved-field directory.
pub fn load_field(dir: &Path) -> Result<(TabulatedField, FieldManifest)> {
    let manifest: FieldManifest = read_json(&dir.join("manifest.json"))?;
    let m = manifest.grid;
    let mut nodes = Vec::with_capacity(manifest.node_files.len());
    for (time, file) in manifest.times.iter().zip(&manifest.node_files) {
        let mut r = csv::Reader::from_path(dir.join(file))?;
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 2 * m {
                return Err(Error::Dimension { expected: 2 * m, got: rec.len() });
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::InvalidParameter(format!("{file}: {e}"))))
                .collect::<Result<_>>()?;
            entries.push(TableEntry {
                measure: QuantileField::new(vals[..m].to_vec())?,
                section: GridFunction::new(vals[m..].to_vec())?,
            });
        }
        nodes.push(TableNode { time: *time, entries });
    }
    let field = TabulatedField::new(m, manifest.neighbors, nodes, manifest.sup_bound, manifest.lipschitz)?;
    Ok((field, manifest))
}

/// Reloads a complete solve as an [`Equilibrium`] (without iterates).
pub fn load_equilibrium(dir: &Path) -> Result<Equilibrium> {
    let (field, manifest) = load_field(dir)?;
    let missing = |what: &str| Error::InvalidParameter(format!("{}: manifest has no {what}", dir.display()));
    Ok(Equilibrium {
        field,
        config: manifest.config.ok_or_else(|| missing("config"))?,
        constants: manifest.constants.ok_or_else(|| missing("constants"))?,
        block_length: manifest.block_length.ok_or_else(|| missing("block length"))?,
        blocks: manifest.blocks,
        pass_distances: manifest.pass_distances,
        warnings: manifest.warnings,
        iterates: Vec::new(),
    })
}
