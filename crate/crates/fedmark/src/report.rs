//! Run outputs: rounds CSV, report JSON, manifest, wall-time log and the
//! binary update dump for offline analysis.
//!
//! Everything except `timings.csv` is bit-reproducible for a fixed config
//! and seed; timing is measured, not derived, and lives in its own file.
//!
//! Update dump layout (integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes "FMUD0001"
//! u32      n_clients
//! u32      n_layers
//! per layer: u32 name length, name bytes, u64 dimension
//! per round block:
//!   u32    round index
//!   f64[]  layer-major, then client-major update values
//!          (n_layers x n_clients x dim)
//!   u32    number of filter-trace records
//!   per record: u32 layer, u32 chunk, u32 iteration, f64 lambda,
//!               u32 removed count, u32[] removed client ids,
//!               u32 projection count, (u32 client, f64 projection)[]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agg::RemovalRecord;
use crate::error::{Error, Result};
use crate::fedsim::{ExperimentReport, RoundReport};
use crate::lm::UpdateVector;

const DUMP_MAGIC: &[u8; 8] = b"FMUD0001";

/// Fixed rounds CSV header.
pub const ROUNDS_CSV_HEADER: &str = "round,er,ofr,empty_filter_layers,bias,beta_hat,val_loss";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rounds_csv(rounds: &[RoundReport]) -> String {
    let mut out = String::from(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in rounds {
        let beta = if r.beta_hat_infinite { "inf".to_string() } else { fmt_opt(r.beta_hat) };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            fmt_opt(r.er),
            fmt_opt(r.ofr),
            r.empty_filter_layers,
            fmt_opt(r.bias),
            beta,
            r.val_loss
        ));
    }
    out
}

pub fn write_rounds_csv(path: &Path, rounds: &[RoundReport]) -> Result<()> {
    std::fs::write(path, rounds_csv(rounds))?;
    Ok(())
}

pub fn write_report_json(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::Model(format!("report serialization: {e}")))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<ExperimentReport> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// Reproducibility manifest: enough to re-run the exact experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub preset: Option<String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64, preset: Option<String>) -> Manifest {
        Manifest {
            format_version: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash,
            seed,
            preset,
        }
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::Model(format!("manifest serialization: {e}")))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_timings_csv(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("round,wall_secs\n");
    for (round, secs) in rows {
        out.push_str(&format!("{round},{secs}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Streaming writer for the per-round update dump.
pub struct UpdateDumpWriter {
    w: BufWriter<File>,
    n_clients: usize,
    layer_dims: Vec<usize>,
    path: PathBuf,
}

impl UpdateDumpWriter {
    pub fn create(
        path: &Path,
        n_clients: usize,
        layer_names: &[String],
        layer_dims: &[usize],
    ) -> Result<UpdateDumpWriter> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(n_clients as u32).to_le_bytes())?;
        w.write_all(&(layer_names.len() as u32).to_le_bytes())?;
        for (name, dim) in layer_names.iter().zip(layer_dims) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(*dim as u64).to_le_bytes())?;
        }
        Ok(UpdateDumpWriter { w, n_clients, layer_dims: layer_dims.to_vec(), path: path.into() })
    }

    pub fn write_round(
        &mut self,
        round: usize,
        updates: &[UpdateVector],
        trace: &[RemovalRecord],
    ) -> Result<()> {
        if updates.len() != self.n_clients {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("expected {} clients, got {}", self.n_clients, updates.len()),
            });
        }
        self.w.write_all(&(round as u32).to_le_bytes())?;
        for (l, dim) in self.layer_dims.iter().enumerate() {
            for u in updates {
                debug_assert_eq!(u.layers[l].len(), *dim);
                for v in &u.layers[l] {
                    self.w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        self.w.write_all(&(trace.len() as u32).to_le_bytes())?;
        for r in trace {
            self.w.write_all(&(r.layer as u32).to_le_bytes())?;
            self.w.write_all(&(r.chunk as u32).to_le_bytes())?;
            self.w.write_all(&(r.iteration as u32).to_le_bytes())?;
            self.w.write_all(&r.lambda.to_le_bytes())?;
            self.w.write_all(&(r.removed.len() as u32).to_le_bytes())?;
            for &c in &r.removed {
                self.w.write_all(&(c as u32).to_le_bytes())?;
            }
            self.w.write_all(&(r.projections.len() as u32).to_le_bytes())?;
            for (c, p) in &r.projections {
                self.w.write_all(&(*c as u32).to_le_bytes())?;
                self.w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// One decoded round of an update dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRound {
    pub round: usize,
    /// updates[client][layer] -> values
    pub updates: Vec<Vec<Vec<f64>>>,
    pub trace: Vec<RemovalRecord>,
}

/// Parsed update dump.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDump {
    pub layer_names: Vec<String>,
    pub layer_dims: Vec<usize>,
    pub n_clients: usize,
    pub rounds: Vec<DumpRound>,
}

pub fn read_update_dump(path: &Path) -> Result<UpdateDump> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(bad("bad magic; not an update dump"));
    }
    let n_clients = read_u32(&mut r)? as usize;
    let n_layers = read_u32(&mut r)? as usize;
    let mut layer_names = Vec::with_capacity(n_layers);
    let mut layer_dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        layer_names.push(String::from_utf8(name).map_err(|_| bad("layer name not UTF-8"))?);
        layer_dims.push(read_u64(&mut r)? as usize);
    }
    let mut rounds = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match r.read_exact(&mut first) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let round = u32::from_le_bytes(first) as usize;
        let mut updates = vec![vec![Vec::new(); n_layers]; n_clients];
        for (l, dim) in layer_dims.iter().enumerate() {
            for client_layers in updates.iter_mut() {
                let mut bytes = vec![0u8; dim * 8];
                r.read_exact(&mut bytes)?;
                client_layers[l] = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
            }
        }
        let n_trace = read_u32(&mut r)? as usize;
        let mut trace = Vec::with_capacity(n_trace);
        for _ in 0..n_trace {
            let layer = read_u32(&mut r)? as usize;
            let chunk = read_u32(&mut r)? as usize;
            let iteration = read_u32(&mut r)? as usize;
            let mut lb = [0u8; 8];
            r.read_exact(&mut lb)?;
            let lambda = f64::from_le_bytes(lb);
            let n_rem = read_u32(&mut r)? as usize;
            let mut removed = Vec::with_capacity(n_rem);
            for _ in 0..n_rem {
                removed.push(read_u32(&mut r)? as usize);
            }
            let n_proj = read_u32(&mut r)? as usize;
            let mut projections = Vec::with_capacity(n_proj);
            for _ in 0..n_proj {
                let c = read_u32(&mut r)? as usize;
                let mut pb = [0u8; 8];
                r.read_exact(&mut pb)?;
                projections.push((c, f64::from_le_bytes(pb)));
            }
            trace.push(RemovalRecord { layer, chunk, iteration, lambda, removed, projections });
        }
        rounds.push(DumpRound { round, updates, trace });
    }
    Ok(UpdateDump { layer_names, layer_dims, n_clients, rounds })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_dump_roundtrip() {
        let dir = std::env::temp_dir().join("fedmark-dump-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("updates.bin");
        let names = vec!["embed".to_string(), "output".to_string()];
        let dims = vec![3usize, 2];
        let updates = vec![
            UpdateVector { layers: vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0]] },
            UpdateVector { layers: vec![vec![-1.0, -2.0, -3.0], vec![-4.0, -5.0]] },
        ];
        let trace = vec![RemovalRecord {
            layer: 1,
            chunk: 0,
            iteration: 0,
            lambda: 0.5,
            removed: vec![1],
            projections: vec![(0, 0.25), (1, -0.75)],
        }];
        let mut w = UpdateDumpWriter::create(&path, 2, &names, &dims).unwrap();
        w.write_round(1, &updates, &trace).unwrap();
        w.write_round(2, &updates, &[]).unwrap();
        w.finish().unwrap();

        let dump = read_update_dump(&path).unwrap();
        assert_eq!(dump.layer_names, names);
        assert_eq!(dump.n_clients, 2);
        assert_eq!(dump.rounds.len(), 2);
        assert_eq!(dump.rounds[0].round, 1);
        assert_eq!(dump.rounds[0].updates[1][0], vec![-1.0, -2.0, -3.0]);
        assert_eq!(dump.rounds[0].trace.len(), 1);
        assert_eq!(dump.rounds[0].trace[0].projections[1], (1, -0.75));
    }

    #[test]
    fn rounds_csv_has_fixed_columns() {
        let r = RoundReport {
            round: 1,
            val_loss: 2.5,
            er: Some(0.25),
            ofr: None,
            empty_filter_layers: 2,
            bias: Some(0.1),
            beta_hat: None,
            beta_hat_infinite: true,
            watermark_clients: vec![0],
            filtered_per_layer: vec![vec![]],
            iterations_per_layer: vec![0],
            lambda_per_layer: vec![0.0],
        };
        let csv = rounds_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), ROUNDS_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "1,0.25,,2,0.1,inf,2.5");
    }
}
