//! Bit-exact binary checkpoints.
//!
//! Layout: 4-byte magic `EMX1`, an 8-byte little-endian header length, a
//! UTF-8 JSON header, and a payload of little-endian 8-byte floats. The
//! payload holds the named fields in header order, each in C order with
//! the last axis fastest (the in-memory layout of the grid). `f64`
//! round-trips through its byte representation exactly, so saving and
//! re-loading is bit-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::PlasmaState;
use crate::equilibrium::{equilibrium_residual, DopingProfile, Equilibrium};
use crate::error::{EmxError, Result};
use crate::grid::{Grid, ScalarField, VectorField};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMX1";
pub const CHECKPOINT_VERSION: u32 = 1;

const STATE_FIELDS: [&str; 16] = [
    "n_e", "u_e_x", "u_e_y", "u_e_z", "theta_e", "n_i", "u_i_x", "u_i_y", "u_i_z", "theta_i",
    "e_x", "e_y", "e_z", "b_x", "b_y", "b_z",
];

fn state_field_names() -> Vec<String> {
    STATE_FIELDS.iter().map(|s| s.to_string()).collect()
}

const EQUILIBRIUM_FIELDS: [&str; 7] = [
    "nbar_e", "nbar_i", "phibar", "ebar_x", "ebar_y", "ebar_z", "doping",
];

/// What a checkpoint stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    State,
    Equilibrium,
}

/// JSON header preceding the payload. `payload_len` is in bytes and is
/// verified against both the field list and the file size on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: CheckpointKind,
    pub d: usize,
    pub n: usize,
    pub t: f64,
    pub fields: Vec<String>,
    /// Master seed the run was configured with.
    pub seed: u64,
    /// Hex SHA-256 of the resolved configuration.
    pub config_hash: String,
    /// Constant background magnetic field (equilibrium checkpoints).
    pub bbar: [f64; 3],
    pub payload_len: u64,
}

fn write_all(path: &Path, header: &CheckpointHeader, fields: &[&ScalarField]) -> Result<()> {
    let header_json = serde_json::to_vec(header).map_err(|e| EmxError::Format(e.to_string()))?;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for f in fields {
        for &v in f.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read and verify magic, version, header, and payload length; returns
/// the header and the raw payload floats in field order.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    read_exact(&mut file, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(EmxError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let mut len_bytes = [0u8; 8];
    read_exact(&mut file, &mut len_bytes, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    read_exact(&mut file, &mut header_json, "header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| EmxError::Format(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(EmxError::Format(format!(
            "version mismatch: file has {}, this build reads {}",
            header.version, CHECKPOINT_VERSION
        )));
    }
    let points = header.n.pow(header.d as u32);
    let expected = (header.fields.len() * points * 8) as u64;
    if header.payload_len != expected {
        return Err(EmxError::Format(format!(
            "header payload length {} does not match field list ({} expected)",
            header.payload_len, expected
        )));
    }
    let mut payload = vec![0u8; header.payload_len as usize];
    read_exact(&mut file, &mut payload, "payload")?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(EmxError::Format("trailing bytes after payload".into()));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        EmxError::Format(format!("truncated {what}"))
    })
}

/// Save a full primitive state.
pub fn save_state_checkpoint(
    path: impl AsRef<Path>,
    s: &PlasmaState,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let grid = s.grid();
    let fields: Vec<&ScalarField> = vec![
        &s.n_e,
        s.u_e.component(0),
        s.u_e.component(1),
        s.u_e.component(2),
        &s.theta_e,
        &s.n_i,
        s.u_i.component(0),
        s.u_i.component(1),
        s.u_i.component(2),
        &s.theta_i,
        s.e.component(0),
        s.e.component(1),
        s.e.component(2),
        s.b.component(0),
        s.b.component(1),
        s.b.component(2),
    ];
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        kind: CheckpointKind::State,
        d: grid.dims(),
        n: grid.n_per_axis(),
        t: s.t,
        fields: state_field_names(),
        seed,
        config_hash: config_hash.to_string(),
        bbar: [0.0; 3],
        payload_len: (fields.len() * grid.total_points() * 8) as u64,
    };
    write_all(path.as_ref(), &header, &fields)
}

/// Load a state checkpoint, rebuilding the grid from the header.
pub fn load_state_checkpoint(path: impl AsRef<Path>) -> Result<(PlasmaState, CheckpointHeader)> {
    let (header, values) = load_checkpoint(path)?;
    if header.kind != CheckpointKind::State {
        return Err(EmxError::Format(format!(
            "expected a state checkpoint, found {:?}",
            header.kind
        )));
    }
    let grid = Grid::new(header.d, header.n)?;
    let expected = state_field_names();
    if header.fields != expected {
        return Err(EmxError::Format("unexpected state field list".into()));
    }
    let mut chunks = values
        .chunks_exact(grid.total_points())
        .map(|c| ScalarField::from_vec(&grid, c.to_vec()));
    let mut next = || chunks.next().expect("length verified");
    let s = PlasmaState {
        t: header.t,
        n_e: next(),
        u_e: VectorField::from_components([next(), next(), next()]),
        theta_e: next(),
        n_i: next(),
        u_i: VectorField::from_components([next(), next(), next()]),
        theta_i: next(),
        e: VectorField::from_components([next(), next(), next()]),
        b: VectorField::from_components([next(), next(), next()]),
    };
    Ok((s, header))
}

/// Save a solved equilibrium (densities, potential, field, doping).
pub fn save_equilibrium_checkpoint(
    path: impl AsRef<Path>,
    eq: &Equilibrium,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let grid = eq.grid();
    let fields: Vec<&ScalarField> = vec![
        &eq.nbar_e,
        &eq.nbar_i,
        &eq.phibar,
        eq.ebar.component(0),
        eq.ebar.component(1),
        eq.ebar.component(2),
        eq.doping.field(),
    ];
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        kind: CheckpointKind::Equilibrium,
        d: grid.dims(),
        n: grid.n_per_axis(),
        t: 0.0,
        fields: EQUILIBRIUM_FIELDS.iter().map(|s| s.to_string()).collect(),
        seed,
        config_hash: config_hash.to_string(),
        bbar: eq.bbar,
        payload_len: (fields.len() * grid.total_points() * 8) as u64,
    };
    write_all(path.as_ref(), &header, &fields)
}

/// Load an equilibrium checkpoint; the residual is recomputed rather than
/// trusted from the file.
pub fn load_equilibrium_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(Equilibrium, CheckpointHeader)> {
    let (header, values) = load_checkpoint(path)?;
    if header.kind != CheckpointKind::Equilibrium {
        return Err(EmxError::Format(format!(
            "expected an equilibrium checkpoint, found {:?}",
            header.kind
        )));
    }
    let expected: Vec<String> = EQUILIBRIUM_FIELDS.iter().map(|s| s.to_string()).collect();
    if header.fields != expected {
        return Err(EmxError::Format("unexpected equilibrium field list".into()));
    }
    let grid = Grid::new(header.d, header.n)?;
    let mut chunks = values
        .chunks_exact(grid.total_points())
        .map(|c| ScalarField::from_vec(&grid, c.to_vec()));
    let mut next = || chunks.next().expect("length verified");
    let nbar_e = next();
    let nbar_i = next();
    let phibar = next();
    let ebar = VectorField::from_components([next(), next(), next()]);
    let doping = DopingProfile::new(next())?;
    let mut eq = Equilibrium {
        nbar_e,
        nbar_i,
        phibar,
        ebar,
        bbar: header.bbar,
        doping,
        residual: 0.0,
    };
    let (r_e, r_i, r_g) = equilibrium_residual(&eq);
    eq.residual = r_e.max(r_i).max(r_g);
    Ok((eq, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_initial_data, PerturbationSpec};
    use crate::equilibrium::solve_equilibrium;

    fn test_eq() -> Equilibrium {
        let grid = Grid::new(1, 32).unwrap();
        let doping = DopingProfile::cosine(&grid, 0.5, 0.2).unwrap();
        solve_equilibrium(&doping, 1.0, [0.0, 0.0, 0.3], 1e-12).unwrap()
    }

    #[test]
    fn state_round_trip_is_bit_identical() {
        let eq = test_eq();
        let spec = PerturbationSpec {
            amplitude: 1e-3,
            kmax: 3,
            modes: None,
        };
        let mut s = make_initial_data(&eq, &spec, 7, 0.55).unwrap();
        s.t = 0.625;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.emx");
        save_state_checkpoint(&path, &s, 42, "deadbeef").unwrap();
        let (loaded, header) = load_state_checkpoint(&path).unwrap();
        assert_eq!(header.seed, 42);
        assert_eq!(header.config_hash, "deadbeef");
        assert_eq!(loaded.t.to_bits(), s.t.to_bits());
        for (a, b) in [
            (&loaded.n_e, &s.n_e),
            (&loaded.theta_i, &s.theta_i),
            (loaded.e.component(2), s.e.component(2)),
            (loaded.b.component(0), s.b.component(0)),
        ] {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        // saving the loaded state reproduces the file byte for byte
        let path2 = dir.path().join("state2.emx");
        save_state_checkpoint(&path2, &loaded, 42, "deadbeef").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn equilibrium_round_trip_reconstructs_the_solution() {
        let eq = test_eq();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eq.emx");
        save_equilibrium_checkpoint(&path, &eq, 1, "cafe").unwrap();
        let (loaded, header) = load_equilibrium_checkpoint(&path).unwrap();
        assert_eq!(header.bbar, [0.0, 0.0, 0.3]);
        assert_eq!(loaded.bbar, eq.bbar);
        assert_eq!(loaded.nbar_e.data(), eq.nbar_e.data());
        assert_eq!(loaded.doping.field().data(), eq.doping.field().data());
        assert!(loaded.residual <= 1e-11);
    }

    #[test]
    fn truncated_files_are_rejected_with_a_format_error() {
        let eq = test_eq();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eq.emx");
        save_equilibrium_checkpoint(&path, &eq, 0, "").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.emx");
        std::fs::write(&cut, &bytes[..bytes.len() - 17]).unwrap();
        match load_checkpoint(&cut) {
            Err(EmxError::Format(msg)) => assert!(msg.contains("truncated payload"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let eq = test_eq();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eq.emx");
        save_equilibrium_checkpoint(&path, &eq, 0, "").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        let p = dir.path().join("magic.emx");
        std::fs::write(&p, &wrong_magic).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(EmxError::Format(_))));

        // bump the version inside the JSON header
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header_text = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let bumped = header_text.replace("\"version\":1", "\"version\":9");
        assert_ne!(bumped, header_text);
        bytes.splice(12..12 + header_len, bumped.into_bytes());
        let p = dir.path().join("version.emx");
        std::fs::write(&p, &bytes).unwrap();
        match load_checkpoint(&p) {
            Err(EmxError::Format(msg)) => {
                assert!(msg.contains('9') && msg.contains('1'), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
