//! On-disk formats: field snapshots, Brownian-driver files, and the profile
//! cache.
//!
//! * **Field snapshot** — header `{magic "RNLS", version u32, dim u32, n u32,
//!   L f64}` followed by `n^dim` interleaved `(re, im)` IEEE-754 little-endian
//!   `f64` pairs in row-major order (first axis slowest).  All header integers
//!   are little-endian.
//! * **Driver file** — one JSON header line `{n_modes, cells, seed, substeps}`
//!   terminated by `\n`, followed by the mesh, the per-mode path values, and
//!   the second-order blocks as little-endian `f64` arrays.
//! * **Profile cache** — ground state and correction profile stored in the
//!   snapshot format keyed by `(d, n, L)`, with the solve residuals in a
//!   sidecar JSON; the cache directory is taken from the `RNLS_CACHE`
//!   environment variable.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::Grid;
use crate::noise::BrownianLift;
use crate::profiles::{GroundState, RhoProfile};

/// Magic bytes opening every field snapshot.
pub const FIELD_MAGIC: [u8; 4] = *b"RNLS";
/// Current snapshot format version.
pub const FIELD_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Field snapshots
// ---------------------------------------------------------------------------

/// Write a field to `path` in the snapshot format (atomic: the file appears
/// complete or not at all).
pub fn write_field(path: impl AsRef<Path>, field: &Field) -> Result<()> {
    let path = path.as_ref();
    let grid = field.grid();
    let tmp = temp_sibling(path);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(&FIELD_MAGIC)?;
        w.write_all(&FIELD_VERSION.to_le_bytes())?;
        w.write_all(&(grid.dim() as u32).to_le_bytes())?;
        w.write_all(&(grid.n() as u32).to_le_bytes())?;
        w.write_all(&grid.half_length().to_le_bytes())?;
        for v in field.values() {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a field snapshot written by [`write_field`].
pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_format(&mut r, &mut magic, "snapshot magic")?;
    if magic != FIELD_MAGIC {
        return Err(Error::Format(format!(
            "bad snapshot magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = read_u32(&mut r, "snapshot version")?;
    if version != FIELD_VERSION {
        return Err(Error::Format(format!(
            "unsupported snapshot version {version} (expected {FIELD_VERSION})"
        )));
    }
    let dim = read_u32(&mut r, "snapshot dimension")? as usize;
    let n = read_u32(&mut r, "snapshot grid size")? as usize;
    let half_length = read_f64(&mut r, "snapshot half-length")?;
    let grid = Grid::new(dim, n, half_length)?;
    let len = grid.len();
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        let re = read_f64(&mut r, "snapshot payload")?;
        let im = read_f64(&mut r, "snapshot payload")?;
        values.push(Complex64::new(re, im));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format(format!(
            "trailing bytes after {} snapshot values in {}",
            len,
            path.display()
        )));
    }
    Field::from_values(grid, values)
}

// ---------------------------------------------------------------------------
// Brownian driver files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LiftHeader {
    n_modes: usize,
    cells: usize,
    seed: u64,
    substeps: u32,
}

/// Serialize a Brownian lift: JSON header line, then the mesh, the path
/// values (mode-major), and the second-order blocks (cell-major, row-major
/// within each block) as little-endian `f64`.
pub fn write_lift(path: impl AsRef<Path>, lift: &BrownianLift) -> Result<()> {
    let path = path.as_ref();
    let n_modes = lift.n_modes();
    let mesh = lift.mesh();
    let cells = mesh.len() - 1;
    let header = LiftHeader {
        n_modes,
        cells,
        seed: lift.seed(),
        substeps: lift.substeps(),
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::Format(format!("driver header: {e}")))?;
    let tmp = temp_sibling(path);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(header_json.as_bytes())?;
        w.write_all(b"\n")?;
        for &t in mesh {
            w.write_all(&t.to_le_bytes())?;
        }
        for k in 0..n_modes {
            for m in 0..mesh.len() {
                w.write_all(&lift.node(k, m).to_le_bytes())?;
            }
        }
        for m in 0..cells {
            for j in 0..n_modes {
                for k in 0..n_modes {
                    w.write_all(&lift.second(j, k, m).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a driver file written by [`write_lift`].
pub fn read_lift(path: impl AsRef<Path>) -> Result<BrownianLift> {
    let path = path.as_ref();
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            return Err(Error::Format(format!(
                "driver file {} ended before the header line",
                path.display()
            )));
        }
        if b[0] == b'\n' {
            break;
        }
        header_bytes.push(b[0]);
        if header_bytes.len() > 64 * 1024 {
            return Err(Error::Format("driver header line too long".into()));
        }
    }
    let header: LiftHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("driver header: {e}")))?;
    let mesh_len = header.cells + 1;
    let mut mesh = vec![0.0; mesh_len];
    for t in mesh.iter_mut() {
        *t = read_f64(&mut r, "driver mesh")?;
    }
    let mut values = vec![vec![0.0; mesh_len]; header.n_modes];
    for path_vals in values.iter_mut() {
        for v in path_vals.iter_mut() {
            *v = read_f64(&mut r, "driver path values")?;
        }
    }
    let block = header.n_modes * header.n_modes;
    let mut second = vec![vec![0.0; block]; header.cells];
    for b in second.iter_mut() {
        for v in b.iter_mut() {
            *v = read_f64(&mut r, "driver second-order data")?;
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format(format!(
            "trailing bytes in driver file {}",
            path.display()
        )));
    }
    BrownianLift::from_parts(mesh, values, second, header.seed, header.substeps)
}

// ---------------------------------------------------------------------------
// Profile cache
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ProfileSidecar {
    residual: f64,
    iterations: usize,
    tol: f64,
}

/// Disk cache of solved profiles, keyed by `(d, n, L)`.
///
/// The heavy profile solves (ground state, correction profile) are stored in
/// the field snapshot format with the solve residual in a sidecar JSON.  A
/// cache entry is reused only when its recorded accuracy meets the requested
/// tolerance; unreadable or stale entries are re-solved and overwritten.
pub struct ProfileCache {
    root: PathBuf,
}

impl ProfileCache {
    pub fn new(root: impl Into<PathBuf>) -> ProfileCache {
        ProfileCache { root: root.into() }
    }

    /// Cache rooted at the `RNLS_CACHE` environment variable, if set.
    pub fn from_env() -> Option<ProfileCache> {
        std::env::var_os("RNLS_CACHE").map(|dir| ProfileCache::new(PathBuf::from(dir)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn base_name(kind: &str, grid: &Grid) -> String {
        format!(
            "{kind}_d{}_n{}_L{}",
            grid.dim(),
            grid.n(),
            grid.half_length()
        )
    }

    fn load(
        &self,
        kind: &str,
        grid: &Grid,
        accept: impl Fn(&ProfileSidecar) -> bool,
    ) -> Option<(Field, ProfileSidecar)> {
        let base = self.root.join(Self::base_name(kind, grid));
        let sidecar: ProfileSidecar =
            serde_json::from_slice(&fs::read(base.with_extension("json")).ok()?).ok()?;
        if !sidecar.residual.is_finite() || !accept(&sidecar) {
            return None;
        }
        let field = read_field(base.with_extension("rnls")).ok()?;
        if !field.grid().same_as(grid) {
            return None;
        }
        Some((field, sidecar))
    }

    fn store(&self, kind: &str, field: &Field, sidecar: &ProfileSidecar) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let base = self.root.join(Self::base_name(kind, field.grid()));
        write_field(base.with_extension("rnls"), field)?;
        let json = serde_json::to_string_pretty(sidecar)
            .map_err(|e| Error::Format(format!("profile sidecar: {e}")))?;
        let json_path = base.with_extension("json");
        let tmp = temp_sibling(&json_path);
        fs::write(&tmp, json)?;
        fs::rename(&tmp, json_path)?;
        Ok(())
    }

    /// Load the ground state for `grid` if a cached solve meets `tol`,
    /// otherwise solve and store it.
    pub fn ground_state(&self, grid: &Arc<Grid>, tol: f64) -> Result<GroundState> {
        if let Some((field, sidecar)) = self.load("ground", grid, |s| s.residual <= tol) {
            return GroundState::from_stored(field, sidecar.residual, sidecar.iterations);
        }
        let gs = GroundState::solve(grid.clone(), tol)?;
        self.store(
            "ground",
            gs.field(),
            &ProfileSidecar {
                residual: gs.residual(),
                iterations: gs.iterations(),
                tol,
            },
        )?;
        Ok(gs)
    }

    /// Load the correction profile for the ground state's grid if a cached
    /// solve was performed at least as tightly as `tol`, otherwise solve and
    /// store it.
    pub fn rho(&self, gs: &GroundState, tol: f64) -> Result<RhoProfile> {
        if let Some((field, sidecar)) = self.load("rho", gs.grid(), |s| s.tol <= tol) {
            return RhoProfile::from_stored(field, sidecar.residual, sidecar.iterations);
        }
        let rho = RhoProfile::solve(gs, tol)?;
        self.store(
            "rho",
            rho.field(),
            &ProfileSidecar {
                residual: rho.residual(),
                iterations: rho.iterations(),
                tol,
            },
        )?;
        Ok(rho)
    }
}

// ---------------------------------------------------------------------------
// Low-level helpers
// ---------------------------------------------------------------------------

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp.{}", std::process::id()));
    path.with_file_name(name)
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_or_format(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
