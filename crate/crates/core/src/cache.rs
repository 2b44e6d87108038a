//! Binary block cache.
//!
//! File layout (little endian): the magic `TDBLK1`, the lag count, the row
//! and column counts as `u64`, then every block as row-major `f64`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::assembly::{assemble_coupled, assemble_series, BlockSeries, CoupledSeries, OperatorKind, QuadratureConfig};
use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;
use crate::timebasis::{mass_matrix, BasisSet, TimeGrid};

pub const MAGIC: &[u8; 6] = b"TDBLK1";

pub fn write_blocks(blocks: &[DMatrix<f64>], w: &mut impl Write) -> Result<()> {
    let (rows, cols) = blocks.first().map_or((0, 0), |b| b.shape());
    w.write_all(MAGIC)?;
    for n in [blocks.len(), rows, cols] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for b in blocks {
        if b.shape() != (rows, cols) {
            return Err(Error::Dimension("blocks of a series differ in shape".into()));
        }
        for i in 0..rows {
            for j in 0..cols {
                w.write_all(&b[(i, j)].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_blocks(r: &mut impl Read) -> Result<Vec<DMatrix<f64>>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Cache("not a TDBLK1 block file".into()));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut dyn Read| -> Result<usize> {
        r.read_exact(&mut word)?;
        usize::try_from(u64::from_le_bytes(word)).map_err(|_| Error::Cache("count out of range".into()))
    };
    let (lags, rows, cols) = (next(r)?, next(r)?, next(r)?);
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(lags)).is_none_or(|n| n > 1 << 36) {
        return Err(Error::Cache(format!("implausible block file header {lags}×{rows}×{cols}")));
    }
    let mut blocks = Vec::with_capacity(lags);
    let mut buf = vec![0u8; rows * cols * 8];
    for _ in 0..lags {
        r.read_exact(&mut buf)?;
        let values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        blocks.push(DMatrix::from_row_iterator(rows, cols, values));
    }
    Ok(blocks)
}

/// Directory of cached block series keyed by mesh, time step, operator and
/// quadrature settings.
#[derive(Clone, Debug)]
pub struct BlockCache {
    dir: PathBuf,
}

impl BlockCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(BlockCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(mesh: &SurfaceMesh, grid: &TimeGrid, kind: &str, quad: &QuadratureConfig) -> String {
        let mut h = Sha256::new();
        h.update(mesh.content_hash().as_bytes());
        h.update(grid.dt().to_bits().to_le_bytes());
        h.update(kind.as_bytes());
        h.update(quad.cache_key().as_bytes());
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        format!("{kind}-{}", &hex[..24])
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.tdblk"))
    }

    pub fn load(&self, key: &str) -> Result<Option<Vec<DMatrix<f64>>>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        let mut r = BufReader::new(fs::File::open(path)?);
        read_blocks(&mut r).map(Some)
    }

    pub fn store(&self, key: &str, blocks: &[DMatrix<f64>]) -> Result<()> {
        let tmp = self.dir.join(format!("{key}.tmp"));
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            write_blocks(blocks, &mut w)?;
            w.flush()?;
        }
        fs::rename(tmp, self.path(key))?;
        Ok(())
    }

    /// Cached files with their sizes in bytes.
    pub fn entries(&self) -> Result<Vec<(String, u64)>> {
        let mut out = Vec::new();
        for e in fs::read_dir(&self.dir)? {
            let e = e?;
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some(key) = name.strip_suffix(".tdblk") {
                out.push((key.to_string(), e.metadata()?.len()));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Removes all cached files; returns how many were deleted.
    pub fn clear(&self) -> Result<usize> {
        let entries = self.entries()?;
        for (key, _) in &entries {
            fs::remove_file(self.path(key))?;
        }
        Ok(entries.len())
    }
}

/// One operator over all vertices, through the cache when given.
pub fn series_cached(
    cache: Option<&BlockCache>,
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    kind: OperatorKind,
    quad: &QuadratureConfig,
) -> Result<BlockSeries> {
    let all: Vec<usize> = (0..mesh.n_vertices()).collect();
    let key = BlockCache::key(mesh, grid, kind.short_name(), quad);
    if let Some(blocks) = cache.map(|c| c.load(&key)).transpose()?.flatten() {
        return Ok(BlockSeries { label: kind.short_name().into(), blocks, rows: all.clone(), cols: all });
    }
    let series = assemble_series(mesh, grid, kind, quad)?;
    if let Some(c) = cache {
        c.store(&key, &series.blocks)?;
    }
    Ok(series)
}

/// The coupled Dirichlet-to-Neumann blocks, through the cache when given.
pub fn coupled_cached(
    cache: Option<&BlockCache>,
    mesh: &SurfaceMesh,
    grid: &TimeGrid,
    quad: &QuadratureConfig,
) -> Result<CoupledSeries> {
    let key = BlockCache::key(mesh, grid, "M", quad);
    if let Some(blocks) = cache.map(|c| c.load(&key)).transpose()?.flatten() {
        let trace = mesh.trace_vertices();
        let mut rows = trace.clone();
        rows.extend(0..mesh.n_vertices());
        if blocks.first().is_some_and(|b| b.nrows() != rows.len()) {
            return Err(Error::Cache(format!("cached blocks for key {key} do not match the mesh")));
        }
        let trace_mass = mass_matrix(mesh, &BasisSet::linear(trace.clone()), &BasisSet::linear(trace.clone()));
        return Ok(CoupledSeries {
            series: BlockSeries { label: "M".into(), blocks, rows: rows.clone(), cols: rows },
            n_trace: trace.len(),
            trace_vertices: trace,
            n_vertices: mesh.n_vertices(),
            grid: *grid,
            trace_mass,
        });
    }
    let coupled = assemble_coupled(mesh, grid, quad)?;
    if let Some(c) = cache {
        c.store(&key, &coupled.series.blocks)?;
    }
    Ok(coupled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::gen_screen;

    #[test]
    fn round_trip_is_bitwise() {
        let blocks = vec![
            DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0e-300, f64::MIN_POSITIVE, 0.0, -0.0]),
            DMatrix::from_row_slice(2, 3, &[7.0, 8.0, 9.0, 1.0 / 3.0, 2.0, 1e300]),
        ];
        let mut buf = Vec::new();
        write_blocks(&blocks, &mut buf).unwrap();
        assert_eq!(&buf[..6], MAGIC);
        assert_eq!(buf.len(), 6 + 24 + 2 * 6 * 8);
        let back = read_blocks(&mut buf.as_slice()).unwrap();
        for (a, b) in blocks.iter().zip(&back) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut data: &[u8] = b"TDBLK2\0\0\0\0\0\0\0\0";
        assert!(matches!(read_blocks(&mut data), Err(Error::Cache(_))));
    }

    #[test]
    fn cache_reuses_and_keys_differ() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BlockCache::new(dir.path()).unwrap();
        let mesh = gen_screen(1.0, 4, 0.5).unwrap();
        let grid = TimeGrid::new(0.5, 3).unwrap();
        let quad = QuadratureConfig::default();
        let first = coupled_cached(Some(&cache), &mesh, &grid, &quad).unwrap();
        assert_eq!(cache.entries().unwrap().len(), 1);
        let second = coupled_cached(Some(&cache), &mesh, &grid, &quad).unwrap();
        assert_eq!(first.series.blocks, second.series.blocks);
        assert_eq!(first.trace_mass, second.trace_mass);
        let other = TimeGrid::new(0.25, 3).unwrap();
        assert_ne!(BlockCache::key(&mesh, &grid, "M", &quad), BlockCache::key(&mesh, &other, "M", &quad));
        assert_ne!(BlockCache::key(&mesh, &grid, "M", &quad), BlockCache::key(&mesh, &grid, "V", &quad));
        series_cached(Some(&cache), &mesh, &grid, OperatorKind::SingleLayer, &quad).unwrap();
        assert_eq!(cache.clear().unwrap(), 2);
    }
}
