//! Python bindings: mesh IO and sampling, marching cubes, the metric suite,
//! and synthetic sequence generation. Built as an abi3 extension module.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;

fn geo_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Indexed triangle mesh (positions in meters).
#[pyclass(name = "TriMesh")]
struct PyTriMesh {
    inner: local4d::TriMesh,
}

#[pymethods]
impl PyTriMesh {
    /// Load a mesh from a Wavefront OBJ file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTriMesh {
            inner: local4d::geometry::read_obj(&path).map_err(|e| PyIOError::new_err(e.to_string()))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        local4d::geometry::write_obj(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn vertices(&self) -> Vec<(f64, f64, f64)> {
        self.inner.vertices.iter().map(|v| (v[0], v[1], v[2])).collect()
    }

    fn faces(&self) -> Vec<(u32, u32, u32)> {
        self.inner.faces.iter().map(|f| (f[0], f[1], f[2])).collect()
    }

    fn area(&self) -> f64 {
        self.inner.total_area()
    }

    fn euler_characteristic(&self) -> i64 {
        self.inner.euler_characteristic()
    }

    /// Area-weighted uniform surface samples: (points, normals).
    fn sample_surface(
        &self,
        count: usize,
        seed: u64,
    ) -> PyResult<(Vec<(f64, f64, f64)>, Vec<(f64, f64, f64)>)> {
        let cloud = local4d::geometry::sample_surface(&self.inner, count, seed).map_err(geo_err)?;
        Ok((
            cloud.points.iter().map(|p| (p[0], p[1], p[2])).collect(),
            cloud.normals.iter().map(|n| (n[0], n[1], n[2])).collect(),
        ))
    }

    /// Unit sphere helper for quick experiments.
    #[staticmethod]
    fn uv_sphere(radius: f64, rings: usize, segments: usize) -> PyTriMesh {
        PyTriMesh {
            inner: local4d::TriMesh::uv_sphere([0.0; 3], radius, rings, segments),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "TriMesh({} vertices, {} faces)",
            self.inner.vertices.len(),
            self.inner.faces.len()
        )
    }
}

/// Extract the iso-surface of a dense grid (x-fastest value layout).
#[pyfunction]
#[pyo3(signature = (values, dims, origin, spacing, iso = 0.0))]
fn marching_cubes(
    values: Vec<f64>,
    dims: (usize, usize, usize),
    origin: (f64, f64, f64),
    spacing: (f64, f64, f64),
    iso: f64,
) -> PyResult<PyTriMesh> {
    let (nx, ny, nz) = dims;
    if values.len() != nx * ny * nz {
        return Err(PyValueError::new_err(format!(
            "expected {} values for dims {:?}, got {}",
            nx * ny * nz,
            dims,
            values.len()
        )));
    }
    let volume = local4d::extract::SdfVolume {
        origin: [origin.0, origin.1, origin.2],
        spacing: [spacing.0, spacing.1, spacing.2],
        dims: [nx, ny, nz],
        values,
    };
    Ok(PyTriMesh {
        inner: local4d::extract::marching_cubes(&volume, iso).map_err(geo_err)?,
    })
}

/// Symmetric squared Chamfer distance between two point sets.
#[pyfunction]
fn chamfer_l2(a: Vec<(f64, f64, f64)>, b: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    let pa: Vec<[f64; 3]> = a.iter().map(|&(x, y, z)| [x, y, z]).collect();
    let pb: Vec<[f64; 3]> = b.iter().map(|&(x, y, z)| [x, y, z]).collect();
    local4d::metrics::chamfer_l2(&pa, &pb).map_err(geo_err)
}

/// F-Score at distance threshold tau.
#[pyfunction]
fn f_score(a: Vec<(f64, f64, f64)>, b: Vec<(f64, f64, f64)>, tau: f64) -> PyResult<f64> {
    let pa: Vec<[f64; 3]> = a.iter().map(|&(x, y, z)| [x, y, z]).collect();
    let pb: Vec<[f64; 3]> = b.iter().map(|&(x, y, z)| [x, y, z]).collect();
    local4d::metrics::f_score(&pa, &pb, tau).map_err(geo_err)
}

/// Full metric suite between two meshes; returns a dict.
#[pyfunction]
#[pyo3(signature = (pred, gt, samples = 20000, tau = 0.005, seed = 0))]
fn eval_meshes<'py>(
    py: Python<'py>,
    pred: &PyTriMesh,
    gt: &PyTriMesh,
    samples: usize,
    tau: f64,
    seed: u64,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let m = local4d::metrics::eval_meshes(&pred.inner, &gt.inner, samples, tau, seed).map_err(geo_err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("chamfer_l2", m.chamfer_l2)?;
    dict.set_item("normal_consistency", m.normal_consistency)?;
    dict.set_item("f_score", m.f_score)?;
    Ok(dict)
}

/// Generate a synthetic clothed sequence into a directory.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, preset = "sway", frames = 17))]
fn generate_sequence(out_dir: PathBuf, seed: u64, preset: &str, frames: usize) -> PyResult<usize> {
    let motion = local4d::synth::MotionPreset::parse(preset)
        .ok_or_else(|| PyValueError::new_err(format!("unknown preset {preset}")))?;
    let options = local4d::synth::GenOptions {
        motion,
        frames,
        ..local4d::synth::GenOptions::default()
    };
    let seq = local4d::synth::generate_sequence(seed, &options).map_err(geo_err)?;
    local4d::synth::write_sequence(&seq, &out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(seq.frames())
}

#[pymodule]
fn local4d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTriMesh>()?;
    m.add_function(wrap_pyfunction!(marching_cubes, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_l2, m)?)?;
    m.add_function(wrap_pyfunction!(f_score, m)?)?;
    m.add_function(wrap_pyfunction!(eval_meshes, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sequence, m)?)?;
    Ok(())
}
