//! ASCII VTK XML export of the deformed multipatch surface with nodal
//! displacement data, for inspection in standard viewers.

use crate::coupling::CoupledModel;
use crate::splines::NurbsSurface;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

pub const DEFAULT_TESSELLATION: usize = 32;

/// The displacement field shares the geometry's rational basis, so the
/// displaced surface is the same surface with shifted control points.
fn displaced_surface(surface: &NurbsSurface, d: &[f64], offset: usize) -> Result<NurbsSurface> {
    let mut cps = surface.control_points().to_vec();
    for (i, cp) in cps.iter_mut().enumerate() {
        for c in 0..3 {
            cp[c] += d[offset + 3 * i + c];
        }
    }
    NurbsSurface::new(
        surface.knots_u().clone(),
        surface.knots_v().clone(),
        cps,
        surface.weights().to_vec(),
    )
}

fn push_floats(out: &mut String, values: impl IntoIterator<Item = f64>) {
    out.push_str("          ");
    for v in values {
        let _ = write!(out, "{v:.17e} ");
    }
    out.push('\n');
}

/// Write the model tessellated at `resolution × resolution` quads per
/// patch, with point-data arrays `displacement` and `disp_magnitude`
/// evaluated from the solved displacement vector `d`.
pub fn write_vtk_with_resolution(
    model: &CoupledModel,
    d: &[f64],
    path: impl AsRef<Path>,
    resolution: usize,
) -> Result<()> {
    if resolution == 0 {
        return Err(Error::InvalidGeometry(
            "tessellation resolution must be at least 1".into(),
        ));
    }
    if d.len() != model.ndof() {
        return Err(Error::DimensionMismatch(format!(
            "displacement vector has {} entries, model has {} dofs",
            d.len(),
            model.ndof()
        )));
    }
    let offsets = model.dof_offsets();
    let n = resolution + 1;
    let points_per_patch = n * n;
    let num_patches = model.model.patches.len();
    let num_points = num_patches * points_per_patch;
    let num_cells = num_patches * resolution * resolution;

    let mut points = String::new();
    let mut disp = String::new();
    let mut magnitude = String::new();
    for (p, patch) in model.model.patches.iter().enumerate() {
        let surface = patch.surface();
        let moved = displaced_surface(surface, d, offsets[p])?;
        let (u0, u1) = surface.knots_u().domain();
        let (v0, v1) = surface.knots_v().domain();
        for i in 0..n {
            let u = u0 + (u1 - u0) * i as f64 / resolution as f64;
            for j in 0..n {
                let v = v0 + (v1 - v0) * j as f64 / resolution as f64;
                let x = surface.eval(u, v);
                let y = moved.eval(u, v);
                let u_vec = [y[0] - x[0], y[1] - x[1], y[2] - x[2]];
                push_floats(&mut points, y);
                push_floats(&mut disp, u_vec);
                push_floats(
                    &mut magnitude,
                    [(u_vec[0] * u_vec[0] + u_vec[1] * u_vec[1] + u_vec[2] * u_vec[2]).sqrt()],
                );
            }
        }
    }

    let mut connectivity = String::new();
    let mut cell_offsets = String::new();
    let mut types = String::new();
    let mut cell_count = 0usize;
    for p in 0..num_patches {
        let base = p * points_per_patch;
        for i in 0..resolution {
            for j in 0..resolution {
                let a = base + i * n + j;
                let b = base + (i + 1) * n + j;
                cell_count += 1;
                let _ = writeln!(connectivity, "          {a} {b} {} {}", b + 1, a + 1);
                let _ = writeln!(cell_offsets, "          {}", 4 * cell_count);
                types.push_str("          9\n");
            }
        }
    }

    let mut out = String::new();
    out.push_str("<VTKFile type=\"UnstructuredGrid\" version=\"0.1\" byte_order=\"LittleEndian\">\n");
    out.push_str("  <UnstructuredGrid>\n");
    let _ = writeln!(
        out,
        "    <Piece NumberOfPoints=\"{num_points}\" NumberOfCells=\"{num_cells}\">"
    );
    out.push_str("      <Points>\n");
    out.push_str(
        "        <DataArray type=\"Float64\" NumberOfComponents=\"3\" format=\"ascii\">\n",
    );
    out.push_str(&points);
    out.push_str("        </DataArray>\n      </Points>\n");
    out.push_str("      <Cells>\n");
    out.push_str("        <DataArray type=\"Int64\" Name=\"connectivity\" format=\"ascii\">\n");
    out.push_str(&connectivity);
    out.push_str("        </DataArray>\n");
    out.push_str("        <DataArray type=\"Int64\" Name=\"offsets\" format=\"ascii\">\n");
    out.push_str(&cell_offsets);
    out.push_str("        </DataArray>\n");
    out.push_str("        <DataArray type=\"UInt8\" Name=\"types\" format=\"ascii\">\n");
    out.push_str(&types);
    out.push_str("        </DataArray>\n      </Cells>\n");
    out.push_str("      <PointData Scalars=\"disp_magnitude\" Vectors=\"displacement\">\n");
    out.push_str(
        "        <DataArray type=\"Float64\" Name=\"displacement\" NumberOfComponents=\"3\" format=\"ascii\">\n",
    );
    out.push_str(&disp);
    out.push_str("        </DataArray>\n");
    out.push_str("        <DataArray type=\"Float64\" Name=\"disp_magnitude\" format=\"ascii\">\n");
    out.push_str(&magnitude);
    out.push_str("        </DataArray>\n      </PointData>\n");
    out.push_str("    </Piece>\n  </UnstructuredGrid>\n</VTKFile>\n");
    Ok(std::fs::write(path, out)?)
}

/// [`write_vtk_with_resolution`] at the default 32×32 tessellation.
pub fn write_vtk(model: &CoupledModel, d: &[f64], path: impl AsRef<Path>) -> Result<()> {
    write_vtk_with_resolution(model, d, path, DEFAULT_TESSELLATION)
}
