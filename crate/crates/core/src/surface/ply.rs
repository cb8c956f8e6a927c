//! ASCII PLY export.
//!
//! Vertices carry `x y z` and optionally one float scalar property. Scalars
//! that are NaN are written as the literal `nan`; viewers should treat them
//! as "no value" (masked or ignored regions).

use std::fmt::Write as _;
use std::path::Path;

use super::icosphere::IcosphereMesh;
use crate::error::{Error, Result};

/// Horizontal offset between hemispheres when several are written into one file.
pub const HEMISPHERE_SPACING: f64 = 2.5;

fn fmt_scalar(out: &mut String, x: f64) {
    if x.is_nan() {
        out.push_str("nan");
    } else {
        let _ = write!(out, "{}", x as f32);
    }
}

/// Render `hemispheres` copies of `mesh` side by side along x. `scalar`
/// holds one value per vertex across all copies (hemisphere-major).
pub fn ply_string(
    mesh: &IcosphereMesh,
    hemispheres: usize,
    scalar: Option<(&str, &[f64])>,
) -> Result<String> {
    let v = mesh.vertex_count();
    let h = hemispheres.max(1);
    if let Some((name, values)) = scalar {
        if values.len() != v * h {
            return Err(Error::Shape(format!(
                "scalar '{name}' has {} values for {} vertices",
                values.len(),
                v * h
            )));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Invalid(format!("bad PLY property name '{name}'")));
        }
    }
    let mut out = String::with_capacity(v * h * 48);
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str("comment scalar value nan marks vertices without a value\n");
    let _ = writeln!(out, "element vertex {}", v * h);
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if let Some((name, _)) = scalar {
        let _ = writeln!(out, "property float {name}");
    }
    let _ = writeln!(out, "element face {}", mesh.face_count() * h);
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for hemi in 0..h {
        let dx = (hemi as f64 - (h as f64 - 1.0) / 2.0) * HEMISPHERE_SPACING;
        for (i, p) in mesh.vertices.iter().enumerate() {
            let _ = write!(out, "{} {} {}", (p[0] + dx) as f32, p[1] as f32, p[2] as f32);
            if let Some((_, values)) = scalar {
                out.push(' ');
                fmt_scalar(&mut out, values[hemi * v + i]);
            }
            out.push('\n');
        }
    }
    for hemi in 0..h {
        let off = (hemi * v) as u32;
        for f in &mesh.faces {
            let _ = writeln!(out, "3 {} {} {}", f[0] + off, f[1] + off, f[2] + off);
        }
    }
    Ok(out)
}

pub fn write_ply(
    path: &Path,
    mesh: &IcosphereMesh,
    hemispheres: usize,
    scalar: Option<(&str, &[f64])>,
) -> Result<()> {
    let s = ply_string(mesh, hemispheres, scalar)?;
    crate::io::write_atomic(path, s.as_bytes())
}
