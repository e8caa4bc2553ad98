//! ASCII PLY with a single `vertex` element carrying `x y z` floats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::shapes::PointCloudShape;
use crate::error::{Error, Result};

pub fn to_ply_string(shape: &PointCloudShape) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", shape.points.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &shape.points {
        let _ = writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    out
}

pub fn write_ply(shape: &PointCloudShape, path: &Path) -> Result<()> {
    fs::write(path, to_ply_string(shape)).map_err(|e| Error::io(path, e))
}

pub fn parse_ply(text: &str) -> Result<PointCloudShape> {
    let bad = |msg: &str| Error::Dataset(format!("malformed PLY: {msg}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing `ply` magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    for line in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(bad(&format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| bad("vertex count"))?);
                } else if *n != "0" {
                    return Err(bad(&format!("unexpected element {name}")));
                }
            }
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "float32" | "double" | "float64") {
                    return Err(bad(&format!("property {name} has non-float type {ty}")));
                }
                props.push((name.to_string(), matches!(*ty, "float" | "float32")));
            }
            ["end_header"] => break,
            _ => return Err(bad(&format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let find = |axis: &str| props.iter().position(|(p, _)| p == axis).ok_or_else(|| bad(&format!("no {axis} property")));
    let (ix, iy, iz) = (find("x")?, find("y")?, find("z")?);
    let mut points = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()).take(count) {
        if line.split_whitespace().count() != props.len() {
            return Err(bad("vertex row length does not match properties"));
        }
        // Single-precision properties are read as f32 so written values round-trip exactly.
        let vals: Vec<f64> = line
            .split_whitespace()
            .zip(&props)
            .map(|(w, (_, single))| {
                let parsed = if *single { w.parse::<f32>().map(f64::from).ok() } else { w.parse::<f64>().ok() };
                parsed.ok_or_else(|| bad(&format!("bad number `{w}`")))
            })
            .collect::<Result<_>>()?;
        points.push([vals[ix], vals[iy], vals[iz]]);
    }
    if points.len() != count {
        return Err(bad(&format!("expected {count} vertices, found {}", points.len())));
    }
    PointCloudShape::new(points)
}

pub fn read_ply(path: &Path) -> Result<PointCloudShape> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text).map_err(|e| match e {
        Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", path.display())),
        other => other,
    })
}
