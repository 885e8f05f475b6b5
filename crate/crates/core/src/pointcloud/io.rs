//! OFF meshes, ASCII PLY with a per-vertex `attribution` channel, CSV
//! exports, and the binary dataset archive.
//!
//! Archive layout (all little-endian):
//!
//! ```text
//! b"DAM1"
//! u32 n_samples, u32 n_points, u32 dim, u32 n_classes
//! f32 coordinates  [n_samples * n_points * dim], row-major
//! i32 labels       [n_samples]
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use super::{LabeledDataset, PointCloud, Split};
use crate::error::{invalid, DamError, Result};
use crate::rng::seeded;
use crate::Scalar;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"DAM1";

/// Vertices and polygon faces of an OFF mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct OffMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<Vec<usize>>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> DamError {
    DamError::Parse { line, msg: msg.into() }
}

/// Parses OFF text. Faces are read when present; `#` comments and blank
/// lines are skipped.
pub fn parse_off(text: &str) -> Result<OffMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file, expected OFF header"))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(hline, format!("expected OFF header, found {header:?}")))?
        .trim();
    // Some ModelNet files glue the counts onto the header line.
    let (cline, counts) = if rest.is_empty() {
        lines.next().ok_or_else(|| parse_err(hline + 1, "missing vertex/face counts"))?
    } else {
        (hline, rest)
    };
    let nums: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| parse_err(cline, format!("bad count {t:?}"))))
        .collect::<Result<_>>()?;
    if nums.len() < 2 {
        return Err(parse_err(cline, "expected vertex and face counts"));
    }
    let (nv, nf) = (nums[0], nums[1]);

    let mut vertices = Vec::with_capacity(nv);
    let mut last_line = cline;
    for k in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(last_line + 1, format!("file truncated: found {k} of {nv} vertices")))?;
        last_line = ln;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(ln, format!("bad coordinate {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() < 3 {
            return Err(parse_err(ln, format!("vertex has {} coordinates, expected 3", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(ln, "non-finite coordinate"));
        }
        vertices.push([v[0], v[1], v[2]]);
    }

    let mut faces = Vec::with_capacity(nf);
    for k in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(last_line + 1, format!("file truncated: found {k} of {nf} faces")))?;
        last_line = ln;
        let idx: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| parse_err(ln, format!("bad face index {t:?}"))))
            .collect::<Result<_>>()?;
        let count = *idx.first().ok_or_else(|| parse_err(ln, "empty face"))?;
        if idx.len() < count + 1 {
            return Err(parse_err(ln, format!("face lists {} of {count} indices", idx.len() - 1)));
        }
        let face = idx[1..=count].to_vec();
        if let Some(&bad) = face.iter().find(|&&i| i >= nv) {
            return Err(parse_err(ln, format!("face index {bad} out of range")));
        }
        faces.push(face);
    }
    Ok(OffMesh { vertices, faces })
}

pub fn read_off_mesh(path: impl AsRef<Path>) -> Result<OffMesh> {
    parse_off(&fs::read_to_string(path)?)
}

/// Mesh vertices as a point cloud.
pub fn read_off<T: Scalar>(path: impl AsRef<Path>) -> Result<PointCloud<T>> {
    let mesh = read_off_mesh(path)?;
    let flat: Vec<T> = mesh.vertices.iter().flat_map(|v| v.iter().map(|&x| T::lit(x))).collect();
    let points = Array2::from_shape_vec((mesh.vertices.len(), 3), flat).map_err(|e| DamError::Shape(e.to_string()))?;
    PointCloud::new(points)
}

pub fn write_off<T: Scalar>(cloud: &PointCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    require_3d(cloud)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "OFF")?;
    writeln!(out, "{} 0 0", cloud.n_points())?;
    for r in cloud.points().rows() {
        writeln!(out, "{} {} {}", r[0], r[1], r[2])?;
    }
    out.flush()?;
    Ok(())
}

/// Area-weighted uniform surface samples from a triangulated (fan-split) mesh.
pub fn sample_mesh_surface<T: Scalar>(mesh: &OffMesh, n: usize, seed: u64) -> Result<PointCloud<T>> {
    if n == 0 {
        return Err(invalid("sample count must be positive"));
    }
    let mut tris = Vec::new();
    for f in &mesh.faces {
        for k in 1..f.len().saturating_sub(1) {
            tris.push([f[0], f[k], f[k + 1]]);
        }
    }
    let area = |t: &[usize; 3]| {
        let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cr = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        0.5 * (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt()
    };
    let mut cumulative = Vec::with_capacity(tris.len());
    let mut total = 0.0;
    for t in &tris {
        total += area(t);
        cumulative.push(total);
    }
    if tris.is_empty() || total <= 0.0 {
        return Err(invalid("mesh has no faces with positive area"));
    }
    let mut rng = seeded(seed);
    let mut pts = Array2::<T>::zeros((n, 3));
    for i in 0..n {
        let pick = rng.gen::<f64>() * total;
        let ti = cumulative.partition_point(|&c| c <= pick).min(tris.len() - 1);
        let t = tris[ti];
        let (mut r1, mut r2): (f64, f64) = (rng.gen(), rng.gen());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        for k in 0..3 {
            pts[[i, k]] = T::lit(a[k] + r1 * (b[k] - a[k]) + r2 * (c[k] - a[k]));
        }
    }
    PointCloud::new(pts)
}

fn require_3d<T: Scalar>(cloud: &PointCloud<T>) -> Result<()> {
    if cloud.dim() != 3 {
        return Err(invalid(format!("expected a 3-D cloud, got D={}", cloud.dim())));
    }
    Ok(())
}

fn check_scalars<T: Scalar>(cloud: &PointCloud<T>, scalars: &[T]) -> Result<()> {
    if scalars.len() != cloud.n_points() {
        return Err(invalid(format!("{} scalars for {} points", scalars.len(), cloud.n_points())));
    }
    if let Some(i) = scalars.iter().position(|v| !v.is_finite()) {
        return Err(DamError::NonFinite(format!("attribution of point {i}")));
    }
    Ok(())
}

/// ASCII PLY text with `x y z` and, when given, an `attribution` property per vertex.
pub fn encode_ply<T: Scalar>(cloud: &PointCloud<T>, scalars: Option<&[T]>) -> Result<String> {
    use std::fmt::Write as _;
    require_3d(cloud)?;
    if let Some(s) = scalars {
        check_scalars(cloud, s)?;
    }
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n{}end_header\n",
        cloud.n_points(),
        if scalars.is_some() { "property float attribution\n" } else { "" }
    );
    for (i, r) in cloud.points().rows().into_iter().enumerate() {
        match scalars {
            Some(s) => writeln!(out, "{} {} {} {}", r[0], r[1], r[2], s[i]),
            None => writeln!(out, "{} {} {}", r[0], r[1], r[2]),
        }
        .expect("writing to a String");
    }
    Ok(out)
}

pub fn write_ply<T: Scalar>(cloud: &PointCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ply(cloud, None)?)?;
    Ok(())
}

pub fn write_ply_with_scalars<T: Scalar>(cloud: &PointCloud<T>, scalars: &[T], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ply(cloud, Some(scalars))?)?;
    Ok(())
}

/// Parses [`encode_ply`] output; the scalars are `None` for plain `x y z` files.
pub fn parse_ply<T: Scalar>(text: &str) -> Result<(PointCloud<T>, Option<Vec<T>>)> {
    let mut lines = text.lines().enumerate();
    let mut n_vertex = None;
    let mut props = Vec::new();
    loop {
        let (i, l) = lines.next().ok_or_else(|| parse_err(1, "missing end_header"))?;
        let l = l.trim();
        if i == 0 && l != "ply" {
            return Err(parse_err(1, "expected ply magic"));
        }
        if let Some(rest) = l.strip_prefix("element vertex ") {
            n_vertex = Some(rest.trim().parse::<usize>().map_err(|_| parse_err(i + 1, "bad vertex count"))?);
        } else if let Some(rest) = l.strip_prefix("property ") {
            props.push(rest.split_whitespace().last().unwrap_or("").to_string());
        } else if l == "end_header" {
            break;
        }
    }
    let with_scalars = match props.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "attribution"] => true,
        _ => return Err(parse_err(1, format!("unexpected vertex properties {props:?}"))),
    };
    let width = if with_scalars { 4 } else { 3 };
    let n = n_vertex.ok_or_else(|| parse_err(1, "missing vertex element"))?;
    let mut pts = Array2::<T>::zeros((n, 3));
    let mut scalars = Vec::with_capacity(if with_scalars { n } else { 0 });
    for k in 0..n {
        let (i, l) = lines.next().ok_or_else(|| parse_err(0, format!("truncated: {k} of {n} vertices")))?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(i + 1, format!("bad value {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != width {
            return Err(parse_err(i + 1, format!("expected {width} values per vertex")));
        }
        for j in 0..3 {
            pts[[k, j]] = T::lit(v[j]);
        }
        if with_scalars {
            scalars.push(T::lit(v[3]));
        }
    }
    Ok((PointCloud::new(pts)?, with_scalars.then_some(scalars)))
}

pub fn read_ply<T: Scalar>(path: impl AsRef<Path>) -> Result<(PointCloud<T>, Option<Vec<T>>)> {
    parse_ply(&fs::read_to_string(path)?)
}

/// Reads files written by [`write_ply_with_scalars`].
pub fn read_ply_with_scalars<T: Scalar>(path: impl AsRef<Path>) -> Result<(PointCloud<T>, Vec<T>)> {
    match read_ply(path)? {
        (c, Some(s)) => Ok((c, s)),
        (_, None) => Err(parse_err(1, "file has no attribution property")),
    }
}

/// CSV export `index,x,y,z,psi` for plotting.
pub fn write_csv_with_scalars<T: Scalar>(cloud: &PointCloud<T>, scalars: &[T], path: impl AsRef<Path>) -> Result<()> {
    require_3d(cloud)?;
    check_scalars(cloud, scalars)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "index,x,y,z,psi")?;
    for (i, (r, s)) in cloud.points().rows().into_iter().zip(scalars).enumerate() {
        writeln!(out, "{i},{},{},{},{}", r[0], r[1], r[2], s)?;
    }
    out.flush()?;
    Ok(())
}

pub fn encode_dataset_archive<T: Scalar>(ds: &LabeledDataset<T>) -> Result<Vec<u8>> {
    let (n, d) = ds.cloud_shape().ok_or_else(|| invalid("cannot archive an empty dataset"))?;
    let mut buf = Vec::with_capacity(20 + ds.len() * (n * d * 4 + 4));
    buf.extend_from_slice(ARCHIVE_MAGIC);
    for v in [ds.len(), n, d, ds.n_classes()] {
        let v = u32::try_from(v).map_err(|_| invalid("count exceeds u32"))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in ds.clouds() {
        for &v in c.points().iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    for &l in ds.labels() {
        buf.extend_from_slice(&(l as i32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_dataset_archive<T: Scalar>(bytes: &[u8], class_names: Option<Vec<String>>, split: Split) -> Result<LabeledDataset<T>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| DamError::Format("archive too short".into()))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(DamError::Format("bad archive magic, expected DAM1".into()));
    }
    let mut word = [0u8; 4];
    let mut counts = [0usize; 4];
    for c in counts.iter_mut() {
        r.read_exact(&mut word).map_err(|_| DamError::Format("truncated archive header".into()))?;
        *c = u32::from_le_bytes(word) as usize;
    }
    let [ns, n, d, nc] = counts;
    let expected = ns * n * d * 4 + ns * 4;
    if r.len() != expected {
        return Err(DamError::Format(format!("archive body has {} bytes, expected {expected}", r.len())));
    }
    let (coords, labels) = r.split_at(ns * n * d * 4);
    let values: Vec<T> = coords
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let mut clouds = Vec::with_capacity(ns);
    for chunk in values.chunks_exact(n * d.max(1)).take(ns) {
        let pts = Array2::from_shape_vec((n, d), chunk.to_vec()).map_err(|e| DamError::Format(e.to_string()))?;
        clouds.push(PointCloud::new(pts)?);
    }
    let labels: Vec<usize> = labels
        .chunks_exact(4)
        .map(|b| {
            let l = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            usize::try_from(l).map_err(|_| DamError::Format(format!("negative label {l}")))
        })
        .collect::<Result<_>>()?;
    let names = match class_names {
        Some(names) if names.len() == nc => names,
        Some(names) => return Err(invalid(format!("{} class names for {nc} classes", names.len()))),
        None => (0..nc).map(|k| format!("class_{k}")).collect(),
    };
    LabeledDataset::new(clouds, labels, names, split)
}

pub fn write_dataset_archive<T: Scalar>(ds: &LabeledDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset_archive(ds)?)?;
    Ok(())
}

pub fn read_dataset_archive<T: Scalar>(path: impl AsRef<Path>, class_names: Option<Vec<String>>, split: Split) -> Result<LabeledDataset<T>> {
    decode_dataset_archive(&fs::read(path)?, class_names, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_synthetic_dataset, ShapeSpec};

    const CUBE: &str = "OFF\n8 6 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n\
4 0 1 2 3\n4 4 5 6 7\n4 0 1 5 4\n4 2 3 7 6\n4 1 2 6 5\n4 0 3 7 4\n";

    #[test]
    fn parses_cube() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cube.off");
        fs::write(&p, CUBE).unwrap();
        let c: PointCloud<f64> = read_off(&p).unwrap();
        assert_eq!((c.n_points(), c.dim()), (8, 3));
        let mesh = read_off_mesh(&p).unwrap();
        assert_eq!(mesh.faces.len(), 6);
        let s: PointCloud<f64> = sample_mesh_surface(&mesh, 500, 1).unwrap();
        assert!(s.points().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn glued_header_and_comments() {
        let m = parse_off("# c\nOFF3 1 0\n0 0 0\n1 0 0\n0 1 0 # tip\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn truncated_and_malformed() {
        let err = parse_off("OFF\n8 6 0\n0 0 0\n1 0 0\n").unwrap_err();
        match err {
            DamError::Parse { line, msg } => {
                assert_eq!(line, 5);
                assert!(msg.contains("truncated"));
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(parse_off("PLY\n1 0 0\n"), Err(DamError::Parse { line: 1, .. })));
        assert!(matches!(parse_off("OFF\n2 0 0\n0 0 0\n1 x 0\n"), Err(DamError::Parse { line: 4, .. })));
    }

    #[test]
    fn off_round_trip() {
        let ds = generate_synthetic_dataset::<f64>(&ShapeSpec::toy_set(1, 50), 1, 3, Split::Train).unwrap();
        let c = &ds.clouds()[0];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.off");
        write_off(c, &p).unwrap();
        let back: PointCloud<f64> = read_off(&p).unwrap();
        assert!((back.points() - c.points()).iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn ply_contract() {
        let dir = tempfile::tempdir().unwrap();
        let c = PointCloud::<f64>::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let p = dir.path().join("z.ply");
        write_ply_with_scalars(&c, &[0.0; 4], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 4);
        assert!(body.iter().all(|l| l.split_whitespace().last() == Some("0")));

        let s = [0.25, -1.5, 3.0e-7, 2.0];
        write_ply_with_scalars(&c, &s, &p).unwrap();
        let (back, bs) = read_ply_with_scalars::<f64>(&p).unwrap();
        assert_eq!(back, c);
        assert!(bs.iter().zip(&s).all(|(a, b)| (a - b).abs() <= 1e-6));

        assert!(write_ply_with_scalars(&c, &[0.0, 1.0, f64::NAN, 0.0], &p).is_err());
        assert!(write_ply_with_scalars(&c, &[0.0; 3], &p).is_err());
    }

    #[test]
    fn archive_round_trip_and_layout() {
        let ds = generate_synthetic_dataset::<f64>(&ShapeSpec::toy_set(3, 16), 2, 5, Split::Train).unwrap();
        let bytes = encode_dataset_archive(&ds).unwrap();
        assert_eq!(&bytes[..4], b"DAM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 6 * 16 * 3 * 4 + 6 * 4);
        let back: LabeledDataset<f64> =
            decode_dataset_archive(&bytes, Some(ds.class_names().to_vec()), Split::Train).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.clouds().iter().zip(ds.clouds()) {
            assert!((a.points() - b.points()).iter().all(|v| v.abs() <= 1e-6));
        }
        assert!(decode_dataset_archive::<f64>(&bytes[..30], None, Split::Train).is_err());
    }
}
