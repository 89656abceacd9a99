//! On-disk formats: a small binary container for volumes and a text format
//! for centroid labels.
//!
//! Volume files start with the magic line `SPVOL1`, then one ASCII header
//! line with nine whitespace-separated fields — `D H W` voxel extents,
//! `(z, y, x)` spacing in millimeters, and `(z, y, x)` origin in
//! millimeters — followed by exactly `D*H*W` little-endian `f32`
//! intensities with `x` fastest. Floats are printed with Rust's shortest
//! round-trip formatting, so geometry survives a write/read cycle bitwise.
//!
//! Label files are plain text, one `<class> <x_mm> <y_mm> <z_mm>` line per
//! vertebra; blank lines and `#` comments are ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{class_index, class_name, DataError, Label, LabelSet, Volume};

const VOLUME_MAGIC: &str = "SPVOL1";

fn parse_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Parse { path: path.display().to_string(), detail: detail.into() }
}

/// Writes `vol` to `path` in the `SPVOL1` container format.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{VOLUME_MAGIC}")?;
    writeln!(
        w,
        "{} {} {} {} {} {} {} {} {}",
        vol.extents[0],
        vol.extents[1],
        vol.extents[2],
        vol.spacing[0],
        vol.spacing[1],
        vol.spacing[2],
        vol.origin[0],
        vol.origin[1],
        vol.origin[2],
    )?;
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a `SPVOL1` volume, rejecting wrong magic, malformed headers,
/// truncated payloads, and trailing garbage.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, DataError> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = String::new();
    r.read_line(&mut magic)?;
    if magic.trim_end() != VOLUME_MAGIC {
        return Err(parse_err(path, format!("bad magic {:?}, want {VOLUME_MAGIC:?}", magic.trim_end())));
    }

    let mut header = String::new();
    r.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 9 {
        return Err(parse_err(path, format!("header has {} fields, want 9", fields.len())));
    }
    let mut extents = [0usize; 3];
    let mut spacing = [0f64; 3];
    let mut origin = [0f64; 3];
    for a in 0..3 {
        extents[a] = fields[a]
            .parse()
            .map_err(|e| parse_err(path, format!("extent {:?}: {e}", fields[a])))?;
        spacing[a] = fields[3 + a]
            .parse()
            .map_err(|e| parse_err(path, format!("spacing {:?}: {e}", fields[3 + a])))?;
        origin[a] = fields[6 + a]
            .parse()
            .map_err(|e| parse_err(path, format!("origin {:?}: {e}", fields[6 + a])))?;
    }
    let numel = extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse_err(path, format!("extents {extents:?} overflow")))?;

    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != numel {
        return Err(parse_err(
            path,
            format!("payload is {} bytes, want {numel} for extents {extents:?}", bytes.len()),
        ));
    }
    let data: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume::new(extents, spacing, origin, data)
        .map_err(|e| parse_err(path, format!("invalid geometry: {e}")))
}

/// Writes labels as `<class> <x_mm> <y_mm> <z_mm>` lines.
pub fn write_labels(path: impl AsRef<Path>, labels: &LabelSet) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels.labels() {
        writeln!(w, "{} {} {} {}", class_name(l.class), l.world[0], l.world[1], l.world[2])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a label file written by [`write_labels`].
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelSet, DataError> {
    let path = path.as_ref();
    let mut labels = Vec::new();
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                format!("line {}: {} fields, want `<class> <x> <y> <z>`", lineno + 1, fields.len()),
            ));
        }
        let class = class_index(fields[0])
            .ok_or_else(|| parse_err(path, format!("line {}: unknown class {:?}", lineno + 1, fields[0])))?;
        let mut world = [0f64; 3];
        for k in 0..3 {
            world[k] = fields[1 + k].parse().map_err(|e| {
                parse_err(path, format!("line {}: coordinate {:?}: {e}", lineno + 1, fields[1 + k]))
            })?;
        }
        labels.push(Label { class, world });
    }
    LabelSet::new(labels).map_err(|e| parse_err(path, format!("invalid labels: {e}")))
}

/// Writes scans into `dir` as `scan_000.vol` / `scan_000.lab` pairs,
/// creating the directory if needed. File contents and names depend only
/// on the scans, so two identical datasets produce identical directories.
pub fn write_dataset(dir: impl AsRef<Path>, scans: &[(Volume, LabelSet)]) -> Result<(), DataError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, (vol, labels)) in scans.iter().enumerate() {
        write_volume(dir.join(format!("scan_{i:03}.vol")), vol)?;
        write_labels(dir.join(format!("scan_{i:03}.lab")), labels)?;
    }
    Ok(())
}

/// Reads every `*.vol` file in `dir` (sorted by name) together with its
/// same-stem `.lab` label file.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<(Volume, LabelSet)>, DataError> {
    let dir = dir.as_ref();
    let mut vol_paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "vol"))
        .collect();
    vol_paths.sort();
    if vol_paths.is_empty() {
        return Err(parse_err(dir, "no .vol files found"));
    }
    let mut scans = Vec::with_capacity(vol_paths.len());
    for vp in vol_paths {
        let vol = read_volume(&vp)?;
        let labels = read_labels(vp.with_extension("lab"))?;
        scans.push((vol, labels));
    }
    Ok(scans)
}
