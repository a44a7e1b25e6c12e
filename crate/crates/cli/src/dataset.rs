//! Datasets on disk: a text manifest plus one binary volume per instance.
//!
//! ```text
//! format: gpmkl-dataset
//! version: 1
//! dims: 24 24 24
//! n: 200
//! classes: 2
//! layout: cube:8
//! ground_truth_bags: 0 13 26
//! volumes:
//! vol_00000.gpmk 0
//! vol_00001.gpmk 1
//! ```
//!
//! `ground_truth_bags` is omitted when unknown. Volume paths are relative to
//! the manifest. Each volume is a 16-byte header (`GPMK`, then `nx`, `ny`,
//! `nz` as little-endian `u32`) followed by `nx·ny·nz` little-endian `f32`
//! values, `x` fastest.

use std::fs;
use std::path::{Path, PathBuf};

use gpmkl::{Dataset, VolumeDims};

use crate::error::{io_context, CliError, CliResult};
use crate::format::{layout_name, parse_layout};

pub const MANIFEST: &str = "manifest.txt";
const MAGIC: &[u8; 4] = b"GPMK";
const HEADER: usize = 16;
const FORMAT: &str = "gpmkl-dataset";
const VERSION: u32 = 1;

pub fn encode_volume(dims: VolumeDims, values: &[f64]) -> CliResult<Vec<u8>> {
    if values.len() != dims.len() {
        return Err(CliError::data(format!(
            "volume has {} values, dims {}x{}x{} need {}",
            values.len(),
            dims.nx,
            dims.ny,
            dims.nz,
            dims.len()
        )));
    }
    let mut bytes = Vec::with_capacity(HEADER + 4 * values.len());
    bytes.extend_from_slice(MAGIC);
    for d in [dims.nx, dims.ny, dims.nz] {
        let d = u32::try_from(d).map_err(|_| CliError::data(format!("dimension {d} exceeds u32")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_volume(bytes: &[u8]) -> CliResult<(VolumeDims, Vec<f64>)> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(CliError::data("not a GPMK volume"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let dims = VolumeDims::new(word(1), word(2), word(3)).map_err(|e| CliError::data(e.to_string()))?;
    let expected = dims.len().checked_mul(4).and_then(|b| b.checked_add(HEADER));
    if expected != Some(bytes.len()) {
        return Err(CliError::data(format!(
            "volume of {}x{}x{} needs {} bytes, file has {}",
            dims.nx,
            dims.ny,
            dims.nz,
            HEADER + 4 * dims.len(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::data("volume holds non-finite values"));
    }
    Ok((dims, values))
}

pub fn read_volume(path: &Path) -> CliResult<(VolumeDims, Vec<f64>)> {
    let bytes = fs::read(path).map_err(io_context(path))?;
    decode_volume(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn volume_name(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(5);
    format!("vol_{i:0width$}.gpmk")
}

pub fn manifest_text(ds: &Dataset) -> String {
    let mut s = format!(
        "format: {FORMAT}\nversion: {VERSION}\ndims: {} {} {}\nn: {}\nclasses: {}\nlayout: {}\n",
        ds.dims.nx,
        ds.dims.ny,
        ds.dims.nz,
        ds.len(),
        ds.n_classes,
        layout_name(ds.layout)
    );
    if !ds.ground_truth_bags.is_empty() {
        let bags: Vec<String> = ds.ground_truth_bags.iter().map(usize::to_string).collect();
        s += &format!("ground_truth_bags: {}\n", bags.join(" "));
    }
    s += "volumes:\n";
    for (i, label) in ds.labels.iter().enumerate() {
        s += &format!("{} {label}\n", volume_name(i, ds.len()));
    }
    s
}

/// Writes the manifest and every volume into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_context(dir))?;
    for (i, row) in ds.x.iter().enumerate() {
        let path = dir.join(volume_name(i, ds.len()));
        fs::write(&path, encode_volume(ds.dims, row)?).map_err(io_context(&path))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_text(ds)).map_err(io_context(&path))
}

struct Manifest {
    dims: VolumeDims,
    n: usize,
    classes: usize,
    layout: gpmkl::LayoutKind,
    ground_truth_bags: Vec<usize>,
    volumes: Vec<(PathBuf, usize)>,
}

fn parse_manifest(text: &str, dir: &Path) -> CliResult<Manifest> {
    let bad = |msg: String| CliError::data(format!("manifest: {msg}"));
    let mut lines = text.lines();
    let mut field = |key: &str| -> CliResult<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
        match line.split_once(':') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(bad(format!("expected {key}, got {line:?}"))),
        }
    };
    let num = |key: &str, v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad {key} {v:?}")));

    if field("format")? != FORMAT {
        return Err(bad("not a gpmkl dataset manifest".into()));
    }
    let version = field("version")?;
    if version != VERSION.to_string() {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dims_text = field("dims")?;
    let dims: Vec<usize> = dims_text.split_whitespace().map(|v| num("dims", v)).collect::<CliResult<_>>()?;
    let [nx, ny, nz] = dims.as_slice() else {
        return Err(bad(format!("dims needs three values, got {dims_text:?}")));
    };
    let dims = VolumeDims::new(*nx, *ny, *nz).map_err(|e| bad(e.to_string()))?;
    let n = num("n", &field("n")?)?;
    let classes = num("classes", &field("classes")?)?;
    if classes < 2 {
        return Err(bad(format!("need at least 2 classes, got {classes}")));
    }
    let layout = parse_layout(&field("layout")?).map_err(bad)?;

    let mut rest: Vec<&str> = lines.collect();
    let mut ground_truth_bags = Vec::new();
    if let Some(v) = rest.first().and_then(|l| l.strip_prefix("ground_truth_bags:")) {
        ground_truth_bags = v.split_whitespace().map(|b| num("bag", b)).collect::<CliResult<_>>()?;
        rest.remove(0);
    }
    if rest.first() != Some(&"volumes:") {
        return Err(bad("missing volumes list".into()));
    }
    let volumes: Vec<(PathBuf, usize)> = rest[1..]
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (file, label) = l.trim().rsplit_once(' ').ok_or_else(|| bad(format!("bad volume line {l:?}")))?;
            let label = num("label", label.trim())?;
            if label >= classes {
                return Err(bad(format!("label {label} outside 0..{classes}")));
            }
            Ok((dir.join(file.trim()), label))
        })
        .collect::<CliResult<_>>()?;
    if volumes.len() != n {
        return Err(bad(format!("n is {n} but {} volumes are listed", volumes.len())));
    }
    Ok(Manifest {
        dims,
        n,
        classes,
        layout,
        ground_truth_bags,
        volumes,
    })
}

/// Reads `dir/manifest.txt` and every volume it lists.
pub fn read_dataset(dir: &Path) -> CliResult<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_context(&path))?;
    let m = parse_manifest(&text, dir)?;
    let mut x = Vec::with_capacity(m.n);
    let mut labels = Vec::with_capacity(m.n);
    for (file, label) in m.volumes {
        let (dims, values) = read_volume(&file)?;
        if dims != m.dims {
            return Err(CliError::data(format!(
                "{}: header dims {}x{}x{} differ from manifest {}x{}x{}",
                file.display(),
                dims.nx,
                dims.ny,
                dims.nz,
                m.dims.nx,
                m.dims.ny,
                m.dims.nz
            )));
        }
        x.push(values);
        labels.push(label);
    }
    Ok(Dataset {
        dims: m.dims,
        layout: m.layout,
        x,
        labels,
        n_classes: m.classes,
        ground_truth_bags: m.ground_truth_bags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gpmkl::LayoutKind;

    fn small() -> Dataset {
        Dataset {
            dims: VolumeDims::new(2, 3, 2).unwrap(),
            layout: LayoutKind::Cubes { edge: 2 },
            x: (0..4).map(|i| (0..12).map(|v| (i * 12 + v) as f64 * 0.25 - 3.0).collect()).collect(),
            labels: vec![0, 1, 0, 1],
            n_classes: 2,
            ground_truth_bags: vec![1],
        }
    }

    #[test]
    fn volume_layout_on_disk() {
        let dims = VolumeDims::new(2, 1, 1).unwrap();
        let bytes = encode_volume(dims, &[1.0, -0.5]).unwrap();
        assert_eq!(&bytes[..4], b"GPMK");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..], &(-0.5f32).to_le_bytes());
        assert_eq!(decode_volume(&bytes).unwrap(), (dims, vec![1.0, -0.5]));
    }

    #[test]
    fn malformed_volumes_are_rejected() {
        let dims = VolumeDims::new(2, 1, 1).unwrap();
        let good = encode_volume(dims, &[1.0, 2.0]).unwrap();
        assert!(decode_volume(&good[..good.len() - 1]).is_err());
        let mut wrong_magic = good.clone();
        wrong_magic[0] = b'X';
        assert!(decode_volume(&wrong_magic).is_err());
        let mut nan = good.clone();
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_volume(&nan).is_err());
        assert!(encode_volume(dims, &[1.0]).is_err());
    }

    #[test]
    fn dataset_round_trips_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_dataset(&a, &small()).unwrap();
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, small());
        write_dataset(&b, &back).unwrap();
        for name in [MANIFEST, "vol_00000.gpmk", "vol_00003.gpmk"] {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn manifest_without_ground_truth() {
        let mut ds = small();
        ds.ground_truth_bags.clear();
        let text = manifest_text(&ds);
        assert!(!text.contains("ground_truth"));
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn inconsistent_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        for (from, to) in [
            ("n: 4", "n: 5"),
            ("dims: 2 3 2", "dims: 2 2 3"),
            ("vol_00001.gpmk 1", "vol_00001.gpmk 2"),
            ("version: 1", "version: 9"),
            ("layout: cube:2", "layout: hexagons"),
        ] {
            fs::write(dir.path().join(MANIFEST), text.replace(from, to)).unwrap();
            assert!(read_dataset(dir.path()).is_err(), "{to}");
        }
        fs::write(dir.path().join(MANIFEST), &text).unwrap();
        fs::remove_file(dir.path().join("vol_00002.gpmk")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(CliError::Data(_))));
    }

    #[test]
    fn file_names_widen_for_large_sets() {
        assert_eq!(volume_name(7, 10), "vol_00007.gpmk");
        assert_eq!(volume_name(7, 1_000_001), "vol_0000007.gpmk");
    }
}
