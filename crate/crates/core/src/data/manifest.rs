//! Dataset manifests: one "image<TAB>mask" line per frame. Image datasets
//! are flat line lists; video datasets group a clip's frames into a block
//! and separate blocks with a blank line. Relative paths resolve against
//! the manifest's own directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// File stem of the image, used to name derived outputs.
    pub name: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_line(manifest: &Path, base: &Path, line_no: usize, line: &str) -> Result<ManifestEntry> {
    let (img, mask) = line.split_once('\t').ok_or_else(|| {
        TensorError::Invalid(format!(
            "{}:{line_no}: expected image<TAB>mask, got {line:?}",
            manifest.display()
        ))
    })?;
    let image = resolve(base, img.trim());
    let mask = resolve(base, mask.trim());
    for p in [&image, &mask] {
        if !p.is_file() {
            return Err(TensorError::Invalid(format!(
                "{}:{line_no}: listed file missing: {}",
                manifest.display(),
                p.display()
            )));
        }
    }
    let name = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("line{line_no}"));
    Ok(ManifestEntry { name, image, mask })
}

/// Read a manifest into sample blocks. With `video` false every non-blank
/// line is its own single-frame block; with `video` true blank lines
/// delimit clip blocks. An empty manifest yields an empty list.
pub fn read_manifest(path: &Path, video: bool) -> Result<Vec<Vec<ManifestEntry>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| TensorError::Invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut blocks: Vec<Vec<ManifestEntry>> = Vec::new();
    let mut current: Vec<ManifestEntry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            if video && !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        let entry = parse_line(path, &base, idx + 1, line)?;
        if video {
            current.push(entry);
        } else {
            blocks.push(vec![entry]);
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    Ok(blocks)
}

/// Write a manifest from blocks of (image, mask) path strings. Single-frame
/// blocks write as flat lines; multi-frame blocks are blank-line separated.
pub fn write_manifest(path: &Path, blocks: &[Vec<(String, String)>]) -> Result<()> {
    let mut out = Vec::new();
    let video = blocks.iter().any(|b| b.len() > 1);
    for (i, block) in blocks.iter().enumerate() {
        if video && i > 0 {
            writeln!(out).expect("vec write");
        }
        for (img, mask) in block {
            writeln!(out, "{img}\t{mask}").expect("vec write");
        }
    }
    fs::write(path, out).map_err(|e| TensorError::Invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "").unwrap();
        assert!(read_manifest(&m, false).unwrap().is_empty());
        assert!(read_manifest(&m, true).unwrap().is_empty());
    }

    #[test]
    fn flat_lines_become_single_frame_samples() {
        let dir = tempdir().unwrap();
        for n in ["a.ppm", "a.pgm", "b.ppm", "b.pgm"] {
            touch(dir.path(), n);
        }
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "a.ppm\ta.pgm\nb.ppm\tb.pgm\n").unwrap();
        let blocks = read_manifest(&m, false).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].len(), 1);
        assert_eq!(blocks[0][0].name, "a");
        assert_eq!(blocks[1][0].image, dir.path().join("b.ppm"));
    }

    #[test]
    fn clip_block_of_three_lines_is_one_sample() {
        let dir = tempdir().unwrap();
        for n in [
            "f0.ppm", "f0.pgm", "f1.ppm", "f1.pgm", "f2.ppm", "f2.pgm", "g0.ppm", "g0.pgm",
        ] {
            touch(dir.path(), n);
        }
        let m = dir.path().join("manifest.txt");
        fs::write(
            &m,
            "f0.ppm\tf0.pgm\nf1.ppm\tf1.pgm\nf2.ppm\tf2.pgm\n\ng0.ppm\tg0.pgm\n",
        )
        .unwrap();
        let blocks = read_manifest(&m, true).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].len(), 3);
        assert_eq!(blocks[1].len(), 1);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let dir = tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        let m = dir.path().join("manifest.txt");
        fs::write(&m, "a.ppm\tmissing.pgm\n").unwrap();
        let err = read_manifest(&m, false).unwrap_err().to_string();
        assert!(err.contains("missing.pgm"), "{err}");
    }

    #[test]
    fn round_trip_preserves_order() {
        let dir = tempdir().unwrap();
        for n in ["x.ppm", "x.pgm", "y.ppm", "y.pgm"] {
            touch(dir.path(), n);
        }
        let m = dir.path().join("manifest.txt");
        let blocks = vec![
            vec![("x.ppm".to_string(), "x.pgm".to_string())],
            vec![("y.ppm".to_string(), "y.pgm".to_string())],
        ];
        write_manifest(&m, &blocks).unwrap();
        let back = read_manifest(&m, false).unwrap();
        assert_eq!(back[0][0].name, "x");
        assert_eq!(back[1][0].name, "y");
    }

    #[test]
    fn absolute_paths_pass_through() {
        let dir = tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        touch(dir.path(), "a.pgm");
        let m = dir.path().join("manifest.txt");
        let abs_img = dir.path().join("a.ppm");
        let abs_mask = dir.path().join("a.pgm");
        fs::write(
            &m,
            format!("{}\t{}\n", abs_img.display(), abs_mask.display()),
        )
        .unwrap();
        let blocks = read_manifest(&m, false).unwrap();
        assert_eq!(blocks[0][0].image, abs_img);
    }
}
