//! MNIST download.

use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flate2::read::GzDecoder;

/// npm tarball carrying the four raw IDX files under `package/data/`.
pub const DEFAULT_URL: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";

pub const FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Downloads `url` and extracts the IDX files into `dest`. Files already
/// present are left alone; nothing is fetched if all four exist.
pub fn fetch(url: &str, dest: &Path) -> Result<()> {
    if FILES.iter().all(|f| dest.join(f).is_file()) {
        eprintln!("all IDX files already present in {}", dest.display());
        return Ok(());
    }
    eprintln!("downloading {url}");
    let mut body = Vec::new();
    ureq::get(url)
        .call()
        .with_context(|| format!("GET {url}"))?
        .into_body()
        .into_reader()
        .read_to_end(&mut body)
        .with_context(|| format!("reading {url}"))?;
    extract(&body, dest)
}

/// Extracts the IDX files from a tarball, gzipped or not, matching entries
/// by file name (with or without a `.gz` suffix) regardless of directory.
pub fn extract(tarball: &[u8], dest: &Path) -> Result<()> {
    fs::create_dir_all(dest).with_context(|| format!("creating {}", dest.display()))?;
    let raw: Box<dyn Read + '_> = if tarball.starts_with(&[0x1f, 0x8b]) {
        Box::new(GzDecoder::new(tarball))
    } else {
        Box::new(tarball)
    };
    let mut archive = tar::Archive::new(raw);
    let mut found = [false; 4];
    for entry in archive.entries().context("reading tar archive")? {
        let mut entry = entry.context("reading tar entry")?;
        let path = entry.path()?.into_owned();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let (stem, gz) = match name.strip_suffix(".gz") {
            Some(s) => (s, true),
            None => (name, false),
        };
        let Some(i) = FILES.iter().position(|f| *f == stem) else {
            continue;
        };
        let mut bytes = Vec::new();
        if gz {
            GzDecoder::new(&mut entry).read_to_end(&mut bytes)?;
        } else {
            entry.read_to_end(&mut bytes)?;
        }
        let out = dest.join(FILES[i]);
        fs::write(&out, bytes).with_context(|| format!("writing {}", out.display()))?;
        found[i] = true;
    }
    let missing: Vec<&str> = FILES.iter().zip(found).filter(|(_, f)| !f).map(|(n, _)| *n).collect();
    if !missing.is_empty() {
        bail!("archive lacks {}", missing.join(", "));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn tarball(entries: &[(&str, &[u8])], gzip: bool) -> Vec<u8> {
        let mut b = tar::Builder::new(Vec::new());
        for (name, data) in entries {
            let mut h = tar::Header::new_gnu();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_cksum();
            b.append_data(&mut h, name, *data).unwrap();
        }
        let tar = b.into_inner().unwrap();
        if !gzip {
            return tar;
        }
        let mut e = GzEncoder::new(Vec::new(), Compression::fast());
        e.write_all(&tar).unwrap();
        e.finish().unwrap()
    }

    fn gz(data: &[u8]) -> Vec<u8> {
        let mut e = GzEncoder::new(Vec::new(), Compression::fast());
        e.write_all(data).unwrap();
        e.finish().unwrap()
    }

    #[test]
    fn extracts_plain_and_gzipped_members() {
        let inner = gz(b"three");
        let entries: Vec<(String, Vec<u8>)> = vec![
            ("package/data/train-images-idx3-ubyte".into(), b"one".to_vec()),
            ("package/data/train-labels-idx1-ubyte".into(), b"two".to_vec()),
            ("package/data/t10k-images-idx3-ubyte.gz".into(), inner),
            ("t10k-labels-idx1-ubyte".into(), b"four".to_vec()),
            ("package/README.md".into(), b"ignored".to_vec()),
        ];
        let refs: Vec<(&str, &[u8])> = entries.iter().map(|(n, d)| (n.as_str(), d.as_slice())).collect();
        for gzip in [true, false] {
            let dir = tempfile::tempdir().unwrap();
            extract(&tarball(&refs, gzip), dir.path()).unwrap();
            let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
            assert_eq!(read(FILES[0]), b"one");
            assert_eq!(read(FILES[1]), b"two");
            assert_eq!(read(FILES[2]), b"three");
            assert_eq!(read(FILES[3]), b"four");
            assert!(!dir.path().join("README.md").exists());
        }
    }

    #[test]
    fn missing_members_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = extract(&tarball(&[("train-images-idx3-ubyte", b"x")], true), dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t10k-labels-idx1-ubyte") && !msg.contains("train-images"), "{msg}");
    }

    #[test]
    fn present_files_skip_the_download() {
        let dir = tempfile::tempdir().unwrap();
        for f in FILES {
            fs::write(dir.path().join(f), b"").unwrap();
        }
        fetch("http://invalid.invalid/none.tgz", dir.path()).unwrap();
    }
}
