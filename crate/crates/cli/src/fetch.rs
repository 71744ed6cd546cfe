//! Downloads the datasets into the layout the loaders expect.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use spnn::data::DataLayout;
use spnn::{Error, Result};

use crate::config::DatasetName;

const MNIST_MIRRORS: [&str; 2] = [
    "https://yann.lecun.com/exdb/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
];
const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
const CIFAR_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";

fn download(url: &str) -> Result<Vec<u8>> {
    let fail = |msg: String| Error::Io {
        path: url.into(),
        source: std::io::Error::other(msg),
    };
    let resp = reqwest::blocking::get(url).map_err(|e| fail(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(fail(format!("HTTP {}", resp.status())));
    }
    Ok(resp.bytes().map_err(|e| fail(e.to_string()))?.to_vec())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gunzip(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out).map_err(|source| Error::Io {
        path: name.into(),
        source,
    })?;
    Ok(out)
}

fn fetch_mnist(layout: &DataLayout, log: &mut impl FnMut(String)) -> Result<()> {
    let dir = layout.mnist_dir();
    fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    for name in MNIST_FILES {
        let dest = dir.join(name);
        if dest.exists() {
            log(format!("{} already present", dest.display()));
            continue;
        }
        let mut last = None;
        for base in MNIST_MIRRORS {
            let url = format!("{base}{name}.gz");
            log(format!("downloading {url}"));
            match download(&url).and_then(|gz| gunzip(&gz, name)) {
                Ok(raw) => {
                    write(&dest, &raw)?;
                    last = None;
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        if let Some(e) = last {
            return Err(e);
        }
    }
    layout.mnist(false).map(|_| ())
}

/// Unpacks the `.bin` members of the archive flat into `dir`.
fn unpack_cifar(archive: &[u8], dir: &Path) -> Result<usize> {
    let io = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    let mut count = 0;
    for entry in tar.entries().map_err(io)? {
        let mut entry = entry.map_err(io)?;
        let path = entry.path().map_err(io)?.into_owned();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(str::to_owned) else { continue };
        if !name.ends_with(".bin") {
            continue;
        }
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(io)?;
        write(&dir.join(name), &bytes)?;
        count += 1;
    }
    Ok(count)
}

fn fetch_cifar(layout: &DataLayout, log: &mut impl FnMut(String)) -> Result<()> {
    let dir = layout.cifar_dir();
    if dir.join("test_batch.bin").exists() && dir.join("data_batch_5.bin").exists() {
        log(format!("{} already present", dir.display()));
        return Ok(());
    }
    fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    log(format!("downloading {CIFAR_URL}"));
    let archive = download(CIFAR_URL)?;
    let n = unpack_cifar(&archive, &dir)?;
    log(format!("unpacked {n} batch files into {}", dir.display()));
    layout.cifar10(false).map(|_| ())
}

pub fn fetch(root: &Path, which: &[DatasetName], mut log: impl FnMut(String)) -> Result<()> {
    let layout = DataLayout::new(root);
    for d in which {
        match d {
            DatasetName::Mnist => fetch_mnist(&layout, &mut log)?,
            DatasetName::Cifar10 => fetch_cifar(&layout, &mut log)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    #[test]
    fn archive_members_are_flattened() {
        let mut builder = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::fast()));
        for (name, body) in [("cifar-10-batches-bin/test_batch.bin", &b"abc"[..]), ("cifar-10-batches-bin/readme.html", b"x")] {
            let mut h = tar::Header::new_gnu();
            h.set_size(body.len() as u64);
            h.set_mode(0o644);
            h.set_cksum();
            builder.append_data(&mut h, name, body).unwrap();
        }
        let gz = builder.into_inner().unwrap().finish().unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(unpack_cifar(&gz, dir.path()).unwrap(), 1);
        assert_eq!(fs::read(dir.path().join("test_batch.bin")).unwrap(), b"abc");
        assert!(!dir.path().join("readme.html").exists());
    }

    #[test]
    fn gunzip_round_trip() {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(b"idx").unwrap();
        assert_eq!(gunzip(&enc.finish().unwrap(), "x").unwrap(), b"idx");
        assert!(gunzip(b"not gzip", "x").is_err());
    }

    #[test]
    fn present_files_are_not_downloaded() {
        let dir = tempfile::tempdir().unwrap();
        let layout = DataLayout::new(dir.path());
        fs::create_dir_all(layout.cifar_dir()).unwrap();
        for n in ["test_batch.bin", "data_batch_5.bin"] {
            let mut rec = vec![1u8];
            rec.extend(std::iter::repeat_n(7u8, 3072));
            fs::write(layout.cifar_dir().join(n), rec).unwrap();
        }
        let mut logs = Vec::new();
        fetch(dir.path(), &[DatasetName::Cifar10], |m| logs.push(m)).unwrap();
        assert!(logs[0].contains("already present"));
    }
}
