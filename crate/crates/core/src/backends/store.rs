use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::ImageReader;

use super::{sha256_hex, BackendError};
use crate::plan::ImageHandle;

/// Content-addressed image directory. Locators look like `images/<sha256>.<ext>`
/// and are relative to [`ImageStore::root`].
#[derive(Debug)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn new(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("images"))?;
        Ok(ImageStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, handle: &ImageHandle) -> PathBuf {
        self.root.join(&handle.locator)
    }

    /// Decodes the header of `bytes` and persists them under their digest.
    pub fn put(&self, bytes: &[u8]) -> Result<ImageHandle, BackendError> {
        let (width, height, format) = probe_bytes(bytes).map_err(|message| BackendError::Image {
            locator: "<upload>".into(),
            message,
        })?;
        let locator = format!("images/{}.{}", sha256_hex(bytes), format);
        let path = self.root.join(&locator);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(ImageHandle { locator, width, height, format })
    }

    pub fn import(&self, path: &Path) -> Result<ImageHandle, BackendError> {
        let bytes = fs::read(path).map_err(|e| BackendError::Image {
            locator: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.put(&bytes)
    }

    pub fn read(&self, handle: &ImageHandle) -> Result<Vec<u8>, BackendError> {
        fs::read(self.path_of(handle)).map_err(|e| BackendError::Image {
            locator: handle.locator.clone(),
            message: e.to_string(),
        })
    }

    /// Reads the file behind `handle` and checks that it decodes.
    pub fn read_decodable(&self, handle: &ImageHandle) -> Result<Vec<u8>, BackendError> {
        let bytes = self.read(handle)?;
        probe_bytes(&bytes).map_err(|message| BackendError::Image { locator: handle.locator.clone(), message })?;
        Ok(bytes)
    }

    pub fn probe_handle(&self, handle: &ImageHandle) -> Result<(), BackendError> {
        self.read_decodable(handle).map(|_| ())
    }

    /// Width, height and format tag of an image file.
    pub fn probe(path: &Path) -> Result<(u32, u32, String), String> {
        let bytes = fs::read(path).map_err(|e| e.to_string())?;
        probe_bytes(&bytes)
    }
}

pub(crate) fn probe_bytes(bytes: &[u8]) -> Result<(u32, u32, String), String> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format().map_err(|e| e.to_string())?;
    let format = match reader.format() {
        Some(image::ImageFormat::Png) => "png",
        Some(image::ImageFormat::Jpeg) => "jpeg",
        Some(other) => return Err(format!("unsupported image format {other:?}")),
        None => return Err("unrecognized image data".into()),
    };
    let (w, h) = reader.into_dimensions().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    Ok((w, h, format.to_string()))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp, path)
}
