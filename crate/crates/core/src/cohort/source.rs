use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::augment::{preprocess, read_pgm, Image, PreprocessConfig};
use crate::error::Result;

/// Supplies preprocessed images for manifest scan references.
pub trait ImageSource: Sync {
    fn load(&self, path: &std::path::Path) -> Result<Image>;
}

/// Reads PGM files from disk, preprocesses them and caches the result as
/// 8-bit pixels. Flattening and windowing only move pixels, so the 8-bit
/// cache is lossless.
pub struct DiskImages {
    preprocess: PreprocessConfig,
    cache: Mutex<HashMap<PathBuf, Arc<(usize, usize, Vec<u8>)>>>,
}

impl DiskImages {
    pub fn new(preprocess: PreprocessConfig) -> Self {
        DiskImages {
            preprocess,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl ImageSource for DiskImages {
    fn load(&self, path: &std::path::Path) -> Result<Image> {
        let hit = self.cache.lock().expect("image cache poisoned").get(path).cloned();
        let entry = match hit {
            Some(e) => e,
            None => {
                let img = preprocess(&read_pgm(path)?, &self.preprocess)?;
                let e = Arc::new((img.height(), img.width(), img.to_u8()));
                self.cache
                    .lock()
                    .expect("image cache poisoned")
                    .insert(path.to_path_buf(), e.clone());
                e
            }
        };
        let mut img = Image::from_u8(entry.0, entry.1, &entry.2)?;
        img.meta.source = Some(path.display().to_string());
        Ok(img)
    }
}
