use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};

use super::{check_frame_size, Dataset, EmbeddingField, SequenceSample};
use crate::error::{Error, Result};
use crate::image::Image;

/// TOML manifest listing regions of interest and their frames.
///
/// ```toml
/// [[roi]]
/// id = "coast"
///
/// [[roi.frames]]
/// image = "coast/2018-06-01.png"
/// embedding = "coast/2018-06-01.emb"   # optional
///
/// [[roi.frames]]
/// image = "coast/2019-06-01.png"
/// date = "2019-06-01"                  # optional, else parsed from the file stem
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub roi: Vec<ManifestRoi>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRoi {
    pub id: String,
    #[serde(default)]
    pub frames: Vec<ManifestFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }
}

fn date_from_stem(path: &Path) -> Option<NaiveDate> {
    let stem = path.file_stem()?.to_str()?;
    NaiveDate::parse_from_str(stem, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(stem, "%Y%m%d"))
        .ok()
        .or_else(|| {
            let year: i32 = stem.parse().ok()?;
            NaiveDate::from_ymd_opt(year, 1, 1)
        })
}

struct LoadedFrame {
    date: NaiveDate,
    image: Option<Image>,
    embedding: Option<EmbeddingField>,
}

fn load_frame(root: &Path, roi: &str, f: &ManifestFrame) -> Option<LoadedFrame> {
    let Some(date) = f.date.or_else(|| date_from_stem(&f.image)) else {
        warn!("{roi}: cannot determine a date for {}, skipping", f.image.display());
        return None;
    };
    let path = root.join(&f.image);
    let image = if !path.exists() {
        warn!("{roi}: missing frame {}", path.display());
        None
    } else {
        match Image::load_png(&path) {
            Ok(im) => match check_frame_size(im.height(), im.width()) {
                Ok(()) => Some(im),
                Err(e) => {
                    warn!("{roi}: {}: {e}", path.display());
                    None
                }
            },
            Err(e) => {
                warn!("{roi}: skipping malformed frame: {e}");
                None
            }
        }
    };
    let embedding = f.embedding.as_ref().and_then(|p| {
        let path = root.join(p);
        if !path.exists() {
            return None;
        }
        EmbeddingField::load(&path)
            .map_err(|e| warn!("{roi}: ignoring embedding {}: {e}", path.display()))
            .ok()
    });
    Some(LoadedFrame { date, image, embedding })
}

/// Loads every consecutive frame pair listed in `manifest` (relative paths
/// resolve against `root`). Pairs touching a missing or unreadable frame are
/// skipped; a pair carries the embedding of its second frame when present.
pub fn load_tile_dataset(root: &Path, manifest: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::config(format!("dataset root {} does not exist", root.display())));
    }
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::config(format!("manifest {}: {e}", manifest.display())))?;
    let manifest = Manifest::parse(&text)?;
    let mut samples = Vec::new();
    for roi in &manifest.roi {
        let mut frames: Vec<LoadedFrame> = roi.frames.iter().filter_map(|f| load_frame(root, &roi.id, f)).collect();
        frames.sort_by_key(|f| f.date);
        for w in frames.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let (Some(ia), Some(ib)) = (&a.image, &b.image) else {
                continue;
            };
            match SequenceSample::new(
                ia.clone(),
                ib.clone(),
                b.embedding.clone(),
                roi.id.clone(),
                (a.date, b.date),
            ) {
                Ok(s) => samples.push(s),
                Err(e) => warn!("{}: skipping pair {} -> {}: {e}", roi.id, a.date, b.date),
            }
        }
    }
    Ok(Dataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dates_from_stems() {
        let d = |s: &str| date_from_stem(Path::new(s));
        assert_eq!(d("a/2019-06-01.png"), NaiveDate::from_ymd_opt(2019, 6, 1));
        assert_eq!(d("20200102.png"), NaiveDate::from_ymd_opt(2020, 1, 2));
        assert_eq!(d("2021.png"), NaiveDate::from_ymd_opt(2021, 1, 1));
        assert_eq!(d("frame.png"), None);
    }

    #[test]
    fn manifest_parses_optional_fields() {
        let m = Manifest::parse(
            r#"
            [[roi]]
            id = "a"
            [[roi.frames]]
            image = "a/2018.png"
            [[roi.frames]]
            image = "a/x.png"
            embedding = "a/x.emb"
            date = "2019-03-04"
            "#,
        )
        .unwrap();
        assert_eq!(m.roi[0].frames.len(), 2);
        assert_eq!(m.roi[0].frames[1].embedding.as_deref(), Some(Path::new("a/x.emb")));
        assert_eq!(Manifest::parse(&m.to_toml()).unwrap(), m);
    }

    #[test]
    fn missing_root_is_config_error() {
        let err = load_tile_dataset(Path::new("/nonexistent/root"), Path::new("m.toml"));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
