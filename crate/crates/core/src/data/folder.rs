use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{Dataset, Image, ImageRecord};
use crate::error::{Result, RobError};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| RobError::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| RobError::Ingestion {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn load_one(path: &Path, resize: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| RobError::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img
        .resize_exact(resize as u32, resize as u32, FilterType::Triangle)
        .to_rgb8();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::from_data(resize, resize, data)
}

/// Loads an image folder.
///
/// Two layouts are accepted: one sub-directory per class (labels are the
/// index of the class name in sorted order) or a flat folder of images
/// (records are unlabeled). Images are resized to `resize × resize` and
/// records are ordered by (class, file name).
pub fn load_image_folder(path: &Path, resize: usize) -> Result<Dataset> {
    if resize == 0 {
        return Err(RobError::config("resize must be positive"));
    }
    let entries = sorted_entries(path)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut ds = Dataset::default();
    if class_dirs.is_empty() {
        for file in entries.iter().filter(|p| is_image(p)) {
            ds.records.push(ImageRecord {
                id: file_id(path, file),
                label: None,
                image: load_one(file, resize)?,
            });
        }
    } else {
        for (label, dir) in class_dirs.iter().enumerate() {
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            for file in sorted_entries(dir)?.iter().filter(|p| is_image(p)) {
                ds.records.push(ImageRecord {
                    id: file_id(path, file),
                    label: Some(label),
                    image: load_one(file, resize)?,
                });
            }
            ds.class_names.push(name);
        }
    }
    if ds.records.is_empty() {
        return Err(RobError::Ingestion {
            path: path.to_path_buf(),
            reason: "no images found".into(),
        });
    }
    Ok(ds)
}

fn file_id(root: &Path, file: &Path) -> String {
    file.strip_prefix(root)
        .unwrap_or(file)
        .to_string_lossy()
        .replace('\\', "/")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, rgb: [u8; 3]) {
        let img = image::RgbImage::from_pixel(5, 7, image::Rgb(rgb));
        img.save(path).unwrap();
    }

    #[test]
    fn class_folders_get_sorted_labels() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["b", "a"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..2 {
                write_png(
                    &dir.path().join(class).join(format!("{i}.png")),
                    [200, 10, 10],
                );
            }
        }
        let ds = load_image_folder(dir.path(), 8).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels().unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(ds.class_names, vec!["a", "b"]);
        assert_eq!(ds.records[0].id, "a/0.png");
        assert_eq!(ds.records[0].image.height, 8);
        assert!((ds.records[0].image.get(3, 3, 0) - 200.0 / 255.0).abs() < 1e-3);
    }

    #[test]
    fn flat_folder_is_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_png(&dir.path().join(format!("img{i}.png")), [0, 0, 0]);
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let ds = load_image_folder(dir.path(), 4).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.records.iter().all(|r| r.label.is_none()));
    }

    #[test]
    fn empty_or_missing_folder_is_an_error_naming_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_image_folder(dir.path(), 4).unwrap_err();
        assert!(err.to_string().contains(&dir.path().display().to_string()));
        assert!(load_image_folder(&dir.path().join("missing"), 4).is_err());
    }
}
