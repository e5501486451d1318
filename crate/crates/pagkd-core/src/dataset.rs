//! In-memory image store keyed by manifest id, with an access audit that
//! rejects reads of forbidden (held-out) images during training.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grouping::{ManifestRow, Modality};
use crate::tensor::{self, Tensor};

pub struct ImageStore {
    images: HashMap<String, Tensor>,
    class_of: HashMap<String, usize>,
    modality_of: HashMap<String, Modality>,
    forbidden: HashSet<String>,
    pub image_shape: Vec<usize>, // [ch, H, W]
    pub num_classes: usize,
}

impl ImageStore {
    /// Eagerly loads every manifest row's image relative to `root`.
    pub fn load(root: &Path, rows: &[ManifestRow]) -> Result<Self> {
        let mut images = HashMap::new();
        let mut class_of = HashMap::new();
        let mut modality_of = HashMap::new();
        let mut image_shape = Vec::new();
        let mut num_classes = 0;
        for row in rows {
            let entries = tensor::load_archive(root.join(&row.path))?;
            let img = entries
                .into_iter()
                .find(|(name, _)| name == "image")
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::Data(format!("{}: archive has no `image` entry", row.path))
                })?;
            if image_shape.is_empty() {
                image_shape = img.shape().to_vec();
            } else if img.shape() != image_shape.as_slice() {
                return Err(Error::Data(format!(
                    "{}: image shape {:?} differs from {:?}",
                    row.path,
                    img.shape(),
                    image_shape
                )));
            }
            num_classes = num_classes.max(row.class + 1);
            images.insert(row.id.clone(), img);
            class_of.insert(row.id.clone(), row.class);
            modality_of.insert(row.id.clone(), row.modality);
        }
        if images.is_empty() {
            return Err(Error::Data("empty manifest".into()));
        }
        Ok(ImageStore {
            images,
            class_of,
            modality_of,
            forbidden: HashSet::new(),
            image_shape,
            num_classes,
        })
    }

    /// Builds a store directly from tensors (tests).
    pub fn from_tensors(items: Vec<(String, usize, Modality, Tensor)>) -> Result<Self> {
        let mut images = HashMap::new();
        let mut class_of = HashMap::new();
        let mut modality_of = HashMap::new();
        let mut image_shape = Vec::new();
        let mut num_classes = 0;
        for (id, class, modality, img) in items {
            if image_shape.is_empty() {
                image_shape = img.shape().to_vec();
            }
            num_classes = num_classes.max(class + 1);
            images.insert(id.clone(), img);
            class_of.insert(id.clone(), class);
            modality_of.insert(id, modality);
        }
        if images.is_empty() {
            return Err(Error::Data("empty store".into()));
        }
        Ok(ImageStore {
            images,
            class_of,
            modality_of,
            forbidden: HashSet::new(),
            image_shape,
            num_classes,
        })
    }

    /// Marks ids whose pixels must never be read (held-out test fold).
    pub fn forbid<I: IntoIterator<Item = String>>(&mut self, ids: I) {
        self.forbidden.extend(ids);
    }

    pub fn allow_all(&mut self) {
        self.forbidden.clear();
    }

    pub fn class(&self, id: &str) -> Result<usize> {
        self.class_of
            .get(id)
            .copied()
            .ok_or_else(|| Error::Index(format!("unknown image id `{id}`")))
    }

    pub fn modality(&self, id: &str) -> Result<Modality> {
        self.modality_of
            .get(id)
            .copied()
            .ok_or_else(|| Error::Index(format!("unknown image id `{id}`")))
    }

    /// Stacks the named images into [N, ch, H, W]; reading a forbidden id
    /// is a hard error (the test-fold access audit).
    pub fn batch(&self, ids: &[String]) -> Result<Tensor> {
        let (ch, h, w) = (self.image_shape[0], self.image_shape[1], self.image_shape[2]);
        let mut data = Vec::with_capacity(ids.len() * ch * h * w);
        for id in ids {
            if self.forbidden.contains(id) {
                return Err(Error::Aborted(format!(
                    "attempted to read held-out image `{id}` during training"
                )));
            }
            let img = self
                .images
                .get(id)
                .ok_or_else(|| Error::Index(format!("unknown image id `{id}`")))?;
            data.extend_from_slice(img.data());
        }
        Ok(Tensor::new(vec![ids.len(), ch, h, w], data))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store() -> ImageStore {
        ImageStore::from_tensors(vec![
            ("a".into(), 0, Modality::Wli, Tensor::full(vec![1, 2, 2], 0.1)),
            ("b".into(), 1, Modality::Nbi, Tensor::full(vec![1, 2, 2], 0.9)),
        ])
        .unwrap()
    }

    #[test]
    fn batch_stacks_in_order() {
        let store = toy_store();
        let t = store.batch(&["b".into(), "a".into()]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(t.data()[0], 0.9);
        assert_eq!(t.data()[4], 0.1);
    }

    #[test]
    fn forbidden_access_aborts() {
        let mut store = toy_store();
        store.forbid(["a".to_string()]);
        assert!(matches!(
            store.batch(&["a".into()]),
            Err(Error::Aborted(_))
        ));
        store.allow_all();
        assert!(store.batch(&["a".into()]).is_ok());
    }
}
