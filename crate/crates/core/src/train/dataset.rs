use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};
use crate::wsi::{tile_tensor, DatasetManifest, PyramidalSlide, Split};

/// Labeled tiles held in memory, each `[1, C, s, s]`.
#[derive(Clone, Debug)]
pub struct TileDataset<T> {
    tiles: Vec<Tensor<T>>,
    labels: Vec<usize>,
}

impl<T: Element> TileDataset<T> {
    pub fn new(tiles: Vec<Tensor<T>>, labels: Vec<usize>) -> Result<Self> {
        if tiles.len() != labels.len() {
            return shape_err(format!("{} tiles but {} labels", tiles.len(), labels.len()));
        }
        if let Some(first) = tiles.first() {
            let s = first.shape();
            if s.len() != 4 || s[0] != 1 {
                return shape_err(format!("tiles must be [1, C, H, W], got {s:?}"));
            }
            if let Some(bad) = tiles.iter().find(|t| t.shape() != s) {
                return shape_err(format!("tile {:?} differs from {s:?}", bad.shape()));
            }
        }
        Ok(Self { tiles, labels })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tiles(&self) -> &[Tensor<T>] {
        &self.tiles
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            tiles: indices.iter().map(|&i| self.tiles[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stacks the tiles at `indices`, each first passed through `transform`.
    pub fn batch(
        &self,
        indices: &[usize],
        mut transform: impl FnMut(&Tensor<T>) -> Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let parts: Vec<Tensor<T>> = indices.iter().map(|&i| transform(&self.tiles[i])).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok((Tensor::stack_batch(&refs)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Tiles of one split of `manifest`, looked up by slide id in `slides`.
pub fn load_tile_dataset<T: Element>(
    manifest: &DatasetManifest,
    split: Split,
    slides: &[PyramidalSlide],
    resize: Option<usize>,
) -> Result<TileDataset<T>> {
    let mut tiles = Vec::new();
    let mut labels = Vec::new();
    for r in manifest.split(split) {
        let slide = find_slide(slides, &r.slide_id)?;
        tiles.push(tile_tensor(slide, r.x, r.y, r.side, resize)?);
        labels.push(r.label);
    }
    TileDataset::new(tiles, labels)
}

pub fn find_slide<'a>(slides: &'a [PyramidalSlide], id: &str) -> Result<&'a PyramidalSlide> {
    slides
        .iter()
        .find(|s| s.id() == id)
        .ok_or_else(|| Error::Format(format!("manifest refers to unknown slide {id:?}")))
}
