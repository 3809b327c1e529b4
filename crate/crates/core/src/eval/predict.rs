use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{Element, Tensor};
use crate::train::find_slide;
use crate::wsi::{tile_tensor, DatasetManifest, PyramidalSlide, Split};

use super::metrics::{compute_metrics, ConfusionMatrix, MetricsReport};

/// Something that scores level-0 tiles of a slide with a malignancy
/// probability.
pub trait MalignancyPredictor {
    fn predict_tiles(&self, slide: &PyramidalSlide, origins: &[(usize, usize)], side: usize) -> Result<Vec<f64>>;
}

/// Runs a network in eval mode on batches of extracted tiles.
pub struct ModelPredictor<'a, T, M> {
    model: &'a M,
    resize: Option<usize>,
    batch_size: usize,
    _elem: PhantomData<T>,
}

impl<'a, T: Element, M: Classifier<T>> ModelPredictor<'a, T, M> {
    pub fn new(model: &'a M) -> Self {
        Self {
            model,
            resize: None,
            batch_size: 32,
            _elem: PhantomData,
        }
    }

    /// Resample every tile to `side × side` before inference.
    pub fn with_resize(mut self, side: Option<usize>) -> Self {
        self.resize = side;
        self
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }
}

impl<T: Element, M: Classifier<T>> MalignancyPredictor for ModelPredictor<'_, T, M> {
    fn predict_tiles(&self, slide: &PyramidalSlide, origins: &[(usize, usize)], side: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(origins.len());
        for chunk in origins.chunks(self.batch_size) {
            let tiles: Vec<Tensor<T>> = chunk
                .iter()
                .map(|&(x, y)| tile_tensor(slide, x, y, side, self.resize))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<T>> = tiles.iter().collect();
            out.extend(self.model.predict_batch(&Tensor::stack_batch(&refs)?)?);
        }
        Ok(out)
    }
}

/// Reads the answer off the slide's annotation: 1 when the tile center is
/// annotated malignant, else 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthOracle;

impl MalignancyPredictor for GroundTruthOracle {
    fn predict_tiles(&self, slide: &PyramidalSlide, origins: &[(usize, usize)], side: usize) -> Result<Vec<f64>> {
        Ok(origins
            .iter()
            .map(|&(x, y)| f64::from(u8::from(slide.is_malignant_at(x + side / 2, y + side / 2))))
            .collect())
    }
}

/// Always answers `p`.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub f64);

impl MalignancyPredictor for ConstantPredictor {
    fn predict_tiles(&self, _: &PyramidalSlide, origins: &[(usize, usize)], _: usize) -> Result<Vec<f64>> {
        Ok(vec![self.0; origins.len()])
    }
}

/// Confusion counts and metrics over one split. Records are scored slide
/// by slide in manifest order.
pub fn evaluate(
    predictor: &dyn MalignancyPredictor,
    manifest: &DatasetManifest,
    split: Split,
    slides: &[PyramidalSlide],
    threshold: f64,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let records: Vec<_> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut cm = ConfusionMatrix::default();
    let mut i = 0;
    while i < records.len() {
        let (id, side) = (&records[i].slide_id, records[i].side);
        let run = records[i..].iter().take_while(|r| &r.slide_id == id && r.side == side).count();
        let slide = find_slide(slides, id)?;
        let group = &records[i..i + run];
        let origins: Vec<(usize, usize)> = group.iter().map(|r| (r.x, r.y)).collect();
        let probs = predictor.predict_tiles(slide, &origins, side)?;
        for (p, r) in probs.iter().zip(group) {
            cm.record(*p >= threshold, r.label);
        }
        i += run;
    }
    let report = compute_metrics(&cm)?;
    Ok((cm, report))
}
