//! Feature transforms bundled with a fitted regressor so that a saved model
//! can be replayed on new images.

use std::path::Path;

use nalgebra::DMatrix;
use serde_json::json;

use crate::container::{Container, Tensor};
use crate::dataset::{images_to_features, GrayImage};
use crate::error::{Error, Result};
use crate::lbp::{lbp_transform, LbpConfig};
use crate::matrix::{FeatureMatrix, Provenance, TargetMatrix};
use crate::pca::{fit_pca, transform, ComponentSelector, PcaModel};
use crate::regressors::{fit_any, predict_any, Model, RegressorKind, RegressorSpec};

/// Pixels (or LBP codes) scaled into [0, 1], optionally projected by PCA.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeaturePipeline {
    pub lbp: Option<LbpConfig>,
    pub pca: Option<PcaModel>,
}

impl FeaturePipeline {
    /// Features before any PCA projection.
    pub fn base_features(&self, images: &[&GrayImage]) -> Result<FeatureMatrix> {
        match &self.lbp {
            None => Ok(images_to_features(images, true)),
            Some(cfg) => {
                let scale = 1.0 / ((1u64 << cfg.code_bits()) - 1) as f64;
                let mut rows = Vec::with_capacity(images.len());
                for img in images {
                    let lbp = lbp_transform(img, cfg)?;
                    rows.push(lbp.codes().iter().map(|&c| c as f64 * scale).collect::<Vec<_>>());
                }
                let ncols = rows.first().map_or(0, Vec::len);
                Ok(FeatureMatrix::new(
                    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]),
                    Provenance::Lbp,
                ))
            }
        }
    }

    pub fn features(&self, images: &[&GrayImage]) -> Result<FeatureMatrix> {
        let base = self.base_features(images)?;
        match &self.pca {
            None => Ok(base),
            Some(m) => transform(m, &base),
        }
    }

    /// Fits the PCA stage (when `selector` is set) on the first `fit_rows`
    /// images and returns the pipeline with the training features.
    pub fn fit(
        images: &[&GrayImage],
        lbp: Option<LbpConfig>,
        selector: Option<ComponentSelector>,
        fit_rows: Option<usize>,
    ) -> Result<(Self, FeatureMatrix)> {
        let mut p = FeaturePipeline { lbp, pca: None };
        let base = p.base_features(images)?;
        if let Some(sel) = selector {
            let n = fit_rows.map_or(base.nrows(), |r| r.min(base.nrows()));
            let fit_on = base.select_rows(&(0..n).collect::<Vec<_>>());
            let model = fit_pca(&fit_on, sel)?;
            let x = transform(&model, &base)?;
            p.pca = Some(model);
            return Ok((p, x));
        }
        Ok((p, base))
    }
}

/// A regressor together with its feature pipeline and target column names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub pipeline: FeaturePipeline,
    pub targets: Vec<String>,
}

const PCA_PREFIX: &str = "pca.";

impl TrainedModel {
    pub fn fit(
        spec: &RegressorSpec,
        images: &[&GrayImage],
        y: &TargetMatrix,
        targets: Vec<String>,
        lbp: Option<LbpConfig>,
        selector: Option<ComponentSelector>,
        fit_rows: Option<usize>,
    ) -> Result<Self> {
        if spec.kind() == RegressorKind::Cnn && selector.is_none() {
            return Err(Error::invalid("the CNN reads PCA grids; choose a component count"));
        }
        let (pipeline, x) = FeaturePipeline::fit(images, lbp, selector, fit_rows)?;
        let model = fit_any(spec, &x, y)?;
        Ok(Self {
            model,
            pipeline,
            targets,
        })
    }

    pub fn predict(&self, images: &[&GrayImage]) -> Result<TargetMatrix> {
        predict_any(&self.model, &self.pipeline.features(images)?)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.model.to_container()?;
        c.meta["targets"] = json!(self.targets);
        c.meta["lbp"] = serde_json::to_value(self.pipeline.lbp).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(p) = &self.pipeline.pca {
            let pc = p.to_container();
            c.meta["pca"] = pc.meta;
            for t in pc.tensors {
                c.tensors.push(Tensor {
                    name: format!("{PCA_PREFIX}{}", t.name),
                    ..t
                });
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = Model::from_container(c)?;
        let targets: Vec<String> = serde_json::from_value(c.meta.get("targets").cloned().unwrap_or(json!([])))
            .map_err(|e| Error::Format(format!("targets: {e}")))?;
        let lbp: Option<LbpConfig> = serde_json::from_value(c.meta.get("lbp").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("lbp settings: {e}")))?;
        let pca = match c.meta.get("pca") {
            None | Some(serde_json::Value::Null) => None,
            Some(meta) => {
                let mut pc = Container::new("pca", meta.clone());
                pc.tensors = c
                    .tensors
                    .iter()
                    .filter_map(|t| {
                        t.name.strip_prefix(PCA_PREFIX).map(|n| Tensor {
                            name: n.to_string(),
                            ..t.clone()
                        })
                    })
                    .collect();
                Some(PcaModel::from_container(&pc)?)
            }
        };
        Ok(Self {
            model,
            pipeline: FeaturePipeline { lbp, pca },
            targets,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
