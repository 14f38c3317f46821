//! Eight multi-output regressors behind one fit/predict contract.

pub mod cnn;
pub mod knn;
pub mod linear;
pub mod mlp;
pub mod nn;
pub mod tree;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, TargetMatrix};

pub use cnn::{cnn_fit, cnn_predict, CnnModel, CnnNet, CnnParams};
pub use knn::{knn_fit, knn_predict, KnnModel};
pub use linear::{elastic_fit, lasso_fit, ols_fit, ridge_fit, CdSettings, LinearModel};
pub use mlp::{mlp_fit, mlp_predict, MlpModel, MlpNet, MlpParams};
pub use nn::{Network, Optimizer};
pub use tree::{tree_fit, tree_predict, Node, TreeModel, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Knn,
    Ols,
    Ridge,
    Lasso,
    Elastic,
    Tree,
    Mlp,
    Cnn,
}

impl RegressorKind {
    pub const ALL: [RegressorKind; 8] = [
        RegressorKind::Knn,
        RegressorKind::Ols,
        RegressorKind::Ridge,
        RegressorKind::Lasso,
        RegressorKind::Elastic,
        RegressorKind::Tree,
        RegressorKind::Mlp,
        RegressorKind::Cnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegressorKind::Knn => "knn",
            RegressorKind::Ols => "ols",
            RegressorKind::Ridge => "ridge",
            RegressorKind::Lasso => "lasso",
            RegressorKind::Elastic => "elastic",
            RegressorKind::Tree => "tree",
            RegressorKind::Mlp => "mlp",
            RegressorKind::Cnn => "cnn",
        }
    }

    /// Whether training is stochastic (and so depends on the seed).
    pub fn is_stochastic(self) -> bool {
        matches!(self, RegressorKind::Mlp | RegressorKind::Cnn)
    }
}

impl fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let alias = match lower.as_str() {
            "linear" => "ols",
            "elasticnet" | "elastic_net" | "elastic-net" => "elastic",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown regressor kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Hyperparameters {
    Knn { k: usize },
    Ols,
    Ridge { lambda: f64 },
    Lasso { alpha: f64, max_iter: usize, tol: f64 },
    Elastic { alpha: f64, rho: f64, max_iter: usize, tol: f64 },
    Tree { max_depth: Option<usize>, min_samples_leaf: usize },
    Mlp(MlpParams),
    Cnn(CnnParams),
}

impl Hyperparameters {
    pub fn default_for(kind: RegressorKind) -> Self {
        let cd = CdSettings::default();
        match kind {
            RegressorKind::Knn => Hyperparameters::Knn { k: 5 },
            RegressorKind::Ols => Hyperparameters::Ols,
            RegressorKind::Ridge => Hyperparameters::Ridge { lambda: 1.0 },
            RegressorKind::Lasso => Hyperparameters::Lasso {
                alpha: 0.1,
                max_iter: cd.max_iter,
                tol: cd.tol,
            },
            RegressorKind::Elastic => Hyperparameters::Elastic {
                alpha: 0.1,
                rho: 0.5,
                max_iter: cd.max_iter,
                tol: cd.tol,
            },
            RegressorKind::Tree => {
                let t = TreeParams::default();
                Hyperparameters::Tree {
                    max_depth: t.max_depth,
                    min_samples_leaf: t.min_samples_leaf,
                }
            }
            RegressorKind::Mlp => Hyperparameters::Mlp(MlpParams::default()),
            RegressorKind::Cnn => Hyperparameters::Cnn(CnnParams::default()),
        }
    }

    pub fn kind(&self) -> RegressorKind {
        match self {
            Hyperparameters::Knn { .. } => RegressorKind::Knn,
            Hyperparameters::Ols => RegressorKind::Ols,
            Hyperparameters::Ridge { .. } => RegressorKind::Ridge,
            Hyperparameters::Lasso { .. } => RegressorKind::Lasso,
            Hyperparameters::Elastic { .. } => RegressorKind::Elastic,
            Hyperparameters::Tree { .. } => RegressorKind::Tree,
            Hyperparameters::Mlp(_) => RegressorKind::Mlp,
            Hyperparameters::Cnn(_) => RegressorKind::Cnn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            Hyperparameters::Knn { k } if *k < 1 => bad("knn: k must be at least 1".into()),
            Hyperparameters::Ridge { lambda } if !(*lambda >= 0.0 && lambda.is_finite()) => {
                bad(format!("ridge: lambda {lambda} must be finite and >= 0"))
            }
            Hyperparameters::Lasso { alpha, max_iter, tol } | Hyperparameters::Elastic { alpha, max_iter, tol, .. }
                if !(*alpha >= 0.0 && alpha.is_finite()) || *max_iter == 0 || !(*tol > 0.0) =>
            {
                bad(format!("{}: needs alpha >= 0, max_iter >= 1, tol > 0", self.kind()))
            }
            Hyperparameters::Elastic { rho, .. } if !(0.0..=1.0).contains(rho) => {
                bad(format!("elastic: rho {rho} outside [0, 1]"))
            }
            Hyperparameters::Tree { min_samples_leaf, .. } if *min_samples_leaf < 1 => {
                bad("tree: min_samples_leaf must be at least 1".into())
            }
            Hyperparameters::Mlp(p) => p.validate().map_err(|e| Error::Config(format!("mlp: {e}"))),
            Hyperparameters::Cnn(p) => p.validate().map_err(|e| Error::Config(format!("cnn: {e}"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorSpec {
    pub hyperparameters: Hyperparameters,
    pub seed: u64,
}

impl RegressorSpec {
    pub fn new(hyperparameters: Hyperparameters, seed: u64) -> Self {
        Self { hyperparameters, seed }
    }

    pub fn default_for(kind: RegressorKind, seed: u64) -> Self {
        Self::new(Hyperparameters::default_for(kind), seed)
    }

    pub fn kind(&self) -> RegressorKind {
        self.hyperparameters.kind()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    Knn(KnnModel),
    Linear(LinearModel),
    Tree(TreeModel),
    Mlp(MlpModel),
    Cnn(CnnModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: RegressorSpec,
    pub fitted: Fitted,
}

pub fn fit_any(spec: &RegressorSpec, x: &FeatureMatrix, y: &TargetMatrix) -> Result<Model> {
    spec.hyperparameters.validate()?;
    let fitted = match &spec.hyperparameters {
        Hyperparameters::Knn { k } => Fitted::Knn(knn_fit(x, y, *k)?),
        Hyperparameters::Ols => Fitted::Linear(ols_fit(x, y)?),
        Hyperparameters::Ridge { lambda } => Fitted::Linear(ridge_fit(x, y, *lambda)?),
        Hyperparameters::Lasso { alpha, max_iter, tol } => Fitted::Linear(lasso_fit(
            x,
            y,
            *alpha,
            CdSettings {
                max_iter: *max_iter,
                tol: *tol,
            },
        )?),
        Hyperparameters::Elastic {
            alpha,
            rho,
            max_iter,
            tol,
        } => Fitted::Linear(elastic_fit(
            x,
            y,
            *alpha,
            *rho,
            CdSettings {
                max_iter: *max_iter,
                tol: *tol,
            },
        )?),
        Hyperparameters::Tree {
            max_depth,
            min_samples_leaf,
        } => Fitted::Tree(tree_fit(
            x,
            y,
            TreeParams {
                max_depth: *max_depth,
                min_samples_leaf: *min_samples_leaf,
            },
        )?),
        Hyperparameters::Mlp(p) => Fitted::Mlp(mlp_fit(x, y, p, spec.seed)?),
        Hyperparameters::Cnn(p) => Fitted::Cnn(cnn_fit(x, y, p, spec.seed)?),
    };
    Ok(Model {
        spec: spec.clone(),
        fitted,
    })
}

pub fn predict_any(model: &Model, xq: &FeatureMatrix) -> Result<TargetMatrix> {
    match &model.fitted {
        Fitted::Knn(m) => knn_predict(m, xq),
        Fitted::Linear(m) => m.predict(xq),
        Fitted::Tree(m) => tree_predict(m, xq),
        Fitted::Mlp(m) => mlp_predict(m, xq),
        Fitted::Cnn(m) => cnn_predict(m, xq),
    }
}

const MODEL_KIND: &str = "regressor";

fn push_params(c: &mut Container, tensors: Vec<&[f64]>) {
    for (i, t) in tensors.into_iter().enumerate() {
        c.push_vector(format!("p{i}"), t);
    }
}

fn load_params<N: Network>(c: &Container, net: &mut N) -> Result<()> {
    for (i, slot) in net.params_mut().into_iter().enumerate() {
        let t = c.tensor(&format!("p{i}"))?;
        if t.values.len() != slot.len() {
            return Err(Error::Format(format!("tensor p{i} has {} values, expected {}", t.values.len(), slot.len())));
        }
        slot.copy_from_slice(&t.values);
    }
    Ok(())
}

fn meta_usize(meta: &serde_json::Value, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Format(format!("model metadata lacks `{key}`")))
}

impl Model {
    pub fn kind(&self) -> RegressorKind {
        self.spec.kind()
    }

    pub fn to_container(&self) -> Result<Container> {
        let spec = serde_json::to_value(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        let mut meta = json!({ "spec": spec });
        let mut c = Container::new(MODEL_KIND, serde_json::Value::Null);
        match &self.fitted {
            Fitted::Knn(m) => {
                let (rows, targets) = m.parts();
                meta["n_features"] = json!(m.n_features());
                c.push("rows", vec![m.n_train(), m.n_features()], rows.to_vec());
                c.push_matrix("targets", targets);
            }
            Fitted::Linear(m) => {
                meta["converged"] = json!(m.converged);
                meta["iterations"] = json!(m.iterations);
                c.push_matrix("weights", &m.weights);
                c.push_vector("intercept", m.intercept.as_slice());
            }
            Fitted::Tree(m) => {
                meta["n_features"] = json!(m.n_features());
                meta["n_outputs"] = json!(m.n_outputs());
                let k = m.nodes().len();
                let mut cols = vec![Vec::with_capacity(k); 5];
                let mut values = Vec::with_capacity(k * m.n_outputs());
                for n in m.nodes() {
                    match n {
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => {
                            for (col, v) in cols.iter_mut().zip([*feature as f64, *threshold, *left as f64, *right as f64, 0.0]) {
                                col.push(v);
                            }
                            values.extend(std::iter::repeat_n(0.0, m.n_outputs()));
                        }
                        Node::Leaf { value, count } => {
                            for (col, v) in cols.iter_mut().zip([-1.0, 0.0, 0.0, 0.0, *count as f64]) {
                                col.push(v);
                            }
                            values.extend(value);
                        }
                    }
                }
                for (name, col) in ["feature", "threshold", "left", "right", "count"].iter().zip(&cols) {
                    c.push_vector(*name, col);
                }
                c.push("values", vec![k, m.n_outputs()], values);
            }
            Fitted::Mlp(m) => {
                meta["sizes"] = json!(m.net.sizes);
                push_params(&mut c, m.net.params());
                c.push_vector("history", &m.history);
            }
            Fitted::Cnn(m) => {
                meta["side"] = json!(m.net.side);
                meta["outputs"] = json!(m.net.outputs);
                push_params(&mut c, m.net.params());
                c.push_vector("history", &m.history);
            }
        }
        c.meta = meta;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != MODEL_KIND {
            return Err(Error::Format(format!("expected a regressor, found `{}`", c.kind)));
        }
        let spec: RegressorSpec = serde_json::from_value(c.meta.get("spec").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("model spec: {e}")))?;
        let fitted = match &spec.hyperparameters {
            Hyperparameters::Knn { k } => {
                Fitted::Knn(KnnModel::from_parts(*k, c.matrix("rows")?, c.matrix("targets")?)?)
            }
            Hyperparameters::Ols
            | Hyperparameters::Ridge { .. }
            | Hyperparameters::Lasso { .. }
            | Hyperparameters::Elastic { .. } => Fitted::Linear(LinearModel {
                weights: c.matrix("weights")?,
                intercept: c.vector("intercept")?,
                converged: c.meta.get("converged").and_then(|v| v.as_bool()).unwrap_or(true),
                iterations: serde_json::from_value(c.meta.get("iterations").cloned().unwrap_or(json!([])))
                    .map_err(|e| Error::Format(e.to_string()))?,
            }),
            Hyperparameters::Tree { .. } => {
                let n_features = meta_usize(&c.meta, "n_features")?;
                let n_outputs = meta_usize(&c.meta, "n_outputs")?;
                let feature = c.vector("feature")?;
                let threshold = c.vector("threshold")?;
                let left = c.vector("left")?;
                let right = c.vector("right")?;
                let count = c.vector("count")?;
                let values = c.tensor("values")?;
                let k = feature.len();
                if [threshold.len(), left.len(), right.len(), count.len()].iter().any(|&l| l != k)
                    || values.values.len() != k * n_outputs
                {
                    return Err(Error::Format("tree tensors disagree in length".into()));
                }
                let nodes = (0..k)
                    .map(|i| {
                        if feature[i] < 0.0 {
                            Node::Leaf {
                                value: values.values[i * n_outputs..(i + 1) * n_outputs].to_vec(),
                                count: count[i] as usize,
                            }
                        } else {
                            Node::Split {
                                feature: feature[i] as usize,
                                threshold: threshold[i],
                                left: left[i] as usize,
                                right: right[i] as usize,
                            }
                        }
                    })
                    .collect();
                Fitted::Tree(TreeModel::from_nodes(nodes, n_features, n_outputs)?)
            }
            Hyperparameters::Mlp(p) => {
                let sizes: Vec<usize> = serde_json::from_value(c.meta.get("sizes").cloned().unwrap_or_default())
                    .map_err(|e| Error::Format(format!("mlp sizes: {e}")))?;
                if sizes.len() < 2 {
                    return Err(Error::Format("mlp needs at least two layer sizes".into()));
                }
                let mut net = MlpNet::new(&sizes, p.dropout, &mut crate::rng::SplitMix64::new(0));
                load_params(c, &mut net)?;
                Fitted::Mlp(MlpModel {
                    net,
                    params: p.clone(),
                    history: c.tensor("history")?.values.clone(),
                })
            }
            Hyperparameters::Cnn(p) => {
                let side = meta_usize(&c.meta, "side")?;
                let outputs = meta_usize(&c.meta, "outputs")?;
                let mut net = CnnNet::new(side, outputs, p, &mut crate::rng::SplitMix64::new(0))?;
                load_params(c, &mut net)?;
                Fitted::Cnn(CnnModel {
                    net,
                    params: p.clone(),
                    history: c.tensor("history")?.values.clone(),
                })
            }
        };
        Ok(Self { spec, fitted })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::Provenance;
    use nalgebra::DMatrix;

    fn fixture(n: usize, d: usize, seed: u64) -> (FeatureMatrix, TargetMatrix) {
        let mut rng = SplitMix64::new(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.uniform(0.0, 1.0));
        let y = DMatrix::from_fn(n, 2, |i, j| 40.0 + 10.0 * x[(i, j)] + rng.uniform(-1.0, 1.0));
        (FeatureMatrix::new(x, Provenance::Raw), TargetMatrix(y))
    }

    fn small_spec(kind: RegressorKind) -> RegressorSpec {
        let mut spec = RegressorSpec::default_for(kind, 3);
        match &mut spec.hyperparameters {
            Hyperparameters::Mlp(p) => {
                p.hidden = vec![6, 4];
                p.epochs = 3;
                p.batch_size = 4;
            }
            Hyperparameters::Cnn(p) => {
                p.conv1_filters = 2;
                p.conv2_filters = 2;
                p.dense = 4;
                p.epochs = 2;
                p.batch_size = 4;
            }
            _ => {}
        }
        spec
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("KNN".parse::<RegressorKind>().unwrap(), RegressorKind::Knn);
        assert_eq!("linear".parse::<RegressorKind>().unwrap(), RegressorKind::Ols);
        assert!(matches!("svm".parse::<RegressorKind>(), Err(Error::Config(_))));
        for k in RegressorKind::ALL {
            assert_eq!(k.name().parse::<RegressorKind>().unwrap(), k);
        }
    }

    #[test]
    fn dispatch_matches_direct_knn() {
        let (x, y) = fixture(20, 3, 1);
        let m = fit_any(&RegressorSpec::default_for(RegressorKind::Knn, 0), &x, &y).unwrap();
        let direct = knn_predict(&knn_fit(&x, &y, 5).unwrap(), &x).unwrap();
        assert_eq!(predict_any(&m, &x).unwrap(), direct);
    }

    #[test]
    fn invalid_hyperparameters_are_config_errors() {
        let (x, y) = fixture(10, 2, 2);
        let spec = RegressorSpec::new(Hyperparameters::Elastic { alpha: 0.1, rho: 2.0, max_iter: 10, tol: 1e-4 }, 0);
        assert!(matches!(fit_any(&spec, &x, &y), Err(Error::Config(_))));
    }

    #[test]
    fn every_kind_round_trips_through_container() {
        let (x, y) = fixture(16, 16, 4);
        for kind in RegressorKind::ALL {
            let spec = small_spec(kind);
            let m = fit_any(&spec, &x, &y).unwrap();
            let mut buf = Vec::new();
            m.to_container().unwrap().write_to(&mut buf).unwrap();
            let back = Model::from_container(&Container::read_from(buf.as_slice()).unwrap()).unwrap();
            assert_eq!(back.spec, m.spec, "{kind}");
            assert_eq!(predict_any(&back, &x).unwrap(), predict_any(&m, &x).unwrap(), "{kind}");
        }
    }

    #[test]
    fn stochastic_kinds_replay_under_seed() {
        let (x, y) = fixture(16, 16, 5);
        for kind in [RegressorKind::Mlp, RegressorKind::Cnn] {
            let spec = small_spec(kind);
            assert_eq!(fit_any(&spec, &x, &y).unwrap(), fit_any(&spec, &x, &y).unwrap());
        }
    }

    #[test]
    fn spec_serializes_with_kind_tag() {
        let s = serde_json::to_string(&RegressorSpec::default_for(RegressorKind::Ridge, 1)).unwrap();
        assert!(s.contains("\"kind\":\"ridge\""), "{s}");
    }
}
