use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{build_model, ClassifierConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::harness::folds::Split;
use crate::harness::roc::auroc;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{adam_step, AdamState, Graph, Mode, Tensor};

/// One point cloud `[N, C]` with its binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub points: Tensor,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            learning_rate: AdamState::DEFAULT_LEARNING_RATE,
            epochs: 200,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        // lr = 0 is allowed: it freezes the parameters, which the chance-level
        // baselines rely on.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn check_shapes(model: &TrainedModel, data: &[LabeledCloud], idx: &[usize]) -> Result<(usize, usize)> {
    let first = idx
        .first()
        .map(|&i| &data[i])
        .ok_or_else(|| Error::Dataset("empty training set".into()))?;
    let s = first.points.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::Dataset(format!("sample shape {s:?} is not [N, C]")));
    }
    if s[1] != model.config.input_channels {
        return Err(Error::dim("train", &s, &[s[0], model.config.input_channels]));
    }
    for &i in idx {
        let d = &data[i];
        if d.points.shape() != s.as_slice() {
            return Err(Error::Dataset(format!(
                "sample {i} has shape {:?}, expected {s:?}",
                d.points.shape()
            )));
        }
        if d.label != 0.0 && d.label != 1.0 {
            return Err(Error::Dataset(format!("sample {i} label {} is not 0/1", d.label)));
        }
    }
    Ok((s[0], s[1]))
}

fn stack(data: &[LabeledCloud], idx: &[usize], n: usize, c: usize) -> Tensor {
    let mut vals = Vec::with_capacity(idx.len() * n * c);
    for &i in idx {
        vals.extend_from_slice(data[i].points.values());
    }
    Tensor::new(vec![idx.len(), n, c], vals).expect("shapes checked")
}

/// Trains on the whole dataset. See [`train_subset`].
pub fn train(model: &mut TrainedModel, data: &[LabeledCloud], cfg: &TrainConfig) -> Result<()> {
    let idx: Vec<usize> = (0..data.len()).collect();
    train_subset(model, data, &idx, cfg)
}

/// Mini-batch Adam on BCE (+ weighted orthogonality penalty of the feature
/// transform) over the samples `idx` of `data`.
///
/// Runs `epochs × ceil(|idx| / batch_size)` steps; the last batch of an epoch
/// may be short. Appends the sample-weighted mean loss of each epoch to the
/// model's history.
pub fn train_subset(
    model: &mut TrainedModel,
    data: &[LabeledCloud],
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let (n, c) = check_shapes(model, data, idx)?;
    let mut rng = rng_from(cfg.seed, &[0x7A41]);
    let mut adam = AdamState::new(&model.params.tensors, cfg.learning_rate);
    let ortho = model.config.ortho_reg_weight;
    let mut order = idx.to_vec();

    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = stack(data, chunk, n, c);
            let targets: Vec<f64> = chunk.iter().map(|&i| data[i].label).collect();

            let mut g = Graph::new();
            let vars = model.leaves(&mut g);
            let x = g.constant(batch);
            let out = model.forward_on(&mut g, &vars, x, Mode::Train, &mut rng)?;
            let bce = g.bce_loss(out.probs, &targets)?;
            total += g.value(bce).item() * chunk.len() as f64;
            let loss = match out.feature_transform {
                Some(t) if ortho > 0.0 => {
                    let pen = g.orthogonality_penalty(t)?;
                    g.add_scaled(bce, pen, ortho)?
                }
                _ => bce,
            };
            if !g.value(loss).is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            g.backward(loss)?;
            for (p, v) in model.params.tensors.iter_mut().zip(&vars) {
                p.set_grad(g.grad(*v))?;
            }
            adam_step(&mut model.params.tensors, &mut adam)?;
            for p in &mut model.params.tensors {
                p.clear_grad();
            }
        }
        model.training_history.push(total / order.len() as f64);
    }
    Ok(())
}

const EVAL_CHUNK: usize = 16;

/// Eval-mode probabilities for several samples, computed in small batches.
pub fn predict_many(model: &mut TrainedModel, data: &[LabeledCloud], idx: &[usize]) -> Result<Vec<f64>> {
    let mut rng = rng_from(0, &[]);
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let shape = data[chunk[0]].points.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dataset(format!("sample shape {shape:?} is not [N, C]")));
        }
        if chunk.iter().any(|&i| data[i].points.shape() != shape.as_slice()) {
            return Err(Error::Dataset("samples in one batch differ in shape".into()));
        }
        let batch = stack(data, chunk, shape[0], shape[1]);
        let p = model.forward(&batch, Mode::Eval, &mut rng)?;
        out.extend_from_slice(p.values());
    }
    Ok(out)
}

/// Eval-mode probability for a single `[N, C]` cloud.
pub fn predict(model: &mut TrainedModel, points: &Tensor) -> Result<f64> {
    let s = points.shape();
    if s.len() != 2 {
        return Err(Error::dim("predict", s, &[0, model.config.input_channels]));
    }
    let batch = points.clone().reshape(vec![1, s[0], s[1]])?;
    let mut rng = rng_from(0, &[]);
    Ok(model.forward(&batch, Mode::Eval, &mut rng)?.item())
}

/// The same probability applied to every hidden head layer, for each value.
pub fn uniform_grid(values: &[f64], hidden_layers: usize) -> Vec<Vec<f64>> {
    values.iter().map(|&p| vec![p; hidden_layers]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridScore {
    pub dropout: Vec<f64>,
    pub fold_aurocs: Vec<f64>,
    pub mean_auroc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    pub best: Vec<f64>,
    pub best_index: usize,
    pub scores: Vec<GridScore>,
}

/// Trains and scores one (setting, fold) cell. Initialization and training
/// streams depend on the fold only, so settings compete on equal footing.
pub(crate) fn fold_cell_auroc(
    base: &ClassifierConfig,
    dropout: &[f64],
    data: &[LabeledCloud],
    split: &Split,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let config = ClassifierConfig {
        dropout_probs: dropout.to_vec(),
        ..base.clone()
    };
    let seed = derive_seed(cfg.seed, &[fold as u64]);
    let mut model = build_model(&config, seed)?;
    let train_cfg = TrainConfig { seed, ..cfg.clone() };
    train_subset(&mut model, data, &split.train, &train_cfg)?;
    let scores = predict_many(&mut model, data, &split.validation)?;
    let labels: Vec<f64> = split.validation.iter().map(|&i| data[i].label).collect();
    auroc(&scores, &labels)
}

/// Chooses the dropout setting with the best mean validation AUROC across
/// `folds`. Ties go to the lower total dropout, then to grid order.
pub fn grid_search_dropout(
    base: &ClassifierConfig,
    data: &[LabeledCloud],
    grid: &[Vec<f64>],
    folds: &[Split],
    cfg: &TrainConfig,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::Parameter("dropout grid is empty".into()));
    }
    if folds.is_empty() {
        return Err(Error::Parameter("grid search needs at least one fold".into()));
    }
    for setting in grid {
        ClassifierConfig {
            dropout_probs: setting.clone(),
            ..base.clone()
        }
        .validate()
        .map_err(|e| Error::Parameter(format!("grid setting {setting:?}: {e}")))?;
    }
    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|s| (0..folds.len()).map(move |f| (s, f)))
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(s, f)| fold_cell_auroc(base, &grid[s], data, &folds[f], f, cfg))
        .collect();
    let mut flat = Vec::with_capacity(results.len());
    for r in results {
        flat.push(r?);
    }
    let scores: Vec<GridScore> = grid
        .iter()
        .enumerate()
        .map(|(s, setting)| {
            let fold_aurocs = flat[s * folds.len()..(s + 1) * folds.len()].to_vec();
            let mean_auroc = fold_aurocs.iter().sum::<f64>() / fold_aurocs.len() as f64;
            GridScore {
                dropout: setting.clone(),
                fold_aurocs,
                mean_auroc,
            }
        })
        .collect();
    let mut best_index = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let b = &scores[best_index];
        let total = |d: &[f64]| d.iter().sum::<f64>();
        let better = s.mean_auroc > b.mean_auroc
            || (s.mean_auroc == b.mean_auroc && total(&s.dropout) < total(&b.dropout));
        if better {
            best_index = i;
        }
    }
    Ok(GridSearchResult {
        best: scores[best_index].dropout.clone(),
        best_index,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointnet::TNetWidths;

    fn tiny() -> ClassifierConfig {
        ClassifierConfig {
            input_channels: 3,
            use_input_tnet: false,
            use_feature_tnet: false,
            encoder_widths: vec![8, 16],
            head_widths: vec![8, 1],
            dropout_probs: vec![0.0],
            use_batch_norm: false,
            ortho_reg_weight: 0.0,
            tnet: TNetWidths::default(),
        }
    }

    fn blob(label: f64, k: usize) -> LabeledCloud {
        let z = if label > 0.5 { 0.5 } else { -0.5 };
        let vals = (0..6)
            .flat_map(|i| {
                let a = (i * 7 + k * 3) as f64;
                [a.sin() * 0.3, a.cos() * 0.3, z + 0.1 * (a * 1.3).sin()]
            })
            .collect();
        LabeledCloud {
            points: Tensor::new(vec![6, 3], vals).unwrap(),
            label,
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data: Vec<_> = (0..6).map(|k| blob((k % 2) as f64, k)).collect();
        let mut m = build_model(&tiny(), 1).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 0.0,
            epochs: 5,
            seed: 3,
            shuffle: false,
        };
        train(&mut m, &data, &cfg).unwrap();
        assert_eq!(m.params.tensors, before.tensors);
        assert_eq!(m.training_history.len(), 5);
        assert!(m.training_history.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn inconsistent_shapes_are_a_dataset_error() {
        let mut data: Vec<_> = (0..3).map(|k| blob(0.0, k)).collect();
        data.push(LabeledCloud {
            points: Tensor::zeros(&[5, 3]),
            label: 1.0,
        });
        let mut m = build_model(&tiny(), 1).unwrap();
        let err = train(&mut m, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)), "{err}");
        assert!(matches!(train(&mut m, &[], &TrainConfig::default()), Err(Error::Dataset(_))));
    }

    #[test]
    fn predict_matches_batch_of_one() {
        let mut m = build_model(&tiny(), 5).unwrap();
        let s = blob(1.0, 2);
        let p = predict(&mut m, &s.points).unwrap();
        let q = predict_many(&mut m, std::slice::from_ref(&s), &[0]).unwrap();
        assert_eq!(p, q[0]);
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let data: Vec<_> = (0..4).map(|k| blob((k % 2) as f64, k)).collect();
        let split = Split {
            train: vec![0, 1],
            validation: vec![2, 3],
        };
        let r = grid_search_dropout(&tiny(), &data, &[], &[split], &TrainConfig::default());
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
