//! PointNet-style binary classifier for cardiac point clouds.
//!
//! Architecture: optional input T-Net (3×3 transform applied to the xyz
//! channels), a stack of shared point-wise layers with an optional feature
//! T-Net inserted after the first two, symmetric max pooling into a global
//! feature, and a fully connected head ending in a single sigmoid unit.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use train::{
    grid_search_dropout, predict, predict_many, train, train_subset, uniform_grid, GridScore,
    GridSearchResult, LabeledCloud, TrainConfig,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{Graph, Mode, RunningStats, Tensor, Var};

/// Widths of the mini-network that predicts an alignment transform.
#[derive(Clone, Debug, PartialEq)]
pub struct TNetWidths {
    pub encoder: Vec<usize>,
    pub head: Vec<usize>,
}

impl Default for TNetWidths {
    fn default() -> Self {
        Self {
            encoder: vec![64, 128, 1024],
            head: vec![512, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// xyz plus indicator channels.
    pub input_channels: usize,
    pub use_input_tnet: bool,
    pub use_feature_tnet: bool,
    pub encoder_widths: Vec<usize>,
    /// Hidden head widths followed by the single output unit.
    pub head_widths: Vec<usize>,
    /// One probability per hidden head layer.
    pub dropout_probs: Vec<f64>,
    pub use_batch_norm: bool,
    pub ortho_reg_weight: f64,
    pub tnet: TNetWidths,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_channels: 7,
            use_input_tnet: true,
            use_feature_tnet: true,
            encoder_widths: vec![64, 64, 64, 128, 1024],
            head_widths: vec![512, 256, 1],
            dropout_probs: vec![0.3, 0.3],
            use_batch_norm: true,
            ortho_reg_weight: 1e-3,
            tnet: TNetWidths::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_channels == 0 {
            return fail("input_channels must be positive");
        }
        if self.use_input_tnet && self.input_channels < 3 {
            return fail("input T-Net needs at least the 3 coordinate channels");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return fail("encoder_widths must be non-empty and positive");
        }
        if self.head_widths.last() != Some(&1) {
            return fail("last head width must be 1");
        }
        if self.head_widths.contains(&0) {
            return fail("head widths must be positive");
        }
        if self.dropout_probs.len() != self.head_widths.len() - 1 {
            return fail("dropout_probs length must equal the number of hidden head layers");
        }
        if self.dropout_probs.iter().any(|p| !(0.0..1.0).contains(p)) {
            return fail("dropout probabilities must lie in [0, 1)");
        }
        if self.use_feature_tnet && self.encoder_widths.len() < 2 {
            return fail("feature T-Net needs at least two encoder layers");
        }
        if self.use_input_tnet || self.use_feature_tnet {
            if self.tnet.encoder.is_empty() || self.tnet.encoder.contains(&0) || self.tnet.head.contains(&0) {
                return fail("T-Net widths must be non-empty and positive");
            }
        }
        if !(self.ortho_reg_weight >= 0.0 && self.ortho_reg_weight.is_finite()) {
            return fail("ortho_reg_weight must be finite and >= 0");
        }
        Ok(())
    }

    /// Number of encoder layers before the feature transform.
    pub fn feature_transform_after(&self) -> usize {
        2.min(self.encoder_widths.len() - 1)
    }

    /// Width of the feature transform.
    pub fn feature_transform_width(&self) -> usize {
        self.encoder_widths[self.feature_transform_after() - 1]
    }

    pub fn total_dropout(&self) -> f64 {
        self.dropout_probs.iter().sum()
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: usize,
    b: usize,
    /// (gamma, beta, running-stats index)
    bn: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug)]
struct TNet {
    k: usize,
    encoder: Vec<Dense>,
    head: Vec<Dense>,
    out: Dense,
}

#[derive(Clone, Debug)]
struct Layout {
    input_tnet: Option<TNet>,
    feature_tnet: Option<TNet>,
    encoder: Vec<Dense>,
    head: Vec<Dense>,
    out: Dense,
}

/// Named parameters plus batch-norm buffers, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub stat_names: Vec<String>,
    pub stats: Vec<RunningStats>,
}

struct Builder<'a, R: Rng> {
    store: ParamStore,
    rng: &'a mut R,
    batch_norm: bool,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.store.names.push(name);
        self.store.tensors.push(t);
        self.store.tensors.len() - 1
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bn: bool) -> Dense {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        let w = self.push(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w).unwrap());
        let b = self.push(format!("{prefix}.b"), Tensor::new(vec![fan_out], b).unwrap());
        let bn = (bn && self.batch_norm).then(|| {
            let g = self.push(format!("{prefix}.bn.gamma"), Tensor::filled(&[fan_out], 1.0));
            let be = self.push(format!("{prefix}.bn.beta"), Tensor::zeros(&[fan_out]));
            self.store.stat_names.push(format!("{prefix}.bn"));
            self.store.stats.push(RunningStats::new(fan_out));
            (g, be, self.store.stats.len() - 1)
        });
        Dense { w, b, bn }
    }

    /// Final T-Net layer: zero weights and identity bias, so the initial
    /// transform is exactly the identity.
    fn identity_out(&mut self, prefix: &str, fan_in: usize, k: usize) -> Dense {
        let w = self.push(format!("{prefix}.w"), Tensor::zeros(&[fan_in, k * k]));
        let b = self.push(
            format!("{prefix}.b"),
            Tensor::identity(k).reshape(vec![k * k]).unwrap(),
        );
        Dense { w, b, bn: None }
    }

    fn tnet(&mut self, prefix: &str, cin: usize, k: usize, widths: &TNetWidths) -> TNet {
        let mut prev = cin;
        let mut encoder = Vec::new();
        for (i, &w) in widths.encoder.iter().enumerate() {
            encoder.push(self.dense(&format!("{prefix}.enc{i}"), prev, w, true));
            prev = w;
        }
        let mut head = Vec::new();
        for (i, &w) in widths.head.iter().enumerate() {
            head.push(self.dense(&format!("{prefix}.fc{i}"), prev, w, true));
            prev = w;
        }
        let out = self.identity_out(&format!("{prefix}.out"), prev, k);
        TNet { k, encoder, head, out }
    }
}

fn build_layout<R: Rng>(config: &ClassifierConfig, rng: &mut R) -> (Layout, ParamStore) {
    let mut b = Builder {
        store: ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            stat_names: Vec::new(),
            stats: Vec::new(),
        },
        rng,
        batch_norm: config.use_batch_norm,
    };
    let input_tnet = config
        .use_input_tnet
        .then(|| b.tnet("input_tnet", config.input_channels, 3, &config.tnet));
    let mut prev = config.input_channels;
    let mut encoder = Vec::new();
    let mut feature_tnet = None;
    for (i, &w) in config.encoder_widths.iter().enumerate() {
        encoder.push(b.dense(&format!("encoder.{i}"), prev, w, true));
        prev = w;
        if config.use_feature_tnet && i + 1 == config.feature_transform_after() {
            feature_tnet = Some(b.tnet("feature_tnet", w, w, &config.tnet));
        }
    }
    let mut head = Vec::new();
    let hidden = &config.head_widths[..config.head_widths.len() - 1];
    for (i, &w) in hidden.iter().enumerate() {
        head.push(b.dense(&format!("head.{i}"), prev, w, true));
        prev = w;
    }
    let out = b.dense("head.out", prev, 1, false);
    (
        Layout {
            input_tnet,
            feature_tnet,
            encoder,
            head,
            out,
        },
        b.store,
    )
}

/// A classifier together with its parameters and per-epoch training loss.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    pub training_history: Vec<f64>,
    layout: Layout,
}

/// Builds an untrained model with parameters drawn deterministically from `seed`.
pub fn build_model(config: &ClassifierConfig, seed: u64) -> Result<TrainedModel> {
    config.validate()?;
    let mut rng = rng_from(seed, &[0x1417]);
    let (layout, params) = build_layout(config, &mut rng);
    Ok(TrainedModel {
        config: config.clone(),
        params,
        training_history: Vec::new(),
        layout,
    })
}

/// Output of a forward pass on the tape.
pub(crate) struct ForwardVars {
    pub probs: Var,
    pub feature_transform: Option<Var>,
    pub input_transform: Option<Var>,
}

impl TrainedModel {
    pub fn parameter_count(&self) -> usize {
        self.params.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params.tensors[i])
    }

    pub(crate) fn from_parts(config: ClassifierConfig, params: ParamStore, history: Vec<f64>) -> Result<Self> {
        let mut model = build_model(&config, 0)?;
        if model.params.names != params.names || model.params.stat_names != params.stat_names {
            return Err(Error::Config("parameter names do not match the configuration".into()));
        }
        for (want, got) in model.params.tensors.iter().zip(&params.tensors) {
            if want.shape() != got.shape() {
                return Err(Error::dim("checkpoint", want.shape(), got.shape()));
            }
        }
        for (want, got) in model.params.stats.iter().zip(&params.stats) {
            if want.mean.len() != got.mean.len() || want.var.len() != got.var.len() {
                return Err(Error::dim("checkpoint", &[want.mean.len()], &[got.mean.len()]));
            }
        }
        model.params = params;
        model.training_history = history;
        Ok(model)
    }

    fn dense(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        layer: &Dense,
        x: Var,
        pointwise: bool,
        mode: Mode,
        relu: bool,
    ) -> Result<Var> {
        let mut h = if pointwise {
            g.shared_pointwise_mlp(x, vars[layer.w], vars[layer.b])?
        } else {
            g.linear(x, vars[layer.w], vars[layer.b])?
        };
        if let Some((gamma, beta, si)) = layer.bn {
            let rows = g.value(h).numel() / g.value(h).shape().last().unwrap();
            // A single-sample head batch cannot be normalized by its own
            // statistics; fall back to the running estimates.
            let bn_mode = if mode == Mode::Train && rows < 2 { Mode::Eval } else { mode };
            h = g.batch_norm(h, vars[gamma], vars[beta], &mut self.params.stats[si], bn_mode)?;
        }
        if relu {
            h = g.relu(h);
        }
        Ok(h)
    }

    fn tnet(&mut self, g: &mut Graph, vars: &[Var], net: &TNet, x: Var, mode: Mode) -> Result<Var> {
        let batch = g.shape(x)[0];
        let mut h = x;
        for layer in &net.encoder {
            h = self.dense(g, vars, layer, h, true, mode, true)?;
        }
        h = g.max_pool_points(h)?;
        for layer in &net.head {
            h = self.dense(g, vars, layer, h, false, mode, true)?;
        }
        let flat = self.dense(g, vars, &net.out, h, false, mode, false)?;
        g.reshape(flat, vec![batch, net.k, net.k])
    }

    /// Records a forward pass of `x: [B, N, C]` on `g`. `vars` must hold one
    /// leaf per parameter, in store order.
    pub(crate) fn forward_on<R: Rng>(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.input_channels {
            return Err(Error::dim(
                "forward",
                &shape,
                &[0, 0, self.config.input_channels],
            ));
        }
        if shape[1] == 0 {
            return Err(Error::EmptyCloud("forward"));
        }
        let layout = self.layout.clone();
        let c = shape[2];
        let mut h = x;
        let mut input_transform = None;
        if let Some(net) = &layout.input_tnet {
            let t = self.tnet(g, vars, net, h, mode)?;
            let xyz = g.slice_channels(h, 0, 3)?;
            let moved = g.batch_matmul(xyz, t)?;
            h = if c > 3 {
                let rest = g.slice_channels(h, 3, c)?;
                g.concat_channels(moved, rest)?
            } else {
                moved
            };
            input_transform = Some(t);
        }
        let mut feature_transform = None;
        let split = self.config.feature_transform_after();
        for (i, layer) in layout.encoder.iter().enumerate() {
            h = self.dense(g, vars, layer, h, true, mode, true)?;
            if i + 1 == split {
                if let Some(net) = &layout.feature_tnet {
                    let t = self.tnet(g, vars, net, h, mode)?;
                    h = g.batch_matmul(h, t)?;
                    feature_transform = Some(t);
                }
            }
        }
        h = g.max_pool_points(h)?;
        for (layer, &p) in layout.head.iter().zip(&self.config.dropout_probs.clone()) {
            h = self.dense(g, vars, layer, h, false, mode, true)?;
            h = g.dropout(h, p, mode, rng)?;
        }
        let logit = self.dense(g, vars, &layout.out, h, false, mode, false)?;
        let flat = g.reshape(logit, vec![shape[0]])?;
        let probs = g.sigmoid(flat);
        Ok(ForwardVars {
            probs,
            feature_transform,
            input_transform,
        })
    }

    pub(crate) fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Probabilities for `batch: [B, N, C]`. Train mode updates batch-norm
    /// running statistics and draws dropout masks from `rng`.
    pub fn forward<R: Rng>(&mut self, batch: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.leaves(&mut g);
        let x = g.constant(batch.clone());
        let out = self.forward_on(&mut g, &vars, x, mode, rng)?;
        Ok(g.value(out.probs).clone())
    }

    /// The input alignment transform the network predicts for `batch`
    /// (eval mode), flattened as `[B, 3, 3]`.
    pub fn input_transform(&mut self, batch: &Tensor) -> Result<Option<Tensor>> {
        let mut g = Graph::new();
        let vars = self.leaves(&mut g);
        let x = g.constant(batch.clone());
        let mut rng = rng_from(0, &[]);
        let out = self.forward_on(&mut g, &vars, x, Mode::Eval, &mut rng)?;
        Ok(out.input_transform.map(|t| g.value(t).clone()))
    }
}

/// Parameter count of a dense layer, with batch-norm scale and shift.
pub fn dense_param_count(fan_in: usize, fan_out: usize, batch_norm: bool) -> usize {
    fan_in * fan_out + fan_out + if batch_norm { 2 * fan_out } else { 0 }
}

/// Frobenius norm squared of `A·Aᵀ − I` for a single square matrix.
pub fn orthogonality_penalty(a: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(a.clone());
    let p = g.orthogonality_penalty(v)?;
    Ok(g.value(p).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ClassifierConfig {
        ClassifierConfig {
            input_channels: 5,
            encoder_widths: vec![8, 8, 16],
            head_widths: vec![8, 1],
            dropout_probs: vec![0.0],
            tnet: TNetWidths {
                encoder: vec![8, 16],
                head: vec![8],
            },
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_config();
        c.head_widths = vec![8, 2];
        assert!(matches!(build_model(&c, 0), Err(Error::Config(m)) if m.contains("last head width")));
        let mut c = small_config();
        c.dropout_probs = vec![0.1, 0.2];
        assert!(matches!(build_model(&c, 0), Err(Error::Config(m)) if m.contains("dropout_probs")));
        let mut c = small_config();
        c.dropout_probs = vec![1.0];
        assert!(build_model(&c, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ClassifierConfig::default(), 42).unwrap();
        let b = build_model(&ClassifierConfig::default(), 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_model(&ClassifierConfig::default(), 43).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn input_transform_starts_as_identity() {
        let mut m = build_model(&small_config(), 3).unwrap();
        let mut rng = rng_from(1, &[]);
        let x = Tensor::new(
            vec![2, 4, 5],
            (0..40).map(|i| (i as f64 * 0.3).sin()).collect(),
        )
        .unwrap();
        let t = m.input_transform(&x).unwrap().unwrap();
        let eye = Tensor::identity(3);
        for b in 0..2 {
            assert_eq!(&t.values()[b * 9..(b + 1) * 9], eye.values());
        }
        let p = m.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let mut m = build_model(&small_config(), 3).unwrap();
        let mut rng = rng_from(1, &[]);
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(m.forward(&x, Mode::Eval, &mut rng), Err(Error::Dimension { .. })));
    }

    #[test]
    fn orthogonality_penalty_values() {
        assert_eq!(orthogonality_penalty(&Tensor::identity(4)).unwrap(), 0.0);
        let two = Tensor::new(vec![3, 3], vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert!((orthogonality_penalty(&two).unwrap() - 27.0).abs() < 1e-12);
        assert!(orthogonality_penalty(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn orthogonality_penalty_matches_elementwise_sum() {
        let mut rng = rng_from(9, &[]);
        for _ in 0..10 {
            let k = 4;
            let a: Vec<f64> = (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut want = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let mut s: f64 = (0..k).map(|p| a[i * k + p] * a[j * k + p]).sum();
                    if i == j {
                        s -= 1.0;
                    }
                    want += s * s;
                }
            }
            let got = orthogonality_penalty(&Tensor::new(vec![k, k], a).unwrap()).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
    }
}
