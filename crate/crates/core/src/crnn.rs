//! Convolutional recurrent detector: a pooling stem, a skip-connected
//! convolution block gated by CBAM, frequency pooling, two BLSTMs and a
//! frame-wise sigmoid classifier.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Result, SedError};
use crate::params::{kaiming_uniform, uniform, Binding, ParamId, ParamStore};
use crate::tensor::{bilstm, Array, LstmWeights, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrnnConfig {
    pub stem_channels: [usize; 2],
    pub scc_channels: usize,
    pub kernel: (usize, usize),
    pub rnn_hidden: usize,
    pub n_classes: usize,
    pub input_frames: usize,
    pub input_mels: usize,
    pub dropout_rate: f64,
    /// Channel-attention MLP reduction ratio.
    pub cbam_reduction: usize,
    pub spatial_kernel: usize,
    /// Reserved; batch normalisation is not implemented and must stay off.
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for CrnnConfig {
    fn default() -> Self {
        Self {
            stem_channels: [16, 32],
            scc_channels: 64,
            kernel: (3, 3),
            rnn_hidden: 128,
            n_classes: 10,
            input_frames: 628,
            input_mels: 128,
            dropout_rate: 0.3,
            cbam_reduction: 8,
            spatial_kernel: 7,
            batch_norm: false,
            seed: 0,
        }
    }
}

impl CrnnConfig {
    /// Widths divided by four, sized for the 64×32 toy features.
    pub fn toy() -> Self {
        Self {
            stem_channels: [4, 8],
            scc_channels: 16,
            rnn_hidden: 32,
            input_frames: 64,
            input_mels: 32,
            ..Self::default()
        }
    }

    pub fn output_frames(&self) -> usize {
        self.input_frames / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SedError::Config(format!("crnn: {m}")));
        if self.input_frames == 0 || self.input_frames % 4 != 0 {
            return bad("input_frames must be a positive multiple of 4");
        }
        if self.input_mels == 0 || self.input_mels % 16 != 0 {
            return bad("input_mels must be a positive multiple of 16");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        let odd = |k: usize| k % 2 == 1;
        if !odd(self.kernel.0) || !odd(self.kernel.1) || !odd(self.spatial_kernel) {
            return bad("kernel sizes must be odd");
        }
        if self.stem_channels.contains(&0) || self.scc_channels == 0 || self.rnn_hidden == 0 || self.cbam_reduction == 0 {
            return bad("channel widths and hidden size must be positive");
        }
        if self.batch_norm {
            return bad("batch_norm is reserved and not supported");
        }
        Ok(())
    }
}

/// `K × C` frame posteriors of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMap {
    pub values: Array,
}

impl PosteriorMap {
    pub fn new(values: Array) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(SedError::Shape(format!("posterior map must be 2-D, got {:?}", values.shape())));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, k: usize, c: usize) -> f64 {
        self.values.at2(k, c)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.frames()).map(|k| self.at(k, c)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    a: ConvLayer,
    b: ConvLayer,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct CbamParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    spatial: ConvLayer,
}

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: [ConvBlock; 2],
    upper: [ConvBlock; 3],
    lower: [ConvBlock; 2],
    cbam: [CbamParams; 3],
    rnn: [(LstmIds, LstmIds); 2],
    out_w: ParamId,
    out_b: ParamId,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, (kh, kw): (usize, usize)) -> ConvLayer {
        let fan_in = cin * kh * kw;
        let w = kaiming_uniform(&[cout, cin, kh, kw], fan_in, self.rng);
        let b = uniform(&[cout], 1.0 / (fan_in as f64).sqrt(), self.rng);
        ConvLayer {
            w: self.store.insert(format!("{name}.w"), w),
            b: self.store.insert(format!("{name}.b"), b),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, k: (usize, usize)) -> ConvBlock {
        ConvBlock {
            a: self.conv(&format!("{name}.conv0"), cin, cout, k),
            b: self.conv(&format!("{name}.conv1"), cout, cout, k),
        }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> (ParamId, ParamId) {
        let w = kaiming_uniform(&[fout, fin], fin, self.rng);
        let b = uniform(&[fout], 1.0 / (fin as f64).sqrt(), self.rng);
        (self.store.insert(format!("{name}.w"), w), self.store.insert(format!("{name}.b"), b))
    }

    fn cbam(&mut self, name: &str, c: usize, reduction: usize, k: usize) -> CbamParams {
        let hidden = (c / reduction).max(1);
        let (w1, b1) = self.linear(&format!("{name}.mlp0"), c, hidden);
        let (w2, b2) = self.linear(&format!("{name}.mlp1"), hidden, c);
        let spatial = self.conv(&format!("{name}.spatial"), 2, 1, (k, k));
        CbamParams { w1, b1, w2, b2, spatial }
    }

    fn lstm(&mut self, name: &str, d: usize, h: usize) -> LstmIds {
        let bound = 1.0 / (h as f64).sqrt();
        let mut p = |suffix: &str, shape: &[usize]| {
            let v = uniform(shape, bound, self.rng);
            self.store.insert(format!("{name}.{suffix}"), v)
        };
        LstmIds {
            w_ih: p("w_ih", &[4 * h, d]),
            w_hh: p("w_hh", &[4 * h, h]),
            bias: p("bias", &[4 * h]),
        }
    }
}

fn build(cfg: &CrnnConfig, seed: u64) -> (Layout, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let [c1, c2] = cfg.stem_channels;
    let c3 = cfg.scc_channels;
    let k = cfg.kernel;
    let stem = [b.block("stem0", 1, c1, k), b.block("stem1", c1, c2, k)];
    let upper = [b.block("scc.up0", c2, c3, k), b.block("scc.up1", c3, c3, k), b.block("scc.up2", c3, c3, k)];
    let lower = [b.block("scc.low0", 2 * c3, c3, k), b.block("scc.low1", 2 * c3, c3, k)];
    let cbam = [
        b.cbam("cbam0", c3, cfg.cbam_reduction, cfg.spatial_kernel),
        b.cbam("cbam1", c3, cfg.cbam_reduction, cfg.spatial_kernel),
        b.cbam("cbam2", c3, cfg.cbam_reduction, cfg.spatial_kernel),
    ];
    let h = cfg.rnn_hidden;
    let rnn = [
        (b.lstm("rnn0.fwd", c3, h), b.lstm("rnn0.bwd", c3, h)),
        (b.lstm("rnn1.fwd", 2 * h, h), b.lstm("rnn1.bwd", 2 * h, h)),
    ];
    let (out_w, out_b) = b.linear("head", 2 * h, cfg.n_classes);
    let store = b.store;
    (
        Layout {
            stem,
            upper,
            lower,
            cbam,
            rnn,
            out_w,
            out_b,
        },
        store,
    )
}

/// Dropout randomness for a training forward pass; `None` means evaluation.
pub type DropoutRng<'a> = Option<&'a mut (dyn RngCore + 'static)>;

/// The network definition. Parameters live in a separate [`ParamStore`] so a
/// student and its EMA teacher can share one model.
#[derive(Clone, Debug)]
pub struct Crnn {
    config: CrnnConfig,
    layout: Layout,
    n_scalars: usize,
}

impl Crnn {
    pub fn new(config: CrnnConfig) -> Result<Self> {
        config.validate()?;
        let (layout, store) = build(&config, 0);
        Ok(Self {
            config,
            layout,
            n_scalars: store.num_scalars(),
        })
    }

    pub fn config(&self) -> &CrnnConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.n_scalars
    }

    /// Fresh parameters from the configured seed.
    pub fn init_params(&self) -> ParamStore {
        build(&self.config, self.config.seed).1
    }

    /// Fresh parameters from an explicit seed (e.g. one per fold).
    pub fn init_params_with_seed(&self, seed: u64) -> ParamStore {
        build(&self.config, seed).1
    }

    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        if build(&self.config, 0).1.same_layout(params) {
            Ok(())
        } else {
            Err(SedError::Format("parameter layout does not match the model config".into()))
        }
    }

    fn conv(&self, tape: &mut Tape, p: &Binding, l: ConvLayer, x: Tensor) -> Result<Tensor> {
        let y = tape.conv2d(x, p.get(l.w), Some(p.get(l.b)))?;
        Ok(tape.relu(y))
    }

    fn block(&self, tape: &mut Tape, p: &Binding, b: ConvBlock, x: Tensor) -> Result<Tensor> {
        let y = self.conv(tape, p, b.a, x)?;
        self.conv(tape, p, b.b, y)
    }

    fn drop(&self, tape: &mut Tape, x: Tensor, rng: &mut DropoutRng) -> Result<Tensor> {
        tape.dropout(x, self.config.dropout_rate, rng.as_deref_mut())
    }

    /// `[N, 1, T, F] → [N, c2, T/4, F/4]`.
    pub fn stem_forward(&self, tape: &mut Tape, p: &Binding, x: Tensor, mut rng: DropoutRng) -> Result<Tensor> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(SedError::Shape(format!("stem expects [N, 1, 4a, 4b], got {s:?}")));
        }
        let mut h = x;
        for b in self.layout.stem {
            h = self.block(tape, p, b, h)?;
            h = tape.avg_pool2d(h, (2, 2))?;
            h = self.drop(tape, h, &mut rng)?;
        }
        Ok(h)
    }

    /// Channel then spatial gating; `x: [N, C, H, W]`.
    pub(crate) fn cbam(&self, tape: &mut Tape, p: &Binding, a: CbamParams, x: Tensor) -> Result<Tensor> {
        let s = tape.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let avg = tape.mean_axis(x, 2)?;
        let avg = tape.mean_axis(avg, 3)?;
        let mx = tape.max_axis(x, 2)?;
        let mx = tape.max_axis(mx, 3)?;
        let mut logits = None;
        for pooled in [avg, mx] {
            let v = tape.reshape(pooled, &[n, c])?;
            let hdn = tape.linear(v, p.get(a.w1), Some(p.get(a.b1)))?;
            let hdn = tape.relu(hdn);
            let o = tape.linear(hdn, p.get(a.w2), Some(p.get(a.b2)))?;
            logits = Some(match logits {
                None => o,
                Some(prev) => tape.add(prev, o)?,
            });
        }
        let ca = tape.sigmoid(logits.unwrap());
        let ca = tape.reshape(ca, &[n, c, 1, 1])?;
        let xc = tape.mul(x, ca)?;
        let mean_c = tape.mean_axis(xc, 1)?;
        let max_c = tape.max_axis(xc, 1)?;
        let both = tape.concat(&[mean_c, max_c], 1)?;
        let sa = tape.conv2d(both, p.get(a.spatial.w), Some(p.get(a.spatial.b)))?;
        let sa = tape.sigmoid(sa);
        tape.mul(xc, sa)
    }

    /// `[N, c2, T', F'] → [N, c3, T', F'/4]`.
    pub fn scc_forward(&self, tape: &mut Tape, p: &Binding, x: Tensor, mut rng: DropoutRng) -> Result<Tensor> {
        let l = &self.layout;
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.stem_channels[1] || s[3] % 4 != 0 {
            return Err(SedError::Shape(format!("scc block: unexpected input {s:?}")));
        }
        let u1 = self.block(tape, p, l.upper[0], x)?;
        let u1 = self.drop(tape, u1, &mut rng)?;
        let u2 = self.block(tape, p, l.upper[1], u1)?;
        let u2 = self.drop(tape, u2, &mut rng)?;
        let u3 = self.block(tape, p, l.upper[2], u2)?;
        let u3 = self.drop(tape, u3, &mut rng)?;

        let g = self.cbam(tape, p, l.cbam[0], u3)?;
        let cat = tape.concat(&[g, u2], 1)?;
        let l1 = self.block(tape, p, l.lower[0], cat)?;
        let l1 = tape.avg_pool2d(l1, (1, 2))?;
        let l1 = self.drop(tape, l1, &mut rng)?;

        let g = self.cbam(tape, p, l.cbam[1], l1)?;
        let u1p = tape.avg_pool2d(u1, (1, 2))?;
        let cat = tape.concat(&[g, u1p], 1)?;
        let l2 = self.block(tape, p, l.lower[1], cat)?;
        let l2 = tape.avg_pool2d(l2, (1, 2))?;
        let l2 = self.drop(tape, l2, &mut rng)?;
        self.cbam(tape, p, l.cbam[2], l2)
    }

    fn lstm_weights(p: &Binding, ids: LstmIds) -> LstmWeights {
        LstmWeights {
            w_ih: p.get(ids.w_ih),
            w_hh: p.get(ids.w_hh),
            bias: p.get(ids.bias),
        }
    }

    /// Pre-sigmoid frame scores: `[N, T, F] → [N, T/4, C]`.
    pub fn logits(&self, tape: &mut Tape, p: &Binding, x: Tensor, mut rng: DropoutRng) -> Result<Tensor> {
        let s = tape.shape(x).to_vec();
        let cfg = &self.config;
        if s.len() != 3 || s[1] != cfg.input_frames || s[2] != cfg.input_mels {
            return Err(SedError::Shape(format!(
                "model expects [N, {}, {}] features, got {s:?}",
                cfg.input_frames, cfg.input_mels
            )));
        }
        let n = s[0];
        let x = tape.reshape(x, &[n, 1, s[1], s[2]])?;
        let h = self.stem_forward(tape, p, x, rng.as_deref_mut())?;
        let h = self.scc_forward(tape, p, h, rng.as_deref_mut())?;
        let h = tape.mean_axis(h, 3)?;
        let k = cfg.output_frames();
        let h = tape.reshape(h, &[n, cfg.scc_channels, k])?;
        let h = tape.permute(h, &[0, 2, 1])?;
        let [r0, r1] = self.layout.rnn;
        let h = bilstm(tape, h, &Self::lstm_weights(p, r0.0), &Self::lstm_weights(p, r0.1))?;
        let h = self.drop(tape, h, &mut rng)?;
        let h = bilstm(tape, h, &Self::lstm_weights(p, r1.0), &Self::lstm_weights(p, r1.1))?;
        tape.linear(h, p.get(self.layout.out_w), Some(p.get(self.layout.out_b)))
    }

    /// Frame posteriors `[N, K, C]` in (0, 1).
    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Tensor, rng: DropoutRng) -> Result<Tensor> {
        let z = self.logits(tape, p, x, rng)?;
        Ok(tape.sigmoid(z))
    }

    /// Evaluation-mode posteriors for a batch of `T × F` feature matrices.
    pub fn predict(&self, params: &ParamStore, features: &[&Array]) -> Result<Vec<PosteriorMap>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(stack(features)?);
        let y = self.forward(&mut tape, &p, x, None)?;
        split_batch(tape.value(y))
    }

    pub fn save(&self, path: &Path, params: &ParamStore) -> Result<()> {
        self.check_params(params)?;
        checkpoint::save(path, params, &serde_json::to_value(&self.config)?)
    }

    pub fn load(path: &Path) -> Result<(Crnn, ParamStore)> {
        let (store, header) = checkpoint::load(path)?;
        let config: CrnnConfig = serde_json::from_value(header.config)?;
        let model = Crnn::new(config)?;
        model.check_params(&store)?;
        Ok((model, store))
    }
}

/// Stacks equally shaped arrays along a new leading axis.
pub fn stack(items: &[&Array]) -> Result<Array> {
    let first = items
        .first()
        .ok_or_else(|| SedError::Usage("cannot stack an empty batch".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for a in items {
        if a.shape() != first.as_slice() {
            return Err(SedError::Shape(format!("batch items differ: {:?} vs {:?}", a.shape(), first)));
        }
        data.extend_from_slice(a.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(first);
    Array::new(shape, data)
}

/// Splits `[N, K, C]` into per-clip posterior maps.
pub fn split_batch(y: &Array) -> Result<Vec<PosteriorMap>> {
    let s = y.shape();
    if s.len() != 3 {
        return Err(SedError::Shape(format!("expected [N, K, C], got {s:?}")));
    }
    y.data()
        .chunks(s[1] * s[2])
        .map(|c| PosteriorMap::new(Array::new([s[1], s[2]], c.to_vec())?))
        .collect()
}
