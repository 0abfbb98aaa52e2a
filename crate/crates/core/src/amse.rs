//! Semantic-free branch: cross-attentive second-order embedding and the
//! seen-class classifier trained with an adaptive margin softmax.

use crate::dataio::ClassId;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Rng, Tape, Tensor, Var};
use crate::params::Parameters;

/// Offset inside the signed square root, keeping its derivative finite at 0.
const SQRT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedKind {
    /// One reduction layer, ReLU and global average pooling.
    FirstOrder,
    /// Two reduction branches, cross-wired spatial/channel attention and
    /// bilinear pooling.
    CrossAttentive,
}

impl EmbedKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbedKind::FirstOrder => "first_order",
            EmbedKind::CrossAttentive => "cross_attentive",
        }
    }
}

impl std::str::FromStr for EmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_order" => Ok(EmbedKind::FirstOrder),
            "cross_attentive" => Ok(EmbedKind::CrossAttentive),
            _ => Err(Error::invalid(format!("unknown embedding kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginMode {
    Standard,
    Fixed,
    Adaptive,
}

impl MarginMode {
    pub fn name(self) -> &'static str {
        match self {
            MarginMode::Standard => "standard",
            MarginMode::Fixed => "fixed",
            MarginMode::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for MarginMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(MarginMode::Standard),
            "fixed" => Ok(MarginMode::Fixed),
            "adaptive" => Ok(MarginMode::Adaptive),
            _ => Err(Error::invalid(format!("unknown margin mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub mode: MarginMode,
    pub sigma: f64,
    /// Only read in [`MarginMode::Fixed`].
    pub fixed_lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig { mode: MarginMode::Adaptive, sigma: 0.5, fixed_lambda: 0.8 }
    }
}

impl MarginConfig {
    pub fn standard() -> Self {
        MarginConfig { mode: MarginMode::Standard, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.fixed_lambda > 0.0 && self.fixed_lambda <= 1.0) {
            return Err(Error::invalid(format!(
                "fixed_lambda must be in (0,1], got {}",
                self.fixed_lambda
            )));
        }
        Ok(())
    }

    /// Target-logit multiplier for a sample whose unscaled target
    /// probability is `p_y`.
    pub fn lambda(&self, p_y: f64) -> f64 {
        match self.mode {
            MarginMode::Standard => 1.0,
            MarginMode::Fixed => self.fixed_lambda,
            MarginMode::Adaptive => adaptive_lambda(p_y, self.sigma),
        }
    }
}

/// Gaussian margin `exp(−(p_y − 1)² / σ²)`: 1 for easy samples, smaller for
/// hard ones.
pub fn adaptive_lambda(p_y: f64, sigma: f64) -> f64 {
    (-(p_y - 1.0).powi(2) / (sigma * sigma)).exp()
}

/// Multiplier applied to the target logit `z_y`: `λ` when `z_y ≥ 0`, and
/// `2 − λ` otherwise, so the margin always lowers the target response.
/// Scaling a negative logit by `λ < 1` would raise it and reward pushing
/// every logit below zero.
pub fn target_scale(lambda: f64, z_y: f64) -> f64 {
    if z_y >= 0.0 {
        lambda
    } else {
        2.0 - lambda
    }
}

/// `Σₙ xₙᵀxₙ` over the rows of an `N×C` matrix.
pub fn bilinear_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    let mut out = Tensor::zeros(&[c, c]);
    for r in 0..n {
        let row = x.row(r);
        let d = out.data_mut();
        for i in 0..c {
            for j in 0..c {
                d[i * c + j] += row[i] * row[j];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmseModel {
    pub kind: EmbedKind,
    /// Seen classes in classifier-row order.
    pub classes: Vec<ClassId>,
    pub reduce1_w: Tensor,
    pub reduce1_b: Tensor,
    pub reduce2_w: Tensor,
    pub reduce2_b: Tensor,
    pub spatial_w: Tensor,
    pub spatial_b: Tensor,
    pub channel_w: Tensor,
    pub channel_b: Tensor,
    /// `|Y_s| × F` with `F = D²` (cross-attentive) or `D` (first order).
    pub classifier: Tensor,
    pub use_normalization: bool,
}

/// Tape handles for every [`AmseModel`] parameter, in [`Parameters`] order.
#[derive(Clone, Copy, Debug)]
pub struct AmseVars {
    pub reduce1_w: Var,
    pub reduce1_b: Var,
    pub reduce2_w: Var,
    pub reduce2_b: Var,
    pub spatial_w: Var,
    pub spatial_b: Var,
    pub channel_w: Var,
    pub channel_b: Var,
    pub classifier: Var,
}

impl AmseVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.reduce1_w,
            self.reduce1_b,
            self.reduce2_w,
            self.reduce2_b,
            self.spatial_w,
            self.spatial_b,
            self.channel_w,
            self.channel_b,
            self.classifier,
        ]
    }
}

impl Parameters for AmseModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("amse.reduce1.weight".into(), &self.reduce1_w),
            ("amse.reduce1.bias".into(), &self.reduce1_b),
            ("amse.reduce2.weight".into(), &self.reduce2_w),
            ("amse.reduce2.bias".into(), &self.reduce2_b),
            ("amse.spatial_att.weight".into(), &self.spatial_w),
            ("amse.spatial_att.bias".into(), &self.spatial_b),
            ("amse.channel_att.weight".into(), &self.channel_w),
            ("amse.channel_att.bias".into(), &self.channel_b),
            ("amse.classifier".into(), &self.classifier),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("amse.reduce1.weight".into(), &mut self.reduce1_w),
            ("amse.reduce1.bias".into(), &mut self.reduce1_b),
            ("amse.reduce2.weight".into(), &mut self.reduce2_w),
            ("amse.reduce2.bias".into(), &mut self.reduce2_b),
            ("amse.spatial_att.weight".into(), &mut self.spatial_w),
            ("amse.spatial_att.bias".into(), &mut self.spatial_b),
            ("amse.channel_att.weight".into(), &mut self.channel_w),
            ("amse.channel_att.bias".into(), &mut self.channel_b),
            ("amse.classifier".into(), &mut self.classifier),
        ]
    }
}

impl AmseModel {
    /// He-initialized weights, zero biases.
    pub fn init(
        kind: EmbedKind,
        channels: usize,
        reduced: usize,
        classes: Vec<ClassId>,
        use_normalization: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if reduced == 0 || reduced > channels {
            return Err(Error::invalid(format!(
                "reduction width {reduced} must be in 1..={channels}"
            )));
        }
        if classes.is_empty() {
            return Err(Error::invalid("classifier needs at least one seen class"));
        }
        let d = reduced;
        let feat = match kind {
            EmbedKind::FirstOrder => d,
            EmbedKind::CrossAttentive => d * d,
        };
        Ok(AmseModel {
            kind,
            reduce1_w: rng.he(channels, d),
            reduce1_b: Tensor::zeros(&[d]),
            reduce2_w: rng.he(channels, d),
            reduce2_b: Tensor::zeros(&[d]),
            spatial_w: rng.he(d, 1),
            spatial_b: Tensor::zeros(&[1]),
            channel_w: rng.he(d, d),
            channel_b: Tensor::zeros(&[d]),
            classifier: rng.he(feat, classes.len()).transpose()?,
            classes,
            use_normalization,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce1_w.shape()[0]
    }

    pub fn reduced(&self) -> usize {
        self.reduce1_w.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.shape()[1]
    }

    pub fn class_index(&self, class: ClassId) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::invalid(format!("label {class} is not a seen class")))
    }

    pub fn bind(&self, tape: &Tape) -> AmseVars {
        let leaves: Vec<Var> = self.params().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        Self::vars_from(&leaves)
    }

    /// Handles from nine leaves laid out in [`Parameters`] order.
    pub fn vars_from(leaves: &[Var]) -> AmseVars {
        let [reduce1_w, reduce1_b, reduce2_w, reduce2_b, spatial_w, spatial_b, channel_w, channel_b, classifier] =
            leaves[..]
        else {
            panic!("expected 9 leaves, got {}", leaves.len());
        };
        AmseVars {
            reduce1_w,
            reduce1_b,
            reduce2_w,
            reduce2_b,
            spatial_w,
            spatial_b,
            channel_w,
            channel_b,
            classifier,
        }
    }

    fn positions(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.shape().last().unwrap();
        if c != self.channels() {
            return Err(Error::dim(format!(
                "feature map {:?} has {c} channels, model expects {}",
                x.shape(),
                self.channels()
            )));
        }
        x.reshape(&[x.len() / c, c])
    }

    /// Per-position gate `σ(x₂·w + b)`, `N×1`.
    pub fn attend_spatial_on(&self, tape: &Tape, v: &AmseVars, x2: Var) -> Result<Var> {
        let s = tape.matmul(x2, v.spatial_w)?;
        tape.sigmoid(tape.add_row(s, v.spatial_b)?)
    }

    /// Per-channel gate `σ(mean(x₁)·W + b)`, `1×D`.
    pub fn attend_channel_on(&self, tape: &Tape, v: &AmseVars, x1: Var) -> Result<Var> {
        let pooled = tape.mean_rows(x1)?;
        let c = tape.matmul(pooled, v.channel_w)?;
        tape.sigmoid(tape.add_row(c, v.channel_b)?)
    }

    /// `f_d(x)` as a `1×F` row for an `N×C` input already on the tape.
    pub fn embed_on(&self, tape: &Tape, v: &AmseVars, x: Var) -> Result<Var> {
        let x1 = tape.relu(tape.add_row(tape.matmul(x, v.reduce1_w)?, v.reduce1_b)?)?;
        match self.kind {
            EmbedKind::FirstOrder => {
                let f = tape.mean_rows(x1)?;
                if self.use_normalization {
                    tape.normalize_rows(f)
                } else {
                    Ok(f)
                }
            }
            EmbedKind::CrossAttentive => {
                let x2 = tape.relu(tape.add_row(tape.matmul(x, v.reduce2_w)?, v.reduce2_b)?)?;
                let spatial = self.attend_spatial_on(tape, v, x2)?;
                let channel = self.attend_channel_on(tape, v, x1)?;
                let a = tape.mul_col(x1, spatial)?;
                let b = tape.mul_row(x2, channel)?;
                let pooled = tape.matmul(tape.transpose(a)?, b)?;
                let d = self.reduced();
                let f = tape.reshape(pooled, &[1, d * d])?;
                if self.use_normalization {
                    tape.normalize_rows(tape.signed_sqrt(f, SQRT_EPS)?)
                } else {
                    Ok(f)
                }
            }
        }
    }

    /// Embeds a batch of `W×H×C` feature maps into a `B×F` matrix.
    pub fn embed_batch_on(&self, tape: &Tape, v: &AmseVars, xs: &[&Tensor]) -> Result<Var> {
        let rows = xs
            .iter()
            .map(|x| {
                let leaf = tape.leaf(self.positions(x)?);
                self.embed_on(tape, v, leaf)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    /// `B×|Y_s|` logits `f·Wᵀ`.
    pub fn logits_on(&self, tape: &Tape, v: &AmseVars, features: Var) -> Result<Var> {
        tape.matmul(features, tape.transpose(v.classifier)?)
    }

    /// Per-sample margins from the unscaled logits (`B×|Y_s|` values).
    pub fn margins(&self, logits: &Tensor, targets: &[usize], margin: &MarginConfig) -> Result<Vec<f64>> {
        targets
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let p = softmax(&Tensor::vector(logits.row(r).to_vec())?)?;
                Ok(margin.lambda(p.data()[y]))
            })
            .collect()
    }

    /// Margin softmax over a `B×F` feature batch with given per-sample λ.
    pub fn margin_loss_on(
        &self,
        tape: &Tape,
        v: &AmseVars,
        features: Var,
        targets: &[usize],
        lambdas: &[f64],
    ) -> Result<Var> {
        let logits = self.logits_on(tape, v, features)?;
        let z = tape.value(logits);
        let scales: Vec<f64> = targets
            .iter()
            .zip(lambdas)
            .enumerate()
            .map(|(r, (&y, &lam))| target_scale(lam, z.at(r, y)))
            .collect();
        tape.margin_cross_entropy(logits, targets, &scales)
    }

    /// Adaptive margin softmax over a `B×F` feature batch. `targets` are
    /// classifier rows. λ is computed from the unscaled softmax and held
    /// constant.
    pub fn ams_loss_on(
        &self,
        tape: &Tape,
        v: &AmseVars,
        features: Var,
        targets: &[usize],
        margin: &MarginConfig,
    ) -> Result<Var> {
        let logits = self.logits_on(tape, v, features)?;
        let lambdas = self.margins(&tape.value(logits), targets, margin)?;
        self.margin_loss_on(tape, v, features, targets, &lambdas)
    }

    pub fn attend_spatial(&self, x2: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.bind(&tape);
        let x = tape.leaf(x2.clone());
        Ok(tape.value(self.attend_spatial_on(&tape, &v, x)?))
    }

    pub fn attend_channel(&self, x1: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.bind(&tape);
        let x = tape.leaf(x1.clone());
        Ok(tape.value(self.attend_channel_on(&tape, &v, x)?))
    }

    /// `f_d(x)` for one `W×H×C` (or `N×C`) feature map, as a flat vector.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.bind(&tape);
        let leaf = tape.leaf(self.positions(x)?);
        let f = self.embed_on(&tape, &v, leaf)?;
        let out = tape.value(f);
        let n = out.len();
        out.reshape(&[n])
    }

    /// Seen-class probabilities for an embedded feature.
    pub fn classify(&self, feature: &Tensor) -> Result<Tensor> {
        let f = feature.reshape(&[feature.len(), 1])?;
        let logits = self.classifier.matmul(&f)?;
        softmax(&logits.reshape(&[self.classes.len()])?)
    }

    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.classify(&self.embed(x)?)
    }

    /// Batch-mean loss over embedded features and class-id labels.
    pub fn ams_loss(
        &self,
        features: &[Tensor],
        labels: &[ClassId],
        margin: &MarginConfig,
    ) -> Result<f64> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::dim("features and labels must be equally long and non-empty"));
        }
        let targets = labels.iter().map(|&l| self.class_index(l)).collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let v = self.bind(&tape);
        let rows: Vec<Var> = features
            .iter()
            .map(|f| tape.leaf(f.reshape(&[1, f.len()]).expect("non-empty feature")))
            .collect();
        let batch = tape.concat_rows(&rows)?;
        let loss = self.ams_loss_on(&tape, &v, batch, &targets, margin)?;
        Ok(tape.scalar(loss))
    }
}
