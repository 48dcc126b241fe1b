use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvEncoder, EncoderCache, Mlp, MlpCache, Parameters, TensorRef};
use crate::seed::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Resnet50,
    TinyConv,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    /// Encoder weights are copied from an existing checkpoint before training.
    ImagenetPretrained,
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Dimension of the pooled representation `h`.
    pub out_dim: usize,
    #[serde(default)]
    pub init: EncoderInit,
    /// Widths of the hidden convolutions of `tiny_conv`; the last layer has
    /// `out_dim` channels.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
}

fn default_channels() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

impl EncoderSpec {
    pub fn tiny_conv(channels: Vec<usize>, out_dim: usize) -> Self {
        Self {
            kind: EncoderKind::TinyConv,
            out_dim,
            init: EncoderInit::Random,
            channels,
        }
    }

    pub fn resnet50() -> Self {
        Self {
            kind: EncoderKind::Resnet50,
            out_dim: 2048,
            init: EncoderInit::ImagenetPretrained,
            channels: Vec::new(),
        }
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::tiny_conv(default_channels(), 64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Output width of the projector and the predictor.
    pub d_proj: usize,
    /// Bottleneck width of the predictor; `d_proj / 4` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_hidden: Option<usize>,
}

impl HeadSpec {
    pub fn new(d_proj: usize) -> Self {
        Self {
            d_proj,
            pred_hidden: None,
        }
    }

    pub fn predictor_hidden(&self) -> usize {
        self.pred_hidden.unwrap_or((self.d_proj / 4).max(1))
    }
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self::new(64)
    }
}

/// How the two views are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Predictor output against the stop-gradient projector output of the other view.
    #[default]
    Simsiam,
    /// No predictor: projector output against the stop-gradient encoder output
    /// of the other view. Requires `d_proj == out_dim`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    /// `(height, width)` of the model input.
    pub input_size: (usize, usize),
    #[serde(default)]
    pub loss_mode: LossMode,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.kind == EncoderKind::Resnet50 {
            return Err(Error::Unsupported(
                "the resnet50 encoder has no backend in this build; use tiny_conv".into(),
            ));
        }
        if self.encoder.out_dim == 0 || self.head.d_proj == 0 {
            return Err(Error::invalid("out_dim and d_proj must be positive"));
        }
        if self.encoder.channels.contains(&0) {
            return Err(Error::invalid("conv widths must be positive"));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::invalid("input_size must be positive"));
        }
        if self.loss_mode == LossMode::Literal && self.head.d_proj != self.encoder.out_dim {
            return Err(Error::invalid(
                "literal loss mode compares projector output with the encoder output, so d_proj must equal out_dim",
            ));
        }
        Ok(())
    }
}

/// Outputs of the three stages for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub h: Array1<f64>,
    pub z: Array1<f64>,
    pub p: Array1<f64>,
}

/// Encoder `f`, projector `g` and predictor `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSiamModel {
    pub spec: ModelSpec,
    pub encoder: ConvEncoder,
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `-(a/|a|) . (b/|b|)`.
pub fn neg_cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::NumericDegeneracy(format!(
            "cosine of vectors with norms {na} and {nb}"
        )));
    }
    Ok((-(a.dot(&b) / (na * nb))).clamp(-1.0, 1.0))
}

/// Symmetrized negative cosine: `½ D(p1, z2) + ½ D(p2, z1)` where the `z`
/// arguments are the (stop-gradient) targets.
pub fn simsiam_loss(
    p1: ArrayView1<'_, f64>,
    p2: ArrayView1<'_, f64>,
    z1: ArrayView1<'_, f64>,
    z2: ArrayView1<'_, f64>,
) -> Result<f64> {
    Ok(0.5 * neg_cosine(p1, z2)? + 0.5 * neg_cosine(p2, z1)?)
}

/// Gradient of `-cos(p, t)` with respect to `p`, with `t` constant.
fn neg_cosine_grad(p: ArrayView1<'_, f64>, t: ArrayView1<'_, f64>) -> Array1<f64> {
    let (np, nt) = (norm(p), norm(t));
    let cos = p.dot(&t) / (np * nt);
    (&p * (cos / (np * np)) - &t / (np * nt)).to_owned()
}

/// Stop-gradient targets of one batch: row `i` of `for_first` is what the
/// first view's prediction is pulled towards.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub for_first: Array2<f64>,
    pub for_second: Array2<f64>,
}

/// Result of a forward-backward pass.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: SimSiamModel,
    pub targets: Targets,
    /// Mean over dimensions of the per-dimension std of L2-normalized `z`.
    pub embedding_std: f64,
}

struct Branch {
    h: Array2<f64>,
    enc: Vec<EncoderCache>,
    z: Array2<f64>,
    proj: MlpCache,
    /// predictor output (`z` itself in literal mode)
    p: Array2<f64>,
    pred: Option<MlpCache>,
}

fn stack(rows: Vec<Array1<f64>>) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal lengths")
}

/// Mean over dimensions of the std over the batch of row-normalized `z`.
pub fn normalized_std(z: &Array2<f64>) -> f64 {
    let mut zn = z.clone();
    for mut row in zn.rows_mut() {
        let n = norm(row.view());
        if n > 0.0 {
            row /= n;
        }
    }
    zn.std_axis(Axis(0), 0.0).mean().unwrap_or(0.0)
}

impl SimSiamModel {
    /// Randomly initialized model; the stream is derived from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng: ChaCha8Rng = derive_rng(seed, &["model_init"]);
        let mut widths = vec![3];
        widths.extend(&spec.encoder.channels);
        widths.push(spec.encoder.out_dim);
        let encoder = ConvEncoder::new(&widths, &mut rng);
        let (d, dp) = (spec.encoder.out_dim, spec.head.d_proj);
        let projector = Mlp::new(&[d, dp, dp, dp], true, &mut rng);
        let predictor = match spec.loss_mode {
            LossMode::Simsiam => Some(Mlp::new(&[dp, spec.head.predictor_hidden(), dp], false, &mut rng)),
            LossMode::Literal => None,
        };
        Ok(Self {
            spec,
            encoder,
            projector,
            predictor,
        })
    }

    /// Same architecture with a fixed seed; used when loading saved tensors.
    pub(crate) fn skeleton(spec: ModelSpec) -> Result<Self> {
        Self::new(spec, 0)
    }

    pub fn out_dim(&self) -> usize {
        self.spec.encoder.out_dim
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.spec.input_size
    }

    fn check_image(&self, image: ArrayView3<'_, f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != 3 || (h, w) != self.spec.input_size {
            return Err(Error::invalid(format!(
                "expected a (3, {}, {}) image, got ({c}, {h}, {w})",
                self.spec.input_size.0, self.spec.input_size.1
            )));
        }
        Ok(())
    }

    /// Downstream representation `h = f(x)`.
    pub fn extract_h(&self, image: ArrayView3<'_, f64>) -> Result<Array1<f64>> {
        self.check_image(image)?;
        Ok(self.encoder.forward(image))
    }

    /// `h`, `z` and `p` for a batch; the heads use batch statistics.
    pub fn represent(&self, images: &[Array3<f64>]) -> Result<Vec<Representation>> {
        let b = self.branch(images)?;
        Ok((0..images.len())
            .map(|i| Representation {
                h: b.h.row(i).to_owned(),
                z: b.z.row(i).to_owned(),
                p: b.p.row(i).to_owned(),
            })
            .collect())
    }

    fn branch(&self, images: &[Array3<f64>]) -> Result<Branch> {
        if images.len() < 2 {
            return Err(Error::invalid("batch normalization needs at least 2 images per batch"));
        }
        for img in images {
            self.check_image(img.view())?;
        }
        let (hs, enc): (Vec<_>, Vec<_>) = images
            .par_iter()
            .map(|img| self.encoder.forward_train(img.view()))
            .collect::<Vec<_>>()
            .into_iter()
            .unzip();
        let h = stack(hs);
        let (z, proj) = self.projector.forward(h.view());
        let (p, pred) = match &self.predictor {
            Some(q) => {
                let (p, c) = q.forward(z.view());
                (p, Some(c))
            }
            None => (z.clone(), None),
        };
        Ok(Branch {
            h,
            enc,
            z,
            proj,
            p,
            pred,
        })
    }

    fn targets_of(&self, first: &Branch, second: &Branch) -> Targets {
        match self.spec.loss_mode {
            LossMode::Simsiam => Targets {
                for_first: second.z.clone(),
                for_second: first.z.clone(),
            },
            LossMode::Literal => Targets {
                for_first: second.h.clone(),
                for_second: first.h.clone(),
            },
        }
    }

    fn batch_loss(p1: &Array2<f64>, p2: &Array2<f64>, t: &Targets) -> Result<f64> {
        let n = p1.nrows() as f64;
        let mut total = 0.0;
        for i in 0..p1.nrows() {
            total += simsiam_loss(p1.row(i), p2.row(i), t.for_second.row(i), t.for_first.row(i))?;
        }
        Ok(total / n)
    }

    fn check_views(v1: &[Array3<f64>], v2: &[Array3<f64>]) -> Result<()> {
        if v1.len() != v2.len() {
            return Err(Error::invalid("the two view batches differ in size"));
        }
        Ok(())
    }

    /// Mean symmetrized loss over the batch and its gradient, with the targets
    /// treated as constants.
    pub fn loss_and_grad(&self, v1: &[Array3<f64>], v2: &[Array3<f64>]) -> Result<LossAndGrad> {
        Self::check_views(v1, v2)?;
        let first = self.branch(v1)?;
        let second = self.branch(v2)?;
        let targets = self.targets_of(&first, &second);
        let loss = Self::batch_loss(&first.p, &second.p, &targets)?;

        let n = v1.len() as f64;
        let mut grads = self.zeros_like();
        let mut dh_all = Vec::with_capacity(2);
        for (branch, target) in [(&first, &targets.for_first), (&second, &targets.for_second)] {
            let mut dp = Array2::zeros(branch.p.raw_dim());
            for i in 0..branch.p.nrows() {
                let g = neg_cosine_grad(branch.p.row(i), target.row(i)) * (0.5 / n);
                dp.row_mut(i).assign(&g);
            }
            let dz = match (&self.predictor, &branch.pred, &mut grads.predictor) {
                (Some(q), Some(cache), Some(gq)) => q.backward(cache, dp.view(), gq),
                _ => dp,
            };
            let dh = self.projector.backward(&branch.proj, dz.view(), &mut grads.projector);
            dh_all.push(dh);
        }

        let jobs: Vec<(&EncoderCache, Array1<f64>)> = first
            .enc
            .iter()
            .zip(dh_all[0].rows())
            .chain(second.enc.iter().zip(dh_all[1].rows()))
            .map(|(c, d)| (c, d.to_owned()))
            .collect();
        let per_image: Vec<ConvEncoder> = jobs
            .par_iter()
            .map(|(cache, dh)| {
                let mut g = self.encoder.zeros_like();
                self.encoder.backward(cache, dh, &mut g);
                g
            })
            .collect();
        for g in &per_image {
            grads.encoder.add_assign(g);
        }

        let embedding_std = 0.5 * (normalized_std(&first.z) + normalized_std(&second.z));
        Ok(LossAndGrad {
            loss,
            grads,
            targets,
            embedding_std,
        })
    }

    /// Forward-only loss against fixed targets.
    pub fn loss_with_targets(&self, v1: &[Array3<f64>], v2: &[Array3<f64>], targets: &Targets) -> Result<f64> {
        Self::check_views(v1, v2)?;
        let first = self.branch(v1)?;
        let second = self.branch(v2)?;
        Self::batch_loss(&first.p, &second.p, targets)
    }
}

fn prefixed<'a>(prefix: &str, ts: Vec<TensorRef<'a>>) -> Vec<TensorRef<'a>> {
    ts.into_iter()
        .map(|t| TensorRef {
            name: format!("{prefix}.{}", t.name),
            ..t
        })
        .collect()
}

impl Parameters for SimSiamModel {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = prefixed("encoder", self.encoder.tensors());
        out.extend(prefixed("projector", self.projector.tensors()));
        if let Some(q) = &self.predictor {
            out.extend(prefixed("predictor", q.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.projector.tensors_mut());
        if let Some(q) = &mut self.predictor {
            out.extend(q.tensors_mut());
        }
        out
    }
}

/// SGD with momentum and L2 weight decay folded into the gradient, as in
/// `torch.optim.SGD`: `v = m*v + (g + wd*w)`, `w -= lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<SimSiamModel>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut SimSiamModel, grads: &SimSiamModel) {
        let first = self.velocity.is_none();
        let velocity = self.velocity.get_or_insert_with(|| model.zeros_like());
        let (lr, m, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((w, v), g) in model
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors())
        {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g.data) {
                let d = g + wd * *w;
                *v = if first { d } else { m * *v + d };
                if lr != 0.0 {
                    *w -= lr * *v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn neg_cosine_identities() {
        let a = array![1.0, 2.0, -3.0];
        assert!((neg_cosine(a.view(), a.view()).unwrap() + 1.0).abs() < 1e-12);
        assert!((neg_cosine(a.view(), (-&a).view()).unwrap() - 1.0).abs() < 1e-12);
        let b = array![2.0, -1.0, 0.0];
        assert!(neg_cosine(a.view(), b.view()).unwrap().abs() < 1e-12);
        let z = array![0.0, 0.0, 0.0];
        assert!(matches!(neg_cosine(a.view(), z.view()), Err(Error::NumericDegeneracy(_))));
    }

    #[test]
    fn loss_examples() {
        let p1 = array![1.0, 0.5];
        let p2 = array![-0.3, 2.0];
        assert!((simsiam_loss(p1.view(), p2.view(), p2.view(), p1.view()).unwrap() + 1.0).abs() < 1e-12);
        let o1 = array![-0.5, 1.0];
        let o2 = array![2.0, 0.3];
        assert!(simsiam_loss(p1.view(), p2.view(), o2.view(), o1.view()).unwrap().abs() < 1e-12);
    }

    /// Scalar loop version of the symmetrized loss.
    fn loss_oracle(p1: &[f64], p2: &[f64], z1: &[f64], z2: &[f64]) -> f64 {
        fn d(a: &[f64], b: &[f64]) -> f64 {
            let mut ab = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            for i in 0..a.len() {
                ab += a[i] * b[i];
                aa += a[i] * a[i];
                bb += b[i] * b[i];
            }
            -ab / (aa.sqrt() * bb.sqrt())
        }
        0.5 * d(p1, z2) + 0.5 * d(p2, z1)
    }

    fn vec4() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, 4).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn loss_matches_scalar_oracle(p1 in vec4(), p2 in vec4(), z1 in vec4(), z2 in vec4()) {
            let l = simsiam_loss(
                ArrayView1::from(&p1), ArrayView1::from(&p2), ArrayView1::from(&z1), ArrayView1::from(&z2),
            ).unwrap();
            prop_assert!((l - loss_oracle(&p1, &p2, &z1, &z2)).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&l));
        }

        #[test]
        fn loss_is_view_symmetric(p1 in vec4(), p2 in vec4(), z1 in vec4(), z2 in vec4()) {
            let v = |x: &Vec<f64>| ArrayView1::from(x).to_owned();
            let a = simsiam_loss(v(&p1).view(), v(&p2).view(), v(&z1).view(), v(&z2).view()).unwrap();
            let b = simsiam_loss(v(&p2).view(), v(&p1).view(), v(&z2).view(), v(&z1).view()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn loss_is_scale_invariant(p1 in vec4(), p2 in vec4(), z1 in vec4(), z2 in vec4(), c in 0.01f64..100.0) {
            let v = |x: &Vec<f64>| ArrayView1::from(x).to_owned();
            let a = simsiam_loss(v(&p1).view(), v(&p2).view(), v(&z1).view(), v(&z2).view()).unwrap();
            let scaled = v(&p1) * c;
            let b = simsiam_loss(scaled.view(), v(&p2).view(), v(&z1).view(), v(&z2).view()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderSpec::tiny_conv(vec![4], 8),
            head: HeadSpec::new(8),
            input_size: (8, 8),
            loss_mode: LossMode::Simsiam,
        }
    }

    #[test]
    fn extract_h_contract() {
        let m = SimSiamModel::new(tiny_spec(), 1).unwrap();
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c + y * x) % 5) as f64 / 5.0);
        let h = m.extract_h(img.view()).unwrap();
        assert_eq!(h.len(), 8);
        assert_eq!(h, m.extract_h(img.view()).unwrap());
        let zero = m.extract_h(Array3::zeros((3, 8, 8)).view()).unwrap();
        assert!(zero.iter().all(|v| v.is_finite()));
        assert!(m.extract_h(Array3::zeros((3, 7, 8)).view()).is_err());
        assert!(m.extract_h(Array3::zeros((1, 8, 8)).view()).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec();
        s.encoder = EncoderSpec::resnet50();
        assert!(matches!(SimSiamModel::new(s, 0), Err(Error::Unsupported(_))));
        let mut s = tiny_spec();
        s.loss_mode = LossMode::Literal;
        s.head.d_proj = 16;
        assert!(s.validate().is_err());
        s.head.d_proj = 8;
        let m = SimSiamModel::new(s, 0).unwrap();
        assert!(m.predictor.is_none());
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut m = SimSiamModel::new(tiny_spec(), 3).unwrap();
        let before = m.clone();
        let imgs: Vec<Array3<f64>> = (0..3)
            .map(|k| Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((k + c + y * 3 + x) % 7) as f64 / 7.0))
            .collect();
        let out = m.loss_and_grad(&imgs, &imgs).unwrap();
        let mut opt = Sgd::new(0.0, 0.9, 1e-4);
        opt.step(&mut m, &out.grads);
        opt.step(&mut m, &out.grads);
        assert_eq!(m, before);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let spec = ModelSpec {
            encoder: EncoderSpec::tiny_conv(vec![4], 8),
            head: HeadSpec::new(8),
            input_size: (8, 8),
            loss_mode: LossMode::Simsiam,
        };
        let model = SimSiamModel::new(spec, 11).unwrap();
        assert!(model.n_params() <= 5000);
        let mut rng: ChaCha8Rng = derive_rng(5, &["fd"]);
        use rand::Rng;
        let mut batch = || -> Vec<Array3<f64>> {
            (0..4).map(|_| Array3::from_shape_fn((3, 8, 8), |_| rng.random::<f64>())).collect()
        };
        let (v1, v2) = (batch(), batch());
        let out = model.loss_and_grad(&v1, &v2).unwrap();
        let analytic: Vec<f64> = out.grads.tensors().iter().flat_map(|t| t.data.to_vec()).collect();

        let eps = 1e-5;
        let mut numeric = Vec::with_capacity(analytic.len());
        let n_tensors = model.tensors().len();
        for t in 0..n_tensors {
            let len = model.tensors()[t].data.len();
            for i in 0..len {
                let mut plus = model.clone();
                plus.tensors_mut()[t][i] += eps;
                let mut minus = model.clone();
                minus.tensors_mut()[t][i] -= eps;
                let lp = plus.loss_with_targets(&v1, &v2, &out.targets).unwrap();
                let lm = minus.loss_with_targets(&v1, &v2, &out.targets).unwrap();
                numeric.push((lp - lm) / (2.0 * eps));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-6);
        assert!(diff / scale < 1e-4, "relative gradient error {}", diff / scale);
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "worst elementwise relative error {worst}");
    }
}
