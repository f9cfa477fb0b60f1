//! Capsule network: convolutional stem, primary capsules, class capsules
//! joined by routing-by-agreement, margin loss and a masked reconstruction
//! decoder.

mod routing;

use rand::SeedableRng;

pub use routing::{route, route_predictions, route_u_hat, routing_forward, RoutingGradient, RoutingState, RoutingVars};

use crate::autodiff::{
    margin_loss_value, squash_vec, Activation, BackwardFault, HasParams, Padding, ParamId, ParamStore, Tape, Var,
};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::init::{self, ModelRng};
use crate::model::{argmax, per_sample_batch, BatchResult, Classifier, NeuralModel, SampleOutcome};
use crate::tensor::Tensor;

/// Constants of the margin loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapsNetConfig {
    /// Input image height `x1`.
    pub input_height: usize,
    /// Input image width `x2`.
    pub input_width: usize,
    pub stem_maps: usize,
    pub stem_kernel: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    /// Channels `F` in the primary capsule layer.
    pub primary_channels: usize,
    /// Primary capsule dimension `D1`.
    pub primary_dim: usize,
    /// Class capsule dimension `D2`.
    pub class_dim: usize,
    /// Number of classes `C`.
    pub classes: usize,
    pub routing_iterations: usize,
    pub routing_gradient: RoutingGradient,
    pub margin: MarginLossParams,
    pub recon_weight: f64,
    pub decoder_hidden: [usize; 2],
    /// Standard deviation of the routing weight initializer.
    pub routing_init_std: f64,
}

/// Reconstruction weight that matches 0.0005 on a 28x28 image.
pub fn default_recon_weight(height: usize, width: usize) -> f64 {
    0.0005 * (height * width) as f64 / 784.0
}

impl CapsNetConfig {
    pub fn new(input_height: usize, input_width: usize, classes: usize) -> Self {
        Self {
            input_height,
            input_width,
            stem_maps: 256,
            stem_kernel: 9,
            primary_kernel: 9,
            primary_stride: 2,
            primary_channels: 32,
            primary_dim: 8,
            class_dim: 16,
            classes,
            routing_iterations: 3,
            routing_gradient: RoutingGradient::Full,
            margin: MarginLossParams::default(),
            recon_weight: default_recon_weight(input_height, input_width),
            decoder_hidden: [512, 1024],
            routing_init_std: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stem_maps", self.stem_maps),
            ("stem_kernel", self.stem_kernel),
            ("primary_kernel", self.primary_kernel),
            ("primary_stride", self.primary_stride),
            ("F", self.primary_channels),
            ("D1", self.primary_dim),
            ("D2", self.class_dim),
            ("C", self.classes),
            ("routing_iterations", self.routing_iterations),
            ("decoder_hidden[0]", self.decoder_hidden[0]),
            ("decoder_hidden[1]", self.decoder_hidden[1]),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("capsnet: {name} must be >= 1")));
        }
        let m = &self.margin;
        if !(0.0 < m.m_minus && m.m_minus < m.m_plus && m.m_plus < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "capsnet: need 0 < m_minus < m_plus < 1, got m_minus={} m_plus={}",
                m.m_minus, m.m_plus
            )));
        }
        if m.lambda.is_nan() || m.lambda <= 0.0 {
            return Err(Error::InvalidArgument("capsnet: lambda must be > 0".into()));
        }
        if self.recon_weight.is_nan() || self.recon_weight < 0.0 {
            return Err(Error::InvalidArgument("capsnet: recon_weight must be >= 0".into()));
        }
        self.geometry().map(|_| ())
    }

    /// Shapes derived from the input size.
    pub fn geometry(&self) -> Result<CapsGeometry> {
        let stem = |n: usize| n.checked_sub(self.stem_kernel).map(|d| d + 1);
        let grid = |n: usize| {
            n.checked_sub(self.primary_kernel)
                .map(|d| d / self.primary_stride.max(1) + 1)
        };
        let dims = stem(self.input_height)
            .zip(stem(self.input_width))
            .and_then(|(sh, sw)| Some((sh, sw, grid(sh)?, grid(sw)?)));
        let Some((stem_h, stem_w, g1, g2)) = dims else {
            return Err(Error::InputTooSmall(format!(
                "{}x{} input leaves no room for a {}x{} stem kernel followed by a {}x{} primary kernel",
                self.input_height, self.input_width, self.stem_kernel, self.stem_kernel, self.primary_kernel,
                self.primary_kernel
            )));
        };
        Ok(CapsGeometry {
            stem_h,
            stem_w,
            g1,
            g2,
            n_in: g1 * g2 * self.primary_channels,
        })
    }
}

/// Spatial extents of the stem output and the primary capsule grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsGeometry {
    pub stem_h: usize,
    pub stem_w: usize,
    pub g1: usize,
    pub g2: usize,
    /// Number of primary capsules `G1·G2·F`.
    pub n_in: usize,
}

#[derive(Clone, Copy, Debug)]
struct CapsParams {
    stem_k: ParamId,
    stem_b: ParamId,
    primary_k: ParamId,
    primary_b: ParamId,
    routing_w: ParamId,
    decoder: [(ParamId, ParamId); 3],
}

#[derive(Clone, Debug)]
pub struct CapsNet {
    cfg: CapsNetConfig,
    geom: CapsGeometry,
    params: ParamStore,
    ids: CapsParams,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct CapsForward {
    pub stem: Var,
    /// Squashed primary capsules, `N_in x D1`.
    pub primary: Var,
    pub routing: RoutingVars,
}

/// Which class capsule survives masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Keep the target class (training).
    Target(usize),
    /// Keep the longest capsule (inference).
    Longest,
}

impl CapsNet {
    /// Allocates and initializes every parameter.
    pub fn build(cfg: CapsNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let geom = cfg.geometry()?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (ks, kp) = (cfg.stem_kernel, cfg.primary_kernel);
        let primary_maps = cfg.primary_channels * cfg.primary_dim;

        let stem_k = params.add("stem.kernel", init::scaled_uniform(&mut rng, &[ks, ks, 1, cfg.stem_maps], ks * ks));
        let stem_b = params.add("stem.bias", Tensor::zeros(&[cfg.stem_maps]));
        let primary_k = params.add(
            "primary.kernel",
            init::scaled_uniform(&mut rng, &[kp, kp, cfg.stem_maps, primary_maps], kp * kp * cfg.stem_maps),
        );
        let primary_b = params.add("primary.bias", Tensor::zeros(&[primary_maps]));
        let routing_w = params.add(
            "routing.weights",
            init::normal(
                &mut rng,
                &[geom.n_in, cfg.classes, cfg.primary_dim, cfg.class_dim],
                cfg.routing_init_std,
            ),
        );
        let widths = [
            cfg.classes * cfg.class_dim,
            cfg.decoder_hidden[0],
            cfg.decoder_hidden[1],
            cfg.input_height * cfg.input_width,
        ];
        let mut decoder = [(stem_k, stem_k); 3];
        for (l, slot) in decoder.iter_mut().enumerate() {
            let w = params.add(
                format!("decoder.fc{}.weights", l + 1),
                init::scaled_uniform(&mut rng, &[widths[l], widths[l + 1]], widths[l]),
            );
            let b = params.add(format!("decoder.fc{}.bias", l + 1), Tensor::zeros(&[widths[l + 1]]));
            *slot = (w, b);
        }
        Ok(Self {
            cfg,
            geom,
            params,
            ids: CapsParams {
                stem_k,
                stem_b,
                primary_k,
                primary_b,
                routing_w,
                decoder,
            },
        })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> CapsGeometry {
        self.geom
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [self.cfg.input_height, self.cfg.input_width, 1];
        if image.shape() != want {
            return Err(Error::shape("capsnet", format!("{want:?}"), format!("{:?}", image.shape())));
        }
        Ok(())
    }

    /// Stem convolution followed by ReLU.
    pub fn stem_forward<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<Var> {
        let k = tape.param(&self.params, self.ids.stem_k);
        let b = tape.param(&self.params, self.ids.stem_b);
        let conv = tape.conv2d(x, k, 1, Padding::Valid)?;
        let biased = tape.add_bias(conv, b)?;
        Ok(tape.relu(biased))
    }

    /// Primary capsule convolution, regrouped to `N_in x D1` and squashed.
    pub fn primary_capsules_forward<'t>(&'t self, tape: &mut Tape<'t>, stem: Var) -> Result<Var> {
        let want = [self.geom.stem_h, self.geom.stem_w, self.cfg.stem_maps];
        if tape.shape(stem) != want {
            return Err(Error::shape(
                "primary_capsules",
                format!("{want:?}"),
                format!("{:?}", tape.shape(stem)),
            ));
        }
        let k = tape.param(&self.params, self.ids.primary_k);
        let b = tape.param(&self.params, self.ids.primary_b);
        let conv = tape.conv2d(stem, k, self.cfg.primary_stride, Padding::Valid)?;
        let biased = tape.add_bias(conv, b)?;
        // channel c = f·D1 + d, so the row-major regrouping is a reshape
        let grouped = tape.reshape(biased, &[self.geom.n_in, self.cfg.primary_dim])?;
        Ok(tape.squash(grouped))
    }

    pub fn forward<'t>(&'t self, tape: &mut Tape<'t>, image: &'t Tensor) -> Result<CapsForward> {
        self.check_image(image)?;
        let x = tape.constant_ref(image);
        let stem = self.stem_forward(tape, x)?;
        let primary = self.primary_capsules_forward(tape, stem)?;
        let w = tape.param(&self.params, self.ids.routing_w);
        let routing = routing_forward(tape, primary, w, self.cfg.routing_iterations, self.cfg.routing_gradient)?;
        Ok(CapsForward {
            stem,
            primary,
            routing,
        })
    }

    /// Masks the class capsules and decodes them into an image.
    pub fn decode<'t>(&'t self, tape: &mut Tape<'t>, v: Var, mask: MaskMode) -> Result<Var> {
        let mask_t = mask_tensor(tape.value(v), mask)?;
        let m = tape.constant(mask_t);
        let masked = tape.mul(v, m)?;
        let flat = tape.reshape(masked, &[self.cfg.classes * self.cfg.class_dim])?;
        self.reconstruction_decode(tape, flat)
    }

    /// Three fully connected layers: ReLU, ReLU, sigmoid.
    pub fn reconstruction_decode<'t>(&'t self, tape: &mut Tape<'t>, masked: Var) -> Result<Var> {
        let want = self.cfg.classes * self.cfg.class_dim;
        if tape.shape(masked) != [want] {
            return Err(Error::shape("reconstruction_decode", format!("[{want}]"), format!("{:?}", tape.shape(masked))));
        }
        let mut h = masked;
        for (l, &(w, b)) in self.ids.decoder.iter().enumerate() {
            let wv = tape.param(&self.params, w);
            let bv = tape.param(&self.params, b);
            let z = tape.fully_connected(h, wv, bv)?;
            let act = if l == 2 { Activation::Sigmoid } else { Activation::Relu };
            h = tape.activation(z, act);
        }
        tape.reshape(h, &[self.cfg.input_height, self.cfg.input_width, 1])
    }

    /// Margin loss plus weighted reconstruction loss for one labelled image.
    pub fn loss<'t>(&'t self, tape: &mut Tape<'t>, image: &'t Tensor, label: usize) -> Result<(Var, CapsForward)> {
        if label >= self.cfg.classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.cfg.classes
            )));
        }
        let fwd = self.forward(tape, image)?;
        let target = one_hot(label, self.cfg.classes);
        let margin = tape.margin_loss(fwd.routing.outputs, &target, self.cfg.margin)?;
        if self.cfg.recon_weight == 0.0 {
            return Ok((margin, fwd));
        }
        let recon = self.decode(tape, fwd.routing.outputs, MaskMode::Target(label))?;
        let original = tape.constant_ref(image);
        let diff = tape.sub(recon, original)?;
        let sq = tape.mul(diff, diff)?;
        let recon_loss = tape.sum_all(sq);
        let weighted = tape.scale(recon_loss, self.cfg.recon_weight);
        let total = tape.add(margin, weighted)?;
        Ok((total, fwd))
    }

    /// Class capsule outputs `v` (`C x D2`) for an image.
    pub fn class_capsules(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, image)?;
        Ok(tape.value(fwd.routing.outputs).clone())
    }

    /// Routing state of an image's forward pass.
    pub fn routing_state(&self, image: &Tensor) -> Result<RoutingState> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, image)?;
        Ok(RoutingState::from_tape(&tape, &fwd.routing))
    }

    /// Reconstruction from the longest class capsule.
    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, image)?;
        let r = self.decode(&mut tape, fwd.routing.outputs, MaskMode::Longest)?;
        Ok(tape.value(r).clone())
    }

    fn sample_gradient(&self, sample: &Sample, fault: Option<BackwardFault>) -> Result<(SampleOutcome, Vec<Tensor>)> {
        let mut tape = Tape::new().with_fault(fault);
        let (loss, fwd) = self.loss(&mut tape, &sample.image, sample.label)?;
        let predicted = capsnet_predict(tape.value(fwd.routing.outputs));
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?.into_param_grads(&self.params);
        Ok((SampleOutcome { loss: value, predicted }, grads))
    }
}

impl HasParams for CapsNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Classifier for CapsNet {
    fn num_classes(&self) -> usize {
        self.cfg.classes
    }

    fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(capsnet_predict(&self.class_capsules(image)?))
    }
}

impl NeuralModel for CapsNet {
    fn batch_gradient(&mut self, batch: &[&Sample], fault: Option<BackwardFault>) -> Result<BatchResult> {
        per_sample_batch(self, &self.params, batch, |m, s| m.sample_gradient(s, fault))
    }

    fn evaluate(&self, sample: &Sample) -> Result<SampleOutcome> {
        let mut tape = Tape::new();
        let (loss, fwd) = self.loss(&mut tape, &sample.image, sample.label)?;
        Ok(SampleOutcome {
            loss: tape.value(loss).data()[0],
            predicted: capsnet_predict(tape.value(fwd.routing.outputs)),
        })
    }
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    t[label] = 1.0;
    t
}

/// Squash nonlinearity on a single vector.
pub fn squash(s: &[f64]) -> Vec<f64> {
    squash_vec(s)
}

/// Euclidean length of every row of a `C x D` tensor.
pub fn capsule_norms(v: &Tensor) -> Vec<f64> {
    v.rows().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

/// Margin loss for capsule outputs `v` (`C x D`) and a one-hot target.
pub fn margin_loss(v: &Tensor, target: &[f64], params: &MarginLossParams) -> Result<f64> {
    if v.rank() != 2 || v.shape()[0] != target.len() {
        return Err(Error::shape("margin_loss", format!("[{}, D]", target.len()), format!("{:?}", v.shape())));
    }
    let ones = target.iter().filter(|&&t| t == 1.0).count();
    let zeros = target.iter().filter(|&&t| t == 0.0).count();
    if ones != 1 || ones + zeros != target.len() {
        return Err(Error::InvalidArgument(format!("target is not one-hot: {target:?}")));
    }
    Ok(margin_loss_value(v, target, params))
}

fn mask_tensor(v: &Tensor, mode: MaskMode) -> Result<Tensor> {
    let classes = v.shape()[0];
    let keep = match mode {
        MaskMode::Target(k) if k < classes => k,
        MaskMode::Target(k) => {
            return Err(Error::InvalidArgument(format!("mask target {k} out of range for {classes} classes")))
        }
        MaskMode::Longest => capsnet_predict(v),
    };
    let d = v.len() / classes;
    let mut m = Tensor::zeros(v.shape());
    m.data_mut()[keep * d..(keep + 1) * d].fill(1.0);
    Ok(m)
}

/// Zeros every row of `v` but one and flattens the result.
pub fn mask_by_target(v: &Tensor, mode: MaskMode) -> Result<Tensor> {
    if v.rank() != 2 {
        return Err(Error::shape("mask_by_target", "[C, D]", format!("{:?}", v.shape())));
    }
    let m = mask_tensor(v, mode)?;
    let data = v.data().iter().zip(m.data()).map(|(a, b)| a * b).collect();
    Tensor::new(&[v.len()], data)
}

/// Sum of squared pixel differences.
pub fn reconstruction_loss(recon: &Tensor, original: &Tensor) -> Result<f64> {
    if recon.len() != original.len() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{} pixels", original.len()),
            format!("{}", recon.len()),
        ));
    }
    Ok(recon.data().iter().zip(original.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `margin_loss + recon_weight · reconstruction_loss`.
pub fn capsnet_loss(
    v: &Tensor,
    target: &[f64],
    recon: &Tensor,
    original: &Tensor,
    cfg: &CapsNetConfig,
) -> Result<f64> {
    Ok(margin_loss(v, target, &cfg.margin)? + cfg.recon_weight * reconstruction_loss(recon, original)?)
}

/// Class whose capsule is longest; ties go to the lowest index.
pub fn capsnet_predict(v: &Tensor) -> usize {
    argmax(&capsule_norms(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v_with_norms(norms: &[f64], d: usize) -> Tensor {
        let mut data = Vec::new();
        for &n in norms {
            data.push(n);
            data.extend(std::iter::repeat_n(0.0, d - 1));
        }
        Tensor::new(&[norms.len(), d], data).unwrap()
    }

    #[test]
    fn squash_reference_lengths() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        let v = squash(&[0.6, 0.8]);
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.4).abs() < 1e-15);
        let v = squash(&[3.0, 0.0]);
        assert!((v[0] - 0.9).abs() < 1e-15 && v[1] == 0.0);
    }

    #[test]
    fn grid_for_28_and_32() {
        let g = CapsNetConfig::new(28, 28, 10).geometry().unwrap();
        assert_eq!((g.stem_h, g.stem_w, g.g1, g.g2), (20, 20, 6, 6));
        let g = CapsNetConfig::new(32, 32, 10).geometry().unwrap();
        assert_eq!((g.stem_h, g.stem_w, g.g1, g.g2), (24, 24, 8, 8));
    }

    #[test]
    fn too_small_input_is_rejected() {
        let err = CapsNetConfig::new(16, 28, 10).validate().unwrap_err();
        assert!(matches!(err, Error::InputTooSmall(_)), "{err}");
        // 17 - 9 + 1 = 9 rows of stem output fit exactly one 9x9 primary kernel
        assert_eq!(CapsNetConfig::new(17, 28, 10).geometry().unwrap().g1, 1);
        assert!(CapsNetConfig::new(28, 16, 10).geometry().is_err());
    }

    #[test]
    fn margin_cases() {
        let p = MarginLossParams::default();
        let t = one_hot(0, 2);
        assert_eq!(margin_loss(&v_with_norms(&[0.95, 0.0], 4), &t, &p).unwrap(), 0.0);
        assert!((margin_loss(&v_with_norms(&[0.0, 0.0], 4), &t, &p).unwrap() - 0.81).abs() < 1e-12);
        let l = margin_loss(&v_with_norms(&[0.95, 0.5], 4), &t, &p).unwrap();
        assert!((l - 0.08).abs() < 1e-12);
        assert!(margin_loss(&v_with_norms(&[0.5, 0.5], 4), &[1.0, 1.0], &p).is_err());
    }

    #[test]
    fn mask_keeps_one_row() {
        let v = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = mask_by_target(&v, MaskMode::Target(0)).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 0.0, 0.0]);
        let again = mask_by_target(&m.reshape(&[2, 2]).unwrap(), MaskMode::Target(0)).unwrap();
        assert_eq!(again, m);
        let m = mask_by_target(&v, MaskMode::Longest).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn reconstruction_loss_cases() {
        let a = Tensor::full(&[10, 10, 1], 0.3);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let b = Tensor::full(&[10, 10, 1], 0.4);
        assert!((reconstruction_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let z = Tensor::zeros(&[10, 10, 1]);
        assert!((reconstruction_loss(&z, &b).unwrap() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_tie_break() {
        assert_eq!(capsnet_predict(&v_with_norms(&[0.1, 0.9, 0.3], 2)), 1);
        assert_eq!(capsnet_predict(&v_with_norms(&[0.4, 0.4, 0.4], 2)), 0);
    }

    fn small_config() -> CapsNetConfig {
        let mut cfg = CapsNetConfig::new(12, 12, 3);
        cfg.stem_maps = 4;
        cfg.stem_kernel = 5;
        cfg.primary_kernel = 3;
        cfg.primary_channels = 2;
        cfg.primary_dim = 4;
        cfg.class_dim = 4;
        cfg.decoder_hidden = [8, 12];
        cfg
    }

    #[test]
    fn primary_grid_matches_geometry() {
        let net = CapsNet::build(small_config(), 3).unwrap();
        let g = net.geometry();
        assert_eq!((g.stem_h, g.g1, g.n_in), (8, 3, 18));
        let img = Tensor::full(&[12, 12, 1], 0.5);
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &img).unwrap();
        assert_eq!(tape.shape(fwd.primary), [18, 4]);
        for row in tape.value(fwd.primary).rows() {
            assert!(row.iter().map(|x| x * x).sum::<f64>().sqrt() < 1.0);
        }
        assert_eq!(tape.shape(fwd.routing.outputs), [3, 4]);
    }

    #[test]
    fn zero_stem_gives_zero_capsules() {
        let net = CapsNet::build(small_config(), 3).unwrap();
        let mut tape = Tape::new();
        let stem = tape.constant(Tensor::zeros(&[8, 8, 4]));
        let p = net.primary_capsules_forward(&mut tape, stem).unwrap();
        assert!(tape.value(p).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decoder_of_zeros_is_half() {
        let mut net = CapsNet::build(small_config(), 3).unwrap();
        for p in net.params_mut().iter_mut().filter(|p| p.name.starts_with("decoder")) {
            p.value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[12]));
        let r = net.reconstruction_decode(&mut tape, z).unwrap();
        assert_eq!(tape.shape(r), [12, 12, 1]);
        assert!(tape.value(r).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn default_decoder_widths() {
        let cfg = CapsNetConfig::new(28, 28, 10);
        assert_eq!(cfg.decoder_hidden, [512, 1024]);
        assert!((cfg.recon_weight - 0.0005).abs() < 1e-18);
    }
}
