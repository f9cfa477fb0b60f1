//! Modified LeNet-5: three valid 7x7 convolutions, each followed by ReLU and
//! 2x2 average pooling, then three fully connected layers.

use rand::SeedableRng;

use crate::autodiff::{BackwardFault, HasParams, Padding, ParamId, ParamStore, Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::init::{self, ModelRng};
use crate::model::{argmax, stack_images, BatchResult, Classifier, NeuralModel, SampleOutcome};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LeNetConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub kernel: usize,
    pub channels: [usize; 3],
    pub pool: usize,
    pub hidden: [usize; 2],
    pub classes: usize,
}

impl Default for LeNetConfig {
    fn default() -> Self {
        Self {
            input_height: 90,
            input_width: 90,
            kernel: 7,
            channels: [6, 16, 32],
            pool: 2,
            hidden: [300, 200],
            classes: 62,
        }
    }
}

impl LeNetConfig {
    pub fn new(input_height: usize, input_width: usize, classes: usize) -> Self {
        Self {
            input_height,
            input_width,
            classes,
            ..Self::default()
        }
    }

    /// Same layout with a different kernel size, for small inputs.
    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }

    /// Spatial size after the three conv/pool stages.
    fn feature_extent(&self, mut n: usize) -> Option<usize> {
        for _ in 0..3 {
            n = n.checked_sub(self.kernel)? + 1;
            n = n.checked_sub(self.pool)? / self.pool + 1;
        }
        Some(n)
    }

    /// Length of the flattened feature vector entering the first FC layer.
    pub fn flat_features(&self) -> Result<usize> {
        match (self.feature_extent(self.input_height), self.feature_extent(self.input_width)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(h * w * self.channels[2]),
            _ => Err(Error::InputTooSmall(format!(
                "{}x{} input is too small for three {k}x{k} conv + {p}x{p} pool stages",
                self.input_height,
                self.input_width,
                k = self.kernel,
                p = self.pool
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.kernel, self.pool, self.classes, self.hidden[0], self.hidden[1]];
        if all.iter().chain(&self.channels).any(|&v| v == 0) {
            return Err(Error::InvalidArgument(format!("lenet: every size must be >= 1: {self:?}")));
        }
        self.flat_features().map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct LeNet {
    cfg: LeNetConfig,
    params: ParamStore,
    convs: [(ParamId, ParamId); 3],
    fcs: [(ParamId, ParamId); 3],
}

/// Every intermediate of one forward pass, in layer order.
#[derive(Clone, Debug)]
pub struct LeNetTrace {
    pub layers: Vec<(&'static str, Var)>,
    pub logits: Var,
}

const LAYER_NAMES: [&str; 10] = [
    "conv1", "pool1", "conv2", "pool2", "conv3", "pool3", "flatten", "fc1", "fc2", "fc3",
];

impl LeNet {
    pub fn build(cfg: LeNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = cfg.kernel;
        let mut cin = 1;
        let mut convs = Vec::with_capacity(3);
        for (l, &cout) in cfg.channels.iter().enumerate() {
            let w = params.add(
                format!("conv{}.kernel", l + 1),
                init::scaled_uniform(&mut rng, &[k, k, cin, cout], k * k * cin),
            );
            let b = params.add(format!("conv{}.bias", l + 1), Tensor::zeros(&[cout]));
            convs.push((w, b));
            cin = cout;
        }
        let widths = [cfg.flat_features()?, cfg.hidden[0], cfg.hidden[1], cfg.classes];
        let mut fcs = Vec::with_capacity(3);
        for l in 0..3 {
            let w = params.add(
                format!("fc{}.weights", l + 1),
                init::scaled_uniform(&mut rng, &[widths[l], widths[l + 1]], widths[l]),
            );
            let b = params.add(format!("fc{}.bias", l + 1), Tensor::zeros(&[widths[l + 1]]));
            fcs.push((w, b));
        }
        Ok(Self {
            cfg,
            params,
            convs: convs.try_into().expect("three conv layers"),
            fcs: fcs.try_into().expect("three fc layers"),
        })
    }

    pub fn config(&self) -> &LeNetConfig {
        &self.cfg
    }

    /// Forward pass over `H x W x 1` or `N x H x W x 1` input.
    pub fn forward_trace<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<LeNetTrace> {
        let shape = tape.shape(x).to_vec();
        let spatial = &shape[shape.len().saturating_sub(3)..];
        if spatial != [self.cfg.input_height, self.cfg.input_width, 1] || !(3..=4).contains(&shape.len()) {
            return Err(Error::shape(
                "lenet",
                format!("{}x{}x1", self.cfg.input_height, self.cfg.input_width),
                format!("{shape:?}"),
            ));
        }
        let batch = (shape.len() == 4).then(|| shape[0]);
        let mut layers = Vec::with_capacity(10);
        let mut h = x;
        for &(w, b) in &self.convs {
            let wv = tape.param(&self.params, w);
            let bv = tape.param(&self.params, b);
            let conv = tape.conv2d(h, wv, 1, Padding::Valid)?;
            let biased = tape.add_bias(conv, bv)?;
            let act = tape.relu(biased);
            layers.push(act);
            h = tape.avg_pool(act, self.cfg.pool, self.cfg.pool)?;
            layers.push(h);
        }
        let flat = self.cfg.flat_features()?;
        h = match batch {
            Some(n) => tape.reshape(h, &[n, flat])?,
            None => tape.reshape(h, &[flat])?,
        };
        layers.push(h);
        for (l, &(w, b)) in self.fcs.iter().enumerate() {
            let wv = tape.param(&self.params, w);
            let bv = tape.param(&self.params, b);
            h = tape.fully_connected(h, wv, bv)?;
            if l < 2 {
                h = tape.relu(h);
            }
            layers.push(h);
        }
        Ok(LeNetTrace {
            layers: LAYER_NAMES.iter().copied().zip(layers).collect(),
            logits: h,
        })
    }

    pub fn forward<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, x)?.logits)
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant_ref(image);
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Shapes of all ten intermediates for one image.
    pub fn shape_chain(&self) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let image = Tensor::zeros(&[self.cfg.input_height, self.cfg.input_width, 1]);
        let mut tape = Tape::new();
        let x = tape.constant_ref(&image);
        let trace = self.forward_trace(&mut tape, x)?;
        Ok(trace.layers.iter().map(|&(n, v)| (n, tape.shape(v).to_vec())).collect())
    }
}

impl HasParams for LeNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Classifier for LeNet {
    fn num_classes(&self) -> usize {
        self.cfg.classes
    }

    fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(image)?.data()))
    }
}

impl NeuralModel for LeNet {
    fn batch_gradient(&mut self, batch: &[&Sample], fault: Option<BackwardFault>) -> Result<BatchResult> {
        let images = stack_images(batch)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let mut tape = Tape::new().with_fault(fault);
        let x = tape.constant(images);
        let logits = self.forward(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let predictions = tape.value(logits).rows().map(argmax).collect();
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?.into_param_grads(&self.params);
        Ok(BatchResult {
            loss: value,
            predictions,
            grads,
        })
    }

    fn evaluate(&self, sample: &Sample) -> Result<SampleOutcome> {
        let mut tape = Tape::new();
        let x = tape.constant_ref(&sample.image);
        let logits = self.forward(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, &[sample.label])?;
        Ok(SampleOutcome {
            loss: tape.value(loss).data()[0],
            predicted: argmax(tape.value(logits).data()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_inputs_are_rejected() {
        assert!(LeNet::build(LeNetConfig::new(40, 90, 10), 0).is_err());
        assert!(LeNetConfig::new(90, 90, 62).flat_features().unwrap() == 1152);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut net = LeNet::build(LeNetConfig::new(32, 32, 5).with_kernel(3), 0).unwrap();
        for p in net.params_mut().iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let img = Tensor::full(&[32, 32, 1], 0.7);
        assert!(net.logits(&img).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_and_single_forward_agree() {
        let net = LeNet::build(LeNetConfig::new(32, 32, 4).with_kernel(3), 3).unwrap();
        let samples: Vec<Sample> = (0..3)
            .map(|i| {
                let data = (0..1024).map(|p| ((p * (i + 3)) % 17) as f64 / 17.0).collect();
                Sample::new(Tensor::new(&[32, 32, 1], data).unwrap(), i, "")
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let images = stack_images(&refs).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = net.forward(&mut tape, x).unwrap();
        let batched = tape.value(out).clone();
        for (i, s) in samples.iter().enumerate() {
            let single = net.logits(&s.image).unwrap();
            for (a, b) in single.data().iter().zip(&batched.data()[i * 4..(i + 1) * 4]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
