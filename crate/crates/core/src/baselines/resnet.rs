//! A small residual network: 3x3 stem, identity-shortcut residual blocks,
//! global average pooling and a linear classifier.

use rand::SeedableRng;

use crate::autodiff::{BackwardFault, BatchNormMode, HasParams, Padding, ParamId, ParamStore, Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::init::{self, ModelRng};
use crate::model::{argmax, stack_images, BatchResult, Classifier, NeuralModel, SampleOutcome};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct TinyResNetConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub channels: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl TinyResNetConfig {
    pub fn new(input_height: usize, input_width: usize, classes: usize) -> Self {
        Self {
            input_height,
            input_width,
            channels: 8,
            blocks: 4,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height < 3 || self.input_width < 3 {
            return Err(Error::InputTooSmall(format!(
                "{}x{} input is smaller than the 3x3 stem",
                self.input_height, self.input_width
            )));
        }
        if self.channels == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument("tiny_resnet: channels and classes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether batch norm uses batch statistics or the running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    slot: usize,
}

/// Parameter handles of one residual block.
#[derive(Clone, Copy, Debug)]
pub struct ResidualBlock {
    conv1: ParamId,
    bn1: BnLayer,
    conv2: ParamId,
    bn2: BnLayer,
}

#[derive(Clone, Debug, PartialEq)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TinyResNet {
    cfg: TinyResNetConfig,
    params: ParamStore,
    stem: ParamId,
    stem_bn: BnLayer,
    blocks: Vec<ResidualBlock>,
    fc: (ParamId, ParamId),
    running: Vec<RunningStats>,
    bn_names: Vec<String>,
}

/// Batch statistics observed during a training-mode forward pass.
type Observed = Vec<(usize, Vec<f64>, Vec<f64>)>;

impl TinyResNet {
    pub fn build(cfg: TinyResNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut bn_names = Vec::new();
        let ch = cfg.channels;
        let mut bn = |params: &mut ParamStore, name: String| {
            let gamma = params.add(format!("{name}.gamma"), Tensor::full(&[ch], 1.0));
            let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[ch]));
            running.push(RunningStats {
                mean: vec![0.0; ch],
                var: vec![1.0; ch],
            });
            bn_names.push(name);
            BnLayer {
                gamma,
                beta,
                slot: running.len() - 1,
            }
        };
        let stem = params.add("stem.kernel", init::scaled_uniform(&mut rng, &[3, 3, 1, ch], 9));
        let stem_bn = bn(&mut params, "stem.bn".into());
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let conv1 = params.add(
                format!("block{i}.conv1.kernel"),
                init::scaled_uniform(&mut rng, &[3, 3, ch, ch], 9 * ch),
            );
            let bn1 = bn(&mut params, format!("block{i}.bn1"));
            let conv2 = params.add(
                format!("block{i}.conv2.kernel"),
                init::scaled_uniform(&mut rng, &[3, 3, ch, ch], 9 * ch),
            );
            let bn2 = bn(&mut params, format!("block{i}.bn2"));
            blocks.push(ResidualBlock { conv1, bn1, conv2, bn2 });
        }
        let fc_w = params.add("fc.weights", init::scaled_uniform(&mut rng, &[ch, cfg.classes], ch));
        let fc_b = params.add("fc.bias", Tensor::zeros(&[cfg.classes]));
        Ok(Self {
            cfg,
            params,
            stem,
            stem_bn,
            blocks,
            fc: (fc_w, fc_b),
            running,
            bn_names,
        })
    }

    pub fn config(&self) -> &TinyResNetConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    fn batch_norm<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        x: Var,
        layer: BnLayer,
        phase: Phase,
        observed: &mut Observed,
    ) -> Result<Var> {
        let gamma = tape.param(&self.params, layer.gamma);
        let beta = tape.param(&self.params, layer.beta);
        let stats = &self.running[layer.slot];
        let mode = match phase {
            Phase::Train => BatchNormMode::Train,
            Phase::Eval => BatchNormMode::Eval {
                mean: &stats.mean,
                var: &stats.var,
            },
        };
        let out = tape.batch_norm(x, gamma, beta, mode, BN_EPS)?;
        if let (Some(m), Some(v)) = (out.batch_mean, out.batch_var) {
            observed.push((layer.slot, m, v));
        }
        Ok(out.out)
    }

    /// `relu(BN(conv(relu(BN(conv(x))))) + x)`.
    pub fn residual_block_forward<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        block: &ResidualBlock,
        x: Var,
        phase: Phase,
    ) -> Result<Var> {
        self.block_inner(tape, block, x, phase, &mut Vec::new())
    }

    fn block_inner<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        block: &ResidualBlock,
        x: Var,
        phase: Phase,
        observed: &mut Observed,
    ) -> Result<Var> {
        let k1 = tape.param(&self.params, block.conv1);
        let h = tape.conv2d(x, k1, 1, Padding::Same)?;
        let h = self.batch_norm(tape, h, block.bn1, phase, observed)?;
        let h = tape.relu(h);
        let k2 = tape.param(&self.params, block.conv2);
        let h = tape.conv2d(h, k2, 1, Padding::Same)?;
        let h = self.batch_norm(tape, h, block.bn2, phase, observed)?;
        let sum = tape.add(h, x)?;
        Ok(tape.relu(sum))
    }

    fn forward_inner<'t>(&'t self, tape: &mut Tape<'t>, x: Var, phase: Phase, observed: &mut Observed) -> Result<Var> {
        let shape = tape.shape(x);
        let spatial = &shape[shape.len().saturating_sub(3)..];
        if spatial != [self.cfg.input_height, self.cfg.input_width, 1] || !(3..=4).contains(&shape.len()) {
            return Err(Error::shape(
                "tiny_resnet",
                format!("{}x{}x1", self.cfg.input_height, self.cfg.input_width),
                format!("{shape:?}"),
            ));
        }
        let k = tape.param(&self.params, self.stem);
        let h = tape.conv2d(x, k, 1, Padding::Same)?;
        let h = self.batch_norm(tape, h, self.stem_bn, phase, observed)?;
        let mut h = tape.relu(h);
        for block in &self.blocks {
            h = self.block_inner(tape, block, h, phase, observed)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let w = tape.param(&self.params, self.fc.0);
        let b = tape.param(&self.params, self.fc.1);
        tape.fully_connected(pooled, w, b)
    }

    /// Logits for `H x W x 1` or `N x H x W x 1` input.
    pub fn forward<'t>(&'t self, tape: &mut Tape<'t>, x: Var, phase: Phase) -> Result<Var> {
        self.forward_inner(tape, x, phase, &mut Vec::new())
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant_ref(image);
        let out = self.forward(&mut tape, x, Phase::Eval)?;
        Ok(tape.value(out).clone())
    }

    fn update_running(&mut self, observed: Observed) {
        for (slot, mean, var) in observed {
            let r = &mut self.running[slot];
            for (rm, m) in r.mean.iter_mut().zip(&mean) {
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * m;
            }
            for (rv, v) in r.var.iter_mut().zip(&var) {
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
}

impl HasParams for TinyResNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Classifier for TinyResNet {
    fn num_classes(&self) -> usize {
        self.cfg.classes
    }

    fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(image)?.data()))
    }
}

impl NeuralModel for TinyResNet {
    fn batch_gradient(&mut self, batch: &[&Sample], fault: Option<BackwardFault>) -> Result<BatchResult> {
        let images = stack_images(batch)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let mut observed = Vec::new();
        let (result, observed) = {
            let mut tape = Tape::new().with_fault(fault);
            let x = tape.constant(images);
            let logits = self.forward_inner(&mut tape, x, Phase::Train, &mut observed)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let predictions = tape.value(logits).rows().map(argmax).collect();
            let value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?.into_param_grads(&self.params);
            (
                BatchResult {
                    loss: value,
                    predictions,
                    grads,
                },
                observed,
            )
        };
        self.update_running(observed);
        Ok(result)
    }

    fn evaluate(&self, sample: &Sample) -> Result<SampleOutcome> {
        let mut tape = Tape::new();
        let x = tape.constant_ref(&sample.image);
        let logits = self.forward(&mut tape, x, Phase::Eval)?;
        let loss = tape.softmax_cross_entropy(logits, &[sample.label])?;
        Ok(SampleOutcome {
            loss: tape.value(loss).data()[0],
            predicted: argmax(tape.value(logits).data()),
        })
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.running.len());
        for (name, r) in self.bn_names.iter().zip(&self.running) {
            out.push((format!("{name}.running_mean"), Tensor::from_vec(r.mean.clone())));
            out.push((format!("{name}.running_var"), Tensor::from_vec(r.var.clone())));
        }
        out
    }

    fn load_buffers(&mut self, blobs: &[(String, Tensor)]) -> Result<()> {
        for (name, r) in self.bn_names.iter().zip(self.running.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let key = format!("{name}.{suffix}");
                let (_, t) = blobs
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing buffer {key:?}")))?;
                if t.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("buffer {key:?} has {} values, expected {}", t.len(), dst.len())));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blocks_and_logit_length() {
        let mut cfg = TinyResNetConfig::new(8, 8, 5);
        cfg.blocks = 0;
        let net = TinyResNet::build(cfg, 0).unwrap();
        assert_eq!(net.logits(&Tensor::full(&[8, 8, 1], 0.3)).unwrap().shape(), [5]);
        assert_eq!(net.params().len(), 5);
    }

    #[test]
    fn zero_weight_path_is_relu_of_identity() {
        let mut net = TinyResNet::build(TinyResNetConfig::new(6, 6, 2), 1).unwrap();
        let block = net.blocks()[0];
        for name in ["block0.conv1.kernel", "block0.conv2.kernel"] {
            let id = net.params().find(name).unwrap();
            net.params_mut().get_mut(id).value.data_mut().fill(0.0);
        }
        let data: Vec<f64> = (0..6 * 6 * 8).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
        let x = Tensor::new(&[6, 6, 8], data).unwrap();
        for phase in [Phase::Train, Phase::Eval] {
            let mut tape = Tape::new();
            let xv = tape.constant_ref(&x);
            let out = net.residual_block_forward(&mut tape, &block, xv, phase).unwrap();
            assert_eq!(tape.value(out), &x.map(|v| v.max(0.0)));
        }
    }

    #[test]
    fn training_moves_running_stats_and_buffers_round_trip() {
        let mut net = TinyResNet::build(TinyResNetConfig::new(6, 6, 2), 1).unwrap();
        let s = Sample::new(Tensor::new(&[6, 6, 1], (0..36).map(|i| i as f64 / 36.0).collect()).unwrap(), 1, "");
        let before = net.buffers();
        net.batch_gradient(&[&s], None).unwrap();
        let after = net.buffers();
        assert_ne!(before, after);
        let mut fresh = TinyResNet::build(TinyResNetConfig::new(6, 6, 2), 1).unwrap();
        fresh.load_buffers(&after).unwrap();
        assert_eq!(fresh.buffers(), after);
    }
}
