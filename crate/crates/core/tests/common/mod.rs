//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use accordion::arch::{AccordionModel, ArchSpec, Scheme};
use accordion::data::Dataset;
use accordion::nncore::{
    dense_backward, dense_forward, relu, relu_backward, sgd_step, softmax_xent, ParamSet, RngState, Tensor,
};
use accordion::profile::ProfileTable;
use accordion::protocol::Endpoint;
use accordion::train::{TrainConfig, SHUFFLE_STREAM_BASE};
use accordion::wire;
use rand::seq::SliceRandom;

/// Architecture whose full model is exactly 2,500,000 parameters (80 Mbit of
/// `f32` payload, a 10 MB model) and whose first four units (block 1 under
/// CoML) bring it to exactly 1,500,000 parameters (48 Mbit, 60 %).
pub fn fig2_spec() -> ArchSpec {
    ArchSpec {
        input_dim: 39,
        block_widths: vec![430, 344, 79],
        units_per_block: 4,
        num_classes: 2,
        bits_per_param: 32,
    }
}

/// Synthetic errors that fall with `n`; sizes come from the real accounting.
pub fn fig2_error(n: usize, total: usize) -> f64 {
    0.05 + 0.4 * (1.0 - n as f64 / total as f64)
}

pub fn fig2_endpoint() -> Endpoint {
    let spec = fig2_spec();
    let model = AccordionModel::build(spec.clone(), 2024).unwrap();
    let id = hex::encode(wire::model_id(&model));
    let total = spec.total_units();
    let table = ProfileTable::from_accounting(&spec, id, "synthetic", &Scheme::ALL, |c| {
        Ok(fig2_error(c.kept_units, total))
    })
    .unwrap();
    Endpoint::new(model, &table).unwrap()
}

pub fn small_spec() -> ArchSpec {
    ArchSpec {
        input_dim: 2,
        block_widths: vec![8, 8, 4],
        units_per_block: 3,
        num_classes: 3,
        bits_per_param: 64,
    }
}

pub fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = RngState::new(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// A residual network with no notion of skipping: every unit always runs.
/// Parameters are looked up by name in a copy of the model's parameter set.
/// Width changes are supported only as pair averaging.
pub struct NoSkipNet {
    pub params: ParamSet<f32>,
    blocks: usize,
    units: usize,
}

struct Cache {
    x: Tensor<f32>,
    stem_pre: Tensor<f32>,
    /// Per unit: input plus the hidden pre-activation and activation.
    units: Vec<(Tensor<f32>, Tensor<f32>, Tensor<f32>)>,
    block_in_widths: Vec<usize>,
    head_in: Tensor<f32>,
}

fn halve(x: &Tensor<f32>) -> Tensor<f32> {
    let cols = x.cols() / 2;
    let mut out = Vec::new();
    for r in 0..x.rows() {
        let row = x.row(r);
        for j in 0..cols {
            out.push((row[2 * j] + row[2 * j + 1]) * 0.5);
        }
    }
    Tensor::matrix(x.rows(), cols, out).unwrap()
}

fn unhalve(dy: &Tensor<f32>) -> Tensor<f32> {
    let mut out = Vec::new();
    for r in 0..dy.rows() {
        for &g in dy.row(r) {
            out.push(g * 0.5);
            out.push(g * 0.5);
        }
    }
    Tensor::matrix(dy.rows(), dy.cols() * 2, out).unwrap()
}

impl NoSkipNet {
    pub fn from_model(model: &AccordionModel<f32>) -> Self {
        let spec = model.spec();
        for w in spec.block_widths.windows(2) {
            assert!(w[0] == w[1] || w[0] == 2 * w[1], "oracle handles identity and halving only");
        }
        let mut params = model.params().clone();
        let names: Vec<String> = params.iter().map(|(_, n, _)| n.to_string()).collect();
        for n in names {
            let id = params.id(&n).unwrap();
            params.set_trainable(id, true);
        }
        Self {
            params,
            blocks: spec.num_blocks(),
            units: spec.units_per_block,
        }
    }

    fn v(&self, name: &str) -> &Tensor<f32> {
        self.params.value(self.params.id(name).unwrap())
    }

    fn forward_cached(&self, x: &Tensor<f32>) -> Cache {
        let stem_pre = dense_forward(self.v("stem.w"), self.v("stem.b"), x).unwrap();
        let mut h = relu(&stem_pre);
        let mut units = Vec::new();
        let mut block_in_widths = Vec::new();
        for b in 0..self.blocks {
            block_in_widths.push(h.cols());
            let w = self.v(&format!("unit.{b}.0.w1")).cols();
            if h.cols() != w {
                h = halve(&h);
            }
            for k in 0..self.units {
                let name = |p: &str| format!("unit.{b}.{k}.{p}");
                let z1 = dense_forward(self.v(&name("w1")), self.v(&name("b1")), &h).unwrap();
                let a1 = relu(&z1);
                let z2 = dense_forward(self.v(&name("w2")), self.v(&name("b2")), &a1).unwrap();
                let next: Vec<f32> = h.data().iter().zip(z2.data()).map(|(a, b)| *a + *b).collect();
                let next = Tensor::new(h.shape().to_vec(), next).unwrap();
                units.push((h, z1, a1));
                h = next;
            }
        }
        Cache {
            x: x.clone(),
            stem_pre,
            units,
            block_in_widths,
            head_in: h,
        }
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let c = self.forward_cached(x);
        dense_forward(self.v("head.w"), self.v("head.b"), &c.head_in).unwrap()
    }

    fn grad_into(&mut self, name: &str, g: Tensor<f32>) {
        let id = self.params.id(name).unwrap();
        self.params.entry_mut(id).grad = g;
    }

    /// One plain SGD step on the whole network; returns the loss.
    pub fn step(&mut self, x: &Tensor<f32>, y: &[usize], lr: f32, momentum: f32, wd: f32) -> f64 {
        let c = self.forward_cached(x);
        let logits = dense_forward(self.v("head.w"), self.v("head.b"), &c.head_in).unwrap();
        let (loss, dlogits) = softmax_xent(&logits, y).unwrap();

        let dense = |w: &Tensor<f32>, input: &Tensor<f32>, dy: &Tensor<f32>, want: bool| {
            let mut gw = Tensor::zeros(w.shape());
            let mut gb = Tensor::zeros(&[w.rows()]);
            let dx = dense_backward(w, input, dy, &mut gw, &mut gb, want).unwrap();
            (gw, gb, dx)
        };

        let (gw, gb, dh) = dense(self.v("head.w"), &c.head_in, &dlogits, true);
        self.grad_into("head.w", gw);
        self.grad_into("head.b", gb);
        let mut dh = dh.unwrap();
        for b in (0..self.blocks).rev() {
            for k in (0..self.units).rev() {
                let (h_in, z1, a1) = &c.units[b * self.units + k];
                let name = |p: &str| format!("unit.{b}.{k}.{p}");
                let (gw2, gb2, da1) = dense(self.v(&name("w2")), a1, &dh, true);
                let dz1 = relu_backward(z1, &da1.unwrap()).unwrap();
                let (gw1, gb1, dbranch) = dense(self.v(&name("w1")), h_in, &dz1, true);
                let sum: Vec<f32> = dh
                    .data()
                    .iter()
                    .zip(dbranch.unwrap().data())
                    .map(|(a, b)| *a + *b)
                    .collect();
                dh = Tensor::new(dh.shape().to_vec(), sum).unwrap();
                self.grad_into(&name("w1"), gw1);
                self.grad_into(&name("b1"), gb1);
                self.grad_into(&name("w2"), gw2);
                self.grad_into(&name("b2"), gb2);
            }
            if b > 0 && c.block_in_widths[b] != dh.cols() {
                dh = unhalve(&dh);
            }
        }
        let dstem = relu_backward(&c.stem_pre, &dh).unwrap();
        let (gw, gb, _) = dense(self.v("stem.w"), &c.x, &dstem, false);
        self.grad_into("stem.w", gw);
        self.grad_into("stem.b", gb);
        sgd_step(&mut self.params, lr, momentum, wd).unwrap();
        loss
    }

    /// Conventional mini-batch SGD with the same batching as the real loop.
    pub fn train(&mut self, data: &Dataset, cfg: &TrainConfig) -> Vec<f64> {
        let mut losses = Vec::new();
        for epoch in 0..cfg.epochs {
            let lr = cfg.schedule.lr_at(epoch) as f32;
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut RngState::stream(cfg.seed, SHUFFLE_STREAM_BASE + epoch as u64));
            let mut sum = 0.0;
            let mut count = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let (x, y) = data.batch(chunk);
                sum += self.step(&x, &y, lr, cfg.momentum as f32, cfg.weight_decay as f32);
                count += 1;
            }
            losses.push(sum / count as f64);
        }
        losses
    }
}
