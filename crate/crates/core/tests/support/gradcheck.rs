//! Central finite-difference checks for every differentiable operation.
//! Shared by the gradient tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wormloc::dsnt::{
    coord_grids, dsnt, dsnt_backward, js_divergence, js_divergence_grad, mse_coord_loss, softmax2d,
    softmax2d_backward, total_loss, Heatmap, LossConfig,
};
use wormloc::nn::{
    conv2d_backward, conv2d_forward, maxpool2_ceil, maxpool2_ceil_backward, relu, relu_backward, ArchConfig,
    ConvBlock, NetworkParams, Tensor3,
};
use wormloc::{KeypointPair, NormCoord};

pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
const FLOOR: f64 = 1e-6;
const H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub checks: usize,
    /// Coordinates where the function is not differentiable (one-sided
    /// slopes disagree), excluded from the comparison.
    pub skipped: usize,
    pub max_rel: f64,
}

impl OpReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            checks: 0,
            skipped: 0,
            max_rel: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel <= TOLERANCE && self.skipped * 20 <= self.checks.max(1)
    }

    /// Compares `analytic[i]` against central differences of `f` around `x`.
    fn compare(&mut self, x: &[f64], analytic: &[f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) {
        assert_eq!(x.len(), analytic.len());
        let mut work = x.to_vec();
        let f0 = f(&work);
        for i in 0..x.len() {
            work[i] = x[i] + h;
            let fp = f(&work);
            work[i] = x[i] - h;
            let fm = f(&work);
            work[i] = x[i];
            work[i] = x[i] + 2.0 * h;
            let fpp = f(&work);
            work[i] = x[i] - 2.0 * h;
            let fmm = f(&work);
            work[i] = x[i];
            // five-point stencil, truncation error O(h^4)
            let central = (8.0 * (fp - fm) - (fpp - fmm)) / (12.0 * h);
            self.checks += 1;
            // The gap between one-sided slopes shrinks with h on smooth
            // functions and stays put across a kink.
            let gap = (fp - 2.0 * f0 + fm) / h;
            if gap.abs() > 1e-8 {
                work[i] = x[i] + h / 2.0;
                let fp2 = f(&work);
                work[i] = x[i] - h / 2.0;
                let fm2 = f(&work);
                work[i] = x[i];
                let half_gap = (fp2 - 2.0 * f0 + fm2) / (h / 2.0);
                if half_gap.abs() > 0.75 * gap.abs() {
                    self.skipped += 1;
                    continue;
                }
            }
            let denom = analytic[i].abs().max(central.abs()).max(FLOOR);
            self.max_rel = self.max_rel.max((analytic[i] - central).abs() / denom);
        }
        self.instances += 1;
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> Heatmap {
    softmax2d(&Heatmap::from_logits(k, uniform(rng, k * k, -2.0, 2.0)))
}

pub fn check_conv2d(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("conv2d");
    for _ in 0..instances {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(2..7), rng.random_range(2..7));
        let x = Tensor3::new(cin, h, w, uniform(&mut rng, cin * h * w, -1.0, 1.0)).unwrap();
        let mut block = ConvBlock::<f64>::zeros(cout, cin);
        block.weight = uniform(&mut rng, block.weight.len(), -1.0, 1.0);
        block.bias = uniform(&mut rng, cout, -1.0, 1.0);
        let r = uniform(&mut rng, cout * h * w, -1.0, 1.0);

        let (_, cache) = conv2d_forward(&x, &block).unwrap();
        let mut grads = ConvBlock::<f64>::zeros(cout, cin);
        let grad_out = Tensor3::new(cout, h, w, r.clone()).unwrap();
        let dx = conv2d_backward(&cache, &block, &grad_out, &mut grads, true).unwrap().unwrap();

        let loss = |x: &Tensor3<f64>, b: &ConvBlock<f64>| dot(&conv2d_forward(x, b).unwrap().0.data, &r);
        report.compare(&x.data, &dx.data, H, &mut |v| {
            loss(&Tensor3::new(cin, h, w, v.to_vec()).unwrap(), &block)
        });
        report.compare(&block.weight, &grads.weight, H, &mut |v| {
            let mut b = block.clone();
            b.weight = v.to_vec();
            loss(&x, &b)
        });
        report.compare(&block.bias, &grads.bias, H, &mut |v| {
            let mut b = block.clone();
            b.bias = v.to_vec();
            loss(&x, &b)
        });
        report.instances -= 2;
    }
    report
}

pub fn check_relu(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("relu");
    for _ in 0..instances {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        // keep clear of the kink at zero
        let data: Vec<f64> = uniform(&mut rng, c * h * w, -1.0, 1.0)
            .into_iter()
            .map(|v| if v.abs() < 1e-2 { v + 0.1 } else { v })
            .collect();
        let x = Tensor3::new(c, h, w, data).unwrap();
        let r = uniform(&mut rng, c * h * w, -1.0, 1.0);
        let grad = relu_backward(&relu(&x), &Tensor3::new(c, h, w, r.clone()).unwrap());
        report.compare(&x.data, &grad.data, H, &mut |v| {
            dot(&relu(&Tensor3::new(c, h, w, v.to_vec()).unwrap()).data, &r)
        });
    }
    report
}

pub fn check_maxpool(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("maxpool2_ceil");
    for _ in 0..instances {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..8), rng.random_range(1..8));
        let x = Tensor3::new(c, h, w, uniform(&mut rng, c * h * w, -1.0, 1.0)).unwrap();
        let (out, cache) = maxpool2_ceil(&x);
        let r = uniform(&mut rng, out.data.len(), -1.0, 1.0);
        let grad_out = Tensor3::new(out.channels, out.height, out.width, r.clone()).unwrap();
        let grad = maxpool2_ceil_backward(&cache, &grad_out);
        report.compare(&x.data, &grad.data, H, &mut |v| {
            dot(&maxpool2_ceil(&Tensor3::new(c, h, w, v.to_vec()).unwrap()).0.data, &r)
        });
    }
    report
}

pub fn check_softmax(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("softmax2d");
    for _ in 0..instances {
        let k = rng.random_range(2..7);
        let z = uniform(&mut rng, k * k, -3.0, 3.0);
        let r = uniform(&mut rng, k * k, -1.0, 1.0);
        let grad = softmax2d_backward(&softmax2d(&Heatmap::from_logits(k, z.clone())), &r);
        report.compare(&z, &grad, H, &mut |v| {
            dot(softmax2d(&Heatmap::from_logits(k, v.to_vec())).values(), &r)
        });
    }
    report
}

pub fn check_dsnt(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("dsnt");
    for _ in 0..instances {
        let k = rng.random_range(2..8);
        let grids = coord_grids(k);
        let p = random_probs(&mut rng, k);
        let g = NormCoord::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let grad = dsnt_backward(&grids, g);
        // linear in P, so a step small enough to stay within the
        // normalization tolerance is exact up to rounding
        report.compare(p.values(), &grad, 1e-7, &mut |v| {
            let c = dsnt(&Heatmap::from_probabilities(k, v.to_vec()).unwrap(), &grids).unwrap();
            g.x * c.x + g.y * c.y
        });
    }
    report
}

pub fn check_mse(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("mse_coord_loss");
    let pair = |v: &[f64]| KeypointPair::new(NormCoord::new(v[0], v[1]), NormCoord::new(v[2], v[3]));
    for _ in 0..instances {
        let pred = uniform(&mut rng, 4, -1.0, 1.0);
        let gt = pair(&uniform(&mut rng, 4, -1.0, 1.0));
        let (_, g) = mse_coord_loss(&pair(&pred), &gt);
        let analytic = [g.head.x, g.head.y, g.tail.x, g.tail.y];
        report.compare(&pred, &analytic, H, &mut |v| mse_coord_loss(&pair(v), &gt).0);
    }
    report
}

pub fn check_js(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("js_divergence");
    for _ in 0..instances {
        let k = rng.random_range(2..7);
        let p = random_probs(&mut rng, k);
        let q = random_probs(&mut rng, k);
        let grad = js_divergence_grad(&p, &q);
        report.compare(p.values(), &grad, H, &mut |v| {
            js_divergence(&Heatmap::from_logits(k, v.to_vec()), &q)
        });
    }
    report
}

fn random_gt(rng: &mut ChaCha8Rng) -> KeypointPair<NormCoord> {
    let mut c = || NormCoord::new(rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95));
    KeypointPair::new(c(), c())
}

pub fn check_total_loss(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("total_loss");
    for _ in 0..instances {
        let k = rng.random_range(2..7);
        let cfg = LossConfig {
            lambda_js: rng.random_range(0.0..2.0),
            sigma_hm: rng.random_range(0.3..1.5),
        };
        let gt = random_gt(&mut rng);
        let z = uniform(&mut rng, 2 * k * k, -3.0, 3.0);
        let split = |v: &[f64]| {
            KeypointPair::new(
                Heatmap::from_logits(k, v[..k * k].to_vec()),
                Heatmap::from_logits(k, v[k * k..].to_vec()),
            )
        };
        let out = total_loss(&split(&z), &gt, &cfg).unwrap();
        let analytic: Vec<f64> = out.grad.head.iter().chain(&out.grad.tail).copied().collect();
        report.compare(&z, &analytic, H, &mut |v| total_loss(&split(v), &gt, &cfg).unwrap().loss);
    }
    report
}

/// Full pipeline: image → network → total loss, against every parameter.
pub fn check_network(instances: usize, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport::new("network");
    let arch = ArchConfig {
        input_size: 14,
        in_channels: 1,
        trunk_channels: vec![2, 3],
        heatmap_size: 4,
    };
    let cfg = LossConfig::default();
    for _ in 0..instances {
        let params = NetworkParams::<f64>::init(&arch, &mut rng).unwrap();
        let mut params = params;
        for b in params.blocks_mut() {
            b.bias = uniform(&mut rng, b.bias.len(), -0.1, 0.1);
        }
        let input = Tensor3::new(1, 14, 14, uniform(&mut rng, 196, 0.0, 1.0)).unwrap();
        let gt = random_gt(&mut rng);
        let loss_of = |p: &NetworkParams<f64>| -> (f64, KeypointPair<Vec<f64>>, wormloc::nn::ForwardCache<f64>) {
            let (z, cache) = p.forward_tensor(&input).unwrap();
            let maps = z.map(|v| Heatmap::from_logits(4, v));
            let out = total_loss(&maps, &gt, &cfg).unwrap();
            (out.loss, out.grad, cache)
        };
        let (_, grad_z, cache) = loss_of(&params);
        let grads = params.backward(&cache, &grad_z).unwrap();

        let flat = |p: &NetworkParams<f64>| -> Vec<f64> {
            p.blocks().flat_map(|b| b.weight.iter().chain(&b.bias).copied()).collect()
        };
        let unflat = |v: &[f64]| -> NetworkParams<f64> {
            let mut p = params.clone();
            let mut i = 0;
            for b in p.blocks_mut() {
                for w in b.weight.iter_mut().chain(b.bias.iter_mut()) {
                    *w = v[i];
                    i += 1;
                }
            }
            p
        };
        report.compare(&flat(&params), &flat(&grads), H, &mut |v| loss_of(&unflat(v)).0);
    }
    report
}

pub fn check_all(instances: usize, seed: u64) -> Vec<OpReport> {
    vec![
        check_conv2d(instances, seed),
        check_relu(instances, seed + 1),
        check_maxpool(instances, seed + 2),
        check_softmax(instances, seed + 3),
        check_dsnt(instances, seed + 4),
        check_mse(instances, seed + 5),
        check_js(instances, seed + 6),
        check_total_loss(instances, seed + 7),
        check_network(instances, seed + 8),
    ]
}
