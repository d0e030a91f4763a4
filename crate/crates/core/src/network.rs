//! The 1→32→32→1 tanh network used by every PINN branch, its hard initial
//! condition, and the positive reparameterisation of the physical unknowns.
//!
//! The network sees `t / T_norm` and its raw output `N` is turned into a signal
//! estimate `ŝ(t) = S_norm · tanh(t / T_norm) · N(t / T_norm)`, which vanishes at
//! `t = 0` for every weight setting. The time derivative `dŝ/dt` is obtained by
//! pushing a forward-mode tangent through the layers alongside the values; both
//! are recorded on the tape, so reverse sweeps differentiate through `dŝ/dt` too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Tape, Tensor, Var};

/// Hidden layer width.
pub const HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPinn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    /// Time normalisation, ms.
    pub t_norm: f64,
    /// Output scale, signal units.
    pub s_norm: f64,
}

/// Handles to the network weights on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl MlpPinn {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot(seed: u64, t_norm: f64, s_norm: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Tensor::new(fan_in, fan_out, data)
        };
        let w1 = dense(1, HIDDEN);
        let w2 = dense(HIDDEN, HIDDEN);
        let w3 = dense(HIDDEN, 1);
        Self {
            w1,
            b1: Tensor::zeros(1, HIDDEN),
            w2,
            b2: Tensor::zeros(1, HIDDEN),
            w3,
            b3: Tensor::zeros(1, 1),
            t_norm,
            s_norm,
        }
    }

    pub fn zeroed(t_norm: f64, s_norm: f64) -> Self {
        Self {
            w1: Tensor::zeros(1, HIDDEN),
            b1: Tensor::zeros(1, HIDDEN),
            w2: Tensor::zeros(HIDDEN, HIDDEN),
            b2: Tensor::zeros(1, HIDDEN),
            w3: Tensor::zeros(HIDDEN, 1),
            b3: Tensor::zeros(1, 1),
            t_norm,
            s_norm,
        }
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// Puts the weights on `tape`, as leaves when `trainable` and as constants otherwise.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> NetVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        NetVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
            w3: put(&self.w3),
            b3: put(&self.b3),
        }
    }

    /// Records `ŝ` and `dŝ/dt` at `times` (ms). Both outputs are `n×1` columns.
    pub fn record_outputs(&self, tape: &mut Tape, vars: &NetVars, times: &[f64]) -> (Var, Var) {
        let n = times.len();
        let inv_t = 1.0 / self.t_norm;
        let x = tape.constant(Tensor::column(times.iter().map(|t| t * inv_t).collect()));
        let dx = tape.constant(Tensor::column(vec![inv_t; n]));

        let z1 = tape.matmul(x, vars.w1);
        let z1 = tape.add_row(z1, vars.b1);
        let h1 = tape.tanh(z1);
        let dz1 = tape.matmul(dx, vars.w1);
        let dh1 = tape.tanh_tangent(h1, dz1);

        let z2 = tape.matmul(h1, vars.w2);
        let z2 = tape.add_row(z2, vars.b2);
        let h2 = tape.tanh(z2);
        let dz2 = tape.matmul(dh1, vars.w2);
        let dh2 = tape.tanh_tangent(h2, dz2);

        let out = tape.matmul(h2, vars.w3);
        let out = tape.add_row(out, vars.b3);
        let dout = tape.matmul(dh2, vars.w3);

        // ŝ = S·φ·N and dŝ/dt = S·(φ'·N + φ·dN/dt) with φ = tanh(t/T).
        let (gate, dgate): (Vec<f64>, Vec<f64>) = times
            .iter()
            .map(|&t| {
                let phi = (t * inv_t).tanh();
                (self.s_norm * phi, self.s_norm * (1.0 - phi * phi) * inv_t)
            })
            .unzip();
        let gate = tape.constant(Tensor::column(gate));
        let dgate = tape.constant(Tensor::column(dgate));
        let s_hat = tape.mul(gate, out);
        let a = tape.mul(dgate, out);
        let b = tape.mul(gate, dout);
        let ds_hat = tape.add(a, b);
        (s_hat, ds_hat)
    }

    /// Signal estimate and its time derivative at each of `times`.
    ///
    /// Computes what [`record_outputs`](Self::record_outputs) records, without a
    /// tape and a few rows at a time so the activations stay in cache.
    pub fn evaluate(&self, times: &[f64]) -> (Vec<f64>, Vec<f64>) {
        const ROWS: usize = 8;
        const BLOCK: usize = ROWS * HIDDEN;
        let inv_t = 1.0 / self.t_norm;
        let (w1, b1, w2, b2, w3) = (
            self.w1.data(),
            self.b1.data(),
            self.w2.data(),
            self.b2.data(),
            self.w3.data(),
        );
        let b3 = self.b3.data()[0];
        let mut s_hat = Vec::with_capacity(times.len());
        let mut ds_hat = Vec::with_capacity(times.len());
        let (mut z, mut h1, mut dh1, mut h2, mut dz) =
            ([0.0; BLOCK], [0.0; BLOCK], [0.0; BLOCK], [0.0; BLOCK], [0.0; BLOCK]);
        let (mut out, mut dout) = ([0.0; ROWS], [0.0; ROWS]);
        for chunk in times.chunks(ROWS) {
            let (rows, len) = (chunk.len(), chunk.len() * HIDDEN);
            for (r, &t) in chunk.iter().enumerate() {
                let x = t * inv_t;
                for j in 0..HIDDEN {
                    z[r * HIDDEN + j] = x * w1[j] + b1[j];
                }
            }
            kernels::tanh(&z[..len], &mut h1[..len]);
            for (d, h) in dh1[..len].iter_mut().zip(&h1[..len]) {
                *d = 1.0 - h * h;
            }
            for row in dh1[..len].chunks_exact_mut(HIDDEN) {
                for (d, w) in row.iter_mut().zip(w1) {
                    *d *= inv_t * w;
                }
            }

            z[..len].fill(0.0);
            kernels::matmul(&h1[..len], w2, &mut z[..len], rows, HIDDEN, HIDDEN);
            for row in z[..len].chunks_exact_mut(HIDDEN) {
                for (v, b) in row.iter_mut().zip(b2) {
                    *v += b;
                }
            }
            kernels::tanh(&z[..len], &mut h2[..len]);
            dz[..len].fill(0.0);
            kernels::matmul(&dh1[..len], w2, &mut dz[..len], rows, HIDDEN, HIDDEN);
            for (d, h) in dz[..len].iter_mut().zip(&h2[..len]) {
                *d *= 1.0 - h * h;
            }

            out[..rows].fill(0.0);
            dout[..rows].fill(0.0);
            kernels::matmul(&h2[..len], w3, &mut out[..rows], rows, HIDDEN, 1);
            kernels::matmul(&dz[..len], w3, &mut dout[..rows], rows, HIDDEN, 1);
            for (r, &t) in chunk.iter().enumerate() {
                let phi = (t * inv_t).tanh();
                let gate = self.s_norm * phi;
                let dgate = self.s_norm * (1.0 - phi * phi) * inv_t;
                let n = out[r] + b3;
                s_hat.push(gate * n);
                ds_hat.push(dgate * n + gate * dout[r]);
            }
        }
        (s_hat, ds_hat)
    }

    /// `ŝ(t)`. Exactly zero at `t = 0`.
    pub fn forward(&self, t: f64) -> f64 {
        self.evaluate(&[t]).0[0]
    }

    /// `dŝ/dt` at `t`.
    pub fn grad_wrt_time(&self, t: f64) -> f64 {
        self.evaluate(&[t]).1[0]
    }
}

/// Index of each physical unknown inside [`TrainablePhysical`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Physical {
    Cbf = 0,
    At = 1,
    T1b = 2,
}

/// Unconstrained trainables mapped to positive physical values by
/// `physical = scale · exp(raw)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainablePhysical {
    pub raw: [f64; 3],
    pub scale: [f64; 3],
    pub frozen: [bool; 3],
}

/// Raw values are clamped to this magnitude after every update.
pub const RAW_BOUND: f64 = 12.0;

impl TrainablePhysical {
    /// Starts at `raw = 0`, i.e. at the given scales.
    pub fn at_scales(cbf: f64, at: f64, t1b: f64) -> Self {
        Self {
            raw: [0.0; 3],
            scale: [cbf, at, t1b],
            frozen: [false; 3],
        }
    }

    pub fn value(&self, which: Physical) -> f64 {
        let i = which as usize;
        self.scale[i] * self.raw[i].exp()
    }

    pub fn cbf(&self) -> f64 {
        self.value(Physical::Cbf)
    }

    pub fn at(&self) -> f64 {
        self.value(Physical::At)
    }

    pub fn t1b(&self) -> f64 {
        self.value(Physical::T1b)
    }

    /// Smallest representable value of a parameter.
    pub fn lower_bound(&self, which: Physical) -> f64 {
        self.scale[which as usize] * (-RAW_BOUND).exp()
    }
}

/// Records `scale · exp(raw)` for a raw trainable held by `raw`.
pub fn record_positive(tape: &mut Tape, raw: Var, scale: f64) -> Var {
    let e = tape.exp(raw);
    tape.scale(e, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain-loop evaluation of the same network, sharing no code with the tape.
    fn oracle(net: &MlpPinn, t: f64) -> f64 {
        let x = t / net.t_norm;
        let w1 = net.w1.data();
        let b1 = net.b1.data();
        let h1: Vec<f64> = (0..HIDDEN).map(|j| (x * w1[j] + b1[j]).tanh()).collect();
        let w2 = net.w2.data();
        let b2 = net.b2.data();
        let h2: Vec<f64> = (0..HIDDEN)
            .map(|j| {
                let mut z = b2[j];
                for (i, h) in h1.iter().enumerate() {
                    z += h * w2[i * HIDDEN + j];
                }
                z.tanh()
            })
            .collect();
        let mut out = net.b3.data()[0];
        for (i, h) in h2.iter().enumerate() {
            out += h * net.w3.data()[i];
        }
        net.s_norm * x.tanh() * out
    }

    fn random_net(seed: u64) -> MlpPinn {
        let mut net = MlpPinn::glorot(seed, 3600.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        for b in [&mut net.b1, &mut net.b2, &mut net.b3] {
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        net
    }

    #[test]
    fn hard_initial_condition() {
        for seed in 0..20 {
            assert_eq!(random_net(seed).forward(0.0), 0.0);
        }
    }

    #[test]
    fn zero_network_is_zero_everywhere() {
        let net = MlpPinn::zeroed(3600.0, 5.0);
        for t in [0.0, 10.0, 1200.0, 3600.0] {
            assert_eq!(net.forward(t), 0.0);
            assert_eq!(net.grad_wrt_time(t), 0.0);
        }
    }

    #[test]
    fn forward_matches_plain_loop_oracle() {
        let net = random_net(11);
        let got = net.forward(1200.0);
        let want = oracle(&net, 1200.0);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn time_derivative_matches_central_difference() {
        let net = random_net(5);
        let h = 0.01;
        let fd = (net.forward(900.0 + h) - net.forward(900.0 - h)) / (2.0 * h);
        let ad = net.grad_wrt_time(900.0);
        assert!((fd - ad).abs() <= 1e-5 * ad.abs(), "{fd} vs {ad}");
    }

    #[test]
    fn time_derivative_at_origin_is_product_rule_limit() {
        let net = random_net(3);
        // dŝ/dt(0) = S·(1/T)·N(0) since tanh(0) = 0 and tanh'(0) = 1.
        let n0: f64 = {
            let h1: Vec<f64> = net.b1.data().iter().map(|b| b.tanh()).collect();
            let mut out = net.b3.data()[0];
            for j in 0..HIDDEN {
                let mut z = net.b2.data()[j];
                for (i, h) in h1.iter().enumerate() {
                    z += h * net.w2.data()[i * HIDDEN + j];
                }
                out += z.tanh() * net.w3.data()[j];
            }
            out
        };
        let want = net.s_norm / net.t_norm * n0;
        let got = net.grad_wrt_time(0.0);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-12));
    }

    #[test]
    fn direct_evaluation_matches_the_tape() {
        let net = random_net(13);
        let times: Vec<f64> = (0..37).map(|i| 97.0 * i as f64).collect();
        let mut tape = Tape::new();
        let vars = net.record(&mut tape, false);
        let (s, ds) = net.record_outputs(&mut tape, &vars, &times);
        let (s_direct, ds_direct) = net.evaluate(&times);
        for (a, b) in tape.value(s).data().iter().zip(&s_direct) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-3), "{a} vs {b}");
        }
        for (a, b) in tape.value(ds).data().iter().zip(&ds_direct) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = random_net(9);
        assert_eq!(net.forward(1234.5).to_bits(), net.forward(1234.5).to_bits());
        assert_eq!(MlpPinn::glorot(4, 1.0, 1.0), MlpPinn::glorot(4, 1.0, 1.0));
    }

    #[test]
    fn physical_values_are_positive() {
        let mut p = TrainablePhysical::at_scales(0.01, 900.0, 1800.0);
        assert_eq!(p.at(), 900.0);
        p.raw = [-RAW_BOUND, 3.0, -1.0];
        assert!(p.cbf() > 0.0 && p.cbf() == p.lower_bound(Physical::Cbf));
        assert!(p.t1b() > 0.0 && p.at() > 0.0);
    }
}
