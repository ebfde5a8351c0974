//! Parameter groups and the Adam optimizer with decoupled weight decay.

use crate::numerics::Matrix;

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Named set of parameters optimized (or frozen) together. Buffers hold
/// non-learnable state such as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Param>,
    pub buffers: Vec<(String, Matrix)>,
    pub frozen: bool,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        ParamGroup {
            name: name.into(),
            params: Vec::new(),
            buffers: Vec::new(),
            frozen: false,
        }
    }

    pub fn push(&mut self, name: &str, value: Matrix) {
        let full = format!("{}.{}", self.name, name);
        self.params.push(Param::new(full, value));
    }

    pub fn push_buffer(&mut self, name: &str, value: Matrix) {
        let full = format!("{}.{}", self.name, name);
        self.buffers.push((full, value));
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// FNV-1a over the bit patterns of every value and buffer.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for v in p.value.as_slice() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        for (name, b) in &self.buffers {
            h.write(name.as_bytes());
            for v in b.as_slice() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

/// Result of [`adam_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The group is frozen; nothing was touched.
    SkippedFrozen,
}

impl AdamState {
    pub fn new(group: &ParamGroup, lr: f64, weight_decay: f64) -> Self {
        let zeros = || {
            group
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

/// One Adam update. Weight decay is decoupled: `w ← w − lr·wd·w` precedes
/// the bias-corrected moment step.
pub fn adam_step(group: &mut ParamGroup, state: &mut AdamState) -> StepOutcome {
    if group.frozen {
        log::warn!("adam_step called on frozen group '{}'; ignored", group.name);
        return StepOutcome::SkippedFrozen;
    }
    assert_eq!(
        group.params.len(),
        state.first.len(),
        "optimizer state built for a different group"
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, wd, eps) = (
        state.beta1,
        state.beta2,
        state.lr,
        state.weight_decay,
        state.eps,
    );
    for ((p, m), v) in group
        .params
        .iter_mut()
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let w = p.value.as_mut_slice();
        let g = p.grad.as_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for i in 0..w.len() {
            if wd != 0.0 {
                w[i] -= lr * wd * w[i];
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    StepOutcome::Applied
}
