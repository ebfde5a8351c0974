use serde::{Deserialize, Serialize};

use crate::error::{GtlError, Result};
use crate::numerics::{BatchNormState, Matrix, ParamGroup, SeededRng};

/// Layer widths of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Feature dimension of the input vectors.
    pub input: usize,
    /// Width of the intrinsic concept `z_c`.
    pub concept: usize,
    /// Width of the in-modality disturbance `z_m`.
    pub disturbance: usize,
    /// Hidden width of encoder and generator.
    pub hidden: usize,
    /// Number of latent domains (gated expert maps).
    pub domains: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input: 1280,
            concept: 128,
            disturbance: 64,
            hidden: 256,
            domains: 128,
            classes: 2,
        }
    }
}

impl ModelDims {
    pub fn latent(&self) -> usize {
        self.concept + self.disturbance
    }

    /// The classifier's hidden layer has the width of the feature space.
    pub fn classifier_hidden(&self) -> usize {
        self.input
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if v == 0 {
                return Err(GtlError::Validation(format!("model dim {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, usize); 6] {
        [
            ("input", self.input),
            ("concept", self.concept),
            ("disturbance", self.disturbance),
            ("hidden", self.hidden),
            ("domains", self.domains),
            ("classes", self.classes),
        ]
    }

    /// Compares the representation dims (everything but the class count)
    /// and names the first mismatch.
    pub fn check_compatible(&self, other: &ModelDims) -> Result<()> {
        for ((name, a), (_, b)) in self.named().iter().zip(other.named()) {
            if *name != "classes" && *a != b {
                return Err(GtlError::Validation(format!(
                    "model dim '{name}' mismatch: expected {a}, checkpoint has {b}"
                )));
            }
        }
        Ok(())
    }
}

// Parameter indices inside each group. Kept in one place so the forward,
// backward and checkpoint code agree on layout.
pub(crate) mod idx {
    pub const ENC_W: usize = 0;
    pub const ENC_B: usize = 1;
    pub const ENC_GAMMA: usize = 2;
    pub const ENC_BETA: usize = 3;
    pub const MU_W: usize = 4;
    pub const MU_B: usize = 5;
    pub const LV_W: usize = 6;
    pub const LV_B: usize = 7;

    pub const GATE_W: usize = 0;
    pub const GATE_B: usize = 1;
    pub const EXP_W: usize = 2;
    pub const EXP_B: usize = 3;

    pub const AGG_W: usize = 0;
    pub const AGG_B: usize = 1;

    pub const GEN_W: usize = 0;
    pub const GEN_B: usize = 1;
    pub const GEN_GAMMA: usize = 2;
    pub const GEN_BETA: usize = 3;
    pub const OUT_W: usize = 4;
    pub const OUT_B: usize = 5;

    pub const CLS_W1: usize = 0;
    pub const CLS_B1: usize = 1;
    pub const CLS_W2: usize = 2;
    pub const CLS_B2: usize = 3;

    pub const RUN_MEAN: usize = 0;
    pub const RUN_VAR: usize = 1;
}

pub const ENCODER: &str = "encoder";
pub const DISTURBANCE: &str = "disturbance";
pub const AGGREGATOR: &str = "aggregator";
pub const GENERATOR: &str = "generator";
pub const CLASSIFIER: &str = "classifier";

/// All learnable parameters of the network, one group per role:
/// posterior encoder, disturbance estimator (gate + experts), aggregator,
/// generator and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct GtlParams {
    pub dims: ModelDims,
    pub encoder: ParamGroup,
    pub disturbance: ParamGroup,
    pub aggregator: ParamGroup,
    pub generator: ParamGroup,
    pub classifier: ParamGroup,
    /// Dataset label carried by each classifier output index.
    pub class_labels: Vec<u32>,
}

/// PyTorch-style default init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
/// weight and bias.
fn uniform_dense(group: &mut ParamGroup, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    let b: Vec<f64> = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
    group.push(&format!("{name}.weight"), Matrix::from_vec(fan_in, fan_out, w).expect("sized"));
    group.push(&format!("{name}.bias"), Matrix::row_vector(b));
}

fn push_batchnorm(group: &mut ParamGroup, name: &str, features: usize) {
    let bn = BatchNormState::new(features);
    group.push(&format!("{name}.gamma"), bn.gamma);
    group.push(&format!("{name}.beta"), bn.beta);
    group.push_buffer(&format!("{name}.running_mean"), bn.running_mean);
    group.push_buffer(&format!("{name}.running_var"), bn.running_var);
}

impl GtlParams {
    /// Fresh parameters. The classifier takes `z_c` as input.
    pub fn init(dims: ModelDims, rng: &mut SeededRng) -> Result<Self> {
        Self::init_with_classifier_input(dims, dims.concept, rng)
    }

    pub fn init_with_classifier_input(
        dims: ModelDims,
        classifier_input: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        dims.validate()?;
        let l = dims.latent();

        let mut encoder = ParamGroup::new(ENCODER);
        uniform_dense(&mut encoder, "hidden", dims.input, dims.hidden, rng);
        push_batchnorm(&mut encoder, "bn", dims.hidden);
        uniform_dense(&mut encoder, "mu", dims.hidden, l, rng);
        uniform_dense(&mut encoder, "logvar", dims.hidden, l, rng);

        let mut disturbance = ParamGroup::new(DISTURBANCE);
        uniform_dense(&mut disturbance, "gate", dims.hidden, dims.domains, rng);
        // d expert maps H→Nm stored side by side as one H×(d·Nm) matrix
        uniform_dense(
            &mut disturbance,
            "experts",
            dims.hidden,
            dims.domains * dims.disturbance,
            rng,
        );

        let mut aggregator = ParamGroup::new(AGGREGATOR);
        uniform_dense(&mut aggregator, "dense", 2 * dims.disturbance, dims.disturbance, rng);

        let mut generator = ParamGroup::new(GENERATOR);
        uniform_dense(&mut generator, "hidden", l, dims.hidden, rng);
        push_batchnorm(&mut generator, "bn", dims.hidden);
        uniform_dense(&mut generator, "out", dims.hidden, dims.input, rng);

        let mut params = GtlParams {
            dims,
            encoder,
            disturbance,
            aggregator,
            generator,
            classifier: ParamGroup::new(CLASSIFIER),
            class_labels: (0..dims.classes as u32).collect(),
        };
        params.reset_classifier(classifier_input, (0..dims.classes as u32).collect(), rng)?;
        Ok(params)
    }

    /// Replaces the classifier with a freshly initialized one for a new
    /// label set. Nothing of the previous classifier survives.
    pub fn reset_classifier(
        &mut self,
        input: usize,
        labels: Vec<u32>,
        rng: &mut SeededRng,
    ) -> Result<()> {
        if labels.is_empty() {
            return Err(GtlError::Validation("classifier needs at least one class".into()));
        }
        let mut cls = ParamGroup::new(CLASSIFIER);
        uniform_dense(&mut cls, "hidden", input, self.dims.classifier_hidden(), rng);
        uniform_dense(&mut cls, "out", self.dims.classifier_hidden(), labels.len(), rng);
        self.classifier = cls;
        self.dims.classes = labels.len();
        self.class_labels = labels;
        Ok(())
    }

    pub fn classifier_input(&self) -> usize {
        self.classifier.params[idx::CLS_W1].value.rows()
    }

    pub fn groups(&self) -> [&ParamGroup; 5] {
        [
            &self.encoder,
            &self.disturbance,
            &self.aggregator,
            &self.generator,
            &self.classifier,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut ParamGroup; 5] {
        [
            &mut self.encoder,
            &mut self.disturbance,
            &mut self.aggregator,
            &mut self.generator,
            &mut self.classifier,
        ]
    }

    /// Moves the groups out as a vector (for gradient checking) ...
    pub fn into_groups(self) -> (ModelDims, Vec<u32>, Vec<ParamGroup>) {
        (
            self.dims,
            self.class_labels,
            vec![
                self.encoder,
                self.disturbance,
                self.aggregator,
                self.generator,
                self.classifier,
            ],
        )
    }

    /// ... and back.
    pub fn from_groups(dims: ModelDims, class_labels: Vec<u32>, groups: Vec<ParamGroup>) -> Result<Self> {
        let mut it = groups.into_iter();
        let mut next = |name: &str| -> Result<ParamGroup> {
            let g = it
                .next()
                .ok_or_else(|| GtlError::Validation(format!("missing parameter group '{name}'")))?;
            if g.name != name {
                return Err(GtlError::Validation(format!(
                    "expected group '{name}', found '{}'",
                    g.name
                )));
            }
            Ok(g)
        };
        let p = GtlParams {
            dims,
            encoder: next(ENCODER)?,
            disturbance: next(DISTURBANCE)?,
            aggregator: next(AGGREGATOR)?,
            generator: next(GENERATOR)?,
            classifier: next(CLASSIFIER)?,
            class_labels,
        };
        p.validate_shapes()?;
        Ok(p)
    }

    pub fn zero_grad(&mut self) {
        for g in self.groups_mut() {
            g.zero_grad();
        }
    }

    /// Verifies every tensor against the declared dims.
    pub fn validate_shapes(&self) -> Result<()> {
        let d = &self.dims;
        let l = d.latent();
        let ch = d.classifier_hidden();
        let check = |g: &ParamGroup, expected: &[(usize, usize)], buffers: &[(usize, usize)]| -> Result<()> {
            if g.params.len() != expected.len() || g.buffers.len() != buffers.len() {
                return Err(GtlError::Validation(format!(
                    "group '{}' has {} tensors, expected {}",
                    g.name,
                    g.params.len(),
                    expected.len()
                )));
            }
            for (p, &(r, c)) in g.params.iter().zip(expected) {
                if p.value.shape() != (r, c) {
                    return Err(GtlError::dim(
                        "validate_shapes",
                        format!("{} is {:?}, expected {:?}", p.name, p.value.shape(), (r, c)),
                    ));
                }
            }
            for ((name, b), &(r, c)) in g.buffers.iter().zip(buffers) {
                if b.shape() != (r, c) {
                    return Err(GtlError::dim(
                        "validate_shapes",
                        format!("{name} is {:?}, expected {:?}", b.shape(), (r, c)),
                    ));
                }
            }
            Ok(())
        };
        let h = d.hidden;
        check(
            &self.encoder,
            &[(d.input, h), (1, h), (1, h), (1, h), (h, l), (1, l), (h, l), (1, l)],
            &[(1, h), (1, h)],
        )?;
        let dm = d.domains * d.disturbance;
        check(
            &self.disturbance,
            &[(h, d.domains), (1, d.domains), (h, dm), (1, dm)],
            &[],
        )?;
        check(
            &self.aggregator,
            &[(2 * d.disturbance, d.disturbance), (1, d.disturbance)],
            &[],
        )?;
        check(
            &self.generator,
            &[(l, h), (1, h), (1, h), (1, h), (h, d.input), (1, d.input)],
            &[(1, h), (1, h)],
        )?;
        let ci = self.classifier_input();
        check(
            &self.classifier,
            &[(ci, ch), (1, ch), (ch, d.classes), (1, d.classes)],
            &[],
        )?;
        if self.class_labels.len() != d.classes {
            return Err(GtlError::Validation(format!(
                "{} class labels for {} classifier outputs",
                self.class_labels.len(),
                d.classes
            )));
        }
        Ok(())
    }
}

pub(crate) fn batchnorm_of(group: &ParamGroup, gamma: usize, beta: usize) -> BatchNormState {
    let mut bn = BatchNormState::new(group.params[gamma].value.cols());
    bn.gamma = group.params[gamma].value.clone();
    bn.beta = group.params[beta].value.clone();
    bn.running_mean = group.buffers[idx::RUN_MEAN].1.clone();
    bn.running_var = group.buffers[idx::RUN_VAR].1.clone();
    bn
}
