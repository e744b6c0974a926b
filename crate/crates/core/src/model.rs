//! The classification network: feature extractor `g`, projection head `h`,
//! and linear classifier `f`, plus class prototype derivation.
//!
//! Prototypes come from the classifier itself: each class weight vector is
//! pushed through the projection head, the resulting directions are spread
//! apart by gradient descent on the worst pairwise cosine, and the rows are
//! normalized onto the unit sphere. No client uploads features for this.

use crate::error::{CoreError, Result};
use crate::rng::{self, stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Layer widths for the three components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feat_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Smallest stack that exercises extractor, projector, and classifier.
    pub fn default_dims(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim: 64,
            feat_dim: 32,
            proj_hidden: 32,
            proj_dim: 16,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.hidden_dim,
            self.feat_dim,
            self.proj_hidden,
            self.proj_dim,
            self.num_classes,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::config("all model dimensions must be positive"));
        }
        Ok(())
    }
}

/// Slot names for the parameter tensors, in storage order.
pub const TENSOR_NAMES: [&str; 10] =
    ["g.w0", "g.b0", "g.w1", "g.b1", "h.w0", "h.b0", "h.w1", "h.b1", "f.w", "f.b"];

const G_W0: usize = 0;
const G_B0: usize = 1;
const G_W1: usize = 2;
const G_B1: usize = 3;
const H_W0: usize = 4;
const H_B0: usize = 5;
const H_W1: usize = 6;
const H_B1: usize = 7;
const F_W: usize = 8;
const F_B: usize = 9;

/// Parameter bundle for one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// He-normal weight init, zero biases, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init_rng = rng::rng_for(seed, &[stream::MODEL_INIT]);
        let mut he = |fan_in: usize, fan_out: usize| -> Tensor {
            let std = (2.0 / fan_in as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| {
                    std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut init_rng)
                })
                .collect();
            Tensor::matrix(fan_in, fan_out, values).expect("init shape")
        };
        let tensors = vec![
            he(config.input_dim, config.hidden_dim),
            Tensor::zeros(vec![config.hidden_dim]),
            he(config.hidden_dim, config.feat_dim),
            Tensor::zeros(vec![config.feat_dim]),
            he(config.feat_dim, config.proj_hidden),
            Tensor::zeros(vec![config.proj_hidden]),
            he(config.proj_hidden, config.proj_dim),
            Tensor::zeros(vec![config.proj_dim]),
            he(config.feat_dim, config.num_classes),
            Tensor::zeros(vec![config.num_classes]),
        ];
        Ok(ModelParams { config, tensors })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = [
            vec![config.input_dim, config.hidden_dim],
            vec![config.hidden_dim],
            vec![config.hidden_dim, config.feat_dim],
            vec![config.feat_dim],
            vec![config.feat_dim, config.proj_hidden],
            vec![config.proj_hidden],
            vec![config.proj_hidden, config.proj_dim],
            vec![config.proj_dim],
            vec![config.feat_dim, config.num_classes],
            vec![config.num_classes],
        ];
        if tensors.len() != expected.len() {
            return Err(CoreError::shape(
                "model_params",
                format!("expected {} tensors, got {}", expected.len(), tensors.len()),
            ));
        }
        for ((t, exp), name) in tensors.iter().zip(&expected).zip(TENSOR_NAMES) {
            if t.shape() != exp.as_slice() {
                return Err(CoreError::shape(
                    "model_params",
                    format!("{} has shape {:?}, expected {:?}", name, t.shape(), exp),
                ));
            }
            if !t.is_finite() {
                return Err(CoreError::Numeric(format!("non-finite values in {}", name)));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Extractor output `g(x)` for a batch (rows are samples).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let t = &self.tensors;
        let h1 = x.matmul(&t[G_W0])?.add_row_broadcast(&t[G_B0])?.relu();
        Ok(h1.matmul(&t[G_W1])?.add_row_broadcast(&t[G_B1])?.relu())
    }

    /// Projection head output `h(feats)` (pre-normalization).
    pub fn project(&self, feats: &Tensor) -> Result<Tensor> {
        let t = &self.tensors;
        let h1 = feats.matmul(&t[H_W0])?.add_row_broadcast(&t[H_B0])?.relu();
        h1.matmul(&t[H_W1])?.add_row_broadcast(&t[H_B1])
    }

    /// Classifier logits `f(g(x))` for a batch.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(x)?;
        let t = &self.tensors;
        feats.matmul(&t[F_W])?.add_row_broadcast(&t[F_B])
    }

    /// Unit-norm embeddings `h(g(x)) / ||h(g(x))||`.
    pub fn forward_embedding(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(x)?;
        Ok(self.project(&feats)?.row_l2_normalized())
    }

    /// Classifier weight vectors as rows (one per class).
    pub fn classifier_rows(&self) -> Tensor {
        let w = &self.tensors[F_W];
        let (feat, classes) = (w.rows(), w.cols());
        let mut values = vec![0.0; feat * classes];
        for c in 0..classes {
            for f in 0..feat {
                values[c * feat + f] = w.get2(f, c);
            }
        }
        Tensor::matrix(classes, feat, values).expect("transpose shape")
    }

    /// Register every parameter as a tape leaf, in storage order.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        ModelVars { vars }
    }
}

/// Tape handles for one registered parameter set.
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    /// Wrap pre-registered leaves (must follow the storage order of
    /// [`ModelParams::tensors`]).
    pub fn from_leaves(vars: Vec<Var>) -> Self {
        ModelVars { vars }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn build_features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let v = &self.vars;
        let h1 = tape.matmul(x, v[G_W0])?;
        let h1 = tape.add_bias(h1, v[G_B0])?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, v[G_W1])?;
        let h2 = tape.add_bias(h2, v[G_B1])?;
        Ok(tape.relu(h2))
    }

    pub fn build_logits(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let v = &self.vars;
        let l = tape.matmul(feats, v[F_W])?;
        tape.add_bias(l, v[F_B])
    }

    pub fn build_embedding(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let v = &self.vars;
        let h1 = tape.matmul(feats, v[H_W0])?;
        let h1 = tape.add_bias(h1, v[H_B0])?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, v[H_W1])?;
        let h2 = tape.add_bias(h2, v[H_B1])?;
        Ok(tape.row_l2_normalize(h2))
    }
}

/// Unit-norm class prototypes, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    matrix: Tensor,
}

impl PrototypeSet {
    pub fn new(matrix: Tensor) -> Result<Self> {
        for r in 0..matrix.rows() {
            let norm: f64 = matrix.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(CoreError::contract(format!(
                    "prototype row {} has norm {}, expected 1",
                    r, norm
                )));
            }
        }
        Ok(PrototypeSet { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Largest off-diagonal pairwise cosine among the (normalized) rows.
pub fn max_pairwise_cosine(rows: &Tensor) -> f64 {
    let n = rows.row_l2_normalized();
    let c = n.matmul_nt(&n).expect("square cosine matrix");
    let l = c.rows();
    let mut max = f64::NEG_INFINITY;
    for i in 0..l {
        for j in 0..l {
            if i != j {
                max = max.max(c.get2(i, j));
            }
        }
    }
    max
}

/// Rivals within this cosine distance of a row's worst pair all contribute
/// to the descent direction. A single-pair subgradient zigzags between
/// near-tied rivals and stalls well short of the optimum.
const RIVAL_BAND: f64 = 1e-2;

/// Objective of the prototype spreading step: for each row, the worst
/// (largest) cosine against any other row, summed. Also returns, per row,
/// every rival within [`RIVAL_BAND`] of that worst cosine.
fn spreading_objective(rows: &Tensor) -> (f64, Vec<Vec<usize>>) {
    let n = rows.row_l2_normalized();
    let c = n.matmul_nt(&n).expect("square cosine matrix");
    let l = c.rows();
    let mut total = 0.0;
    let mut rivals = Vec::with_capacity(l);
    for i in 0..l {
        let mut best = f64::NEG_INFINITY;
        for j in 0..l {
            if j != i && c.get2(i, j) > best {
                best = c.get2(i, j);
            }
        }
        total += best;
        rivals.push((0..l).filter(|&j| j != i && c.get2(i, j) >= best - RIVAL_BAND).collect());
    }
    (total, rivals)
}

fn spreading_gradient(rows: &Tensor, rivals: &[Vec<usize>]) -> Result<Tensor> {
    let l = rows.rows();
    let mut selection = Tensor::zeros(vec![l, l]);
    for (i, band) in rivals.iter().enumerate() {
        let w = 1.0 / band.len() as f64;
        for &j in band {
            selection.values_mut()[i * l + j] = w;
        }
    }
    let (_, grads) =
        crate::tape::evaluate_with_gradients(std::slice::from_ref(rows), |tape, leaves| {
            let n = tape.row_l2_normalize(leaves[0]);
            let c = tape.matmul_nt(n, n)?;
            let picked = tape.mul_const(c, selection.clone())?;
            Ok(tape.sum(picked))
        })?;
    Ok(grads.into_iter().next().expect("one leaf"))
}

/// Spread prototype directions apart by gradient descent on the worst
/// pairwise cosine. Steps that would increase the objective are retried at
/// half the step size, so the objective sequence is non-increasing; rows
/// are renormalized after each accepted step (the objective is invariant
/// to row scale). Stops when the per-step improvement falls below
/// `stop_tol` or the step budget runs out.
pub fn finetune_prototypes(
    tilde: &Tensor,
    max_steps: usize,
    step_size: f64,
    stop_tol: f64,
) -> Result<Tensor> {
    if tilde.rows() < 2 {
        return Err(CoreError::contract("prototype spreading needs at least 2 rows"));
    }
    for r in 0..tilde.rows() {
        if tilde.row(r).iter().all(|&v| v == 0.0) {
            return Err(CoreError::contract(format!("prototype row {} is zero", r)));
        }
    }
    if !(step_size > 0.0) {
        return Err(CoreError::contract("step size must be positive"));
    }
    let mut current = tilde.clone();
    let (mut objective, mut rivals) = spreading_objective(&current);
    for _ in 0..max_steps {
        let grad = spreading_gradient(&current, &rivals)?;
        let mut step = step_size;
        let candidate;
        let cand_obj;
        let cand_rivals;
        loop {
            let trial = current.sub(&grad.scale(step))?.row_l2_normalized();
            let (o, r) = spreading_objective(&trial);
            if o <= objective {
                candidate = trial;
                cand_obj = o;
                cand_rivals = r;
                break;
            }
            step *= 0.5;
            if step < 1e-15 {
                // No descent at any scale; treat as converged.
                return Ok(current);
            }
        }
        let improvement = objective - cand_obj;
        current = candidate;
        objective = cand_obj;
        rivals = cand_rivals;
        if improvement < stop_tol {
            break;
        }
    }
    Ok(current)
}

const FINETUNE_STEPS: usize = 200;
const FINETUNE_STEP_SIZE: f64 = 0.1;
const FINETUNE_STOP_TOL: f64 = 1e-5;

/// Derive the broadcast prototypes from global parameters: classifier rows
/// through the projection head, spread apart, then normalized. A projected
/// row that collapses to zero is replaced by a basis direction before
/// spreading so the derivation never fails mid-experiment.
pub fn derive_prototypes(params: &ModelParams) -> Result<PrototypeSet> {
    let class_rows = params.classifier_rows();
    let mut tilde = params.project(&class_rows)?;
    let dim = tilde.cols();
    for r in 0..tilde.rows() {
        let norm: f64 = tilde.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            let start = r * dim;
            for (k, v) in tilde.values_mut()[start..start + dim].iter_mut().enumerate() {
                *v = if k == r % dim { 1.0 } else { 0.0 };
            }
        }
    }
    let tuned = finetune_prototypes(&tilde, FINETUNE_STEPS, FINETUNE_STEP_SIZE, FINETUNE_STOP_TOL)?;
    PrototypeSet::new(tuned.row_l2_normalized())
}

const CHECKPOINT_FORMAT: &str = "fediic-params-v1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    model: ModelConfig,
    tensors: Vec<TensorMeta>,
}

impl ModelParams {
    /// Serialize as a JSON shape manifest followed by flat little-endian
    /// 64-bit floats. Round-trips bit-exactly.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.config,
            tensors: self
                .tensors
                .iter()
                .zip(TENSOR_NAMES)
                .map(|(t, name)| TensorMeta { name: name.to_string(), shape: t.shape().to_vec() })
                .collect(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + manifest_bytes.len() + self.num_values() * 8);
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for t in &self.tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CoreError::data("checkpoint too short for length prefix"));
        }
        let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() < manifest_len {
            return Err(CoreError::data("checkpoint truncated inside manifest"));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&body[..manifest_len])
            .map_err(|e| CoreError::data(format!("bad checkpoint manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(CoreError::data(format!(
                "unsupported checkpoint format {:?}",
                manifest.format
            )));
        }
        let mut values = &body[manifest_len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for meta in &manifest.tensors {
            let numel: usize = meta.shape.iter().product();
            if values.len() < numel * 8 {
                return Err(CoreError::data(format!("checkpoint truncated inside {:?}", meta.name)));
            }
            let mut data = Vec::with_capacity(numel);
            for chunk in values[..numel * 8].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            values = &values[numel * 8..];
            tensors.push(Tensor::new(meta.shape.clone(), data)?);
        }
        if !values.is_empty() {
            return Err(CoreError::data("trailing bytes after checkpoint payload"));
        }
        ModelParams::from_tensors(manifest.model, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        ModelParams::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            hidden_dim: 5,
            feat_dim: 4,
            proj_hidden: 4,
            proj_dim: 3,
            num_classes: 2,
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(cfg, 0).unwrap();
        for t in params.tensors_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::matrix(2, 3, vec![1.0, -0.5, 2.0, 0.0, 1.0, 1.0]).unwrap();
        let logits = params.forward_logits(&x).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn passthrough_configuration_reproduces_hand_affine_map() {
        // Identity-shaped g layers with zero biases pass non-negative inputs
        // straight through, so logits are x . W_f + b_f.
        let cfg = ModelConfig {
            input_dim: 2,
            hidden_dim: 2,
            feat_dim: 2,
            proj_hidden: 2,
            proj_dim: 2,
            num_classes: 2,
        };
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let tensors = vec![
            eye.clone(),
            Tensor::zeros(vec![2]),
            eye.clone(),
            Tensor::zeros(vec![2]),
            eye.clone(),
            Tensor::zeros(vec![2]),
            eye.clone(),
            Tensor::zeros(vec![2]),
            Tensor::matrix(2, 2, vec![2.0, -1.0, 0.5, 3.0]).unwrap(),
            Tensor::vector(vec![0.25, -0.75]),
        ];
        let params = ModelParams::from_tensors(cfg, tensors).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let logits = params.forward_logits(&x).unwrap();
        // [1,2] . [[2,-1],[0.5,3]] + [0.25,-0.75] = [3.25, 4.25]
        assert_eq!(logits.values(), &[3.25, 4.25]);
    }

    #[test]
    fn batch_width_is_preserved() {
        let params = ModelParams::init(tiny_config(), 1).unwrap();
        let x = Tensor::matrix(7, 3, vec![0.1; 21]).unwrap();
        assert_eq!(params.forward_logits(&x).unwrap().rows(), 7);
        assert_eq!(params.forward_embedding(&x).unwrap().rows(), 7);
    }

    #[test]
    fn embeddings_are_unit_rows_and_scale_invariant() {
        let mut params = ModelParams::init(tiny_config(), 2).unwrap();
        let mut rng = crate::rng::rng(3);
        let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let z = params.forward_embedding(&x).unwrap();
        for r in 0..z.rows() {
            let norm: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // Scaling the projector output layer leaves embeddings unchanged.
        for slot in [6, 7] {
            for v in params.tensors_mut()[slot].values_mut() {
                *v *= 10.0;
            }
        }
        let z_scaled = params.forward_embedding(&x).unwrap();
        for (a, b) in z.values().iter().zip(z_scaled.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_eager_forward() {
        let params = ModelParams::init(tiny_config(), 5).unwrap();
        let mut rng = crate::rng::rng(6);
        let x = Tensor::matrix(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xc = tape.constant(x.clone());
        let feats = vars.build_features(&mut tape, xc).unwrap();
        let logits = vars.build_logits(&mut tape, feats).unwrap();
        let z = vars.build_embedding(&mut tape, feats).unwrap();
        assert_eq!(tape.value(logits), &params.forward_logits(&x).unwrap());
        assert_eq!(tape.value(z), &params.forward_embedding(&x).unwrap());
    }

    #[test]
    fn gradient_through_embedding_matches_finite_differences() {
        let params = ModelParams::init(tiny_config(), 1).unwrap();
        let mut rng = crate::rng::rng(101);
        let x = Tensor::matrix(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let target =
            Tensor::matrix(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        // The zero-row normalization guard clamps gradients to zero, which a
        // numeric probe cannot reproduce; this seed keeps every row live.
        let pre = params.project(&params.features(&x).unwrap()).unwrap();
        for r in 0..pre.rows() {
            assert!(pre.row(r).iter().any(|&v| v != 0.0), "dead projection row {r}");
        }
        let report = finite_difference_check(
            params.tensors(),
            |tape, leaves| {
                let vars = ModelVars::from_leaves(leaves.to_vec());
                let xc = tape.constant(x.clone());
                let feats = vars.build_features(tape, xc)?;
                let z = vars.build_embedding(tape, feats)?;
                let tc = tape.constant(target.clone());
                let diff = tape.sub(z, tc)?;
                let sq = tape.mul(diff, diff)?;
                Ok(tape.sum(sq))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel {}", report.max_relative_error());
    }

    #[test]
    fn spreading_reaches_equiangular_optimum() {
        // For L unit vectors in dimension >= L-1 the minimal worst-case
        // cosine is -1/(L-1).
        for l in [2usize, 3, 5] {
            let mut hits = 0;
            for seed in 0..10u64 {
                let mut r = crate::rng::rng(seed * 31 + l as u64);
                let tilde =
                    Tensor::matrix(l, 8, (0..l * 8).map(|_| r.gen_range(-1.0..1.0)).collect())
                        .unwrap();
                let tuned = finetune_prototypes(&tilde, 200, 0.1, 1e-5).unwrap();
                let target = -1.0 / (l as f64 - 1.0);
                if (max_pairwise_cosine(&tuned) - target).abs() <= 0.02 {
                    hits += 1;
                }
            }
            assert!(hits >= 9, "L={} converged on {}/10 seeds", l, hits);
        }
    }

    #[test]
    fn antipodal_pair_is_already_stationary() {
        let tilde = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let (obj, _) = spreading_objective(&tilde);
        assert!((obj - (-2.0)).abs() < 1e-12);
        let tuned = finetune_prototypes(&tilde, 50, 0.1, 1e-5).unwrap();
        for (a, b) in tuned.values().iter().zip(tilde.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spreading_objective_never_increases() {
        let mut r = crate::rng::rng(12);
        let tilde = Tensor::matrix(5, 4, (0..20).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut current = tilde;
        let (mut obj, mut rivals) = spreading_objective(&current);
        for _ in 0..60 {
            let grad = spreading_gradient(&current, &rivals).unwrap();
            let mut step = 0.1;
            loop {
                let cand = current.sub(&grad.scale(step)).unwrap().row_l2_normalized();
                let (o, riv) = spreading_objective(&cand);
                if o <= obj {
                    current = cand;
                    obj = o;
                    rivals = riv;
                    break;
                }
                step *= 0.5;
                assert!(step > 1e-15);
            }
        }
    }

    #[test]
    fn zero_row_is_a_contract_error() {
        let tilde = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            finetune_prototypes(&tilde, 10, 0.1, 1e-5),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn derived_prototypes_are_deterministic_unit_and_spread() {
        let cfg = ModelConfig {
            input_dim: 4,
            hidden_dim: 8,
            feat_dim: 6,
            proj_hidden: 6,
            proj_dim: 4,
            num_classes: 3,
        };
        let params = ModelParams::init(cfg, 21).unwrap();
        let a = derive_prototypes(&params).unwrap();
        let b = derive_prototypes(&params).unwrap();
        assert_eq!(a, b);
        let target = -1.0 / 2.0;
        let got = max_pairwise_cosine(a.matrix());
        assert!((got - target).abs() <= 0.02, "max cosine {}", got);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = ModelParams::init(tiny_config(), 33).unwrap();
        let bytes = params.to_checkpoint_bytes();
        let back = ModelParams::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(params.config(), back.config());
        for (a, b) in params.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let params = ModelParams::init(tiny_config(), 34).unwrap();
        let mut bytes = params.to_checkpoint_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(ModelParams::from_checkpoint_bytes(&bytes).is_err());
        assert!(ModelParams::from_checkpoint_bytes(&[1, 2, 3]).is_err());
    }
}
