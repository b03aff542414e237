//! The representation model mapping raw feature vectors to embeddings,
//! plus the linear auxiliary classifier head used by the curriculum.

use rand::Rng;

use crate::error::{Error, Result};
use crate::store::ParameterStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::{matvec, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.embed_dim < 1 || self.hidden_dims.iter().any(|&d| d < 1) {
            return Err(Error::Config("encoder dims must all be >= 1".into()));
        }
        Ok(())
    }

    /// (in, out) dims of each linear layer, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.embed_dim));
        dims
    }

    pub fn n_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }
}

fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Creates the `enc/*` slots with uniform fan-in initialization.
pub fn init_encoder_params<R: Rng>(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut R) {
    for (i, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
        let w = uniform_fan_in(rng, fan_in, fan_out * fan_in);
        let b = uniform_fan_in(rng, fan_in, fan_out);
        store.insert(&format!("enc/w{i}"), Tensor::matrix(fan_out, fan_in, w), true);
        store.insert(&format!("enc/b{i}"), Tensor::vector(b), true);
    }
}

/// Creates the `fc/*` slots; output width equals the training class count.
pub fn init_aux_head<R: Rng>(
    store: &mut ParameterStore,
    embed_dim: usize,
    n_classes: usize,
    rng: &mut R,
) {
    let w = uniform_fan_in(rng, embed_dim, n_classes * embed_dim);
    let b = uniform_fan_in(rng, embed_dim, n_classes);
    store.insert("fc/w", Tensor::matrix(n_classes, embed_dim, w), true);
    store.insert("fc/b", Tensor::vector(b), true);
}

/// Encoder parameter nodes registered on one tape, reusable across many
/// forward passes in an episode.
pub struct EncoderNodes {
    cfg: EncoderConfig,
    layers: Vec<(NodeId, NodeId)>,
}

impl EncoderNodes {
    pub fn register(tape: &mut Tape, store: &ParameterStore, cfg: &EncoderConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.n_layers());
        for i in 0..cfg.n_layers() {
            let w = tape.param(store, &format!("enc/w{i}"))?;
            let b = tape.param(store, &format!("enc/b{i}"))?;
            layers.push((w, b));
        }
        Ok(EncoderNodes { cfg: cfg.clone(), layers })
    }

    /// Differentiable forward pass for one raw feature vector.
    pub fn embed(&self, tape: &mut Tape, x: &[f64]) -> Result<NodeId> {
        if x.len() != self.cfg.input_dim {
            return Err(Error::Argument(format!(
                "input dim {} != expected {}",
                x.len(),
                self.cfg.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite encoder input".into()));
        }
        let mut h = tape.constant(Tensor::vector(x.to_vec()));
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(w, b, h);
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// No-grad forward pass; arithmetic matches the tape path bit for bit.
pub fn embed_plain(store: &ParameterStore, cfg: &EncoderConfig, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != cfg.input_dim {
        return Err(Error::Argument(format!(
            "input dim {} != expected {}",
            x.len(),
            cfg.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite encoder input".into()));
    }
    let mut h = x.to_vec();
    let n = cfg.n_layers();
    for i in 0..n {
        let w = store.value(&format!("enc/w{i}"))?;
        let b = store.value(&format!("enc/b{i}"))?;
        let (rows, cols) = match *w.shape() {
            Shape::Matrix(r, c) => (r, c),
            _ => return Err(Error::State(format!("enc/w{i} is not a matrix"))),
        };
        let mut out = vec![0.0; rows];
        matvec(rows, cols, w.data(), &h, &mut out);
        for (o, bv) in out.iter_mut().zip(b.data()) {
            *o += bv;
        }
        if i != n - 1 {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    Ok(h)
}

/// Auxiliary head parameter nodes on one tape.
pub struct AuxHeadNodes {
    w: NodeId,
    b: NodeId,
}

impl AuxHeadNodes {
    pub fn register(tape: &mut Tape, store: &ParameterStore) -> Result<Self> {
        Ok(AuxHeadNodes { w: tape.param(store, "fc/w")?, b: tape.param(store, "fc/b")? })
    }
}

/// Mean softmax cross-entropy of the linear head over encoder embeddings.
/// Labels are global training-class indices.
pub fn aux_loss(
    tape: &mut Tape,
    encoder: &EncoderNodes,
    head: &AuxHeadNodes,
    batch: &[(Vec<f64>, usize)],
    n_classes: usize,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Argument("empty auxiliary batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (x, label) in batch {
        if *label >= n_classes {
            return Err(Error::Argument(format!(
                "label {label} outside [0, {n_classes})"
            )));
        }
        let e = encoder.embed(tape, x)?;
        let logits = tape.linear(head.w, head.b, e);
        let lse = tape.logsumexp(logits);
        let at = tape.index(logits, *label);
        terms.push(tape.sub(lse, at));
    }
    Ok(tape.mean(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_initialized_linear_encoder_is_identity() {
        let cfg = EncoderConfig { input_dim: 3, hidden_dims: vec![], embed_dim: 3 };
        let mut store = ParameterStore::new();
        store.insert(
            "enc/w0",
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            true,
        );
        store.insert("enc/b0", Tensor::vector(vec![0.0; 3]), true);
        let mut tape = Tape::new();
        let enc = EncoderNodes::register(&mut tape, &store, &cfg).unwrap();
        let x = [0.5, -2.0, 3.25];
        let y = enc.embed(&mut tape, &x).unwrap();
        assert_eq!(tape.value(y).data(), &x);
    }

    #[test]
    fn embed_is_deterministic_and_matches_plain_path() {
        let cfg = EncoderConfig { input_dim: 4, hidden_dims: vec![6, 5], embed_dim: 3 };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        init_encoder_params(&mut store, &cfg, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let enc = EncoderNodes::register(&mut tape, &store, &cfg).unwrap();
        let a = enc.embed(&mut tape, &x).unwrap();
        let b = enc.embed(&mut tape, &x).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
        let plain = embed_plain(&store, &cfg, &x).unwrap();
        assert_eq!(tape.value(a).data(), plain.as_slice());
    }

    #[test]
    fn embed_matches_direct_matrix_oracle() {
        // independent re-evaluation with naive loops
        let cfg = EncoderConfig { input_dim: 3, hidden_dims: vec![4], embed_dim: 2 };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        init_encoder_params(&mut store, &cfg, &mut rng);
        let x: Vec<f64> = vec![0.3, -0.7, 1.1];

        let w0 = store.value("enc/w0").unwrap().data().to_vec();
        let b0 = store.value("enc/b0").unwrap().data().to_vec();
        let w1 = store.value("enc/w1").unwrap().data().to_vec();
        let b1 = store.value("enc/b1").unwrap().data().to_vec();
        let mut h = vec![0.0; 4];
        for r in 0..4 {
            let mut s = b0[r];
            for c in 0..3 {
                s += w0[r * 3 + c] * x[c];
            }
            h[r] = s.max(0.0);
        }
        let mut y = vec![0.0; 2];
        for r in 0..2 {
            let mut s = b1[r];
            for c in 0..4 {
                s += w1[r * 4 + c] * h[c];
            }
            y[r] = s;
        }

        let mut tape = Tape::new();
        let enc = EncoderNodes::register(&mut tape, &store, &cfg).unwrap();
        let out = enc.embed(&mut tape, &x).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_input_is_rejected() {
        let cfg = EncoderConfig { input_dim: 2, hidden_dims: vec![], embed_dim: 2 };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_encoder_params(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let enc = EncoderNodes::register(&mut tape, &store, &cfg).unwrap();
        assert!(enc.embed(&mut tape, &[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_c_loss() {
        let cfg = EncoderConfig { input_dim: 2, hidden_dims: vec![], embed_dim: 2 };
        let mut store = ParameterStore::new();
        // zero weights everywhere: logits all equal
        store.insert("enc/w0", Tensor::matrix(2, 2, vec![0.0; 4]), true);
        store.insert("enc/b0", Tensor::vector(vec![0.0; 2]), true);
        store.insert("fc/w", Tensor::matrix(4, 2, vec![0.0; 8]), true);
        store.insert("fc/b", Tensor::vector(vec![0.0; 4]), true);
        let mut tape = Tape::new();
        let enc = EncoderNodes::register(&mut tape, &store, &cfg).unwrap();
        let head = AuxHeadNodes::register(&mut tape, &store).unwrap();
        let batch = vec![(vec![1.0, 2.0], 1usize), (vec![-1.0, 0.5], 3usize)];
        let loss = aux_loss(&mut tape, &enc, &head, &batch, 4).unwrap();
        assert!((tape.value(loss).as_scalar() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_matches_scalar_oracle() {
        let cfg = EncoderConfig { input_dim: 3, hidden_dims: vec![4], embed_dim: 2 };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        init_encoder_params(&mut store, &cfg, &mut rng);
        init_aux_head(&mut store, 2, 3, &mut rng);
        let batch: Vec<(Vec<f64>, usize)> = (0..5)
            .map(|i| ((0..3).map(|_| rng.random_range(-1.0..1.0)).collect(), i % 3))
            .collect();
        let mut tape = Tape::new();
        let enc = EncoderNodes::register(&mut tape, &store, &cfg).unwrap();
        let head = AuxHeadNodes::register(&mut tape, &store).unwrap();
        let loss = aux_loss(&mut tape, &enc, &head, &batch, 3).unwrap();

        // hand-rolled softmax cross entropy over the plain forward pass
        let mut total = 0.0;
        for (x, label) in &batch {
            let e = embed_plain(&store, &cfg, x).unwrap();
            let w = store.value("fc/w").unwrap().data();
            let b = store.value("fc/b").unwrap().data();
            let logits: Vec<f64> = (0..3)
                .map(|r| b[r] + (0..2).map(|c| w[r * 2 + c] * e[c]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            total += -(logits[*label] - m - z.ln());
        }
        let oracle = total / batch.len() as f64;
        assert!((tape.value(loss).as_scalar() - oracle).abs() < 1e-12);
        assert!(tape.value(loss).as_scalar() >= 0.0);
    }

    #[test]
    fn empty_batch_errors() {
        let cfg = EncoderConfig { input_dim: 2, hidden_dims: vec![], embed_dim: 2 };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_encoder_params(&mut store, &cfg, &mut rng);
        init_aux_head(&mut store, 2, 2, &mut rng);
        let mut tape = Tape::new();
        let enc = EncoderNodes::register(&mut tape, &store, &cfg).unwrap();
        let head = AuxHeadNodes::register(&mut tape, &store).unwrap();
        assert!(aux_loss(&mut tape, &enc, &head, &[], 2).is_err());
    }

    #[test]
    fn aux_gradients_pass_finite_difference_check() {
        let cfg = EncoderConfig { input_dim: 3, hidden_dims: vec![4], embed_dim: 3 };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        init_encoder_params(&mut store, &cfg, &mut rng);
        init_aux_head(&mut store, 3, 4, &mut rng);
        let batch: Vec<(Vec<f64>, usize)> = (0..4)
            .map(|i| ((0..3).map(|_| rng.random_range(-1.0..1.0)).collect(), i % 4))
            .collect();

        let eval = |store: &ParameterStore, batch: &[(Vec<f64>, usize)]| -> f64 {
            let mut tape = Tape::new();
            let enc = EncoderNodes::register(&mut tape, store, &cfg).unwrap();
            let head = AuxHeadNodes::register(&mut tape, store).unwrap();
            let l = aux_loss(&mut tape, &enc, &head, batch, 4).unwrap();
            tape.value(l).as_scalar()
        };

        let mut tape = Tape::new();
        let enc = EncoderNodes::register(&mut tape, &store, &cfg).unwrap();
        let head = AuxHeadNodes::register(&mut tape, &store).unwrap();
        let l = aux_loss(&mut tape, &enc, &head, &batch, 4).unwrap();
        let grads = tape.backward(l).unwrap();

        let names: Vec<&str> = vec!["enc/w0", "enc/b0", "enc/w1", "enc/b1", "fc/w", "fc/b"];
        let numeric = crate::gradcheck::finite_diff(&mut store, &names, 1e-5, |s| eval(s, &batch));
        let err = crate::gradcheck::max_rel_error(grads.params(), &numeric);
        assert!(err < 1e-4, "rel err {err}");
    }
}
