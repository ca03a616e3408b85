use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::metrics::RepresentationMatrix;
use nalgebra::DMatrix;

use super::checkpoint::{ModelCheckpoint, TrainingMeta};
use super::layers::Mode;
use super::resnet::ResNet;
use super::spec::{ArchitectureSpec, Family, LayerRef};
use super::tensor::{Float, Param, Tensor};
use super::transformer::TabularTransformer;
use super::NetError;

enum Body<F> {
    Resnet(ResNet<F>),
    Transformer(TabularTransformer<F>),
}

/// A runnable network: forward, backward and parameter access for one
/// [`ArchitectureSpec`].
///
/// Inputs are row-major `(batch, features)` matrices; images are flattened in
/// `height × width × channels` order.
pub struct Model<F: Float = f32> {
    spec: ArchitectureSpec,
    body: Body<F>,
}

impl<F: Float> Model<F> {
    /// Deterministic initialisation: the same spec and seed always yield the
    /// same weights.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body = match spec.family {
            Family::ResnetCifar => Body::Resnet(ResNet::new(spec, &mut rng)?),
            Family::TransformerTabular => Body::Transformer(TabularTransformer::new(spec, &mut rng)?),
        };
        Ok(Self {
            spec: spec.clone(),
            body,
        })
    }

    /// Rebuilds a model from checkpoint weights. Every expected tensor must be
    /// present with the right shape and no unknown tensors may remain.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, NetError> {
        let mut model = Self::build(&ckpt.architecture, 0)?;
        model.load_weights(&ckpt.weights)?;
        Ok(model)
    }

    pub fn load_weights(&mut self, weights: &BTreeMap<String, Tensor>) -> Result<(), NetError> {
        let mut missing = Vec::new();
        let mut used = 0usize;
        self.visit(&mut |name, p| match weights.get(&name) {
            Some(t) if t.shape == p.value.shape() => {
                p.value = t.to_array();
                used += 1;
            }
            Some(t) => missing.push(format!(
                "{name}: shape {:?} expected {:?}",
                t.shape,
                p.value.shape()
            )),
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(NetError::CorruptCheckpoint(missing.join("; ")));
        }
        if used != weights.len() {
            let mut known = std::collections::BTreeSet::new();
            self.visit(&mut |name, _| {
                known.insert(name);
            });
            let orphans: Vec<_> = weights.keys().filter(|k| !known.contains(*k)).cloned().collect();
            return Err(NetError::CorruptCheckpoint(format!(
                "orphan weights: {}",
                orphans.join(", ")
            )));
        }
        Ok(())
    }

    pub fn weights(&mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, p| {
            out.insert(name, Tensor::from_array(&p.value));
        });
        out
    }

    pub fn to_checkpoint(&mut self, meta: TrainingMeta) -> ModelCheckpoint {
        ModelCheckpoint {
            architecture: self.spec.clone(),
            weights: self.weights(),
            meta,
        }
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    /// Logits for a batch.
    pub fn forward(&mut self, x: ArrayView2<'_, F>, mode: Mode) -> Array2<F> {
        match &mut self.body {
            Body::Resnet(net) => net.forward(x, mode),
            Body::Transformer(net) => net.forward(x, mode),
        }
    }

    /// Penultimate representation: pooled output of the last block.
    pub fn features(&mut self, x: ArrayView2<'_, F>, mode: Mode) -> Array2<F> {
        match &mut self.body {
            Body::Resnet(net) => net.features(x, mode),
            Body::Transformer(net) => net.features(x, mode),
        }
    }

    /// Back-propagates `dlogits` through the last recorded forward pass,
    /// accumulating parameter gradients, and returns the input gradient.
    pub fn backward(&mut self, dlogits: &Array2<F>) -> Array2<F> {
        match &mut self.body {
            Body::Resnet(net) => net.backward(dlogits),
            Body::Transformer(net) => net.backward(dlogits),
        }
    }

    /// Inference over an arbitrarily large batch, `chunk` rows at a time.
    pub fn predict(&mut self, x: ArrayView2<'_, F>, chunk: usize) -> Array2<F> {
        self.chunked(x, chunk, |m, xs| m.forward(xs, Mode::Infer))
    }

    pub fn extract(&mut self, x: ArrayView2<'_, F>, chunk: usize) -> Array2<F> {
        self.chunked(x, chunk, |m, xs| m.features(xs, Mode::Infer))
    }

    fn chunked(
        &mut self,
        x: ArrayView2<'_, F>,
        chunk: usize,
        mut f: impl FnMut(&mut Self, ArrayView2<'_, F>) -> Array2<F>,
    ) -> Array2<F> {
        let n = x.nrows();
        let chunk = chunk.max(1);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            parts.push(f(self, x.slice(s![start..end, ..])));
            start = end;
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("consistent widths")
    }

    /// Visits every state tensor in a fixed order, with its checkpoint name.
    pub fn visit(&mut self, f: &mut dyn FnMut(String, &mut Param<F>)) {
        match &mut self.body {
            Body::Resnet(net) => net.visit(f),
            Body::Transformer(net) => net.visit(f),
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars (normalisation running statistics excluded).
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| {
            if p.is_trainable() {
                n += p.value.len();
            }
        });
        n
    }

    /// Makes the residual branch of `id` output zero, leaving only the shortcut.
    /// Only defined for blocks with an identity shortcut.
    pub fn set_zero_branch(&mut self, id: LayerRef) -> Result<(), NetError> {
        match &mut self.body {
            Body::Resnet(net) => {
                let block = net
                    .blocks
                    .iter_mut()
                    .find(|b| b.id == id)
                    .ok_or_else(|| NetError::UnknownBlock(id))?;
                if !block.has_identity_shortcut() {
                    return Err(NetError::NoIdentityShortcut(id));
                }
                block.zero_branch = true;
            }
            Body::Transformer(net) => {
                let block = net
                    .blocks
                    .iter_mut()
                    .find(|b| b.id == id)
                    .ok_or_else(|| NetError::UnknownBlock(id))?;
                block.zero_branch = true;
            }
        }
        Ok(())
    }

    /// Same architecture and weights in another scalar type.
    pub fn cast<G: Float>(&mut self) -> Model<G> {
        let mut params: Vec<Param<G>> = Vec::new();
        self.visit(&mut |_, p| params.push(p.cast()));
        let mut out = Model::<G>::build(&self.spec, 0).expect("spec already validated");
        let mut it = params.into_iter();
        out.visit(&mut |_, p| *p = it.next().expect("same layout"));
        out
    }
}

/// `M(model, probes)`: penultimate features of every probe, one row per probe
/// in probe order. Row `i` carries sample id `i`.
pub fn extract_representation(
    model: &mut Model<f32>,
    probes: ArrayView2<'_, f32>,
) -> Result<RepresentationMatrix, NetError> {
    if probes.nrows() == 0 {
        return Err(NetError::InvalidProbes("empty probe set".into()));
    }
    if probes.ncols() != model.spec().input.numel() {
        return Err(NetError::InvalidProbes(format!(
            "probe width {} does not match input size {}",
            probes.ncols(),
            model.spec().input.numel()
        )));
    }
    let feats = model.extract(probes, 256);
    let data = DMatrix::from_fn(feats.nrows(), feats.ncols(), |i, j| feats[[i, j]] as f64);
    RepresentationMatrix::from_matrix(data).map_err(|e| NetError::InvalidProbes(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::spec::{ResnetShape, TransformerShape};
    use ndarray::Array2;
    use rand::Rng;

    fn random_input(n: usize, width: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, width), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ArchitectureSpec::resnet_cifar(&ResnetShape::tiny()).unwrap();
        let mut a = Model::<f32>::build(&spec, 3).unwrap();
        let mut b = Model::<f32>::build(&spec, 3).unwrap();
        let mut c = Model::<f32>::build(&spec, 4).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn forward_shape_contract_over_test_matrix() {
        for &stages in &[2usize, 3] {
            for &blocks in &[2usize, 3] {
                for &width in &[8usize, 16] {
                    let shape = ResnetShape {
                        height: 8,
                        width: 8,
                        channels: 3,
                        stem_width: width,
                        widths: vec![width; stages],
                        blocks_per_stage: vec![blocks; stages],
                        classes: 5,
                    };
                    let spec = ArchitectureSpec::resnet_cifar(&shape).unwrap();
                    let mut m = Model::<f32>::build(&spec, 0).unwrap();
                    let x = random_input(3, spec.input.numel(), 1);
                    assert_eq!(m.forward(x.view(), Mode::Infer).dim(), (3, 5));
                    assert_eq!(m.features(x.view(), Mode::Infer).dim(), (3, spec.feature_dim()));
                }
            }
        }
        let spec = ArchitectureSpec::transformer_tabular(&TransformerShape::desk()).unwrap();
        let mut m = Model::<f32>::build(&spec, 0).unwrap();
        let x = random_input(5, 8, 2);
        assert_eq!(m.forward(x.view(), Mode::Infer).dim(), (5, 4));
        assert_eq!(m.features(x.view(), Mode::Infer).dim(), (5, 64));
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let spec = ArchitectureSpec::resnet_cifar(&ResnetShape::tiny()).unwrap();
        let mut m = Model::<f32>::build(&spec, 5).unwrap();
        let x = random_input(4, spec.input.numel(), 7);
        let before = m.forward(x.view(), Mode::Infer);
        let ckpt = m.to_checkpoint(TrainingMeta::default());
        let mut back = Model::<f32>::from_checkpoint(&ckpt).unwrap();
        let after = back.forward(x.view(), Mode::Infer);
        assert!((before - after).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn orphan_and_missing_weights_are_rejected() {
        let spec = ArchitectureSpec::resnet_cifar(&ResnetShape::tiny()).unwrap();
        let mut m = Model::<f32>::build(&spec, 5).unwrap();
        let mut ckpt = m.to_checkpoint(TrainingMeta::default());
        ckpt.weights.insert(
            "s9b9.conv1.weight".into(),
            Tensor {
                shape: vec![1],
                data: vec![0.0],
            },
        );
        assert!(matches!(Model::<f32>::from_checkpoint(&ckpt), Err(NetError::CorruptCheckpoint(_))));
        ckpt.weights.remove("s9b9.conv1.weight");
        ckpt.weights.remove("head.bias");
        assert!(matches!(Model::<f32>::from_checkpoint(&ckpt), Err(NetError::CorruptCheckpoint(_))));
    }

    #[test]
    fn zero_branch_requires_identity_shortcut() {
        let spec = ArchitectureSpec::resnet_cifar(&ResnetShape::tiny()).unwrap();
        let mut m = Model::<f32>::build(&spec, 0).unwrap();
        assert!(matches!(
            m.set_zero_branch(LayerRef::new(2, 1)),
            Err(NetError::NoIdentityShortcut(_))
        ));
        assert!(m.set_zero_branch(LayerRef::new(2, 2)).is_ok());
        assert!(matches!(m.set_zero_branch(LayerRef::new(7, 2)), Err(NetError::UnknownBlock(_))));
    }

    #[test]
    fn extraction_contract() {
        let spec = ArchitectureSpec::resnet_cifar(&ResnetShape::tiny()).unwrap();
        let mut m = Model::<f32>::build(&spec, 0).unwrap();
        let x = random_input(6, spec.input.numel(), 9);
        let a = extract_representation(&mut m, x.view()).unwrap();
        let b = extract_representation(&mut m, x.view()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), spec.head.in_features);
        assert_eq!(a.n_samples(), 6);
        let empty = Array2::<f32>::zeros((0, spec.input.numel()));
        assert!(matches!(
            extract_representation(&mut m, empty.view()),
            Err(NetError::InvalidProbes(_))
        ));
    }

    #[test]
    fn chunked_prediction_matches_single_batch() {
        let spec = ArchitectureSpec::resnet_cifar(&ResnetShape::tiny()).unwrap();
        let mut m = Model::<f64>::build(&spec, 0).unwrap();
        let x = random_input(7, spec.input.numel(), 3).mapv(|v| v as f64);
        let whole = m.forward(x.view(), Mode::Infer);
        let parts = m.predict(x.view(), 3);
        assert!((whole - parts).iter().all(|v| v.abs() < 1e-12));
    }
}
