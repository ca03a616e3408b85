use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use super::layers::{relu4, relu_backward4, BatchNorm, Conv2d, Linear, Mode, Visitor};
use super::spec::{ArchitectureSpec, BlockKind, InputShape, LayerRef, StemSpec};
use super::tensor::Float;
use super::NetError;

/// `y = relu(f(x) + shortcut(x))` with `f = conv–bn–relu–conv–bn`.
pub struct ResidualBlock<F> {
    pub id: LayerRef,
    conv1: Conv2d<F>,
    bn1: BatchNorm<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm<F>,
    shortcut: Option<(Conv2d<F>, BatchNorm<F>)>,
    /// When set, `f` contributes nothing: `y = relu(x)`.
    pub(crate) zero_branch: bool,
    mid: Option<Array4<F>>,
    out: Option<Array4<F>>,
}

impl<F: Float> ResidualBlock<F> {
    fn new<R: Rng>(id: LayerRef, kind: BlockKind, rng: &mut R) -> Self {
        let (cin, cout, stride, project) = match kind {
            BlockKind::ResidualIdentity { channels } => (channels, channels, 1, false),
            BlockKind::ResidualDownsample {
                in_channels,
                out_channels,
                stride,
            } => (in_channels, out_channels, stride, true),
            BlockKind::TransformerEncoder { .. } => unreachable!("validated spec"),
        };
        let conv1 = Conv2d::new(cin, cout, 3, stride, 1, rng);
        let conv2 = Conv2d::new(cout, cout, 3, 1, 1, rng);
        let shortcut = project.then(|| (Conv2d::new(cin, cout, 1, stride, 0, rng), BatchNorm::new(cout)));
        Self {
            id,
            conv1,
            bn1: BatchNorm::new(cout),
            conv2,
            bn2: BatchNorm::new(cout),
            shortcut,
            zero_branch: false,
            mid: None,
            out: None,
        }
    }

    pub fn has_identity_shortcut(&self) -> bool {
        self.shortcut.is_none()
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let pre = if self.zero_branch {
            x.clone()
        } else {
            let h = self.conv1.forward(x, mode);
            let h = relu4(self.bn1.forward4(h, mode));
            let h2 = self.conv2.forward(&h, mode);
            if mode.records() {
                self.mid = Some(h);
            }
            let mut h2 = self.bn2.forward4(h2, mode);
            match self.shortcut.as_mut() {
                Some((conv, bn)) => {
                    let s = bn.forward4(conv.forward(x, mode), mode);
                    h2 += &s;
                }
                None => h2 += x,
            }
            h2
        };
        let out = relu4(pre);
        if mode.records() {
            self.out = Some(out.clone());
        }
        out
    }

    fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let out = self.out.take().expect("block backward without recorded forward");
        let d = relu_backward4(dy, &out);
        if self.zero_branch {
            return d;
        }
        let mid = self.mid.take().expect("recorded");
        let dh = self.bn2.backward4(&d);
        let dh = self.conv2.backward(&dh);
        let dh = relu_backward4(&dh, &mid);
        let dh = self.bn1.backward4(&dh);
        let mut dx = self.conv1.backward(&dh);
        match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let ds = bn.backward4(&d);
                dx += &conv.backward(&ds);
            }
            None => dx += &d,
        }
        dx
    }

    fn visit(&mut self, f: &mut Visitor<'_, F>) {
        let p = self.id.to_string();
        self.conv1.visit(&format!("{p}.conv1"), f);
        self.bn1.visit(&format!("{p}.bn1"), f);
        self.conv2.visit(&format!("{p}.conv2"), f);
        self.bn2.visit(&format!("{p}.bn2"), f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit(&format!("{p}.shortcut.conv"), f);
            bn.visit(&format!("{p}.shortcut.bn"), f);
        }
    }
}

/// CIFAR-style residual network: conv stem, residual stages, global average
/// pooling, linear classifier.
pub struct ResNet<F> {
    height: usize,
    width: usize,
    channels: usize,
    stem_conv: Conv2d<F>,
    stem_bn: BatchNorm<F>,
    pub(crate) blocks: Vec<ResidualBlock<F>>,
    head: Linear<F>,
    stem_out: Option<Array4<F>>,
    pooled_hw: (usize, usize),
}

impl<F: Float> ResNet<F> {
    pub fn new<R: Rng>(spec: &ArchitectureSpec, rng: &mut R) -> Result<Self, NetError> {
        let InputShape::Image {
            height,
            width,
            channels,
        } = spec.input
        else {
            return Err(NetError::Spec("resnet needs image input".into()));
        };
        let StemSpec::Conv { out_channels } = spec.stem else {
            return Err(NetError::Spec("resnet needs a conv stem".into()));
        };
        let stem_conv = Conv2d::new(channels, out_channels, 3, 1, 1, rng);
        let blocks = spec
            .blocks()
            .map(|b| ResidualBlock::new(b.id, b.kind, rng))
            .collect();
        let head = Linear::new(spec.head.in_features, spec.head.classes, rng);
        Ok(Self {
            height,
            width,
            channels,
            stem_conv,
            stem_bn: BatchNorm::new(out_channels),
            blocks,
            head,
            stem_out: None,
            pooled_hw: (0, 0),
        })
    }

    fn to_images(&self, x: ArrayView2<'_, F>) -> Array4<F> {
        let n = x.nrows();
        x.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.height, self.width, self.channels))
            .expect("input width matches image shape")
    }

    pub fn features(&mut self, x: ArrayView2<'_, F>, mode: Mode) -> Array2<F> {
        let img = self.to_images(x);
        let h = self.stem_conv.forward(&img, mode);
        let mut h = relu4(self.stem_bn.forward4(h, mode));
        if mode.records() {
            self.stem_out = Some(h.clone());
        }
        for block in &mut self.blocks {
            h = block.forward(&h, mode);
        }
        let (_, hh, ww, _) = h.dim();
        self.pooled_hw = (hh, ww);
        h.mean_axis(Axis(1))
            .and_then(|a| a.mean_axis(Axis(1)))
            .expect("non-empty spatial dims")
    }

    pub fn forward(&mut self, x: ArrayView2<'_, F>, mode: Mode) -> Array2<F> {
        let feats = self.features(x, mode);
        self.head.forward(&feats, mode)
    }

    pub fn backward(&mut self, dlogits: &Array2<F>) -> Array2<F> {
        let dfeat = self.head.backward(dlogits);
        let (hh, ww) = self.pooled_hw;
        let scale = F::of(1.0 / (hh * ww) as f64);
        let (n, c) = dfeat.dim();
        let mut d = Array4::<F>::zeros((n, hh, ww, c));
        for ni in 0..n {
            for y in 0..hh {
                for x in 0..ww {
                    for ci in 0..c {
                        d[[ni, y, x, ci]] = dfeat[[ni, ci]] * scale;
                    }
                }
            }
        }
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d);
        }
        let stem_out = self.stem_out.take().expect("recorded");
        let d = relu_backward4(&d, &stem_out);
        let d = self.stem_bn.backward4(&d);
        let dx = self.stem_conv.backward(&d);
        let n = dx.dim().0;
        dx.into_shape_with_order((n, self.height * self.width * self.channels))
            .expect("contiguous")
    }

    pub fn visit(&mut self, f: &mut Visitor<'_, F>) {
        self.stem_conv.visit("stem.conv", f);
        self.stem_bn.visit("stem.bn", f);
        for block in &mut self.blocks {
            block.visit(f);
        }
        self.head.visit("head", f);
    }
}
